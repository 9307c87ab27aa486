//! Core engine for a closed-loop backlog automation system.
//!
//! Seven scheduled lanes observe a canonical backlog, act through a
//! tracker facade, and leave a hash-linked evidence trail. Every module
//! takes its clock and randomness as inputs, so whole weeks of operation
//! replay deterministically under test.

pub mod backlog;
pub mod clock;
pub mod degraded;
pub mod engine;
pub mod evidence;
pub mod fix_queue;
pub mod fsm;
pub mod lock;
pub mod matcher;
pub mod publisher;
pub mod scenario;
pub mod scheduler;
pub mod tracker;
pub mod watchdog;

pub use clock::{Clock, SystemClock, VirtualClock};
