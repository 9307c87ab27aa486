//! Time sources. Every component takes a [`Clock`] so budgets, TTLs, and
//! staleness math run identically under real time and simulated time.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};

/// A source of UTC timestamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

/// Wall-clock time.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock for simulation and replay. Stores nanoseconds since
/// the Unix epoch; advances only when told to.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    epoch_nanos: Arc<AtomicI64>,
}

impl VirtualClock {
    pub fn starting_at(start: DateTime<Utc>) -> Self {
        let nanos = start.timestamp_nanos_opt().unwrap_or(0);
        Self {
            epoch_nanos: Arc::new(AtomicI64::new(nanos)),
        }
    }

    /// Advance the clock by `d`.
    pub fn advance(&self, d: Duration) {
        self.epoch_nanos
            .fetch_add(d.as_nanos() as i64, Ordering::SeqCst);
    }

    /// Jump to an absolute instant. Never moves the clock backwards.
    pub fn advance_to(&self, t: DateTime<Utc>) {
        let target = t.timestamp_nanos_opt().unwrap_or(0);
        self.epoch_nanos.fetch_max(target, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> DateTime<Utc> {
        let nanos = self.epoch_nanos.load(Ordering::SeqCst);
        Utc.timestamp_nanos(nanos)
    }
}

/// Whole seconds between two instants, clamped at zero when `later` precedes
/// `earlier`. Staleness math never sees negative ages.
pub fn age_seconds(later: DateTime<Utc>, earlier: DateTime<Utc>) -> u64 {
    (later - earlier).num_seconds().max(0) as u64
}
