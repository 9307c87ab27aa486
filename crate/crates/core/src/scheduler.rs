//! Lane execution engine: adaptive worker-pool sizing, checkpointed time
//! budgets with grace-period termination, seeded exponential backoff,
//! workspace digests with the verify-only mutation tripwire, diff
//! scrutiny, and the atomic per-worker claim queue.
//!
//! All timing runs against an injected clock, so 45-minute budgets are
//! testable in milliseconds and whole runs replay byte-identically.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Duration, Utc};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::backlog::hex_string;
use crate::clock::{Clock, VirtualClock};
use crate::fix_queue::FixQueueRecord;
use crate::fsm::LaneId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedulerError {
    #[error("t_avg must be positive")]
    DomainError,
    #[error("verify-only plan mutated the workspace: pre {pre} post {post}")]
    MutatedStateFailure { pre: String, post: String },
    #[error("time budget must order checkpoint < extended checkpoint < budget")]
    InvalidBudget,
    #[error("workspace digest I/O failure: {0}")]
    DigestIo(String),
}

/// Result of sizing one lane's worker pool for a cycle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerPoolPlan {
    pub actionable: usize,
    pub max_workers: usize,
    pub t_remain_seconds: i64,
    pub t_avg_seconds: i64,
    pub workers: usize,
}

/// workers = min(actionable, max_workers, floor(t_remain / t_avg)).
/// Zero workers means the lane performs no work this cycle.
pub fn plan_workers(
    actionable: usize,
    max_workers: usize,
    t_remain: Duration,
    t_avg: Duration,
) -> Result<WorkerPoolPlan, SchedulerError> {
    let t_avg_seconds = t_avg.num_seconds();
    if t_avg_seconds <= 0 {
        return Err(SchedulerError::DomainError);
    }
    let t_remain_seconds = t_remain.num_seconds().max(0);
    let time_bound = (t_remain_seconds / t_avg_seconds) as usize;
    Ok(WorkerPoolPlan {
        actionable,
        max_workers,
        t_remain_seconds,
        t_avg_seconds,
        workers: actionable.min(max_workers).min(time_bound),
    })
}

/// Exponential backoff parameters. delay(n) = min(t_max, t0·2ⁿ)·(1+ε),
/// ε uniform in [−jitter_fraction, +jitter_fraction].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackoffPolicy {
    pub t0_seconds: f64,
    pub t_max_seconds: f64,
    pub jitter_fraction: f64,
    pub rng_seed: u64,
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        BackoffPolicy {
            t0_seconds: 1.0,
            t_max_seconds: 60.0,
            jitter_fraction: 0.10,
            rng_seed: 0,
        }
    }
}

impl BackoffPolicy {
    /// The deterministic curve with a caller-chosen ε, mostly for tests
    /// and for reasoning about the envelope.
    pub fn delay_with_epsilon(&self, n: u32, epsilon: f64) -> Duration {
        let base = (self.t0_seconds * 2f64.powi(n.min(i32::MAX as u32) as i32))
            .min(self.t_max_seconds);
        Duration::microseconds((base * (1.0 + epsilon) * 1e6).round() as i64)
    }

    /// Cap-applied base value without jitter, in seconds.
    pub fn base_seconds(&self, n: u32) -> f64 {
        (self.t0_seconds * 2f64.powi(n.min(i32::MAX as u32) as i32)).min(self.t_max_seconds)
    }
}

/// Stateful jittered schedule. Identical (seed, n-sequence) produces an
/// identical delay sequence.
pub struct BackoffSchedule {
    policy: BackoffPolicy,
    rng: ChaCha8Rng,
}

impl BackoffSchedule {
    pub fn new(policy: BackoffPolicy) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(policy.rng_seed);
        BackoffSchedule { policy, rng }
    }

    pub fn delay(&mut self, n: u32) -> Duration {
        let j = self.policy.jitter_fraction;
        let epsilon = if j > 0.0 {
            self.rng.gen_range(-j..=j)
        } else {
            0.0
        };
        self.policy.delay_with_epsilon(n, epsilon)
    }

    pub fn policy(&self) -> &BackoffPolicy {
        &self.policy
    }
}

/// Budget shape for one task run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeBudget {
    pub budget_seconds: i64,
    pub checkpoint_seconds: i64,
    pub extended_checkpoint_seconds: i64,
    pub grace_seconds: i64,
}

impl TimeBudget {
    pub fn new(
        budget: Duration,
        checkpoint: Duration,
        extended: Duration,
        grace: Duration,
    ) -> Result<Self, SchedulerError> {
        if !(checkpoint < extended && extended < budget) {
            return Err(SchedulerError::InvalidBudget);
        }
        Ok(TimeBudget {
            budget_seconds: budget.num_seconds(),
            checkpoint_seconds: checkpoint.num_seconds(),
            extended_checkpoint_seconds: extended.num_seconds(),
            grace_seconds: grace.num_seconds(),
        })
    }

    /// 45-minute standard budget: 10-minute checkpoint, 20-minute extended
    /// checkpoint, 30-second grace.
    pub fn standard() -> Self {
        Self::new(
            Duration::minutes(45),
            Duration::minutes(10),
            Duration::minutes(20),
            Duration::seconds(30),
        )
        .expect("standard budget is well-formed")
    }

    /// 120-minute deep-sweep budget with the same checkpoints.
    pub fn deep_sweep() -> Self {
        Self::new(
            Duration::minutes(120),
            Duration::minutes(10),
            Duration::minutes(20),
            Duration::seconds(30),
        )
        .expect("deep-sweep budget is well-formed")
    }

    pub fn from_minutes(minutes: u64) -> Self {
        Self::new(
            Duration::minutes(minutes as i64),
            Duration::minutes(10),
            Duration::minutes(20),
            Duration::seconds(30),
        )
        .expect("budget minutes must exceed 20")
    }
}

/// What one task tick reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskTick {
    Running,
    Finished { success: bool },
}

/// The executable-unit contract: cooperative ticking against the virtual
/// clock, a monotone progress counter, a warning hook, and forced
/// termination.
pub trait BudgetedTask {
    fn tick(&mut self, now: DateTime<Utc>) -> TaskTick;
    fn progress_counter(&self) -> u64;
    fn warn(&mut self, now: DateTime<Utc>);
    fn terminate(&mut self, now: DateTime<Utc>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskOutcome {
    Completed,
    BudgetExhausted,
    Failed,
}

/// Everything observable about one budgeted run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetReport {
    pub outcome: TaskOutcome,
    pub started_at: DateTime<Utc>,
    pub ended_at: DateTime<Utc>,
    pub warned_at: Option<DateTime<Utc>>,
    pub force_terminated: bool,
    /// Passed the first progress checkpoint.
    pub extended: bool,
    /// Passed the second checkpoint and was allowed the full budget.
    pub ran_full_budget: bool,
}

/// Run a task under a checkpointed budget, advancing the supplied virtual
/// clock. The deadline starts at the first checkpoint; forward progress
/// there extends it to the second checkpoint, and forward progress again
/// extends it to the full budget. Any hard stop issues a warning, waits
/// out the grace period (the task may still finish cooperatively), then
/// force-terminates.
pub fn run_with_budget(
    task: &mut dyn BudgetedTask,
    budget: &TimeBudget,
    clock: &VirtualClock,
    tick: Duration,
) -> BudgetReport {
    assert!(tick > Duration::zero(), "scheduler tick must be positive");
    let started_at = clock.now();
    let checkpoint1 = started_at + Duration::seconds(budget.checkpoint_seconds);
    let checkpoint2 = started_at + Duration::seconds(budget.extended_checkpoint_seconds);
    let hard_end = started_at + Duration::seconds(budget.budget_seconds);

    let mut baseline = task.progress_counter();
    let mut deadline = checkpoint1;
    let mut stage = 0u8;
    let mut warned_at: Option<DateTime<Utc>> = None;
    let mut extended = false;
    let mut ran_full_budget = false;

    loop {
        let now = clock.now();
        match task.tick(now) {
            TaskTick::Finished { success } => {
                return BudgetReport {
                    outcome: if success {
                        TaskOutcome::Completed
                    } else {
                        TaskOutcome::Failed
                    },
                    started_at,
                    ended_at: now,
                    warned_at,
                    force_terminated: false,
                    extended,
                    ran_full_budget,
                };
            }
            TaskTick::Running => {}
        }

        match warned_at {
            None => {
                if now >= deadline {
                    let progressed = task.progress_counter() > baseline;
                    if stage < 2 && progressed {
                        baseline = task.progress_counter();
                        stage += 1;
                        if stage == 1 {
                            deadline = checkpoint2;
                            extended = true;
                        } else {
                            deadline = hard_end;
                            ran_full_budget = true;
                        }
                    } else {
                        task.warn(now);
                        warned_at = Some(now);
                    }
                }
            }
            Some(warned) => {
                if now >= warned + Duration::seconds(budget.grace_seconds) {
                    task.terminate(now);
                    return BudgetReport {
                        outcome: TaskOutcome::BudgetExhausted,
                        started_at,
                        ended_at: now,
                        warned_at,
                        force_terminated: true,
                        extended,
                        ran_full_budget,
                    };
                }
            }
        }
        clock.advance(
            tick.to_std()
                .expect("scheduler tick is positive and finite"),
        );
    }
}

/// Scripted task for simulation and tests: finishes after a fixed virtual
/// duration, bumps its progress counter on an interval (optionally only up
/// to a stall point), and may heed or ignore the warning.
#[derive(Debug, Clone)]
pub struct SimulatedTask {
    pub finish_after: Duration,
    pub succeeds: bool,
    pub progress_interval: Option<Duration>,
    pub progress_stalls_after: Option<Duration>,
    pub heeds_warning: bool,
    started_at: Option<DateTime<Utc>>,
    warned: bool,
    terminated: bool,
    counter: u64,
}

impl SimulatedTask {
    pub fn new(finish_after: Duration, succeeds: bool) -> Self {
        SimulatedTask {
            finish_after,
            succeeds,
            progress_interval: None,
            progress_stalls_after: None,
            heeds_warning: false,
            started_at: None,
            warned: false,
            terminated: false,
            counter: 0,
        }
    }

    pub fn with_progress_every(mut self, interval: Duration) -> Self {
        self.progress_interval = Some(interval);
        self
    }

    pub fn stalling_after(mut self, stall: Duration) -> Self {
        self.progress_stalls_after = Some(stall);
        self
    }

    pub fn heeding_warnings(mut self) -> Self {
        self.heeds_warning = true;
        self
    }
}

impl BudgetedTask for SimulatedTask {
    fn tick(&mut self, now: DateTime<Utc>) -> TaskTick {
        if self.terminated {
            return TaskTick::Finished { success: false };
        }
        let started = *self.started_at.get_or_insert(now);
        let mut elapsed = now - started;
        if let Some(stall) = self.progress_stalls_after {
            elapsed = elapsed.min(stall);
        }
        if let Some(interval) = self.progress_interval {
            if interval > Duration::zero() {
                self.counter =
                    (elapsed.num_milliseconds() / interval.num_milliseconds()) as u64;
            }
        }
        if self.warned && self.heeds_warning {
            return TaskTick::Finished {
                success: self.succeeds,
            };
        }
        if now - started >= self.finish_after {
            TaskTick::Finished {
                success: self.succeeds,
            }
        } else {
            TaskTick::Running
        }
    }

    fn progress_counter(&self) -> u64 {
        self.counter
    }

    fn warn(&mut self, _now: DateTime<Utc>) {
        self.warned = true;
    }

    fn terminate(&mut self, _now: DateTime<Utc>) {
        self.terminated = true;
    }
}

/// What a plan is allowed to do to its workspace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanKind {
    Apply,
    VerifyOnly,
    Manual,
}

/// An isolated working tree with digests taken before and after a plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workspace {
    pub id: String,
    pub root: PathBuf,
    pub pre_digest: String,
    pub post_digest: String,
    pub plan_kind: PlanKind,
}

/// The verify-only mutation tripwire: a VerifyOnly plan whose tree digest
/// changed is a hard failure routed to human review. Apply and Manual
/// plans are expected to mutate.
pub fn verify_workspace(ws: &Workspace) -> Result<(), SchedulerError> {
    if ws.plan_kind == PlanKind::VerifyOnly && ws.post_digest != ws.pre_digest {
        return Err(SchedulerError::MutatedStateFailure {
            pre: ws.pre_digest.clone(),
            post: ws.post_digest.clone(),
        });
    }
    Ok(())
}

/// Content digest of a file tree: SHA-256 over sorted relative paths and
/// file bytes. Two trees with identical contents digest identically on
/// any platform.
pub fn digest_tree(root: &Path) -> Result<String, SchedulerError> {
    let mut files: Vec<PathBuf> = WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect();
    files.sort();
    let mut hasher = Sha256::new();
    for path in files {
        let rel = path
            .strip_prefix(root)
            .map_err(|e| SchedulerError::DigestIo(e.to_string()))?;
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        let bytes = read_file(&path)?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn read_file(path: &Path) -> Result<Vec<u8>, SchedulerError> {
    fs::read(path).map_err(|e: io::Error| SchedulerError::DigestIo(format!("{}: {e}", path.display())))
}

/// Diff-size scrutiny tiers for a proposed change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiffScrutiny {
    /// Fewer than 50 changed lines: standard review.
    Standard,
    /// 50 to 200 changed lines: extended review.
    Extended,
    /// More than 200 changed lines: mandatory human review; the ticket
    /// routes to OnHold.
    MandatoryHumanReview,
}

pub fn diff_scrutiny(diff_lines: u64) -> DiffScrutiny {
    if diff_lines < 50 {
        DiffScrutiny::Standard
    } else if diff_lines <= 200 {
        DiffScrutiny::Extended
    } else {
        DiffScrutiny::MandatoryHumanReview
    }
}

/// Atomic claim queue shared by one lane's workers. Entries are loaded in
/// consumption order; claim() pops the head, so no two workers ever
/// process the same entry.
pub struct ClaimQueue {
    inner: Mutex<VecDeque<FixQueueRecord>>,
}

impl ClaimQueue {
    pub fn new(ordered: Vec<FixQueueRecord>) -> Self {
        ClaimQueue {
            inner: Mutex::new(ordered.into()),
        }
    }

    pub fn claim(&self) -> Option<FixQueueRecord> {
        self.inner.lock().expect("claim queue poisoned").pop_front()
    }

    pub fn remaining(&self) -> usize {
        self.inner.lock().expect("claim queue poisoned").len()
    }
}

/// Per-lane runtime configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneConfig {
    pub cadence_minutes: u64,
    pub lock_ttl_minutes: u64,
    pub max_workers: usize,
    pub budget_minutes: u64,
    pub deep_sweep_budget_minutes: u64,
    pub retry_limit: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit_ceiling: Option<u32>,
}

/// Full lane configuration map with the shipped defaults.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LaneConfigSet(pub BTreeMap<LaneId, LaneConfig>);

impl Default for LaneConfigSet {
    fn default() -> Self {
        let mut set = BTreeMap::new();
        let base = |cadence: u64, ttl: u64, workers: usize| LaneConfig {
            cadence_minutes: cadence,
            lock_ttl_minutes: ttl,
            max_workers: workers,
            budget_minutes: 45,
            deep_sweep_budget_minutes: 120,
            retry_limit: 3,
            rate_limit_ceiling: None,
        };
        set.insert(LaneId::Lane1, base(60, 120, 1));
        set.insert(LaneId::Lane2, base(120, 120, 1));
        set.insert(LaneId::Lane3, base(240, 240, 3));
        set.insert(LaneId::Lane4, base(60, 120, 3));
        set.insert(LaneId::Lane5, base(120, 120, 1));
        set.insert(LaneId::Lane6, base(120, 120, 2));
        set.insert(LaneId::Lane7, base(240, 240, 1));
        LaneConfigSet(set)
    }
}

impl LaneConfigSet {
    pub fn get(&self, lane: LaneId) -> &LaneConfig {
        self.0.get(&lane).expect("all lanes configured")
    }

    pub fn load(path: &Path) -> Result<Self, SchedulerError> {
        let bytes = fs::read(path).map_err(|e| SchedulerError::DigestIo(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| SchedulerError::DigestIo(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), SchedulerError> {
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, json).map_err(|e| SchedulerError::DigestIo(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worker_formula_examples() {
        let plan = plan_workers(10, 3, Duration::minutes(45), Duration::minutes(10)).unwrap();
        assert_eq!(plan.workers, 3);
        let plan = plan_workers(2, 3, Duration::minutes(100), Duration::minutes(10)).unwrap();
        assert_eq!(plan.workers, 2);
        let plan = plan_workers(5, 3, Duration::minutes(8), Duration::minutes(10)).unwrap();
        assert_eq!(plan.workers, 0);
    }

    #[test]
    fn worker_formula_rejects_nonpositive_average() {
        assert_eq!(
            plan_workers(5, 3, Duration::minutes(45), Duration::zero()),
            Err(SchedulerError::DomainError)
        );
    }

    #[test]
    fn backoff_examples_with_forced_epsilon() {
        let p = BackoffPolicy {
            t0_seconds: 1.0,
            t_max_seconds: 60.0,
            ..BackoffPolicy::default()
        };
        assert_eq!(p.delay_with_epsilon(0, 0.0), Duration::seconds(1));

        let capped = BackoffPolicy {
            t0_seconds: 1.0,
            t_max_seconds: 16.0,
            ..BackoffPolicy::default()
        };
        assert_eq!(capped.delay_with_epsilon(6, 0.0), Duration::seconds(16));

        let p2 = BackoffPolicy {
            t0_seconds: 2.0,
            t_max_seconds: 60.0,
            ..BackoffPolicy::default()
        };
        assert_eq!(
            p2.delay_with_epsilon(1, 0.10),
            Duration::microseconds(4_400_000)
        );
    }

    #[test]
    fn backoff_schedule_is_reproducible_and_jittered() {
        let policy = BackoffPolicy {
            rng_seed: 99,
            ..BackoffPolicy::default()
        };
        let seq = |policy: BackoffPolicy| {
            let mut s = BackoffSchedule::new(policy);
            (0..100).map(|n| s.delay(n % 8)).collect::<Vec<_>>()
        };
        let a = seq(policy.clone());
        let b = seq(policy);
        assert_eq!(a, b);
        // Jitter actually moves values off the deterministic curve.
        assert!(a.iter().enumerate().any(|(i, d)| {
            let base = BackoffPolicy::default().base_seconds((i % 8) as u32);
            (d.num_microseconds().unwrap() as f64 / 1e6 - base).abs() > 1e-9
        }));
    }

    #[test]
    fn budget_shape_is_validated() {
        assert!(TimeBudget::new(
            Duration::minutes(15),
            Duration::minutes(10),
            Duration::minutes(20),
            Duration::seconds(30)
        )
        .is_err());
        let std_budget = TimeBudget::standard();
        assert_eq!(std_budget.budget_seconds, 45 * 60);
        assert_eq!(TimeBudget::deep_sweep().budget_seconds, 120 * 60);
    }

    fn run(task: &mut SimulatedTask, budget: &TimeBudget) -> BudgetReport {
        let clock = VirtualClock::starting_at(
            chrono::TimeZone::with_ymd_and_hms(&Utc, 2026, 3, 2, 8, 0, 0).unwrap(),
        );
        run_with_budget(task, budget, &clock, Duration::seconds(10))
    }

    #[test]
    fn quick_task_completes() {
        let mut task = SimulatedTask::new(Duration::minutes(5), true);
        let report = run(&mut task, &TimeBudget::standard());
        assert_eq!(report.outcome, TaskOutcome::Completed);
        assert!(!report.force_terminated);
        assert_eq!(report.ended_at - report.started_at, Duration::minutes(5));
    }

    #[test]
    fn failing_task_reports_failed() {
        let mut task = SimulatedTask::new(Duration::minutes(5), false);
        let report = run(&mut task, &TimeBudget::standard());
        assert_eq!(report.outcome, TaskOutcome::Failed);
    }

    #[test]
    fn no_progress_at_first_checkpoint_terminates() {
        let mut task = SimulatedTask::new(Duration::minutes(44), true);
        let report = run(&mut task, &TimeBudget::standard());
        assert_eq!(report.outcome, TaskOutcome::BudgetExhausted);
        assert!(!report.extended);
        assert!(report.force_terminated);
        // Warned at the 10-minute checkpoint, killed 30 s later.
        let lifetime = report.ended_at - report.started_at;
        assert_eq!(lifetime, Duration::minutes(10) + Duration::seconds(30));
    }

    #[test]
    fn progress_then_stall_terminates_at_second_checkpoint() {
        let mut task = SimulatedTask::new(Duration::minutes(119), true)
            .with_progress_every(Duration::minutes(5))
            .stalling_after(Duration::minutes(10));
        let report = run(&mut task, &TimeBudget::standard());
        assert_eq!(report.outcome, TaskOutcome::BudgetExhausted);
        assert!(report.extended);
        assert!(!report.ran_full_budget);
        let lifetime = report.ended_at - report.started_at;
        assert_eq!(lifetime, Duration::minutes(20) + Duration::seconds(30));
    }

    #[test]
    fn steady_progress_runs_to_budget_and_warning_is_honored() {
        let mut task = SimulatedTask::new(Duration::minutes(300), true)
            .with_progress_every(Duration::minutes(5))
            .heeding_warnings();
        let report = run(&mut task, &TimeBudget::standard());
        // Warned at the 45-minute budget, finished cooperatively inside
        // the grace window.
        assert_eq!(report.outcome, TaskOutcome::Completed);
        assert!(report.ran_full_budget);
        assert_eq!(report.warned_at.unwrap() - report.started_at, Duration::minutes(45));
        assert!(report.ended_at - report.started_at < Duration::minutes(46));
    }

    #[test]
    fn warning_ignored_means_force_termination_after_grace() {
        let mut task = SimulatedTask::new(Duration::minutes(300), true)
            .with_progress_every(Duration::minutes(5));
        let report = run(&mut task, &TimeBudget::standard());
        assert_eq!(report.outcome, TaskOutcome::BudgetExhausted);
        assert!(report.force_terminated);
        let lifetime = report.ended_at - report.started_at;
        assert_eq!(lifetime, Duration::minutes(45) + Duration::seconds(30));
    }

    #[test]
    fn no_task_outlives_budget_plus_grace_plus_tick() {
        let budget = TimeBudget::standard();
        let bound = Duration::seconds(budget.budget_seconds)
            + Duration::seconds(budget.grace_seconds)
            + Duration::seconds(10);
        for minutes in [1, 9, 11, 19, 21, 44, 46, 90, 600] {
            let mut task = SimulatedTask::new(Duration::minutes(minutes), true)
                .with_progress_every(Duration::minutes(3));
            let report = run(&mut task, &budget);
            assert!(
                report.ended_at - report.started_at <= bound,
                "task of {minutes} min outlived the bound"
            );
        }
    }

    #[test]
    fn verify_only_mutation_is_a_hard_failure() {
        let ws = Workspace {
            id: "w1".into(),
            root: PathBuf::from("/tmp/w1"),
            pre_digest: "aaaa".into(),
            post_digest: "aaaa".into(),
            plan_kind: PlanKind::VerifyOnly,
        };
        assert!(verify_workspace(&ws).is_ok());

        let mutated = Workspace {
            post_digest: "bbbb".into(),
            ..ws.clone()
        };
        assert!(matches!(
            verify_workspace(&mutated),
            Err(SchedulerError::MutatedStateFailure { .. })
        ));

        let apply = Workspace {
            plan_kind: PlanKind::Apply,
            post_digest: "bbbb".into(),
            ..ws
        };
        assert!(verify_workspace(&apply).is_ok());
    }

    #[test]
    fn tree_digest_detects_single_byte_change() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("src")).unwrap();
        fs::write(dir.path().join("src/main.rs"), "fn main() {}\n").unwrap();
        fs::write(dir.path().join("README.md"), "hello\n").unwrap();
        let before = digest_tree(dir.path()).unwrap();
        let again = digest_tree(dir.path()).unwrap();
        assert_eq!(before, again);

        fs::write(dir.path().join("README.md"), "Hello\n").unwrap();
        let after = digest_tree(dir.path()).unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn diff_scrutiny_boundaries() {
        assert_eq!(diff_scrutiny(0), DiffScrutiny::Standard);
        assert_eq!(diff_scrutiny(49), DiffScrutiny::Standard);
        assert_eq!(diff_scrutiny(50), DiffScrutiny::Extended);
        assert_eq!(diff_scrutiny(200), DiffScrutiny::Extended);
        assert_eq!(diff_scrutiny(201), DiffScrutiny::MandatoryHumanReview);
    }

    #[test]
    fn claim_queue_hands_out_disjoint_entries() {
        let records: Vec<FixQueueRecord> = (0..90)
            .map(|i| FixQueueRecord {
                priority_score: 1.0,
                priority_type: "defect".into(),
                relevant_paths: vec![],
                area: "core".into(),
                confidence: 1.0,
                ticket_key: format!("KAN-{i}"),
            })
            .collect();
        let queue = std::sync::Arc::new(ClaimQueue::new(records));
        let mut handles = Vec::new();
        for _ in 0..3 {
            let q = std::sync::Arc::clone(&queue);
            handles.push(std::thread::spawn(move || {
                let mut mine = Vec::new();
                while let Some(r) = q.claim() {
                    mine.push(r.ticket_key);
                }
                mine
            }));
        }
        let mut all: Vec<String> = handles
            .into_iter()
            .flat_map(|h| h.join().unwrap())
            .collect();
        let total = all.len();
        all.sort();
        all.dedup();
        assert_eq!(total, 90, "every entry claimed");
        assert_eq!(all.len(), 90, "no entry claimed twice");
    }

    #[test]
    fn lane_config_defaults_match_operating_profile() {
        let set = LaneConfigSet::default();
        assert_eq!(set.get(LaneId::Lane1).cadence_minutes, 60);
        assert_eq!(set.get(LaneId::Lane1).lock_ttl_minutes, 120);
        assert_eq!(set.get(LaneId::Lane3).max_workers, 3);
        assert_eq!(set.get(LaneId::Lane4).max_workers, 3);
        assert_eq!(set.get(LaneId::Lane4).budget_minutes, 45);
        assert_eq!(set.get(LaneId::Lane4).deep_sweep_budget_minutes, 120);
        assert_eq!(set.get(LaneId::Lane6).max_workers, 2);
        assert_eq!(set.get(LaneId::Lane7).cadence_minutes, 240);
        assert_eq!(set.get(LaneId::Lane7).lock_ttl_minutes, 240);
        assert_eq!(set.get(LaneId::Lane4).retry_limit, 3);
    }

    #[test]
    fn lane_config_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lanes.json");
        let set = LaneConfigSet::default();
        set.save(&path).unwrap();
        assert_eq!(LaneConfigSet::load(&path).unwrap(), set);
    }

    proptest! {
        #[test]
        fn jittered_delays_stay_in_envelope(seed in 0u64..1000, n in 0u32..20) {
            let policy = BackoffPolicy { rng_seed: seed, ..BackoffPolicy::default() };
            let mut schedule = BackoffSchedule::new(policy.clone());
            for _ in 0..10 {
                let d = schedule.delay(n);
                let secs = d.num_microseconds().unwrap() as f64 / 1e6;
                let base = policy.base_seconds(n);
                prop_assert!(secs >= base * 0.9 - 1e-6, "below envelope: {secs} vs {base}");
                prop_assert!(secs <= base * 1.1 + 1e-6, "above envelope: {secs} vs {base}");
            }
        }

        #[test]
        fn worker_count_never_exceeds_any_bound(
            actionable in 0usize..50,
            max_workers in 1usize..6,
            remain_min in 0i64..300,
            avg_min in 1i64..60,
        ) {
            let plan = plan_workers(
                actionable,
                max_workers,
                Duration::minutes(remain_min),
                Duration::minutes(avg_min),
            ).unwrap();
            prop_assert!(plan.workers <= actionable);
            prop_assert!(plan.workers <= max_workers);
            prop_assert!(plan.workers as i64 <= remain_min / avg_min);
            // Exactly the formula.
            prop_assert_eq!(
                plan.workers as i64,
                (actionable as i64).min(max_workers as i64).min(remain_min / avg_min)
            );
        }
    }
}
