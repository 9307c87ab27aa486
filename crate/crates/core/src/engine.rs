//! Lane execution engine: composes the backlog store, matcher, scheduler,
//! lock manager, degraded coordinator, publisher, evidence chain, and
//! watchdog into the seven lane cycles, each runnable as one call.
//!
//! A cycle is the unit of operation: take the lane lease, snapshot state
//! digests, run the lane body, release the lease, classify the run, and
//! append one evidence record. Everything a cycle observes or emits is
//! timestamped from the engine's virtual clock, so identical inputs
//! produce byte-identical state — the property the scenario runner and
//! the determinism suite rely on.
//!
//! Lane bodies:
//! 1. intake — parse intake documents, enforce the seven-field quality
//!    standard, dedup through the matching cascade, open tracker tickets
//! 2. audit — read-only reconciliation; tracker status is authoritative
//! 3. groom — order actionable items into the fix queue; enforce the
//!    retry limit; route ungroomable items to hold
//! 4. fix — claim tickets by compare-and-set, run the executor stub
//!    under a checkpointed time budget in an isolated workspace, apply
//!    diff scrutiny and the verify-only tripwire
//! 5. ops — drain queued intents after recovery, run the watchdog scan,
//!    emit the daily digest
//! 6. gate — verify finished fixes and publish verdicts through the
//!    deduplicating publisher with its circuit breaker
//! 7. spec review — coverage stub over the backlog families
//!
//! The executor and verifier are stubs by design: items may carry a
//! `sim` object (see [`ExecutorScript`]) that scripts how the fake fix
//! behaves — duration, progress, diff size, verdict — which is what makes
//! every failure-mode scenario reproducible on a desk.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backlog::{
    fingerprint, hex_string, parse_line_record, validate_item, BacklogError, BacklogItem,
    BacklogStore, FamilyPolicy, IntakeLedger,
};
use crate::clock::{Clock, VirtualClock};
use crate::degraded::{
    ClaimOutcome, ConnectivityStatus, DegradedCoordinator, DegradedError, DrainReport,
    GuardDecision, Health, IntentPayload,
};
use crate::evidence::{
    classify_run, EvidenceChain, EvidenceError, RecordDraft, TerminalStatus,
};
use crate::fix_queue::{FixQueue, FixQueueError, FixQueueRecord};
use crate::fsm::{LaneId, TicketStatus, TransitionId};
use crate::lock::{
    LocalTicketLocks, LockError, LockManager, SystemProbe, DEFAULT_SKEW_TOLERANCE_SECONDS,
};
use crate::matcher::{match_item, ConfidenceTier, Thresholds};
use crate::publisher::{
    route_outcome, BreakerState, PublishAction, PublishError, PublishItem, PublishOutcome,
    Publisher, ReceiptLog, Verdict, RECEIPT_LOG_FILE,
};
use crate::scheduler::{
    diff_scrutiny, digest_tree, plan_workers, run_with_budget, BackoffPolicy, BackoffSchedule,
    ClaimQueue, DiffScrutiny, LaneConfig, LaneConfigSet, PlanKind, SchedulerError, SimulatedTask,
    TaskOutcome, TimeBudget, Workspace,
};
use crate::tracker::{Query, SimulatedTracker, Tracker, TrackerError};
use crate::watchdog::{
    render_digest, scan, window_counters, DigestSchedule, EvaluationWindowConfig, ScanInputs,
    WatchdogError, WatchdogThresholds,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("engine I/O failure: {0}")]
    Io(String),
    #[error(transparent)]
    Backlog(#[from] BacklogError),
    #[error(transparent)]
    FixQueue(#[from] FixQueueError),
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Degraded(#[from] DegradedError),
    #[error(transparent)]
    Publish(#[from] PublishError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Watchdog(#[from] WatchdogError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
}

fn io_err(e: std::io::Error) -> EngineError {
    EngineError::Io(e.to_string())
}

/// Probe key used to test tracker reachability before a drain. The key
/// never exists; an UnknownKey answer still proves the call got through.
pub const DRAIN_SENTINEL_KEY: &str = "SENTINEL-0";

/// Engine-wide settings. Per-lane cadences, budgets, and worker counts
/// live in `lanes`; the rest are cross-cutting policies.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub state_dir: PathBuf,
    pub lanes: LaneConfigSet,
    /// Confidence-tier breakpoints for the matching cascade.
    pub match_thresholds: Thresholds,
    pub watchdog: WatchdogThresholds,
    pub window: EvaluationWindowConfig,
    /// Retry backoff for rate-limited tracker calls. The per-run schedule
    /// is reseeded from `seed` and the run counter.
    pub backoff: BackoffPolicy,
    pub seed: u64,
    /// Probability that a cycle surfaces one synthetic informational
    /// alert, for soak runs that need a realistic DEGRADED rate. 0 in
    /// normal operation.
    pub alert_injection_rate: f64,
    /// Planner estimate of one task's duration, for worker-pool sizing.
    pub t_avg_minutes: u64,
}

impl EngineConfig {
    pub fn new(state_dir: impl Into<PathBuf>) -> Self {
        EngineConfig {
            state_dir: state_dir.into(),
            lanes: LaneConfigSet::default(),
            match_thresholds: Thresholds::default(),
            watchdog: WatchdogThresholds::default(),
            window: EvaluationWindowConfig::default(),
            backoff: BackoffPolicy::default(),
            seed: 0,
            alert_injection_rate: 0.0,
            t_avg_minutes: 10,
        }
    }
}

/// Behavior script for the executor/verifier stubs, read from an item's
/// `sim` field. Absent fields fall back to a small, fast, successful fix;
/// scenarios override exactly the knobs a failure mode needs.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
pub struct ExecutorScript {
    pub duration_minutes: Option<f64>,
    /// false: the task never reports forward progress.
    pub progress: Option<bool>,
    pub stall_after_minutes: Option<f64>,
    pub heeds_warning: Option<bool>,
    pub diff_lines: Option<u64>,
    /// The fix itself fails (clean task failure, not a timeout).
    pub fails: Option<bool>,
    /// Under a verify-only plan, the stub illegally touches the tree.
    pub mutates_verify_only: Option<bool>,
    /// Verification verdict: "pass" | "fail" | "needs_human".
    pub verdict: Option<String>,
    /// Plan kind: "apply" | "verify_only" | "manual".
    pub plan: Option<String>,
    /// The groomer cannot score this item; it routes to hold.
    pub ungroomable: Option<bool>,
    pub deep_sweep: Option<bool>,
}

impl ExecutorScript {
    pub fn from_item(item: &BacklogItem) -> ExecutorScript {
        item.extra
            .get("sim")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default()
    }

    fn plan_kind(&self) -> PlanKind {
        match self.plan.as_deref() {
            Some("verify_only") | Some("verify-only") => PlanKind::VerifyOnly,
            Some("manual") => PlanKind::Manual,
            _ => PlanKind::Apply,
        }
    }

    fn verdict(&self) -> Verdict {
        match self.verdict.as_deref() {
            Some("fail") => Verdict::Fail,
            Some("needs_human") | Some("needs-human") => Verdict::NeedsHuman,
            _ => Verdict::Pass,
        }
    }

    fn duration(&self) -> Duration {
        Duration::milliseconds((self.duration_minutes.unwrap_or(5.0) * 60_000.0) as i64)
    }
}

/// One structured log line in events.jsonl. The scenario runner asserts
/// against these instead of scraping report prose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineEvent {
    pub at: DateTime<Utc>,
    pub run_id: String,
    pub lane: LaneId,
    pub event: String,
    #[serde(default)]
    pub details: serde_json::Value,
}

/// What one lane cycle did.
#[derive(Debug, Clone, Serialize)]
pub struct CycleReport {
    pub run_id: String,
    pub lane: LaneId,
    pub started_at: DateTime<Utc>,
    pub ended_at: DateTime<Utc>,
    pub terminal_status: TerminalStatus,
    pub exception_count: u32,
    /// None when the cycle was skipped (lease held) and no run happened.
    pub evidence_seq: Option<u64>,
    pub summary: Vec<String>,
}

/// Mutable per-cycle context threaded through a lane body.
struct Cycle {
    run_id: String,
    lane: LaneId,
    started_at: DateTime<Utc>,
    alerts: u32,
    summary: Vec<String>,
    backoff: BackoffSchedule,
    retry_limit: u32,
}

/// Result of one guarded tracker write.
enum WriteOutcome {
    Applied(crate::tracker::TicketRecord),
    /// Queued for replay or noted; the tracker was not reached.
    Deferred,
    /// The tracker rejected the call for a non-retryable reason — most
    /// often a lost compare-and-set.
    Rejected(TrackerError),
}

pub struct Engine {
    config: EngineConfig,
    tracker: Arc<SimulatedTracker>,
    clock: VirtualClock,
    coordinator: DegradedCoordinator,
    lock_manager: LockManager,
}

impl Engine {
    pub fn open(
        config: EngineConfig,
        tracker: Arc<SimulatedTracker>,
        clock: VirtualClock,
    ) -> Result<Engine, EngineError> {
        if !(0.0..=1.0).contains(&config.alert_injection_rate) {
            return Err(EngineError::Config(format!(
                "alert_injection_rate {} outside [0, 1]",
                config.alert_injection_rate
            )));
        }
        for lane in LaneId::ALL {
            let cfg = config.lanes.get(lane);
            if cfg.budget_minutes <= 20 || cfg.deep_sweep_budget_minutes <= 20 {
                return Err(EngineError::Config(format!(
                    "{lane}: budgets must exceed the 20-minute extended checkpoint"
                )));
            }
        }
        for sub in [
            "backlog", "locks", "degraded", "evidence", "receipts", "reports", "intake",
            "workspaces",
        ] {
            fs::create_dir_all(config.state_dir.join(sub)).map_err(io_err)?;
        }
        let coordinator = DegradedCoordinator::open(&config.state_dir.join("degraded"))?;
        let lock_manager = LockManager::new(
            config.state_dir.join("locks"),
            Arc::new(SystemProbe),
            DEFAULT_SKEW_TOLERANCE_SECONDS,
        )?;
        Ok(Engine {
            config,
            tracker,
            clock,
            coordinator,
            lock_manager,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn tracker(&self) -> &Arc<SimulatedTracker> {
        &self.tracker
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn coordinator(&self) -> &DegradedCoordinator {
        &self.coordinator
    }

    pub fn coordinator_mut(&mut self) -> &mut DegradedCoordinator {
        &mut self.coordinator
    }

    /// Revise the planner's per-task duration estimate (scenario scripts
    /// model tasks speeding up or slowing down between cycles).
    pub fn set_planner_estimate(&mut self, minutes: u64) {
        self.config.t_avg_minutes = minutes;
    }

    // ---- state paths -----------------------------------------------------

    pub fn backlog_path(&self) -> PathBuf {
        self.config.state_dir.join("backlog/items.jsonl")
    }

    pub fn intake_ledger_path(&self) -> PathBuf {
        self.config.state_dir.join("backlog/intake_ledger.json")
    }

    pub fn fix_queue_path(&self) -> PathBuf {
        self.config.state_dir.join("fix_queue.jsonl")
    }

    pub fn evidence_path(&self) -> PathBuf {
        self.config.state_dir.join("evidence/chain.jsonl")
    }

    pub fn receipt_log_path(&self) -> PathBuf {
        self.config.state_dir.join("receipts").join(RECEIPT_LOG_FILE)
    }

    pub fn events_path(&self) -> PathBuf {
        self.config.state_dir.join("events.jsonl")
    }

    pub fn alerts_path(&self) -> PathBuf {
        self.config.state_dir.join("alerts.jsonl")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.config.state_dir.join("reports")
    }

    pub fn intake_dir(&self) -> PathBuf {
        self.config.state_dir.join("intake")
    }

    fn local_claims_path(&self) -> PathBuf {
        self.config.state_dir.join("locks/local_claims.json")
    }

    fn last_runs_path(&self) -> PathBuf {
        self.config.state_dir.join("last_runs.json")
    }

    fn digest_schedule_path(&self) -> PathBuf {
        self.config.state_dir.join("digest_schedule.json")
    }

    fn run_counter_path(&self) -> PathBuf {
        self.config.state_dir.join("run_counter.json")
    }

    // ---- shared plumbing ---------------------------------------------------

    fn load_backlog(&self) -> Result<BacklogStore, EngineError> {
        let path = self.backlog_path();
        if path.exists() {
            Ok(BacklogStore::load(&path)?)
        } else {
            Ok(BacklogStore::new())
        }
    }

    fn load_ledger(&self) -> Result<IntakeLedger, EngineError> {
        let path = self.intake_ledger_path();
        if path.exists() {
            Ok(IntakeLedger::load(&path)?)
        } else {
            Ok(IntakeLedger::default())
        }
    }

    fn load_fix_queue(&self) -> Result<FixQueue, EngineError> {
        let path = self.fix_queue_path();
        if path.exists() {
            Ok(FixQueue::load(&path)?)
        } else {
            Ok(FixQueue::new())
        }
    }

    fn load_local_claims(&self) -> Result<LocalTicketLocks, EngineError> {
        let path = self.local_claims_path();
        if path.exists() {
            Ok(LocalTicketLocks::load(&path)?)
        } else {
            Ok(LocalTicketLocks::default())
        }
    }

    fn load_last_runs(&self) -> Result<BTreeMap<LaneId, DateTime<Utc>>, EngineError> {
        let path = self.last_runs_path();
        if !path.exists() {
            return Ok(BTreeMap::new());
        }
        let bytes = fs::read(&path).map_err(io_err)?;
        serde_json::from_slice(&bytes).map_err(|e| EngineError::Io(e.to_string()))
    }

    fn next_run_id(&self, lane: LaneId) -> Result<String, EngineError> {
        let counter = self.bump_counter()?;
        Ok(format!("run-{counter:05}-lane{}", lane.number()))
    }

    fn bump_counter(&self) -> Result<u64, EngineError> {
        let path = self.run_counter_path();
        let mut next: u64 = 1;
        if path.exists() {
            let bytes = fs::read(&path).map_err(io_err)?;
            let v: serde_json::Value =
                serde_json::from_slice(&bytes).map_err(|e| EngineError::Io(e.to_string()))?;
            next = v["next"].as_u64().unwrap_or(1);
        }
        fs::write(&path, json!({ "next": next + 1 }).to_string()).map_err(io_err)?;
        Ok(next)
    }

    fn log_event(
        &self,
        cycle: &Cycle,
        event: &str,
        details: serde_json::Value,
    ) -> Result<(), EngineError> {
        self.log_external_event(&cycle.run_id, cycle.lane, event, details)
    }

    /// Event-log entry attributed to an actor outside a lane cycle (the
    /// scenario runner's staged actions use this).
    pub(crate) fn log_external_event(
        &self,
        run_id: &str,
        lane: LaneId,
        event: &str,
        details: serde_json::Value,
    ) -> Result<(), EngineError> {
        let entry = EngineEvent {
            at: self.clock.now(),
            run_id: run_id.to_string(),
            lane,
            event: event.to_string(),
            details,
        };
        let line = serde_json::to_string(&entry).expect("event serializes");
        append_line(&self.events_path(), &line)
    }

    pub fn load_events(&self) -> Result<Vec<EngineEvent>, EngineError> {
        let path = self.events_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(io_err)?;
        let mut events = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            events.push(
                serde_json::from_str(line).map_err(|e| EngineError::Io(e.to_string()))?,
            );
        }
        Ok(events)
    }

    fn is_healthy(&self) -> bool {
        self.coordinator
            .status()
            .map(|s| s.status == Health::Healthy)
            .unwrap_or(false)
    }

    pub fn connectivity(&self) -> Result<ConnectivityStatus, EngineError> {
        Ok(self.coordinator.status()?)
    }

    /// Digests of the three shared state surfaces, recorded on every
    /// evidence record as input/output digests.
    fn state_digests(&self) -> Result<Vec<String>, EngineError> {
        let file_digest = |path: &Path| -> Result<String, EngineError> {
            let bytes = if path.exists() {
                fs::read(path).map_err(io_err)?
            } else {
                Vec::new()
            };
            Ok(hex_string(&Sha256::digest(&bytes)))
        };
        let dump = self.tracker.dump();
        let tracker_json = serde_json::to_string(&dump).expect("tracker dump serializes");
        Ok(vec![
            format!("backlog:{}", file_digest(&self.backlog_path())?),
            format!("fix-queue:{}", file_digest(&self.fix_queue_path())?),
            format!(
                "tracker:{}",
                hex_string(&Sha256::digest(tracker_json.as_bytes()))
            ),
        ])
    }

    /// Guarded tracker write: healthy calls go straight through with
    /// rate-limit retries under the backoff schedule; an outage flips the
    /// connectivity document and defers the write to its lane partition.
    fn tracker_write(
        &mut self,
        cycle: &mut Cycle,
        payload: IntentPayload,
    ) -> Result<WriteOutcome, EngineError> {
        let now = self.clock.now();
        match self.coordinator.guard_call(cycle.lane, payload.clone(), now) {
            GuardDecision::Proceed => {}
            GuardDecision::Queued(intent) => {
                cycle.alerts += 1;
                self.log_event(
                    cycle,
                    "intent_queued",
                    json!({ "kind": format!("{:?}", intent.kind), "seq": intent.seq }),
                )?;
                return Ok(WriteOutcome::Deferred);
            }
            GuardDecision::NotedOnly => {
                cycle.alerts += 1;
                self.log_event(cycle, "fallback_noted", json!({}))?;
                return Ok(WriteOutcome::Deferred);
            }
        }
        let mut attempt: u32 = 0;
        loop {
            let now = self.clock.now();
            match apply_payload(self.tracker.as_ref(), &payload, &cycle.run_id, now) {
                Ok(record) => return Ok(WriteOutcome::Applied(record)),
                Err(e @ TrackerError::RateLimited { .. }) => {
                    if attempt >= cycle.retry_limit {
                        cycle.alerts += 1;
                        self.log_event(
                            cycle,
                            "retry_budget_exhausted",
                            json!({ "attempts": attempt }),
                        )?;
                        return Ok(WriteOutcome::Rejected(e));
                    }
                    let delay = cycle.backoff.delay(attempt);
                    cycle.alerts += 1;
                    self.log_event(
                        cycle,
                        "retry_backoff",
                        json!({
                            "attempt": attempt,
                            "delay_ms": delay.num_milliseconds(),
                        }),
                    )?;
                    self.clock
                        .advance(delay.to_std().expect("backoff delay is positive"));
                    attempt += 1;
                }
                Err(TrackerError::TrackerUnavailable) => {
                    let now = self.clock.now();
                    self.coordinator.mark_degraded(cycle.lane, now)?;
                    cycle.alerts += 1;
                    self.log_event(cycle, "degraded_entered", json!({}))?;
                    match self.coordinator.guard_call(cycle.lane, payload.clone(), now) {
                        GuardDecision::Queued(intent) => {
                            self.log_event(
                                cycle,
                                "intent_queued",
                                json!({
                                    "kind": format!("{:?}", intent.kind),
                                    "seq": intent.seq,
                                }),
                            )?;
                            return Ok(WriteOutcome::Deferred);
                        }
                        GuardDecision::NotedOnly => {
                            self.log_event(cycle, "fallback_noted", json!({}))?;
                            return Ok(WriteOutcome::Deferred);
                        }
                        // The connectivity doc was just flipped, so the
                        // guard cannot answer Proceed; defend anyway.
                        GuardDecision::Proceed => continue,
                    }
                }
                Err(e) => return Ok(WriteOutcome::Rejected(e)),
            }
        }
    }

    // ---- cycle frame -------------------------------------------------------

    /// Run one lane cycle end to end. Returns the cycle report; `Err` is
    /// reserved for engine-level faults (broken evidence chain, I/O),
    /// while lane-body failures classify the run FAILED.
    pub fn run_lane(&mut self, lane: LaneId) -> Result<CycleReport, EngineError> {
        let started_at = self.clock.now();
        let run_id = self.next_run_id(lane)?;
        let lane_cfg = self.config.lanes.get(lane).clone();
        let policy = BackoffPolicy {
            rng_seed: self.config.seed ^ fxhash(&run_id),
            ..self.config.backoff
        };
        let mut cycle = Cycle {
            run_id,
            lane,
            started_at,
            alerts: 0,
            summary: Vec::new(),
            backoff: BackoffSchedule::new(policy),
            retry_limit: lane_cfg.retry_limit,
        };

        let lease = match self.lock_manager.acquire(
            &format!("lane{}", lane.number()),
            &cycle.run_id,
            std::process::id(),
            lane_cfg.lock_ttl_minutes * 60,
            started_at,
        ) {
            Ok(lock) => lock,
            Err(LockError::Contention { holder, .. }) => {
                self.log_event(&cycle, "lane_skipped_lease", json!({ "holder": holder }))?;
                return Ok(CycleReport {
                    run_id: cycle.run_id,
                    lane,
                    started_at,
                    ended_at: started_at,
                    terminal_status: TerminalStatus::Clean,
                    exception_count: 0,
                    evidence_seq: None,
                    summary: vec![format!("cycle skipped: lane lease held by {holder}")],
                });
            }
            Err(e) => return Err(e.into()),
        };

        let input_digests = self.state_digests()?;
        let body_result = self.lane_body(lane, &mut cycle, &lane_cfg);
        self.lock_manager.release(&lease)?;

        if self.config.alert_injection_rate > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ fxhash(&cycle.run_id));
            if rng.gen_bool(self.config.alert_injection_rate) {
                cycle.alerts += 1;
                self.log_event(&cycle, "injected_alert", json!({}))?;
                cycle.summary.push("synthetic informational alert injected".into());
            }
        }

        let success = match body_result {
            Ok(()) => true,
            Err(e) => {
                self.log_event(&cycle, "cycle_failed", json!({ "error": e.to_string() }))?;
                cycle.summary.push(format!("cycle failed: {e}"));
                false
            }
        };
        self.finish_cycle(cycle, success, input_digests)
    }

    fn lane_body(
        &mut self,
        lane: LaneId,
        cycle: &mut Cycle,
        cfg: &LaneConfig,
    ) -> Result<(), EngineError> {
        match lane {
            LaneId::Lane1 => self.lane1_intake(cycle),
            LaneId::Lane2 => self.lane2_audit(cycle),
            LaneId::Lane3 => self.lane3_groom(cycle, cfg),
            LaneId::Lane4 => self.lane4_fix(cycle, cfg),
            LaneId::Lane5 => self.lane5_ops(cycle),
            LaneId::Lane6 => self.lane6_gate(cycle, cfg),
            LaneId::Lane7 => self.lane7_spec_review(cycle),
        }
    }

    fn finish_cycle(
        &mut self,
        cycle: Cycle,
        success: bool,
        input_digests: Vec<String>,
    ) -> Result<CycleReport, EngineError> {
        let ended_at = self.clock.now();
        let output_digests = self.state_digests()?;
        let status = classify_run(cycle.alerts, success);
        let chain = EvidenceChain::open(&self.evidence_path());
        let record = chain.append_record(RecordDraft {
            run_id: cycle.run_id.clone(),
            lane: cycle.lane,
            timestamp: ended_at,
            input_digests,
            output_digests,
            exception_count: cycle.alerts,
            terminal_status: status,
        })?;
        self.write_lane_report(&cycle, status, ended_at, record.seq)?;
        let mut last_runs = self.load_last_runs()?;
        last_runs.insert(cycle.lane, ended_at);
        fs::write(
            self.last_runs_path(),
            serde_json::to_string_pretty(&last_runs).expect("timestamps serialize"),
        )
        .map_err(io_err)?;
        Ok(CycleReport {
            run_id: cycle.run_id,
            lane: cycle.lane,
            started_at: cycle.started_at,
            ended_at,
            terminal_status: status,
            exception_count: cycle.alerts,
            evidence_seq: Some(record.seq),
            summary: cycle.summary,
        })
    }

    fn write_lane_report(
        &self,
        cycle: &Cycle,
        status: TerminalStatus,
        ended_at: DateTime<Utc>,
        seq: u64,
    ) -> Result<(), EngineError> {
        let mut out = String::new();
        out.push_str(&format!("# Lane {} cycle report\n\n", cycle.lane.number()));
        out.push_str(&format!("- run: {}\n", cycle.run_id));
        out.push_str(&format!("- started: {}\n", cycle.started_at.to_rfc3339()));
        out.push_str(&format!("- ended: {}\n", ended_at.to_rfc3339()));
        out.push_str(&format!("- terminal status: {status:?}\n"));
        out.push_str(&format!("- informational alerts: {}\n", cycle.alerts));
        out.push_str(&format!("- evidence record: {seq}\n"));
        if !cycle.summary.is_empty() {
            out.push_str("\n## Notes\n\n");
            for line in &cycle.summary {
                out.push_str(&format!("- {line}\n"));
            }
        }
        let path = self
            .reports_dir()
            .join(format!("lane{}.md", cycle.lane.number()));
        fs::write(path, out).map_err(io_err)
    }

    // ---- lane 1: intake ----------------------------------------------------

    fn lane1_intake(&mut self, cycle: &mut Cycle) -> Result<(), EngineError> {
        let mut store = self.load_backlog()?;
        let mut ledger = self.load_ledger()?;
        let policy = FamilyPolicy::default();
        self.link_pending_items(cycle, &mut store)?;

        let mut docs: Vec<PathBuf> = fs::read_dir(self.intake_dir())
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("md") | Some("txt")
                )
            })
            .collect();
        docs.sort();

        let mut created = 0usize;
        let mut deduped = 0usize;
        let mut rejected = 0usize;
        for doc in docs {
            let bytes = fs::read(&doc).map_err(io_err)?;
            let name = doc
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let fp = fingerprint(&name, &bytes, self.clock.now());
            if !ledger.is_dirty(&fp) {
                self.log_event(cycle, "intake_skipped_clean", json!({ "document": name }))?;
                continue;
            }
            let text = String::from_utf8_lossy(&bytes);
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let raw = parse_line_record(line);
                let item = match validate_item(&raw, &policy) {
                    Ok(item) => item,
                    Err(failure) => {
                        rejected += 1;
                        self.log_event(
                            cycle,
                            "intake_rejected",
                            json!({
                                "document": name,
                                "missing_fields": failure.missing_fields,
                            }),
                        )?;
                        cycle.summary.push(format!(
                            "rejected record in {name}: missing {}",
                            failure.missing_fields.join(", ")
                        ));
                        continue;
                    }
                };
                if store.get(&item.id).is_some() {
                    continue; // earlier line of a re-read document
                }
                let result = match_item(&item, &store, self.config.match_thresholds);
                if let (Some(existing), ConfidenceTier::Autonomous) =
                    (&result.matched_item, result.confidence_tier)
                {
                    deduped += 1;
                    let confidence = result.score.as_ref().map(|s| s.s).unwrap_or(1.0);
                    store.set_confidence(&existing.id, confidence)?;
                    self.log_event(
                        cycle,
                        "duplicate_matched",
                        json!({
                            "incoming": item.id,
                            "canonical": existing.id,
                            "tier": format!("{:?}", result.tier_used),
                            "confidence": confidence,
                        }),
                    )?;
                    continue;
                }
                let mut item = item;
                if result.matched_item.is_some()
                    && result.confidence_tier == ConfidenceTier::HumanReview
                {
                    item.tags.insert("needs-review".to_string());
                    item.confidence = result.score.as_ref().map(|s| s.s);
                    self.log_event(
                        cycle,
                        "possible_duplicate_flagged",
                        json!({ "item": item.id }),
                    )?;
                }
                let mut labels: BTreeSet<String> = item.tags.clone();
                labels.insert(item.family.name.as_str().to_string());
                let payload = IntentPayload::Create {
                    summary: item.title.clone(),
                    description: item.description.clone(),
                    labels,
                };
                let item_id = item.id.clone();
                store.insert(item)?;
                created += 1;
                match self.tracker_write(cycle, payload)? {
                    WriteOutcome::Applied(ticket) => {
                        store.assign_tracker_key(&item_id, &ticket.key)?;
                        self.log_event(
                            cycle,
                            "ticket_created",
                            json!({ "item": item_id, "key": ticket.key }),
                        )?;
                    }
                    WriteOutcome::Deferred => {
                        cycle.summary.push(format!(
                            "ticket creation deferred for {item_id} (tracker unreachable)"
                        ));
                    }
                    WriteOutcome::Rejected(e) => {
                        cycle
                            .summary
                            .push(format!("ticket creation for {item_id} rejected: {e}"));
                    }
                }
            }
            ledger.record(&fp);
        }
        store.save(&self.backlog_path())?;
        ledger.save(&self.intake_ledger_path())?;
        cycle.summary.push(format!(
            "intake: {created} new, {deduped} deduplicated, {rejected} rejected"
        ));
        Ok(())
    }

    /// Retry pass for items that never got a tracker key: a create can be
    /// rejected by a rate limit, or deferred through an outage and land
    /// later via drain replay. Adoption by exact summary match covers the
    /// replayed case; anything still missing is created fresh.
    fn link_pending_items(
        &mut self,
        cycle: &mut Cycle,
        store: &mut BacklogStore,
    ) -> Result<(), EngineError> {
        if !store.items().iter().any(|i| i.tracker_key.is_none()) || !self.is_healthy() {
            return Ok(());
        }
        let now = self.clock.now();
        let tickets = match self.tracker.search(&all_tickets(), now) {
            Ok(t) => t,
            Err(TrackerError::TrackerUnavailable) => {
                self.coordinator.mark_degraded(cycle.lane, now)?;
                cycle.alerts += 1;
                self.log_event(cycle, "degraded_entered", json!({}))?;
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        for (id, key) in adopt_unlinked(store, &tickets) {
            store.assign_tracker_key(&id, &key)?;
            self.log_event(cycle, "ticket_adopted", json!({ "item": id, "key": key }))?;
        }
        let pending: Vec<BacklogItem> = store
            .items()
            .iter()
            .filter(|i| i.tracker_key.is_none())
            .cloned()
            .collect();
        for item in pending {
            let mut labels: BTreeSet<String> = item.tags.clone();
            labels.insert(item.family.name.as_str().to_string());
            let payload = IntentPayload::Create {
                summary: item.title.clone(),
                description: item.description.clone(),
                labels,
            };
            match self.tracker_write(cycle, payload)? {
                WriteOutcome::Applied(ticket) => {
                    store.assign_tracker_key(&item.id, &ticket.key)?;
                    self.log_event(
                        cycle,
                        "ticket_created",
                        json!({ "item": item.id, "key": ticket.key, "retried": true }),
                    )?;
                }
                WriteOutcome::Deferred | WriteOutcome::Rejected(_) => {
                    cycle
                        .summary
                        .push(format!("ticket creation for {} still pending", item.id));
                }
            }
        }
        Ok(())
    }

    // ---- lane 2: audit -----------------------------------------------------

    fn lane2_audit(&mut self, cycle: &mut Cycle) -> Result<(), EngineError> {
        if !self.is_healthy() {
            return self.note_degraded_skip(cycle, "audit skipped: tracker unreachable");
        }
        let now = self.clock.now();
        let tickets = match self.tracker.search(&all_tickets(), now) {
            Ok(t) => t,
            Err(TrackerError::TrackerUnavailable) => {
                self.coordinator.mark_degraded(cycle.lane, now)?;
                return self.note_degraded_skip(cycle, "audit skipped: tracker unreachable");
            }
            Err(e) => return Err(e.into()),
        };
        let by_key: BTreeMap<&str, &crate::tracker::TicketRecord> =
            tickets.iter().map(|t| (t.key.as_str(), t)).collect();

        let mut store = self.load_backlog()?;
        // Re-link before comparing: tickets created by a drain replay have
        // no local key assignment yet.
        let adopted = adopt_unlinked(&store, &tickets);
        for (id, key) in &adopted {
            store.assign_tracker_key(id, key)?;
            self.log_event(cycle, "ticket_adopted", json!({ "item": id, "key": key }))?;
        }
        let mut divergent: Vec<(String, TicketStatus)> = Vec::new();
        let mut orphaned = 0usize;
        for item in store.items() {
            let Some(key) = item.tracker_key.as_deref() else {
                continue;
            };
            match by_key.get(key) {
                Some(ticket) if ticket.status != item.status => {
                    divergent.push((item.id.clone(), ticket.status));
                }
                Some(_) => {}
                None => {
                    orphaned += 1;
                    cycle
                        .summary
                        .push(format!("item {} references missing ticket {key}", item.id));
                }
            }
        }
        let synced = divergent.len();
        for (id, status) in divergent {
            store.set_status(&id, status)?;
            self.log_event(
                cycle,
                "status_synced",
                json!({ "item": id, "status": status.to_string() }),
            )?;
        }
        store.save(&self.backlog_path())?;
        cycle.summary.push(format!(
            "audit: {} tickets, {} adopted, {synced} statuses synced from tracker, {orphaned} orphaned",
            tickets.len(),
            adopted.len()
        ));
        Ok(())
    }

    fn note_degraded_skip(&mut self, cycle: &mut Cycle, note: &str) -> Result<(), EngineError> {
        let now = self.clock.now();
        let payload = IntentPayload::Comment {
            key: format!("lane{}-log", cycle.lane.number()),
            body: note.to_string(),
        };
        match self.coordinator.guard_call(cycle.lane, payload, now) {
            GuardDecision::NotedOnly => {
                self.log_event(cycle, "fallback_noted", json!({ "note": note }))?;
            }
            GuardDecision::Queued(intent) => {
                self.log_event(cycle, "intent_queued", json!({ "seq": intent.seq }))?;
            }
            GuardDecision::Proceed => {}
        }
        cycle.alerts += 1;
        cycle.summary.push(note.to_string());
        Ok(())
    }

    // ---- lane 3: groom -----------------------------------------------------

    fn lane3_groom(&mut self, cycle: &mut Cycle, cfg: &LaneConfig) -> Result<(), EngineError> {
        if !self.is_healthy() {
            cycle.alerts += 1;
            cycle
                .summary
                .push("grooming deferred: tracker unreachable".to_string());
            self.log_event(cycle, "grooming_deferred", json!({}))?;
            return Ok(());
        }
        let mut store = self.load_backlog()?;
        let mut queue = self.load_fix_queue()?;
        let queued: BTreeSet<String> =
            queue.in_priority_order().iter().map(|r| r.ticket_key.clone()).collect();

        // Candidate = linked item, locally ToDo, not already queued. The
        // tracker's view of each candidate is re-read before queueing so
        // grooming never acts on a stale local status.
        let candidates: Vec<(String, String)> = store
            .items()
            .iter()
            .filter(|i| i.status == TicketStatus::ToDo)
            .filter_map(|i| i.tracker_key.as_ref().map(|k| (i.id.clone(), k.clone())))
            .filter(|(_, key)| !queued.contains(key))
            .collect();

        let plan = plan_workers(
            candidates.len(),
            cfg.max_workers,
            Duration::minutes(cfg.cadence_minutes as i64),
            Duration::minutes(self.config.t_avg_minutes as i64),
        )?;
        self.log_event(
            cycle,
            "workers_planned",
            json!({ "actionable": plan.actionable, "workers": plan.workers }),
        )?;
        if plan.workers == 0 {
            if !candidates.is_empty() {
                cycle.alerts += 1;
                self.log_event(
                    cycle,
                    "pool_no_capacity",
                    json!({ "deferred": candidates.len() }),
                )?;
                cycle.summary.push(format!(
                    "no worker capacity this cycle; {} items deferred",
                    candidates.len()
                ));
            } else {
                cycle.summary.push("nothing to groom".to_string());
            }
            return Ok(());
        }

        let mut groomed = 0usize;
        let mut held = 0usize;
        for (i, (id, key)) in candidates.iter().enumerate() {
            let worker = i % plan.workers;
            let now = self.clock.now();
            let ticket = match self.tracker.get(key, now) {
                Ok(t) => t,
                Err(TrackerError::TrackerUnavailable) => {
                    self.coordinator.mark_degraded(cycle.lane, now)?;
                    cycle.alerts += 1;
                    cycle
                        .summary
                        .push("grooming halted mid-cycle: tracker unreachable".to_string());
                    self.log_event(cycle, "degraded_entered", json!({}))?;
                    break;
                }
                Err(e) => return Err(e.into()),
            };
            if ticket.status != TicketStatus::ToDo {
                // Tracker is authoritative; fold the fresher status in.
                store.set_status(id, ticket.status)?;
                continue;
            }
            let item = store.get(id).expect("candidate came from the store").clone();
            let script = ExecutorScript::from_item(&item);
            let claims = ticket
                .transition_log
                .iter()
                .filter(|t| t.transition_id == TransitionId::InProgress)
                .count() as u32;
            if script.ungroomable == Some(true) || claims >= cfg.retry_limit {
                let reason = if claims >= cfg.retry_limit {
                    format!("retry limit reached ({claims} claims)")
                } else {
                    "item cannot be scored for automation".to_string()
                };
                match self.tracker_write(
                    cycle,
                    IntentPayload::Transition {
                        key: key.clone(),
                        transition: TransitionId::OnHold,
                        actor: LaneId::Lane3,
                        expected_from: TicketStatus::ToDo,
                        verification_approved: false,
                    },
                )? {
                    WriteOutcome::Applied(_) => {
                        held += 1;
                        store.set_status(id, TicketStatus::OnHold)?;
                        if claims >= cfg.retry_limit {
                            cycle.alerts += 1;
                        }
                        self.log_event(
                            cycle,
                            "routed_to_hold",
                            json!({ "key": key, "reason": reason }),
                        )?;
                        cycle.summary.push(format!("{key} routed to hold: {reason}"));
                    }
                    WriteOutcome::Deferred => {}
                    WriteOutcome::Rejected(e) => {
                        cycle.summary.push(format!("hold routing for {key} lost: {e}"));
                    }
                }
                continue;
            }
            queue.push(FixQueueRecord {
                priority_score: item.priority as f64 * 10.0,
                priority_type: "backlog-priority".to_string(),
                relevant_paths: vec![item.source_ref.clone()],
                area: item.family.name.as_str().to_string(),
                confidence: item.confidence.unwrap_or(1.0),
                ticket_key: key.clone(),
            });
            groomed += 1;
            self.log_event(cycle, "groomed", json!({ "key": key, "worker": worker }))?;
        }
        queue.save(&self.fix_queue_path())?;
        store.save(&self.backlog_path())?;
        cycle
            .summary
            .push(format!("groomed {groomed} items into the fix queue, {held} held"));
        Ok(())
    }

    // ---- lane 4: fix -------------------------------------------------------

    fn lane4_fix(&mut self, cycle: &mut Cycle, cfg: &LaneConfig) -> Result<(), EngineError> {
        let mut queue = self.load_fix_queue()?;
        let ordered = queue.in_priority_order();
        if ordered.is_empty() {
            cycle.summary.push("fix queue empty".to_string());
            return Ok(());
        }
        let plan = plan_workers(
            ordered.len(),
            cfg.max_workers,
            Duration::minutes(cfg.cadence_minutes as i64),
            Duration::minutes(self.config.t_avg_minutes as i64),
        )?;
        self.log_event(
            cycle,
            "workers_planned",
            json!({ "actionable": plan.actionable, "workers": plan.workers }),
        )?;
        if plan.workers == 0 {
            cycle.alerts += 1;
            self.log_event(
                cycle,
                "pool_no_capacity",
                json!({ "deferred": ordered.len() }),
            )?;
            cycle.summary.push(format!(
                "no worker capacity this cycle; {} queue entries deferred",
                ordered.len()
            ));
            return Ok(());
        }

        let store = self.load_backlog()?;
        let mut local_claims = self.load_local_claims()?;
        let claim_queue = ClaimQueue::new(ordered);

        // Workers claim from the shared queue in a deterministic
        // round-robin; each pop is atomic, so no entry is ever processed
        // twice. Wall time advances by the busiest worker, which is what
        // parallel execution costs.
        let mut worker_elapsed = vec![Duration::zero(); plan.workers];
        let mut consumed: Vec<String> = Vec::new();
        let mut slot = 0usize;
        while let Some(record) = claim_queue.claim() {
            let worker = slot % plan.workers;
            slot += 1;
            consumed.push(record.ticket_key.clone());
            let elapsed =
                self.fix_one(cycle, cfg, &record, worker, &store, &mut local_claims)?;
            worker_elapsed[worker] += elapsed;
        }
        if let Some(wall) = worker_elapsed.iter().max() {
            if *wall > Duration::zero() {
                self.clock
                    .advance(wall.to_std().expect("elapsed time is positive"));
            }
        }
        for key in &consumed {
            queue.remove(key);
        }
        queue.save(&self.fix_queue_path())?;
        local_claims.save(&self.local_claims_path())?;
        cycle
            .summary
            .push(format!("processed {} queue entries", consumed.len()));
        Ok(())
    }

    /// One claimed fix: CAS claim, budgeted executor run, tripwire and
    /// diff scrutiny, verification hand-off. Returns the task wall time.
    fn fix_one(
        &mut self,
        cycle: &mut Cycle,
        cfg: &LaneConfig,
        record: &FixQueueRecord,
        worker: usize,
        store: &BacklogStore,
        local_claims: &mut LocalTicketLocks,
    ) -> Result<Duration, EngineError> {
        let key = &record.ticket_key;
        let owner = format!("{}/w{worker}", cycle.run_id);
        let item = store
            .items()
            .iter()
            .find(|i| i.tracker_key.as_deref() == Some(key.as_str()));
        let script = item.map(ExecutorScript::from_item).unwrap_or_default();
        let now = self.clock.now();

        // Claim. Healthy: atomic ToDo -> InProgress on the tracker; a lost
        // compare-and-set means another agent owns the ticket and this
        // worker skips. Degraded: local lock plus a queued transition that
        // re-runs the same compare-and-set at drain time.
        let claim_payload = IntentPayload::Transition {
            key: key.clone(),
            transition: TransitionId::InProgress,
            actor: LaneId::Lane4,
            expected_from: TicketStatus::ToDo,
            verification_approved: false,
        };
        if self.is_healthy() {
            match self.tracker_write(cycle, claim_payload)? {
                WriteOutcome::Applied(_) => {
                    self.log_event(cycle, "claim_won", json!({ "key": key, "worker": worker }))?;
                }
                WriteOutcome::Rejected(e) => {
                    cycle.alerts += 1;
                    self.log_event(
                        cycle,
                        "claim_lost",
                        json!({ "key": key, "worker": worker, "reason": e.to_string() }),
                    )?;
                    cycle
                        .summary
                        .push(format!("claim on {key} lost to a concurrent agent"));
                    return Ok(Duration::zero());
                }
                WriteOutcome::Deferred => {
                    // Outage hit mid-claim; fall back to the local lock.
                    local_claims.claim(key, &owner, now);
                    self.log_event(cycle, "degraded_claim", json!({ "key": key }))?;
                }
            }
        } else {
            match self.coordinator.degraded_claim(local_claims, key, &owner, now) {
                ClaimOutcome::Claimed => {
                    let claim_payload = IntentPayload::Transition {
                        key: key.clone(),
                        transition: TransitionId::InProgress,
                        actor: LaneId::Lane4,
                        expected_from: TicketStatus::ToDo,
                        verification_approved: false,
                    };
                    match self.coordinator.guard_call(cycle.lane, claim_payload, now) {
                        GuardDecision::Queued(intent) => {
                            cycle.alerts += 1;
                            self.log_event(
                                cycle,
                                "degraded_claim",
                                json!({ "key": key, "queued_seq": intent.seq }),
                            )?;
                        }
                        _ => {
                            self.log_event(cycle, "degraded_claim", json!({ "key": key }))?;
                        }
                    }
                }
                ClaimOutcome::Contention { holder } => {
                    cycle.alerts += 1;
                    self.log_event(
                        cycle,
                        "claim_lost",
                        json!({ "key": key, "worker": worker, "holder": holder }),
                    )?;
                    return Ok(Duration::zero());
                }
            }
        }

        let plan_kind = script.plan_kind();
        if plan_kind == PlanKind::Manual {
            self.route_on_hold(cycle, key, "manual plan requires a human operator")?;
            self.log_event(cycle, "manual_plan_hold", json!({ "key": key }))?;
            return Ok(Duration::zero());
        }

        // Isolated workspace, digested before the run.
        let ws_root = self
            .config
            .state_dir
            .join("workspaces")
            .join(&cycle.run_id)
            .join(format!("w{worker}-{key}"));
        fs::create_dir_all(ws_root.join("src")).map_err(io_err)?;
        let seed_body = item
            .map(|i| format!("{}\n\n{}\n", i.title, i.description))
            .unwrap_or_else(|| format!("{key}\n"));
        fs::write(ws_root.join("src/module.txt"), &seed_body).map_err(io_err)?;
        fs::write(
            ws_root.join("src/context.md"),
            format!("ticket: {key}\narea: {}\n", record.area),
        )
        .map_err(io_err)?;
        let pre_digest = digest_tree(&ws_root)?;

        // Budgeted executor run on a task-local clock: workers overlap in
        // virtual time, and the lane accounts wall time afterwards.
        let budget = if script.deep_sweep == Some(true) {
            TimeBudget::from_minutes(cfg.deep_sweep_budget_minutes)
        } else {
            TimeBudget::from_minutes(cfg.budget_minutes)
        };
        let task_clock = VirtualClock::starting_at(now);
        let mut task = SimulatedTask::new(script.duration(), script.fails != Some(true));
        if script.progress != Some(false) {
            task = task.with_progress_every(Duration::minutes(1));
        }
        if let Some(stall) = script.stall_after_minutes {
            task = task.stalling_after(Duration::milliseconds((stall * 60_000.0) as i64));
        }
        if script.heeds_warning == Some(true) {
            task = task.heeding_warnings();
        }
        let report = run_with_budget(&mut task, &budget, &task_clock, Duration::seconds(30));
        let elapsed = report.ended_at - report.started_at;

        match report.outcome {
            TaskOutcome::BudgetExhausted => {
                fs::remove_dir_all(&ws_root).map_err(io_err)?;
                cycle.alerts += 1;
                self.log_event(
                    cycle,
                    "budget_exhausted",
                    json!({
                        "key": key,
                        "elapsed_seconds": elapsed.num_seconds(),
                        "extended": report.extended,
                        "force_terminated": report.force_terminated,
                    }),
                )?;
                self.requeue_to_todo(cycle, key, local_claims, &owner)?;
                cycle.summary.push(format!(
                    "{key}: budget exhausted after {}s; workspace discarded, requeued",
                    elapsed.num_seconds()
                ));
            }
            TaskOutcome::Failed => {
                fs::remove_dir_all(&ws_root).map_err(io_err)?;
                cycle.alerts += 1;
                self.log_event(
                    cycle,
                    "fix_failed",
                    json!({ "key": key, "elapsed_seconds": elapsed.num_seconds() }),
                )?;
                self.requeue_to_todo(cycle, key, local_claims, &owner)?;
                cycle
                    .summary
                    .push(format!("{key}: fix attempt failed; requeued"));
            }
            TaskOutcome::Completed => {
                let diff_lines = script.diff_lines.unwrap_or(12);
                if plan_kind == PlanKind::Apply {
                    let patch: String = (0..diff_lines)
                        .map(|i| format!("+ line {i} for {key}\n"))
                        .collect();
                    fs::write(ws_root.join("src/fix.patch"), patch).map_err(io_err)?;
                }
                if plan_kind == PlanKind::VerifyOnly && script.mutates_verify_only == Some(true) {
                    fs::write(ws_root.join("src/stray.tmp"), b"x").map_err(io_err)?;
                }
                let post_digest = digest_tree(&ws_root)?;
                let ws = Workspace {
                    id: owner.clone(),
                    root: ws_root.clone(),
                    pre_digest,
                    post_digest: post_digest.clone(),
                    plan_kind,
                };
                if let Err(e) = crate::scheduler::verify_workspace(&ws) {
                    match e {
                        SchedulerError::MutatedStateFailure { .. } => {
                            cycle.alerts += 1;
                            self.log_event(
                                cycle,
                                "tripwire_mutated_state",
                                json!({ "key": key }),
                            )?;
                            self.route_on_hold(
                                cycle,
                                key,
                                "verify-only plan mutated its workspace",
                            )?;
                            cycle.summary.push(format!(
                                "{key}: verify-only plan mutated its workspace; held for review"
                            ));
                            return Ok(elapsed);
                        }
                        other => return Err(other.into()),
                    }
                }
                let effective_diff = if plan_kind == PlanKind::VerifyOnly {
                    0
                } else {
                    diff_lines
                };
                match diff_scrutiny(effective_diff) {
                    DiffScrutiny::MandatoryHumanReview => {
                        cycle.alerts += 1;
                        self.log_event(
                            cycle,
                            "diff_mandatory_review",
                            json!({ "key": key, "diff_lines": effective_diff }),
                        )?;
                        self.route_on_hold(
                            cycle,
                            key,
                            &format!("{effective_diff}-line diff requires human review"),
                        )?;
                        cycle.summary.push(format!(
                            "{key}: {effective_diff}-line diff held for mandatory review"
                        ));
                        return Ok(elapsed);
                    }
                    DiffScrutiny::Extended => {
                        self.log_event(
                            cycle,
                            "diff_extended_review",
                            json!({ "key": key, "diff_lines": effective_diff }),
                        )?;
                    }
                    DiffScrutiny::Standard => {}
                }
                // Hand off to the verification lane. The fixer never
                // judges its own work: it reports digests and stops.
                let body = format!(
                    "fix ready: workspace {} plan {:?} diff {} lines",
                    &post_digest[..16],
                    plan_kind,
                    effective_diff
                );
                match self.tracker_write(
                    cycle,
                    IntentPayload::Comment {
                        key: key.clone(),
                        body,
                    },
                )? {
                    WriteOutcome::Applied(_) | WriteOutcome::Deferred => {
                        self.log_event(
                            cycle,
                            "fix_ready",
                            json!({ "key": key, "diff_lines": effective_diff }),
                        )?;
                        cycle
                            .summary
                            .push(format!("{key}: fix ready for verification"));
                    }
                    WriteOutcome::Rejected(e) => {
                        cycle
                            .summary
                            .push(format!("{key}: hand-off comment rejected: {e}"));
                    }
                }
            }
        }
        Ok(elapsed)
    }

    /// Requeue a claimed ticket to ToDo (budget exhaustion / failed fix).
    fn requeue_to_todo(
        &mut self,
        cycle: &mut Cycle,
        key: &str,
        local_claims: &mut LocalTicketLocks,
        owner: &str,
    ) -> Result<(), EngineError> {
        let payload = IntentPayload::Transition {
            key: key.to_string(),
            transition: TransitionId::ToDo,
            actor: LaneId::Lane4,
            expected_from: TicketStatus::InProgress,
            verification_approved: false,
        };
        match self.tracker_write(cycle, payload)? {
            WriteOutcome::Applied(_) | WriteOutcome::Deferred => {}
            WriteOutcome::Rejected(e) => {
                cycle
                    .summary
                    .push(format!("requeue transition for {key} rejected: {e}"));
            }
        }
        local_claims.release(key, owner);
        Ok(())
    }

    /// Route a claimed ticket to OnHold with an explanatory comment.
    fn route_on_hold(
        &mut self,
        cycle: &mut Cycle,
        key: &str,
        reason: &str,
    ) -> Result<(), EngineError> {
        let payload = IntentPayload::Transition {
            key: key.to_string(),
            transition: TransitionId::OnHold,
            actor: LaneId::Lane4,
            expected_from: TicketStatus::InProgress,
            verification_approved: false,
        };
        match self.tracker_write(cycle, payload)? {
            WriteOutcome::Applied(_) | WriteOutcome::Deferred => {}
            WriteOutcome::Rejected(e) => {
                cycle
                    .summary
                    .push(format!("hold transition for {key} rejected: {e}"));
                return Ok(());
            }
        }
        let note = IntentPayload::Comment {
            key: key.to_string(),
            body: format!("held for human review: {reason}"),
        };
        let _ = self.tracker_write(cycle, note)?;
        Ok(())
    }

    // ---- lane 5: ops -------------------------------------------------------

    fn lane5_ops(&mut self, cycle: &mut Cycle) -> Result<(), EngineError> {
        let now = self.clock.now();
        let mut connectivity = self.coordinator.status()?;

        if connectivity.status == Health::Degraded {
            match self.coordinator.drain(
                self.tracker.as_ref(),
                DRAIN_SENTINEL_KEY,
                20,
                &cycle.run_id,
                now,
            ) {
                Ok(report) => {
                    cycle.alerts += 1;
                    self.log_event(
                        cycle,
                        "drain_ran",
                        json!({
                            "attempted": report.attempted,
                            "replayed": report.replayed,
                            "dropped": report.dropped_collisions.len(),
                            "remaining": report.remaining,
                            "recovered": report.recovered,
                            "halted_on": report.halted_on,
                        }),
                    )?;
                    for dropped in &report.dropped_collisions {
                        self.log_event(
                            cycle,
                            "drain_collision",
                            json!({
                                "seq": dropped.seq,
                                "key": dropped.key,
                                "reason": dropped.reason,
                            }),
                        )?;
                    }
                    if report.recovered {
                        self.log_event(cycle, "healthy_restored", json!({}))?;
                    }
                    cycle.summary.push(report.summary.clone());
                    connectivity = self.coordinator.status()?;
                }
                Err(DegradedError::ConnectivityStillDown) => {
                    cycle.alerts += 1;
                    self.log_event(cycle, "drain_probe_failed", json!({}))?;
                    cycle
                        .summary
                        .push("drain probe failed: tracker still unreachable".to_string());
                }
                Err(e) => return Err(e.into()),
            }
        }

        // Watchdog scan over consistent snapshots. Ticket reads are
        // skipped while degraded; the connectivity alert covers the gap.
        let tickets = if connectivity.status == Health::Healthy {
            match self.tracker.search(&all_tickets(), self.clock.now()) {
                Ok(t) => t,
                Err(TrackerError::TrackerUnavailable) => {
                    self.coordinator.mark_degraded(cycle.lane, self.clock.now())?;
                    connectivity = self.coordinator.status()?;
                    cycle.alerts += 1;
                    Vec::new()
                }
                Err(e) => return Err(e.into()),
            }
        } else {
            Vec::new()
        };
        let locks = self.lock_manager.list()?;
        let last_reports = self.load_last_runs()?;
        let inputs = ScanInputs {
            tickets: &tickets,
            locks: &locks,
            last_reports: &last_reports,
            lane_config: &self.config.lanes,
            connectivity: &connectivity,
        };
        let now = self.clock.now();
        let alerts = scan(&inputs, &self.config.watchdog, now);
        for alert in &alerts {
            let line = serde_json::to_string(alert).expect("alert serializes");
            append_line(&self.alerts_path(), &line)?;
            self.log_event(
                cycle,
                "alert_emitted",
                json!({
                    "severity": format!("{:?}", alert.severity),
                    "category": format!("{:?}", alert.category),
                    "subject": alert.subject,
                    "age_seconds": alert.age_seconds,
                }),
            )?;
        }
        cycle.alerts += alerts.len() as u32;
        if !alerts.is_empty() {
            cycle
                .summary
                .push(format!("watchdog raised {} alert(s)", alerts.len()));
        }

        // At most one digest per virtual day, at the first scan past the
        // emission time.
        let schedule_path = self.digest_schedule_path();
        let mut schedule: DigestSchedule = if schedule_path.exists() {
            let bytes = fs::read(&schedule_path).map_err(io_err)?;
            serde_json::from_slice(&bytes).map_err(|e| EngineError::Io(e.to_string()))?
        } else {
            DigestSchedule::default()
        };
        if schedule.due(now) {
            let records = EvidenceChain::open(&self.evidence_path()).load()?;
            let counters = window_counters(&records, &self.config.window);
            let fallback_notes = self.coordinator.fallback_note_count()?;
            let digest = render_digest(
                now,
                &alerts,
                &connectivity,
                fallback_notes,
                &counters,
                &self.config.window,
            );
            fs::write(self.reports_dir().join("daily_digest.md"), digest).map_err(io_err)?;
            self.log_event(cycle, "digest_emitted", json!({}))?;
            cycle.summary.push("daily digest emitted".to_string());
        }
        fs::write(
            &schedule_path,
            serde_json::to_string(&schedule).expect("schedule serializes"),
        )
        .map_err(io_err)?;
        Ok(())
    }

    /// Manual drain entry point (the ops lane also drains on its own).
    pub fn drain(&mut self, max_calls: usize) -> Result<DrainReport, EngineError> {
        let now = self.clock.now();
        let run_id = format!("drain-{:05}", self.bump_counter()?);
        Ok(self.coordinator.drain(
            self.tracker.as_ref(),
            DRAIN_SENTINEL_KEY,
            max_calls,
            &run_id,
            now,
        )?)
    }

    // ---- lane 6: gate ------------------------------------------------------

    fn lane6_gate(&mut self, cycle: &mut Cycle, cfg: &LaneConfig) -> Result<(), EngineError> {
        if !self.is_healthy() {
            cycle.alerts += 1;
            cycle
                .summary
                .push("verification deferred: tracker unreachable".to_string());
            self.log_event(cycle, "verification_deferred", json!({}))?;
            return Ok(());
        }
        let now = self.clock.now();
        let query = Query {
            status: Some(TicketStatus::InProgress),
            labels: Vec::new(),
            key_prefix: None,
        };
        let in_progress = match self.tracker.search(&query, now) {
            Ok(t) => t,
            Err(TrackerError::TrackerUnavailable) => {
                self.coordinator.mark_degraded(cycle.lane, now)?;
                cycle.alerts += 1;
                cycle
                    .summary
                    .push("verification deferred: tracker unreachable".to_string());
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        // Pending = more fix hand-offs than verdicts posted.
        let candidates: Vec<_> = in_progress
            .into_iter()
            .filter(|t| {
                let ready = t
                    .comments
                    .iter()
                    .filter(|c| c.body.starts_with("fix ready:"))
                    .count();
                let judged = t
                    .comments
                    .iter()
                    .filter(|c| c.body.starts_with("verification verdict:"))
                    .count();
                ready > judged
            })
            .collect();
        if candidates.is_empty() {
            cycle.summary.push("nothing awaiting verification".to_string());
            return Ok(());
        }
        let plan = plan_workers(
            candidates.len(),
            cfg.max_workers,
            Duration::minutes(cfg.cadence_minutes as i64),
            Duration::minutes(self.config.t_avg_minutes as i64),
        )?;
        self.log_event(
            cycle,
            "workers_planned",
            json!({ "actionable": plan.actionable, "workers": plan.workers }),
        )?;
        if plan.workers == 0 {
            cycle.alerts += 1;
            self.log_event(
                cycle,
                "pool_no_capacity",
                json!({ "deferred": candidates.len() }),
            )?;
            cycle.summary.push(format!(
                "no worker capacity this cycle; {} verifications deferred",
                candidates.len()
            ));
            return Ok(());
        }

        let store = self.load_backlog()?;
        let mut local_store = self.load_backlog()?;
        let mut log = ReceiptLog::open(&self.receipt_log_path())?;
        let mut publisher = Publisher::new(LaneId::Lane6, &cycle.run_id);
        // This run's evidence record gets the next chain index; receipts
        // link to it.
        let next_seq = EvidenceChain::open(&self.evidence_path()).load()?.len();
        let permalink = format!("evidence://chain/{next_seq}");

        let mut posted = 0usize;
        for ticket in &candidates {
            if publisher.breaker_state() == BreakerState::Open {
                cycle.alerts += 1;
                self.log_event(
                    cycle,
                    "breaker_open",
                    json!({ "posted_so_far": publisher.posted().len() }),
                )?;
                cycle.summary.push(
                    "circuit breaker open: publication halted, posted receipts preserved"
                        .to_string(),
                );
                break;
            }
            let item = store
                .items()
                .iter()
                .find(|i| i.tracker_key.as_deref() == Some(ticket.key.as_str()));
            let script = item.map(ExecutorScript::from_item).unwrap_or_default();
            let verdict = script.verdict();
            let transition = route_outcome(verdict);
            let body = format!(
                "verification verdict: {verdict:?} -> transition {}",
                transition.id()
            );
            let publish_item = PublishItem {
                ticket_key: ticket.key.clone(),
                run_id: cycle.run_id.clone(),
                body,
                action: PublishAction::Transition(transition),
                expected_from: Some(TicketStatus::InProgress),
                verification_approved: verdict == Verdict::Pass,
                evidence_permalink: permalink.clone(),
            };
            let outcome =
                publisher.publish(&publish_item, &mut log, self.tracker.as_ref(), self.clock.now())?;
            match outcome {
                PublishOutcome::Posted(receipt) => {
                    posted += 1;
                    let verdict_event = match verdict {
                        Verdict::Pass => "verify_pass",
                        Verdict::Fail => "verify_fail",
                        Verdict::NeedsHuman => "verify_needs_human",
                    };
                    self.log_event(
                        cycle,
                        verdict_event,
                        json!({ "key": ticket.key, "transition": transition.id() }),
                    )?;
                    self.log_event(
                        cycle,
                        "published",
                        json!({ "key": ticket.key, "digest": receipt.content_digest }),
                    )?;
                    if let Some(item) = item {
                        local_store.set_status(&item.id, transition.target())?;
                    }
                    cycle.summary.push(format!(
                        "{}: verdict {verdict:?}, transitioned via {}",
                        ticket.key,
                        transition.id()
                    ));
                }
                PublishOutcome::Suppressed(layer) => {
                    self.log_event(
                        cycle,
                        "publish_suppressed",
                        json!({ "key": ticket.key, "layer": format!("{layer:?}") }),
                    )?;
                    cycle
                        .summary
                        .push(format!("{}: duplicate suppressed ({layer:?})", ticket.key));
                }
                PublishOutcome::Skipped(_) => {
                    cycle.alerts += 1;
                    self.log_event(cycle, "breaker_open", json!({ "key": ticket.key }))?;
                    break;
                }
                PublishOutcome::Failed(reason) => {
                    cycle.alerts += 1;
                    self.log_event(
                        cycle,
                        "publish_failed",
                        json!({ "key": ticket.key, "reason": reason }),
                    )?;
                    cycle
                        .summary
                        .push(format!("{}: publication failed: {reason}", ticket.key));
                    // An outage mid-publication flips degraded mode; the
                    // ticket stays InProgress and is re-verified on the
                    // next healthy cycle.
                    if reason.contains("unavailable") {
                        self.coordinator.mark_degraded(cycle.lane, self.clock.now())?;
                        self.log_event(cycle, "degraded_entered", json!({}))?;
                    }
                }
            }
        }
        local_store.save(&self.backlog_path())?;
        cycle
            .summary
            .push(format!("published {posted} verdict(s)"));
        Ok(())
    }

    // ---- lane 7: spec review stub -------------------------------------------

    fn lane7_spec_review(&mut self, cycle: &mut Cycle) -> Result<(), EngineError> {
        if !self.is_healthy() {
            return self.note_degraded_skip(cycle, "spec review skipped: tracker unreachable");
        }
        let store = self.load_backlog()?;
        let mut per_family: BTreeMap<&str, usize> = BTreeMap::new();
        for item in store.items() {
            *per_family.entry(item.family.name.as_str()).or_default() += 1;
        }
        for (family, count) in &per_family {
            cycle
                .summary
                .push(format!("family {family}: {count} item(s)"));
        }
        cycle.summary.push(
            "spec completeness analysis is stubbed; coverage counts only".to_string(),
        );
        self.log_event(
            cycle,
            "spec_review_stub",
            json!({ "families": per_family.len(), "items": store.len() }),
        )?;
        Ok(())
    }
}

fn all_tickets() -> Query {
    Query {
        status: None,
        labels: Vec::new(),
        key_prefix: None,
    }
}

/// Pair tracker tickets that no backlog item references with unlinked
/// items whose title matches the ticket summary exactly. Returns the
/// (item id, ticket key) assignments to apply, in store order.
fn adopt_unlinked(
    store: &BacklogStore,
    tickets: &[crate::tracker::TicketRecord],
) -> Vec<(String, String)> {
    let referenced: BTreeSet<&str> = store
        .items()
        .iter()
        .filter_map(|i| i.tracker_key.as_deref())
        .collect();
    let mut free: Vec<&crate::tracker::TicketRecord> = tickets
        .iter()
        .filter(|t| !referenced.contains(t.key.as_str()))
        .collect();
    free.sort_by(|a, b| a.key.cmp(&b.key));
    let mut assignments = Vec::new();
    for item in store.items().iter().filter(|i| i.tracker_key.is_none()) {
        if let Some(pos) = free.iter().position(|t| t.summary == item.title) {
            let ticket = free.remove(pos);
            assignments.push((item.id.clone(), ticket.key.clone()));
        }
    }
    assignments
}

fn apply_payload(
    tracker: &dyn Tracker,
    payload: &IntentPayload,
    run_id: &str,
    now: DateTime<Utc>,
) -> Result<crate::tracker::TicketRecord, TrackerError> {
    match payload {
        IntentPayload::Create {
            summary,
            description,
            labels,
        } => tracker.create(summary, description, labels.clone(), run_id, now),
        IntentPayload::Edit { key, edit } => tracker.edit(key, edit, run_id, now),
        IntentPayload::Comment { key, body } => tracker.comment(key, body, run_id, now),
        IntentPayload::Transition {
            key,
            transition,
            actor,
            expected_from,
            verification_approved,
        } => tracker.transition(
            key,
            *transition,
            *actor,
            *expected_from,
            *verification_approved,
            run_id,
            now,
        ),
    }
}

fn append_line(path: &Path, line: &str) -> Result<(), EngineError> {
    use std::io::Write;
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err)?;
    writeln!(file, "{line}").map_err(io_err)
}

/// Cheap stable string hash for per-run seeding.
fn fxhash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
