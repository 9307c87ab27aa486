//! Declarative failure-mode drills. A scenario file stages an engine
//! (fixture, fault profile, intake documents, lane overrides), runs a
//! scripted sequence of lane cycles and adversarial injections on the
//! virtual clock, then checks a list of assertions against the final
//! state. Each failure mode in the risk matrix ships as one scenario
//! file, so detection and recovery are reproducible on a desk.
//!
//! Scenario files are JSON:
//!
//! ```json
//! {
//!   "name": "claim-collision",
//!   "virtual_start": "2026-03-02T06:00:00Z",
//!   "intake_documents": [{ "name": "backlog.md", "lines": ["- BL-1 :: ..."] }],
//!   "steps": [
//!     { "action": "run_lane", "lane": 1 },
//!     { "action": "foreign_claim", "key": "KAN-1", "agent": "rival" },
//!     { "action": "run_lane", "lane": 4, "at": "2026-03-02T07:00:00Z" }
//!   ],
//!   "assertions": [
//!     { "kind": "transition_count", "key": "KAN-1", "transition_id": 21, "count": 1 }
//!   ]
//! }
//! ```
//!
//! Every step takes an optional `at`; the clock advances to it (never
//! backwards) before the step runs. Steps without `at` run at whatever
//! time the previous step left behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::Deserialize;
use serde_json::json;

use crate::backlog::BacklogStore;
use crate::clock::{Clock, VirtualClock};
use crate::degraded::QueuePartition;
use crate::engine::{Engine, EngineConfig, EngineError};
use crate::evidence::{ChainVerdict, EvidenceChain};
use crate::fix_queue::FixQueue;
use crate::fsm::{LaneId, TicketStatus, TransitionId};
use crate::publisher::{
    route_outcome, PublishAction, PublishItem, PublishOutcome, Publisher, ReceiptLog, Verdict,
    RECEIPT_DIGEST_PREFIX,
};
use crate::scheduler::LaneConfig;
use crate::tracker::{FaultProfile, SimulatedTracker, Tracker};

/// A staged drill: initial conditions, scripted steps, final checks.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub virtual_start: DateTime<Utc>,
    /// Inline tracker fixture: a JSON list of ticket records.
    #[serde(default)]
    pub tracker_fixture: Option<serde_json::Value>,
    #[serde(default)]
    pub fault_profile: Option<FaultProfile>,
    #[serde(default)]
    pub intake_documents: Vec<IntakeDocument>,
    /// Per-lane overrides merged over the default lane configuration.
    #[serde(default)]
    pub lane_config: BTreeMap<LaneId, LaneConfig>,
    #[serde(default)]
    pub alert_injection_rate: f64,
    #[serde(default)]
    pub planner_estimate_minutes: Option<u64>,
    pub steps: Vec<Step>,
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntakeDocument {
    pub name: String,
    pub lines: Vec<String>,
}

/// One scripted action, optionally pinned to a point in virtual time.
#[derive(Debug, Clone, Deserialize)]
pub struct Step {
    #[serde(default)]
    pub at: Option<DateTime<Utc>>,
    #[serde(flatten)]
    pub action: StepAction,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum StepAction {
    /// Run one lane cycle.
    RunLane { lane: u8 },
    /// Advance the clock to this step's `at` and do nothing else.
    Wait {},
    /// Replay queued intents (outside the ops lane's own drain).
    Drain {
        #[serde(default = "default_max_calls")]
        max_calls: usize,
    },
    /// A rival agent claims the ticket (ToDo -> InProgress).
    ForeignClaim { key: String, agent: String },
    /// A rival agent applies an arbitrary transition.
    ForeignTransition {
        key: String,
        transition_id: u16,
        expected_from: TicketStatus,
        agent: String,
    },
    /// A rival agent posts a comment.
    ForeignComment {
        key: String,
        body: String,
        agent: String,
    },
    /// Stage a publisher crash: the verdict transition and receipt
    /// comment land on the tracker, but the receipt log is never
    /// written.
    HalfPublish {
        key: String,
        run_id: String,
        verdict: String,
    },
    /// Re-run the same logical publication (same ticket, run, verdict)
    /// through the full dedup stack, as a restarted process would.
    RepeatPublish {
        key: String,
        run_id: String,
        verdict: String,
    },
    /// Script the simulated executor for one backlog item. The stanza
    /// replaces the item's `sim` entry and takes effect the next time a
    /// fixer worker picks the item up.
    ScriptExecutor {
        item: String,
        script: serde_json::Value,
    },
    /// Revise the planner's per-task duration estimate.
    SetPlannerEstimate { minutes: u64 },
    /// Swap the tracker's fault profile mid-run.
    SetFaultProfile { profile: FaultProfile },
}

fn default_max_calls() -> usize {
    20
}

/// One final-state check.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    /// The tracker ticket ended in this status.
    TicketStatus { key: String, status: TicketStatus },
    /// Exactly `count` tickets ended in this status.
    StatusCount { status: TicketStatus, count: usize },
    /// The event log holds between `min` and `max` entries of this kind.
    EventCount {
        event: String,
        #[serde(default)]
        min: usize,
        #[serde(default)]
        max: Option<usize>,
    },
    /// The ticket's transition log holds exactly `count` entries with
    /// this transition id.
    TransitionCount {
        key: String,
        transition_id: u16,
        count: usize,
    },
    /// The ticket holds exactly `count` comments starting with `prefix`.
    CommentCount {
        key: String,
        prefix: String,
        count: usize,
    },
    /// Every `event` entry's numeric detail field stays at or below
    /// `max`; at least one such event must exist.
    EventDetailMax {
        event: String,
        field: String,
        max: f64,
    },
    /// Watchdog alerts of this category were emitted at least `min`
    /// times.
    AlertCategory { category: String, min: usize },
    /// The evidence chain validates end to end.
    ChainValid {},
    /// Both replayable intent queues are empty.
    DegradedQueuesEmpty {},
    /// Connectivity ended HEALTHY.
    Healthy {},
    /// The receipt log holds exactly `count` receipts.
    ReceiptCount { count: usize },
    /// No files remain under the workspaces directory.
    WorkspacesClean {},
    /// The fix queue is empty.
    FixQueueEmpty {},
    /// Every backlog item carries a tracker key.
    AllItemsLinked {},
    /// Final tracker state (keys, summaries, statuses, labels) matches a
    /// re-run of this scenario with the fault profile removed.
    ParityWithBaseline {},
}

#[derive(Debug, Clone)]
pub struct AssertionOutcome {
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub name: String,
    pub outcomes: Vec<AssertionOutcome>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    /// One line per assertion plus a trailer, for terminal output.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("scenario: {}\n", self.name));
        for o in &self.outcomes {
            if o.passed {
                out.push_str(&format!("  ok   - {}\n", o.description));
            } else {
                out.push_str(&format!("  FAIL - {} ({})\n", o.description, o.detail));
            }
        }
        let failed = self.outcomes.iter().filter(|o| !o.passed).count();
        out.push_str(&format!(
            "result: {} ({} checks, {} failed)\n",
            if failed == 0 { "PASS" } else { "FAIL" },
            self.outcomes.len(),
            failed
        ));
        out
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, EngineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| EngineError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| EngineError::Config(format!("bad scenario {}: {e}", path.display())))
}

/// Stage the engine and run every step. The caller owns where state
/// lives; the directory is created if needed.
pub fn execute(scenario: &Scenario, state_dir: &Path) -> Result<Engine, EngineError> {
    fs::create_dir_all(state_dir)
        .map_err(|e| EngineError::Io(format!("cannot create {}: {e}", state_dir.display())))?;
    let profile = scenario.fault_profile.clone().unwrap_or_default();
    let tracker = Arc::new(match &scenario.tracker_fixture {
        Some(records) => SimulatedTracker::from_fixture_str("KAN", &records.to_string(), profile)?,
        None => SimulatedTracker::new("KAN", profile),
    });
    let clock = VirtualClock::starting_at(scenario.virtual_start);
    let mut config = EngineConfig::new(state_dir);
    config.seed = scenario.seed;
    config.alert_injection_rate = scenario.alert_injection_rate;
    if let Some(minutes) = scenario.planner_estimate_minutes {
        config.t_avg_minutes = minutes;
    }
    for (lane, lane_cfg) in &scenario.lane_config {
        config.lanes.0.insert(*lane, lane_cfg.clone());
    }
    let mut engine = Engine::open(config, tracker, clock)?;
    for doc in &scenario.intake_documents {
        fs::write(engine.intake_dir().join(&doc.name), doc.lines.join("\n"))
            .map_err(|e| EngineError::Io(e.to_string()))?;
    }
    for step in &scenario.steps {
        apply_step(&mut engine, step)?;
    }
    Ok(engine)
}

/// Run a scenario end to end and evaluate its assertions.
pub fn run_scenario(scenario: &Scenario, state_dir: &Path) -> Result<ScenarioReport, EngineError> {
    let engine = execute(scenario, state_dir)?;
    let mut outcomes = Vec::new();
    for assertion in &scenario.assertions {
        outcomes.push(evaluate(&engine, assertion, scenario, state_dir)?);
    }
    Ok(ScenarioReport {
        name: scenario.name.clone(),
        outcomes,
    })
}

fn apply_step(engine: &mut Engine, step: &Step) -> Result<(), EngineError> {
    if let Some(at) = step.at {
        engine.clock().advance_to(at);
    }
    let now = engine.clock().now();
    match &step.action {
        StepAction::RunLane { lane } => {
            let lane = LaneId::from_number(*lane)
                .ok_or_else(|| EngineError::Config(format!("no lane {lane}")))?;
            engine.run_lane(lane)?;
        }
        StepAction::Wait {} => {}
        StepAction::Drain { max_calls } => {
            let _ = engine.drain(*max_calls)?;
        }
        StepAction::ForeignClaim { key, agent } => {
            // A losing claim is an expected race outcome, not a scenario
            // failure: log which way it went and keep going.
            let result = engine.tracker().transition(
                key,
                TransitionId::InProgress,
                LaneId::Lane4,
                TicketStatus::ToDo,
                false,
                agent,
                now,
            );
            let event = match result {
                Ok(_) => "foreign_claim",
                Err(crate::tracker::TrackerError::TransitionRejected(_)) => {
                    "foreign_claim_rejected"
                }
                Err(e) => return Err(e.into()),
            };
            engine.log_external_event(agent, LaneId::Lane4, event, json!({ "key": key }))?;
        }
        StepAction::ForeignTransition {
            key,
            transition_id,
            expected_from,
            agent,
        } => {
            let transition = TransitionId::from_id(*transition_id)
                .ok_or_else(|| EngineError::Config(format!("no transition {transition_id}")))?;
            let result = engine.tracker().transition(
                key,
                transition,
                LaneId::Lane4,
                *expected_from,
                false,
                agent,
                now,
            );
            let event = match result {
                Ok(_) => "foreign_transition",
                Err(crate::tracker::TrackerError::TransitionRejected(_)) => {
                    "foreign_transition_rejected"
                }
                Err(e) => return Err(e.into()),
            };
            engine.log_external_event(
                agent,
                LaneId::Lane4,
                event,
                json!({ "key": key, "transition": transition_id }),
            )?;
        }
        StepAction::ForeignComment { key, body, agent } => {
            engine.tracker().comment(key, body, agent, now)?;
            engine.log_external_event(
                agent,
                LaneId::Lane4,
                "foreign_comment",
                json!({ "key": key }),
            )?;
        }
        StepAction::HalfPublish {
            key,
            run_id,
            verdict,
        } => {
            let verdict = parse_verdict(verdict)?;
            let item = staged_publish_item(key, run_id, verdict);
            let transition = route_outcome(verdict);
            engine.tracker().transition(
                key,
                transition,
                LaneId::Lane6,
                TicketStatus::InProgress,
                verdict == Verdict::Pass,
                run_id,
                now,
            )?;
            let digest = item.content_digest();
            let body = format!(
                "{}\n\nevidence: {}\n{RECEIPT_DIGEST_PREFIX}{digest}",
                item.body, item.evidence_permalink
            );
            engine.tracker().comment(key, &body, run_id, now)?;
            engine.log_external_event(
                run_id,
                LaneId::Lane6,
                "half_publish",
                json!({ "key": key, "digest": digest }),
            )?;
        }
        StepAction::RepeatPublish {
            key,
            run_id,
            verdict,
        } => {
            let verdict = parse_verdict(verdict)?;
            let item = staged_publish_item(key, run_id, verdict);
            let mut log = ReceiptLog::open(&engine.receipt_log_path())?;
            let mut publisher = Publisher::new(LaneId::Lane6, run_id);
            let outcome = publisher.publish(&item, &mut log, engine.tracker().as_ref(), now)?;
            let (event, details) = match &outcome {
                PublishOutcome::Posted(receipt) => {
                    ("published", json!({ "key": key, "digest": receipt.content_digest }))
                }
                PublishOutcome::Suppressed(layer) => (
                    "publish_suppressed",
                    json!({ "key": key, "layer": format!("{layer:?}") }),
                ),
                PublishOutcome::Skipped(_) => ("breaker_open", json!({ "key": key })),
                PublishOutcome::Failed(reason) => {
                    ("publish_failed", json!({ "key": key, "reason": reason }))
                }
            };
            engine.log_external_event(run_id, LaneId::Lane6, event, details)?;
        }
        StepAction::ScriptExecutor { item, script } => {
            let path = engine.backlog_path();
            let store = BacklogStore::load(&path)?;
            let mut items = store.items().to_vec();
            let target = items
                .iter_mut()
                .find(|i| i.id == *item)
                .ok_or_else(|| EngineError::Config(format!("no backlog item {item}")))?;
            target.extra.insert("sim".to_string(), script.clone());
            let mut rebuilt = BacklogStore::new();
            for it in items {
                rebuilt.insert(it)?;
            }
            rebuilt.save(&path)?;
        }
        StepAction::SetPlannerEstimate { minutes } => {
            engine.set_planner_estimate(*minutes);
        }
        StepAction::SetFaultProfile { profile } => {
            engine.tracker().set_profile(profile.clone());
        }
    }
    Ok(())
}

/// The exact publish item the verification lane would build, with a
/// pinned run id so a staged crash and its replay agree byte for byte.
fn staged_publish_item(key: &str, run_id: &str, verdict: Verdict) -> PublishItem {
    let transition = route_outcome(verdict);
    PublishItem {
        ticket_key: key.to_string(),
        run_id: run_id.to_string(),
        body: format!(
            "verification verdict: {verdict:?} -> transition {}",
            transition.id()
        ),
        action: PublishAction::Transition(transition),
        expected_from: Some(TicketStatus::InProgress),
        verification_approved: verdict == Verdict::Pass,
        evidence_permalink: "evidence://chain/staged".to_string(),
    }
}

fn parse_verdict(s: &str) -> Result<Verdict, EngineError> {
    match s {
        "pass" => Ok(Verdict::Pass),
        "fail" => Ok(Verdict::Fail),
        "needs_human" | "needs-human" => Ok(Verdict::NeedsHuman),
        other => Err(EngineError::Config(format!("unknown verdict {other:?}"))),
    }
}

fn evaluate(
    engine: &Engine,
    assertion: &Assertion,
    scenario: &Scenario,
    state_dir: &Path,
) -> Result<AssertionOutcome, EngineError> {
    let ok = |description: String| AssertionOutcome {
        description,
        passed: true,
        detail: String::new(),
    };
    let fail = |description: String, detail: String| AssertionOutcome {
        description,
        passed: false,
        detail,
    };
    Ok(match assertion {
        Assertion::TicketStatus { key, status } => {
            let description = format!("ticket {key} is {status}");
            match engine.tracker().dump().into_iter().find(|t| &t.key == key) {
                Some(t) if t.status == *status => ok(description),
                Some(t) => fail(description, format!("actual status {}", t.status)),
                None => fail(description, "no such ticket".to_string()),
            }
        }
        Assertion::StatusCount { status, count } => {
            let description = format!("{count} ticket(s) in {status}");
            let actual = engine
                .tracker()
                .dump()
                .iter()
                .filter(|t| t.status == *status)
                .count();
            if actual == *count {
                ok(description)
            } else {
                fail(description, format!("actual {actual}"))
            }
        }
        Assertion::EventCount { event, min, max } => {
            let bound = match max {
                Some(max) => format!("between {min} and {max}"),
                None => format!("at least {min}"),
            };
            let description = format!("{bound} {event} event(s)");
            let actual = engine
                .load_events()?
                .iter()
                .filter(|e| &e.event == event)
                .count();
            if actual >= *min && max.map_or(true, |m| actual <= m) {
                ok(description)
            } else {
                fail(description, format!("actual {actual}"))
            }
        }
        Assertion::TransitionCount {
            key,
            transition_id,
            count,
        } => {
            let description = format!("ticket {key} has {count} transition(s) to {transition_id}");
            match engine.tracker().dump().into_iter().find(|t| &t.key == key) {
                Some(t) => {
                    let actual = t
                        .transition_log
                        .iter()
                        .filter(|e| e.transition_id.id() == *transition_id)
                        .count();
                    if actual == *count {
                        ok(description)
                    } else {
                        fail(description, format!("actual {actual}"))
                    }
                }
                None => fail(description, "no such ticket".to_string()),
            }
        }
        Assertion::CommentCount { key, prefix, count } => {
            let description = format!("ticket {key} has {count} comment(s) starting {prefix:?}");
            match engine.tracker().dump().into_iter().find(|t| &t.key == key) {
                Some(t) => {
                    let actual = t
                        .comments
                        .iter()
                        .filter(|c| c.body.starts_with(prefix.as_str()))
                        .count();
                    if actual == *count {
                        ok(description)
                    } else {
                        fail(description, format!("actual {actual}"))
                    }
                }
                None => fail(description, "no such ticket".to_string()),
            }
        }
        Assertion::EventDetailMax { event, field, max } => {
            let description = format!("every {event} event keeps {field} <= {max}");
            let events = engine.load_events()?;
            let values: Vec<f64> = events
                .iter()
                .filter(|e| &e.event == event)
                .filter_map(|e| e.details.get(field).and_then(|v| v.as_f64()))
                .collect();
            if values.is_empty() {
                fail(description, "no such events".to_string())
            } else if values.iter().all(|v| v <= max) {
                ok(description)
            } else {
                let worst = values.iter().cloned().fold(f64::MIN, f64::max);
                fail(description, format!("worst {worst}"))
            }
        }
        Assertion::AlertCategory { category, min } => {
            let description = format!("at least {min} {category} alert(s)");
            let actual = engine
                .load_events()?
                .iter()
                .filter(|e| e.event == "alert_emitted")
                .filter(|e| e.details.get("category").and_then(|v| v.as_str()) == Some(category))
                .count();
            if actual >= *min {
                ok(description)
            } else {
                fail(description, format!("actual {actual}"))
            }
        }
        Assertion::ChainValid {} => {
            let description = "evidence chain validates".to_string();
            let report = EvidenceChain::open(&engine.evidence_path()).validate()?;
            match report.verdict {
                ChainVerdict::Valid => ok(description),
                ChainVerdict::Broken { first_bad_index } => {
                    fail(description, format!("broken at {first_bad_index}"))
                }
            }
        }
        Assertion::DegradedQueuesEmpty {} => {
            let description = "replayable intent queues are empty".to_string();
            let replay = engine
                .coordinator()
                .load_partition(QueuePartition::ReplayNeeded)?
                .len();
            let outbox = engine
                .coordinator()
                .load_partition(QueuePartition::WriteOutbox)?
                .len();
            if replay == 0 && outbox == 0 {
                ok(description)
            } else {
                fail(description, format!("replay {replay}, outbox {outbox}"))
            }
        }
        Assertion::Healthy {} => {
            let description = "connectivity is HEALTHY".to_string();
            let status = engine.connectivity()?;
            if status.status == crate::degraded::Health::Healthy {
                ok(description)
            } else {
                fail(description, format!("still {:?}", status.status))
            }
        }
        Assertion::ReceiptCount { count } => {
            let description = format!("receipt log holds {count} receipt(s)");
            let log = ReceiptLog::open(&engine.receipt_log_path())?;
            if log.len() == *count {
                ok(description)
            } else {
                fail(description, format!("actual {}", log.len()))
            }
        }
        Assertion::WorkspacesClean {} => {
            let description = "no workspace files remain".to_string();
            let files = walkdir::WalkDir::new(engine.config().state_dir.join("workspaces"))
                .into_iter()
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().is_file())
                .count();
            if files == 0 {
                ok(description)
            } else {
                fail(description, format!("{files} file(s) left"))
            }
        }
        Assertion::FixQueueEmpty {} => {
            let description = "fix queue is empty".to_string();
            let path = engine.fix_queue_path();
            let len = if path.exists() {
                FixQueue::load(&path)?.len()
            } else {
                0
            };
            if len == 0 {
                ok(description)
            } else {
                fail(description, format!("{len} record(s) queued"))
            }
        }
        Assertion::AllItemsLinked {} => {
            let description = "every backlog item has a tracker key".to_string();
            let path = engine.backlog_path();
            if !path.exists() {
                return Ok(fail(description, "no backlog store".to_string()));
            }
            let store = crate::backlog::BacklogStore::load(&path)?;
            let unlinked: Vec<&str> = store
                .items()
                .iter()
                .filter(|i| i.tracker_key.is_none())
                .map(|i| i.id.as_str())
                .collect();
            if unlinked.is_empty() {
                ok(description)
            } else {
                fail(description, format!("unlinked: {}", unlinked.join(", ")))
            }
        }
        Assertion::ParityWithBaseline {} => {
            let description = "final tracker state matches the fault-free baseline".to_string();
            let mut baseline = scenario.clone();
            baseline.fault_profile = None;
            baseline
                .steps
                .retain(|s| !matches!(s.action, StepAction::SetFaultProfile { .. }));
            baseline.assertions.clear();
            let baseline_engine = execute(&baseline, &state_dir.join("_baseline"))?;
            let ours = semantic_state(engine);
            let theirs = semantic_state(&baseline_engine);
            if ours == theirs {
                ok(description)
            } else {
                fail(
                    description,
                    format!("{} vs baseline {} tickets, or fields diverge", ours.len(), theirs.len()),
                )
            }
        }
    })
}

/// Semantic tracker state for parity checks: what exists and where it
/// stands, independent of timestamps, run ids, and comment plumbing.
fn semantic_state(engine: &Engine) -> Vec<(String, String, String, Vec<String>)> {
    let mut rows: Vec<_> = engine
        .tracker()
        .dump()
        .into_iter()
        .map(|t| {
            (
                t.key,
                t.summary,
                t.status.to_string(),
                t.labels.into_iter().collect::<Vec<_>>(),
            )
        })
        .collect();
    rows.sort();
    rows
}
