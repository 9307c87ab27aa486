//! Degraded-mode coordinator: connectivity health state, partitioned
//! fallback queues, and the bounded oldest-first drain that replays
//! deferred tracker writes after an outage.
//!
//! Before any tracker write, a lane consults [`DegradedCoordinator::guard_call`].
//! While the tracker is healthy the call proceeds normally. Once any lane
//! observes an outage the deployment flips to DEGRADED, after which write
//! intents from the worker lanes are queued for replay, the read-only
//! lanes leave informational fallback notes, and ticket-claim exclusion
//! continues through a local lock file. The recovery drain replays queued
//! intents oldest-first, at most twenty per run, and flips the status back
//! to HEALTHY only when every queue is empty.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsm::{LaneId, TicketStatus, TransitionId};
use crate::lock::LocalTicketLocks;
use crate::tracker::{RejectReason, TicketEdit, Tracker, TrackerError};

pub const CONNECTIVITY_FILE: &str = "connectivity.json";
pub const REPLAY_NEEDED_FILE: &str = "replay_needed.jsonl";
pub const WRITE_OUTBOX_FILE: &str = "write_outbox.jsonl";
pub const FALLBACK_NOTES_FILE: &str = "fallback_notes.md";

/// Default ceiling on tracker calls consumed by one drain run.
pub const DEFAULT_DRAIN_LIMIT: usize = 20;

#[derive(Debug, Error)]
pub enum DegradedError {
    #[error("tracker still unreachable; drain consumed nothing")]
    ConnectivityStillDown,
    #[error("degraded-state I/O failure: {0}")]
    Io(String),
    #[error("malformed degraded-state record in {path}: {message}")]
    Malformed { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Health {
    #[serde(rename = "HEALTHY")]
    Healthy,
    #[serde(rename = "DEGRADED")]
    Degraded,
}

/// The single connectivity document for a deployment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectivityStatus {
    pub status: Health,
    pub since: DateTime<Utc>,
    pub detected_by: LaneId,
}

/// Durable queue partitions and the fixed lane routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueuePartition {
    /// Worker lanes 3, 4, and 6: full replay after recovery.
    ReplayNeeded,
    /// Read-only lanes 2 and 7 (and the watchdog's own notes):
    /// informational, never replayed as writes.
    FallbackNotes,
    /// Lane 1 intake writes.
    WriteOutbox,
}

pub fn partition_for(lane: LaneId) -> QueuePartition {
    match lane {
        LaneId::Lane3 | LaneId::Lane4 | LaneId::Lane6 => QueuePartition::ReplayNeeded,
        LaneId::Lane1 => QueuePartition::WriteOutbox,
        LaneId::Lane2 | LaneId::Lane5 | LaneId::Lane7 => QueuePartition::FallbackNotes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntentKind {
    Create,
    Edit,
    Comment,
    Transition,
}

/// The arguments of one deferred tracker write.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum IntentPayload {
    Create {
        summary: String,
        description: String,
        labels: BTreeSet<String>,
    },
    Edit {
        key: String,
        edit: TicketEdit,
    },
    Comment {
        key: String,
        body: String,
    },
    Transition {
        key: String,
        transition: TransitionId,
        actor: LaneId,
        expected_from: TicketStatus,
        verification_approved: bool,
    },
}

impl IntentPayload {
    pub fn kind(&self) -> IntentKind {
        match self {
            IntentPayload::Create { .. } => IntentKind::Create,
            IntentPayload::Edit { .. } => IntentKind::Edit,
            IntentPayload::Comment { .. } => IntentKind::Comment,
            IntentPayload::Transition { .. } => IntentKind::Transition,
        }
    }

    /// Ticket key the intent touches, if it targets an existing ticket.
    pub fn key(&self) -> Option<&str> {
        match self {
            IntentPayload::Create { .. } => None,
            IntentPayload::Edit { key, .. }
            | IntentPayload::Comment { key, .. }
            | IntentPayload::Transition { key, .. } => Some(key),
        }
    }
}

/// One queued tracker write awaiting replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuedIntent {
    pub seq: u64,
    pub lane: LaneId,
    pub kind: IntentKind,
    pub payload: IntentPayload,
    pub enqueued_at: DateTime<Utc>,
}

/// guard_call outcome.
#[derive(Debug, Clone, PartialEq)]
pub enum GuardDecision {
    /// Tracker healthy: the caller performs the call directly.
    Proceed,
    /// Deferred to a replay partition.
    Queued(QueuedIntent),
    /// Recorded as an informational fallback note only.
    NotedOnly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClaimOutcome {
    Claimed,
    Contention { holder: String },
}

/// One dropped replay, with the collision that justified the drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedIntent {
    pub seq: u64,
    pub key: String,
    pub reason: String,
}

/// Everything a drain run did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrainReport {
    pub attempted: usize,
    pub replayed: usize,
    pub dropped_collisions: Vec<DroppedIntent>,
    pub remaining: usize,
    pub halted_on: Option<String>,
    pub recovered: bool,
    pub summary: String,
}

/// File-backed coordinator for one deployment's degraded state.
pub struct DegradedCoordinator {
    state_dir: PathBuf,
    next_seq: u64,
}

impl DegradedCoordinator {
    pub fn open(state_dir: &Path) -> Result<Self, DegradedError> {
        fs::create_dir_all(state_dir).map_err(io_err)?;
        let mut coordinator = DegradedCoordinator {
            state_dir: state_dir.to_path_buf(),
            next_seq: 1,
        };
        let max_seq = coordinator
            .load_partition(QueuePartition::ReplayNeeded)?
            .iter()
            .chain(coordinator.load_partition(QueuePartition::WriteOutbox)?.iter())
            .map(|i| i.seq)
            .max()
            .unwrap_or(0);
        coordinator.next_seq = max_seq + 1;
        Ok(coordinator)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.state_dir.join(name)
    }

    /// Current connectivity; a missing document reads as HEALTHY since
    /// genesis.
    pub fn status(&self) -> Result<ConnectivityStatus, DegradedError> {
        let path = self.path(CONNECTIVITY_FILE);
        if !path.exists() {
            return Ok(ConnectivityStatus {
                status: Health::Healthy,
                since: DateTime::<Utc>::UNIX_EPOCH,
                detected_by: LaneId::Lane5,
            });
        }
        let bytes = fs::read(&path).map_err(io_err)?;
        serde_json::from_slice(&bytes).map_err(|e| DegradedError::Malformed {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    fn write_status(&self, status: &ConnectivityStatus) -> Result<(), DegradedError> {
        let path = self.path(CONNECTIVITY_FILE);
        let tmp = self.path(".connectivity.tmp");
        let json = serde_json::to_string_pretty(status).expect("connectivity serializes");
        fs::write(&tmp, json).map_err(io_err)?;
        fs::rename(&tmp, &path).map_err(io_err)?;
        Ok(())
    }

    /// First observation of an outage flips the deployment to DEGRADED.
    /// Later observations keep the original onset time and detector.
    pub fn mark_degraded(&self, lane: LaneId, now: DateTime<Utc>) -> Result<ConnectivityStatus, DegradedError> {
        let current = self.status()?;
        if current.status == Health::Degraded {
            return Ok(current);
        }
        let degraded = ConnectivityStatus {
            status: Health::Degraded,
            since: now,
            detected_by: lane,
        };
        self.write_status(&degraded)?;
        Ok(degraded)
    }

    fn mark_healthy(&self, lane: LaneId, now: DateTime<Utc>) -> Result<(), DegradedError> {
        self.write_status(&ConnectivityStatus {
            status: Health::Healthy,
            since: now,
            detected_by: lane,
        })
    }

    /// Gate one tracker write on connectivity. Never fails: HEALTHY means
    /// the caller proceeds with the real call, DEGRADED means the intent
    /// is queued to the lane's partition or recorded as a fallback note.
    pub fn guard_call(
        &mut self,
        lane: LaneId,
        payload: IntentPayload,
        now: DateTime<Utc>,
    ) -> GuardDecision {
        let healthy = self
            .status()
            .map(|s| s.status == Health::Healthy)
            .unwrap_or(false);
        if healthy {
            return GuardDecision::Proceed;
        }
        match partition_for(lane) {
            QueuePartition::FallbackNotes => {
                // Best-effort: a note failure must not take the lane down.
                let _ = self.append_fallback_note(lane, &payload, now);
                GuardDecision::NotedOnly
            }
            partition => match self.enqueue(partition, lane, payload, now) {
                Ok(intent) => GuardDecision::Queued(intent),
                Err(_) => GuardDecision::NotedOnly,
            },
        }
    }

    fn partition_path(&self, partition: QueuePartition) -> PathBuf {
        match partition {
            QueuePartition::ReplayNeeded => self.path(REPLAY_NEEDED_FILE),
            QueuePartition::WriteOutbox => self.path(WRITE_OUTBOX_FILE),
            QueuePartition::FallbackNotes => self.path(FALLBACK_NOTES_FILE),
        }
    }

    fn enqueue(
        &mut self,
        partition: QueuePartition,
        lane: LaneId,
        payload: IntentPayload,
        now: DateTime<Utc>,
    ) -> Result<QueuedIntent, DegradedError> {
        let intent = QueuedIntent {
            seq: self.next_seq,
            lane,
            kind: payload.kind(),
            payload,
            enqueued_at: now,
        };
        self.next_seq += 1;
        let line = serde_json::to_string(&intent).expect("intent serializes");
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.partition_path(partition))
            .map_err(io_err)?;
        writeln!(file, "{line}").map_err(io_err)?;
        Ok(intent)
    }

    pub fn load_partition(
        &self,
        partition: QueuePartition,
    ) -> Result<Vec<QueuedIntent>, DegradedError> {
        let path = self.partition_path(partition);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(io_err)?;
        let mut intents = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let intent: QueuedIntent =
                serde_json::from_str(line).map_err(|e| DegradedError::Malformed {
                    path: path.display().to_string(),
                    message: format!("line {}: {e}", i + 1),
                })?;
            intents.push(intent);
        }
        Ok(intents)
    }

    fn save_partition(
        &self,
        partition: QueuePartition,
        intents: &[QueuedIntent],
    ) -> Result<(), DegradedError> {
        let mut out = String::new();
        for intent in intents {
            out.push_str(&serde_json::to_string(intent).expect("intent serializes"));
            out.push('\n');
        }
        fs::write(self.partition_path(partition), out).map_err(io_err)
    }

    fn append_fallback_note(
        &self,
        lane: LaneId,
        payload: &IntentPayload,
        now: DateTime<Utc>,
    ) -> Result<(), DegradedError> {
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path(FALLBACK_NOTES_FILE))
            .map_err(io_err)?;
        writeln!(
            file,
            "---\nlane: {lane}\nat: {}\nkind: {:?}\nintent: {}",
            now.to_rfc3339(),
            payload.kind(),
            serde_json::to_string(payload).expect("payload serializes"),
        )
        .map_err(io_err)
    }

    /// Number of informational fallback notes on file (surfaced by the
    /// watchdog digest, never auto-replayed).
    pub fn fallback_note_count(&self) -> Result<usize, DegradedError> {
        let path = self.path(FALLBACK_NOTES_FILE);
        if !path.exists() {
            return Ok(0);
        }
        let text = fs::read_to_string(&path).map_err(io_err)?;
        Ok(text.lines().filter(|l| *l == "---").count())
    }

    /// Collision-protected ticket claim while the tracker is unreachable.
    pub fn degraded_claim(
        &self,
        locks: &mut LocalTicketLocks,
        key: &str,
        owner: &str,
        now: DateTime<Utc>,
    ) -> ClaimOutcome {
        if locks.claim(key, owner, now) {
            ClaimOutcome::Claimed
        } else {
            let holder = locks
                .claims
                .get(key)
                .map(|c| c.owner.clone())
                .unwrap_or_default();
            ClaimOutcome::Contention { holder }
        }
    }

    /// Recovery drain: re-probe connectivity, then replay queued intents
    /// from ReplayNeeded and WriteOutbox merged oldest-first, at most
    /// max_calls of them. A transition replay that loses its
    /// compare-and-set (the ticket moved while we were offline) is
    /// dropped with a logged collision; any other failure halts the drain
    /// with every remaining intent intact. When both queues end empty the
    /// status flips to HEALTHY.
    pub fn drain(
        &mut self,
        tracker: &dyn Tracker,
        sentinel_key: &str,
        max_calls: usize,
        run_id: &str,
        now: DateTime<Utc>,
    ) -> Result<DrainReport, DegradedError> {
        match tracker.get(sentinel_key, now) {
            Ok(_) | Err(TrackerError::UnknownKey { .. }) => {}
            Err(_) => return Err(DegradedError::ConnectivityStillDown),
        }

        let mut replay = self.load_partition(QueuePartition::ReplayNeeded)?;
        let mut outbox = self.load_partition(QueuePartition::WriteOutbox)?;
        let mut merged: Vec<(QueuePartition, QueuedIntent)> = replay
            .iter()
            .cloned()
            .map(|i| (QueuePartition::ReplayNeeded, i))
            .chain(
                outbox
                    .iter()
                    .cloned()
                    .map(|i| (QueuePartition::WriteOutbox, i)),
            )
            .collect();
        merged.sort_by_key(|(_, i)| (i.enqueued_at, i.seq));

        let mut replayed = 0usize;
        let mut attempted = 0usize;
        let mut dropped = Vec::new();
        let mut halted_on = None;

        for (partition, intent) in merged.iter().take(max_calls) {
            attempted += 1;
            let outcome = replay_intent(tracker, intent, run_id, now);
            let consume = match outcome {
                ReplayOutcome::Applied => {
                    replayed += 1;
                    true
                }
                ReplayOutcome::Collision(reason) => {
                    dropped.push(DroppedIntent {
                        seq: intent.seq,
                        key: intent.payload.key().unwrap_or("").to_string(),
                        reason,
                    });
                    true
                }
                ReplayOutcome::Halt(reason) => {
                    halted_on = Some(format!("seq {}: {reason}", intent.seq));
                    false
                }
            };
            if consume {
                match partition {
                    QueuePartition::ReplayNeeded => replay.retain(|i| i.seq != intent.seq),
                    QueuePartition::WriteOutbox => outbox.retain(|i| i.seq != intent.seq),
                    QueuePartition::FallbackNotes => unreachable!("notes are never drained"),
                }
            } else {
                break;
            }
        }

        self.save_partition(QueuePartition::ReplayNeeded, &replay)?;
        self.save_partition(QueuePartition::WriteOutbox, &outbox)?;

        let remaining = replay.len() + outbox.len();
        let recovered = remaining == 0 && halted_on.is_none();
        if recovered {
            self.mark_healthy(LaneId::Lane5, now)?;
        }
        let summary = format!(
            "drain: {replayed} replayed, {} dropped as collisions, {remaining} remaining; status {}",
            dropped.len(),
            if recovered { "HEALTHY" } else { "DEGRADED" },
        );
        Ok(DrainReport {
            attempted,
            replayed,
            dropped_collisions: dropped,
            remaining,
            halted_on,
            recovered,
            summary,
        })
    }
}

enum ReplayOutcome {
    Applied,
    Collision(String),
    Halt(String),
}

fn replay_intent(
    tracker: &dyn Tracker,
    intent: &QueuedIntent,
    run_id: &str,
    now: DateTime<Utc>,
) -> ReplayOutcome {
    let result = match &intent.payload {
        IntentPayload::Create {
            summary,
            description,
            labels,
        } => tracker
            .create(summary, description, labels.clone(), run_id, now)
            .map(|_| ()),
        IntentPayload::Edit { key, edit } => tracker.edit(key, edit, run_id, now).map(|_| ()),
        IntentPayload::Comment { key, body } => {
            tracker.comment(key, body, run_id, now).map(|_| ())
        }
        IntentPayload::Transition {
            key,
            transition,
            actor,
            expected_from,
            verification_approved,
        } => tracker
            .transition(
                key,
                *transition,
                *actor,
                *expected_from,
                *verification_approved,
                run_id,
                now,
            )
            .map(|_| ()),
    };
    match result {
        Ok(()) => ReplayOutcome::Applied,
        Err(TrackerError::TransitionRejected(RejectReason::StatusMismatch {
            expected,
            found,
        })) => ReplayOutcome::Collision(format!(
            "compare-and-set lost while offline: expected {expected:?}, found {found:?}"
        )),
        Err(e) => ReplayOutcome::Halt(e.to_string()),
    }
}

fn io_err(e: std::io::Error) -> DegradedError {
    DegradedError::Io(e.to_string())
}
