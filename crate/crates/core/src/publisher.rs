//! Publication pipeline: three-layer deduplication, a per-run circuit
//! breaker, and receipt-logged posting of comments and status
//! transitions.
//!
//! Dedup layers fire in a fixed order — the in-memory per-run cache, the
//! durable local receipt log, then the ticket's comment history on the
//! tracker itself. The third layer is what survives a lost local log:
//! every posted comment embeds a machine-readable `receipt-digest:` line
//! that later runs can match without any local state.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backlog::hex_string;
use crate::fsm::{LaneId, TicketStatus, TransitionId};
use crate::tracker::{Tracker, TrackerError};

/// Marker line embedded in every posted comment; the comment-history
/// dedup layer matches on it exactly.
pub const RECEIPT_DIGEST_PREFIX: &str = "receipt-digest: ";

pub const RECEIPT_LOG_FILE: &str = "receipt_log.jsonl";

#[derive(Debug, Error)]
pub enum PublishError {
    #[error("receipt log I/O failure: {0}")]
    Io(String),
    #[error("malformed receipt at {path} line {line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
}

/// What a publication wants to do to its ticket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PublishAction {
    Comment,
    Transition(TransitionId),
}

/// One unit of publication work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishItem {
    pub ticket_key: String,
    pub run_id: String,
    pub body: String,
    pub action: PublishAction,
    /// Transition inputs; required when action is Transition.
    pub expected_from: Option<TicketStatus>,
    pub verification_approved: bool,
    pub evidence_permalink: String,
}

impl PublishItem {
    /// Deterministic digest over the payload bytes: ticket, run, action,
    /// and body. Identical payloads dedup across crashes and restarts.
    pub fn content_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.ticket_key.as_bytes());
        hasher.update([0u8]);
        hasher.update(self.run_id.as_bytes());
        hasher.update([0u8]);
        match &self.action {
            PublishAction::Comment => hasher.update(b"comment"),
            PublishAction::Transition(t) => {
                hasher.update(b"transition");
                hasher.update(t.id().to_le_bytes());
            }
        }
        hasher.update([0u8]);
        hasher.update(self.body.as_bytes());
        hex_string(&hasher.finalize())
    }

    fn validate(&self) -> Result<(), String> {
        if self.ticket_key.trim().is_empty() {
            return Err("empty ticket key".into());
        }
        if self.run_id.trim().is_empty() {
            return Err("empty run id".into());
        }
        if matches!(self.action, PublishAction::Transition(_)) && self.expected_from.is_none() {
            return Err("transition without expected_from".into());
        }
        Ok(())
    }
}

/// Verification verdict routed to its lifecycle transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
    NeedsHuman,
}

/// Pass → Done (41). Fail → To Do (11): failed work requeues through
/// grooming, never straight back to In Progress. NeedsHuman → On Hold (31).
pub fn route_outcome(verdict: Verdict) -> TransitionId {
    match verdict {
        Verdict::Pass => TransitionId::Done,
        Verdict::Fail => TransitionId::ToDo,
        Verdict::NeedsHuman => TransitionId::OnHold,
    }
}

/// Proof of one successful post.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub ticket_key: String,
    pub run_id: String,
    pub content_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_id: Option<u16>,
    pub evidence_permalink: String,
    pub posted_at: DateTime<Utc>,
}

/// Which dedup layer suppressed a duplicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DedupLayer {
    PerRunCache,
    ReceiptLog,
    CommentHistory,
}

/// Publication outcome for one item.
#[derive(Debug, Clone, PartialEq)]
pub enum PublishOutcome {
    Posted(Receipt),
    Suppressed(DedupLayer),
    Skipped(CircuitOpen),
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CircuitOpen;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BreakerState {
    Closed,
    Open,
}

/// Opens after `threshold` consecutive failures; any success closes it.
/// Scope is one run — a new run starts with a fresh breaker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CircuitBreaker {
    pub consecutive_failures: u32,
    pub threshold: u32,
}

impl Default for CircuitBreaker {
    fn default() -> Self {
        CircuitBreaker {
            consecutive_failures: 0,
            threshold: 3,
        }
    }
}

impl CircuitBreaker {
    pub fn state(&self) -> BreakerState {
        if self.consecutive_failures >= self.threshold {
            BreakerState::Open
        } else {
            BreakerState::Closed
        }
    }

    fn record_success(&mut self) {
        self.consecutive_failures = 0;
    }

    fn record_failure(&mut self) {
        self.consecutive_failures += 1;
    }
}

/// Append-only receipt log, line-delimited JSON, one file per deployment.
pub struct ReceiptLog {
    path: PathBuf,
    digests: BTreeSet<String>,
}

impl ReceiptLog {
    pub fn open(path: &Path) -> Result<Self, PublishError> {
        let mut digests = BTreeSet::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(io_err)?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let receipt: Receipt =
                    serde_json::from_str(line).map_err(|e| PublishError::Malformed {
                        path: path.display().to_string(),
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                digests.insert(receipt.content_digest);
            }
        }
        Ok(ReceiptLog {
            path: path.to_path_buf(),
            digests,
        })
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.digests.contains(digest)
    }

    pub fn append(&mut self, receipt: &Receipt) -> Result<(), PublishError> {
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io_err)?;
        writeln!(
            file,
            "{}",
            serde_json::to_string(receipt).expect("receipt serializes")
        )
        .map_err(io_err)?;
        self.digests.insert(receipt.content_digest.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.digests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digests.is_empty()
    }
}

/// Publisher for one lane run: owns the per-run cache and breaker, shares
/// the durable receipt log.
pub struct Publisher {
    lane: LaneId,
    run_id: String,
    run_cache: BTreeSet<String>,
    breaker: CircuitBreaker,
    posted: Vec<Receipt>,
}

impl Publisher {
    pub fn new(lane: LaneId, run_id: &str) -> Self {
        Publisher {
            lane,
            run_id: run_id.to_string(),
            run_cache: BTreeSet::new(),
            breaker: CircuitBreaker::default(),
            posted: Vec::new(),
        }
    }

    pub fn breaker_state(&self) -> BreakerState {
        self.breaker.state()
    }

    /// Receipts posted by this publisher so far; items already posted are
    /// kept even when the breaker later opens (salvage semantics).
    pub fn posted(&self) -> &[Receipt] {
        &self.posted
    }

    /// Publish one item through the dedup layers and the breaker.
    ///
    /// Layer order: per-run cache, local receipt log, tracker comment
    /// history. Any hit suppresses the post without a tracker write. An
    /// open breaker skips the item entirely. A post failure (including a
    /// malformed item, which consumes no tracker call) increments the
    /// breaker.
    pub fn publish(
        &mut self,
        item: &PublishItem,
        log: &mut ReceiptLog,
        tracker: &dyn Tracker,
        now: DateTime<Utc>,
    ) -> Result<PublishOutcome, PublishError> {
        if self.breaker.state() == BreakerState::Open {
            return Ok(PublishOutcome::Skipped(CircuitOpen));
        }
        if let Err(reason) = item.validate() {
            self.breaker.record_failure();
            return Ok(PublishOutcome::Failed(format!("malformed item: {reason}")));
        }

        let digest = item.content_digest();
        if self.run_cache.contains(&digest) {
            return Ok(PublishOutcome::Suppressed(DedupLayer::PerRunCache));
        }
        if log.contains(&digest) {
            self.run_cache.insert(digest);
            return Ok(PublishOutcome::Suppressed(DedupLayer::ReceiptLog));
        }
        match comment_history_has(tracker, &item.ticket_key, &digest, now) {
            Ok(true) => {
                self.run_cache.insert(digest);
                return Ok(PublishOutcome::Suppressed(DedupLayer::CommentHistory));
            }
            Ok(false) => {}
            Err(e) => {
                self.breaker.record_failure();
                return Ok(PublishOutcome::Failed(format!(
                    "comment-history probe failed: {e}"
                )));
            }
        }

        match self.post(item, &digest, tracker, now) {
            Ok(receipt) => {
                self.breaker.record_success();
                self.run_cache.insert(digest);
                log.append(&receipt)?;
                self.posted.push(receipt.clone());
                Ok(PublishOutcome::Posted(receipt))
            }
            Err(e) => {
                self.breaker.record_failure();
                Ok(PublishOutcome::Failed(e.to_string()))
            }
        }
    }

    fn post(
        &self,
        item: &PublishItem,
        digest: &str,
        tracker: &dyn Tracker,
        now: DateTime<Utc>,
    ) -> Result<Receipt, TrackerError> {
        let body = format!(
            "{}\n\nevidence: {}\n{RECEIPT_DIGEST_PREFIX}{digest}",
            item.body, item.evidence_permalink
        );
        let transition_id = match &item.action {
            PublishAction::Comment => {
                tracker.comment(&item.ticket_key, &body, &self.run_id, now)?;
                None
            }
            PublishAction::Transition(transition) => {
                tracker.transition(
                    &item.ticket_key,
                    *transition,
                    self.lane,
                    item.expected_from.expect("validated above"),
                    item.verification_approved,
                    &self.run_id,
                    now,
                )?;
                tracker.comment(&item.ticket_key, &body, &self.run_id, now)?;
                Some(transition.id())
            }
        };
        Ok(Receipt {
            ticket_key: item.ticket_key.clone(),
            run_id: self.run_id.clone(),
            content_digest: digest.to_string(),
            transition_id,
            evidence_permalink: item.evidence_permalink.clone(),
            posted_at: now,
        })
    }
}

/// Layer-3 probe: does any comment on the ticket carry this digest line?
fn comment_history_has(
    tracker: &dyn Tracker,
    key: &str,
    digest: &str,
    now: DateTime<Utc>,
) -> Result<bool, TrackerError> {
    let ticket = tracker.get(key, now)?;
    let needle = format!("{RECEIPT_DIGEST_PREFIX}{digest}");
    Ok(ticket
        .comments
        .iter()
        .any(|c| c.body.lines().any(|l| l.trim() == needle)))
}

fn io_err(e: std::io::Error) -> PublishError {
    PublishError::Io(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracker::{FaultProfile, OutageWindow, SimulatedTracker, TicketRecord};
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2026, 3, 2, 10, 0, 0).unwrap()
    }

    fn tracker_with(keys: &[&str]) -> SimulatedTracker {
        let seeds: Vec<TicketRecord> = keys
            .iter()
            .map(|k| TicketRecord {
                key: k.to_string(),
                summary: format!("seed {k}"),
                description: String::new(),
                status: TicketStatus::InProgress,
                labels: BTreeSet::new(),
                comments: vec![],
                transition_log: vec![],
            })
            .collect();
        SimulatedTracker::from_fixture_str(
            "KAN",
            &serde_json::to_string(&seeds).unwrap(),
            FaultProfile::default(),
        )
        .unwrap()
    }

    fn comment_item(key: &str, run: &str, body: &str) -> PublishItem {
        PublishItem {
            ticket_key: key.into(),
            run_id: run.into(),
            body: body.into(),
            action: PublishAction::Comment,
            expected_from: None,
            verification_approved: false,
            evidence_permalink: "run-1/7".into(),
        }
    }

    fn log(dir: &tempfile::TempDir) -> ReceiptLog {
        ReceiptLog::open(&dir.path().join(RECEIPT_LOG_FILE)).unwrap()
    }

    #[test]
    fn route_outcome_mapping() {
        assert_eq!(route_outcome(Verdict::Pass), TransitionId::Done);
        assert_eq!(route_outcome(Verdict::Fail), TransitionId::ToDo);
        assert_eq!(route_outcome(Verdict::NeedsHuman), TransitionId::OnHold);
        assert_eq!(route_outcome(Verdict::Pass).id(), 41);
        assert_eq!(route_outcome(Verdict::Fail).id(), 11);
        assert_eq!(route_outcome(Verdict::NeedsHuman).id(), 31);
    }

    #[test]
    fn content_digest_is_deterministic_and_payload_sensitive() {
        let a = comment_item("KAN-1", "run-1", "verified fix");
        let b = comment_item("KAN-1", "run-1", "verified fix");
        assert_eq!(a.content_digest(), b.content_digest());
        let c = comment_item("KAN-1", "run-1", "verified fix!");
        assert_ne!(a.content_digest(), c.content_digest());
        let d = comment_item("KAN-2", "run-1", "verified fix");
        assert_ne!(a.content_digest(), d.content_digest());
    }

    #[test]
    fn second_identical_post_is_suppressed_by_run_cache() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = log(&dir);
        let tracker = tracker_with(&["KAN-1"]);
        let mut publisher = Publisher::new(LaneId::Lane4, "run-1");

        let item = comment_item("KAN-1", "run-1", "posting once");
        let first = publisher.publish(&item, &mut log, &tracker, t0()).unwrap();
        assert!(matches!(first, PublishOutcome::Posted(_)));
        let second = publisher.publish(&item, &mut log, &tracker, t0()).unwrap();
        assert_eq!(second, PublishOutcome::Suppressed(DedupLayer::PerRunCache));
        assert_eq!(tracker.dump()[0].comments.len(), 1);
    }

    #[test]
    fn receipt_log_suppresses_across_publisher_restarts() {
        let dir = tempfile::tempdir().unwrap();
        let tracker = tracker_with(&["KAN-1"]);
        let item = comment_item("KAN-1", "run-1", "crash survivor");
        {
            let mut log = log(&dir);
            let mut p = Publisher::new(LaneId::Lane4, "run-1");
            assert!(matches!(
                p.publish(&item, &mut log, &tracker, t0()).unwrap(),
                PublishOutcome::Posted(_)
            ));
        }
        // Simulated crash: new publisher, new run cache, same log file.
        let mut log = log(&dir);
        let mut p = Publisher::new(LaneId::Lane4, "run-1");
        let outcome = p.publish(&item, &mut log, &tracker, t0()).unwrap();
        assert_eq!(outcome, PublishOutcome::Suppressed(DedupLayer::ReceiptLog));
        assert_eq!(tracker.dump()[0].comments.len(), 1);
    }

    #[test]
    fn comment_history_suppresses_when_local_log_is_lost() {
        let dir = tempfile::tempdir().unwrap();
        let tracker = tracker_with(&["KAN-1"]);
        let item = comment_item("KAN-1", "run-1", "history survivor");
        {
            let mut log = log(&dir);
            let mut p = Publisher::new(LaneId::Lane4, "run-1");
            assert!(matches!(
                p.publish(&item, &mut log, &tracker, t0()).unwrap(),
                PublishOutcome::Posted(_)
            ));
        }
        // Lose the local log entirely.
        fs::remove_file(dir.path().join(RECEIPT_LOG_FILE)).unwrap();
        let mut log = log(&dir);
        assert!(log.is_empty());
        let mut p = Publisher::new(LaneId::Lane4, "run-1");
        let outcome = p.publish(&item, &mut log, &tracker, t0()).unwrap();
        assert_eq!(
            outcome,
            PublishOutcome::Suppressed(DedupLayer::CommentHistory)
        );
        assert_eq!(tracker.dump()[0].comments.len(), 1);
    }

    #[test]
    fn breaker_opens_after_three_consecutive_failures() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = log(&dir);
        let tracker = tracker_with(&["KAN-1"]);
        // Tracker down for the whole run.
        tracker.set_profile(FaultProfile {
            outage_windows: vec![OutageWindow {
                start: t0(),
                end: t0() + chrono::Duration::hours(5),
            }],
            ..FaultProfile::default()
        });
        let mut p = Publisher::new(LaneId::Lane4, "run-1");

        for n in 0..3 {
            let item = comment_item("KAN-1", "run-1", &format!("attempt {n}"));
            let outcome = p.publish(&item, &mut log, &tracker, t0()).unwrap();
            assert!(matches!(outcome, PublishOutcome::Failed(_)), "attempt {n}");
        }
        assert_eq!(p.breaker_state(), BreakerState::Open);

        let fourth = comment_item("KAN-1", "run-1", "attempt 3");
        assert_eq!(
            p.publish(&fourth, &mut log, &tracker, t0()).unwrap(),
            PublishOutcome::Skipped(CircuitOpen)
        );
        assert!(log.is_empty(), "no receipts while failing");
    }

    #[test]
    fn posted_items_are_salvaged_when_breaker_opens_later() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = log(&dir);
        let tracker = tracker_with(&["KAN-1", "KAN-2"]);
        let mut p = Publisher::new(LaneId::Lane6, "run-1");

        let good = comment_item("KAN-1", "run-1", "verified");
        assert!(matches!(
            p.publish(&good, &mut log, &tracker, t0()).unwrap(),
            PublishOutcome::Posted(_)
        ));

        // Outage begins; three failures open the breaker.
        tracker.set_profile(FaultProfile {
            outage_windows: vec![OutageWindow {
                start: t0() + chrono::Duration::minutes(1),
                end: t0() + chrono::Duration::hours(5),
            }],
            ..FaultProfile::default()
        });
        let later = t0() + chrono::Duration::minutes(2);
        for n in 0..3 {
            let item = comment_item("KAN-2", "run-1", &format!("retry {n}"));
            p.publish(&item, &mut log, &tracker, later).unwrap();
        }
        assert_eq!(p.breaker_state(), BreakerState::Open);
        // The successful post and its receipt survive.
        assert_eq!(p.posted().len(), 1);
        assert_eq!(log.len(), 1);
        assert_eq!(tracker.dump()[0].comments.len(), 1);
    }

    #[test]
    fn malformed_item_counts_as_failure_without_tracker_call() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = log(&dir);
        let tracker = tracker_with(&["KAN-1"]);
        let mut p = Publisher::new(LaneId::Lane4, "run-1");

        let mut bad = comment_item("", "run-1", "no key");
        for _ in 0..3 {
            let outcome = p.publish(&bad, &mut log, &tracker, t0()).unwrap();
            assert!(matches!(outcome, PublishOutcome::Failed(_)));
        }
        assert_eq!(p.breaker_state(), BreakerState::Open);
        assert!(tracker.trace().is_empty(), "no tracker calls were made");

        bad.ticket_key = "KAN-1".into();
        assert_eq!(
            p.publish(&bad, &mut log, &tracker, t0()).unwrap(),
            PublishOutcome::Skipped(CircuitOpen)
        );
    }

    #[test]
    fn success_resets_the_breaker() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = log(&dir);
        let tracker = tracker_with(&["KAN-1"]);
        let mut p = Publisher::new(LaneId::Lane4, "run-1");

        let bad = comment_item("", "run-1", "no key");
        p.publish(&bad, &mut log, &tracker, t0()).unwrap();
        p.publish(&bad, &mut log, &tracker, t0()).unwrap();
        assert_eq!(p.breaker.consecutive_failures, 2);

        let good = comment_item("KAN-1", "run-1", "fine");
        assert!(matches!(
            p.publish(&good, &mut log, &tracker, t0()).unwrap(),
            PublishOutcome::Posted(_)
        ));
        assert_eq!(p.breaker.consecutive_failures, 0);
        assert_eq!(p.breaker_state(), BreakerState::Closed);
    }

    #[test]
    fn transition_posts_receipt_with_transition_id() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = log(&dir);
        let tracker = tracker_with(&["KAN-1"]);
        let mut p = Publisher::new(LaneId::Lane6, "run-1");

        let item = PublishItem {
            ticket_key: "KAN-1".into(),
            run_id: "run-1".into(),
            body: "verification passed".into(),
            action: PublishAction::Transition(TransitionId::Done),
            expected_from: Some(TicketStatus::InProgress),
            verification_approved: true,
            evidence_permalink: "run-1/12".into(),
        };
        match p.publish(&item, &mut log, &tracker, t0()).unwrap() {
            PublishOutcome::Posted(receipt) => {
                assert_eq!(receipt.transition_id, Some(41));
                assert_eq!(receipt.evidence_permalink, "run-1/12");
            }
            other => panic!("expected Posted, got {other:?}"),
        }
        let ticket = tracker.dump().into_iter().find(|t| t.key == "KAN-1").unwrap();
        assert_eq!(ticket.status, TicketStatus::Done);
        assert!(ticket.comments[0]
            .body
            .contains(RECEIPT_DIGEST_PREFIX));
    }

    /// Replay the same stream repeatedly with simulated crashes between
    /// attempts: every (ticket, run, digest) lands at most once.
    #[test]
    fn zero_duplicates_across_crash_and_restart_replays() {
        let dir = tempfile::tempdir().unwrap();
        let tracker = tracker_with(&["KAN-1", "KAN-2", "KAN-3"]);
        let items: Vec<PublishItem> = (0..9)
            .map(|n| comment_item(&format!("KAN-{}", n % 3 + 1), "run-1", &format!("msg {n}")))
            .collect();

        for replay in 0..5 {
            // Each replay is a fresh publisher (crash loses the run
            // cache); odd replays also lose the receipt log.
            if replay % 2 == 1 {
                let _ = fs::remove_file(dir.path().join(RECEIPT_LOG_FILE));
            }
            let mut log = log(&dir);
            let mut p = Publisher::new(LaneId::Lane4, "run-1");
            for item in &items {
                p.publish(item, &mut log, &tracker, t0()).unwrap();
            }
        }

        for ticket in tracker.dump() {
            let mut digests: Vec<String> = ticket
                .comments
                .iter()
                .flat_map(|c| {
                    c.body
                        .lines()
                        .filter(|l| l.starts_with(RECEIPT_DIGEST_PREFIX))
                        .map(str::to_string)
                        .collect::<Vec<_>>()
                })
                .collect();
            let before = digests.len();
            digests.sort();
            digests.dedup();
            assert_eq!(digests.len(), before, "duplicate post on {}", ticket.key);
            assert_eq!(before, 3, "each ticket got exactly its three messages");
        }
    }
}
