//! Pure transition functions for the pipeline state machine and the
//! ticket status contract, plus the per-lane authority table.
//!
//! Both step functions are deterministic and side-effect free. Atomicity of
//! applying a ticket transition lives in the tracker; this module only
//! answers "is this edge legal".

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pipeline stages S0..S6, terminal Complete, plus the two recovery states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PipelineState {
    S0,
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
    S7Complete,
    Failure,
    Stalled,
}

impl PipelineState {
    pub const ALL: [PipelineState; 10] = [
        PipelineState::S0,
        PipelineState::S1,
        PipelineState::S2,
        PipelineState::S3,
        PipelineState::S4,
        PipelineState::S5,
        PipelineState::S6,
        PipelineState::S7Complete,
        PipelineState::Failure,
        PipelineState::Stalled,
    ];

    fn next_stage(self) -> Option<PipelineState> {
        use PipelineState::*;
        match self {
            S0 => Some(S1),
            S1 => Some(S2),
            S2 => Some(S3),
            S3 => Some(S4),
            S4 => Some(S5),
            S5 => Some(S6),
            S6 => Some(S7Complete),
            _ => None,
        }
    }

    fn is_stage(self) -> bool {
        self.next_stage().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PipelineEvent {
    StageSucceeded,
    GateViolated,
    TimeoutExpired,
    UncaughtException,
    RetryScheduled,
    ManualOverride,
}

impl PipelineEvent {
    pub const ALL: [PipelineEvent; 6] = [
        PipelineEvent::StageSucceeded,
        PipelineEvent::GateViolated,
        PipelineEvent::TimeoutExpired,
        PipelineEvent::UncaughtException,
        PipelineEvent::RetryScheduled,
        PipelineEvent::ManualOverride,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal pipeline transition: {state:?} on {event:?}")]
pub struct IllegalTransition {
    pub state: PipelineState,
    pub event: PipelineEvent,
}

/// Advance the pipeline FSM. Undefined (state, event) pairs are errors,
/// never silently ignored.
pub fn pipeline_step(
    state: PipelineState,
    event: PipelineEvent,
) -> Result<PipelineState, IllegalTransition> {
    use PipelineEvent::*;
    use PipelineState::*;
    match (state, event) {
        (s, StageSucceeded) if s.is_stage() => Ok(s.next_stage().unwrap()),
        (s, GateViolated) | (s, TimeoutExpired) | (s, UncaughtException) if s.is_stage() => {
            Ok(Failure)
        }
        (Failure, RetryScheduled) => Ok(Stalled),
        (Stalled, ManualOverride) => Ok(S0),
        _ => Err(IllegalTransition { state, event }),
    }
}

/// The four-state ticket lifecycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TicketStatus {
    ToDo,
    InProgress,
    OnHold,
    Done,
}

impl fmt::Display for TicketStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TicketStatus::ToDo => "ToDo",
            TicketStatus::InProgress => "InProgress",
            TicketStatus::OnHold => "OnHold",
            TicketStatus::Done => "Done",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TicketStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ToDo" => Ok(TicketStatus::ToDo),
            "InProgress" => Ok(TicketStatus::InProgress),
            "OnHold" => Ok(TicketStatus::OnHold),
            "Done" => Ok(TicketStatus::Done),
            other => Err(format!("unknown ticket status: {other}")),
        }
    }
}

/// Transition identifiers, a fixed bijection onto target statuses:
/// 11 -> ToDo, 21 -> InProgress, 31 -> OnHold, 41 -> Done.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub enum TransitionId {
    ToDo,
    InProgress,
    OnHold,
    Done,
}

impl TransitionId {
    pub fn id(self) -> u16 {
        match self {
            TransitionId::ToDo => 11,
            TransitionId::InProgress => 21,
            TransitionId::OnHold => 31,
            TransitionId::Done => 41,
        }
    }

    pub fn target(self) -> TicketStatus {
        match self {
            TransitionId::ToDo => TicketStatus::ToDo,
            TransitionId::InProgress => TicketStatus::InProgress,
            TransitionId::OnHold => TicketStatus::OnHold,
            TransitionId::Done => TicketStatus::Done,
        }
    }

    pub fn from_id(id: u16) -> Option<Self> {
        match id {
            11 => Some(TransitionId::ToDo),
            21 => Some(TransitionId::InProgress),
            31 => Some(TransitionId::OnHold),
            41 => Some(TransitionId::Done),
            _ => None,
        }
    }
}

impl TryFrom<u16> for TransitionId {
    type Error = String;

    fn try_from(v: u16) -> Result<Self, Self::Error> {
        TransitionId::from_id(v).ok_or_else(|| format!("unknown transition id: {v}"))
    }
}

impl From<TransitionId> for u16 {
    fn from(t: TransitionId) -> u16 {
        t.id()
    }
}

impl fmt::Display for TransitionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

/// The seven automation lanes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LaneId {
    Lane1,
    Lane2,
    Lane3,
    Lane4,
    Lane5,
    Lane6,
    Lane7,
}

impl LaneId {
    pub const ALL: [LaneId; 7] = [
        LaneId::Lane1,
        LaneId::Lane2,
        LaneId::Lane3,
        LaneId::Lane4,
        LaneId::Lane5,
        LaneId::Lane6,
        LaneId::Lane7,
    ];

    pub fn number(self) -> u8 {
        match self {
            LaneId::Lane1 => 1,
            LaneId::Lane2 => 2,
            LaneId::Lane3 => 3,
            LaneId::Lane4 => 4,
            LaneId::Lane5 => 5,
            LaneId::Lane6 => 6,
            LaneId::Lane7 => 7,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        LaneId::ALL.get(n.checked_sub(1)? as usize).copied()
    }
}

impl fmt::Display for LaneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Lane{}", self.number())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ContractViolation {
    #[error("reopen to InProgress is forbidden; failed tickets return to ToDo")]
    ReopenToInProgressForbidden,
    #[error("claim (21) is only legal from ToDo")]
    ClaimFromNonToDo,
    #[error("{lane} is not authorized to run transition {transition} from {from}")]
    UnauthorizedLane {
        lane: LaneId,
        transition: TransitionId,
        from: TicketStatus,
    },
    #[error("transition 41 (Done) requires verification approval")]
    VerificationNotApproved,
}

/// One permitted (from_status, transition) edge for a lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorityEdge {
    pub from: TicketStatus,
    pub transition: TransitionId,
}

/// Per-lane table of permitted transitions, loaded from configuration so
/// scope expansion is an explicit policy change rather than a code edit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AuthorityTable {
    pub lanes: BTreeMap<LaneId, Vec<AuthorityEdge>>,
}

impl AuthorityTable {
    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }

    pub fn permits(&self, lane: LaneId, from: TicketStatus, transition: TransitionId) -> bool {
        self.lanes
            .get(&lane)
            .map(|edges| {
                edges
                    .iter()
                    .any(|e| e.from == from && e.transition == transition)
            })
            .unwrap_or(false)
    }
}

impl Default for AuthorityTable {
    /// Shipped contract. Lane 4 claims from ToDo and may hold or requeue its
    /// own claim; Lane 3 routes ungroomed items to hold; Lane 6 closes,
    /// reopens, and holds tickets under verification. Lane 6 never receives
    /// a (.., InProgress) edge.
    fn default() -> Self {
        use TicketStatus::*;
        use TransitionId as T;
        let edge = |from, transition| AuthorityEdge { from, transition };
        let mut lanes = BTreeMap::new();
        lanes.insert(LaneId::Lane3, vec![edge(ToDo, T::OnHold)]);
        lanes.insert(
            LaneId::Lane4,
            vec![
                edge(ToDo, T::InProgress),
                edge(InProgress, T::OnHold),
                edge(InProgress, T::ToDo),
            ],
        );
        lanes.insert(
            LaneId::Lane6,
            vec![
                edge(InProgress, T::Done),
                edge(InProgress, T::ToDo),
                edge(InProgress, T::OnHold),
                edge(Done, T::ToDo),
            ],
        );
        AuthorityTable { lanes }
    }
}

/// The ticket contract: authority table plus the hard-coded safety rules
/// that no configuration may relax.
#[derive(Debug, Clone, Default)]
pub struct TicketContract {
    pub authority: AuthorityTable,
}

impl TicketContract {
    pub fn new(authority: AuthorityTable) -> Self {
        Self { authority }
    }

    /// Decide one ticket transition. Pure: same inputs, same answer.
    ///
    /// `verification_approved` is the verification-stage approval flag a
    /// Done (41) transition must carry.
    pub fn ticket_step(
        &self,
        status: TicketStatus,
        transition: TransitionId,
        actor: LaneId,
        verification_approved: bool,
    ) -> Result<TicketStatus, ContractViolation> {
        if transition == TransitionId::InProgress {
            // The claim edge. Lane 6 asking for 21 is the contract's one
            // forbidden reopen path; any other non-Lane-4 actor is simply
            // unauthorized.
            if actor == LaneId::Lane6 {
                return Err(ContractViolation::ReopenToInProgressForbidden);
            }
            if actor != LaneId::Lane4 {
                return Err(ContractViolation::UnauthorizedLane {
                    lane: actor,
                    transition,
                    from: status,
                });
            }
            if status != TicketStatus::ToDo {
                return Err(ContractViolation::ClaimFromNonToDo);
            }
        }
        if !self.authority.permits(actor, status, transition) {
            return Err(ContractViolation::UnauthorizedLane {
                lane: actor,
                transition,
                from: status,
            });
        }
        if transition == TransitionId::Done && !verification_approved {
            return Err(ContractViolation::VerificationNotApproved);
        }
        Ok(transition.target())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_advance() {
        assert_eq!(
            pipeline_step(PipelineState::S3, PipelineEvent::StageSucceeded),
            Ok(PipelineState::S4)
        );
        assert_eq!(
            pipeline_step(PipelineState::S6, PipelineEvent::StageSucceeded),
            Ok(PipelineState::S7Complete)
        );
    }

    #[test]
    fn timeout_enters_failure() {
        assert_eq!(
            pipeline_step(PipelineState::S5, PipelineEvent::TimeoutExpired),
            Ok(PipelineState::Failure)
        );
    }

    #[test]
    fn failure_retry_stalls_then_manual_override_restarts() {
        assert_eq!(
            pipeline_step(PipelineState::Failure, PipelineEvent::RetryScheduled),
            Ok(PipelineState::Stalled)
        );
        assert_eq!(
            pipeline_step(PipelineState::Stalled, PipelineEvent::ManualOverride),
            Ok(PipelineState::S0)
        );
    }

    #[test]
    fn undefined_pairs_are_illegal_not_ignored() {
        assert!(pipeline_step(PipelineState::S7Complete, PipelineEvent::StageSucceeded).is_err());
        assert!(pipeline_step(PipelineState::Failure, PipelineEvent::StageSucceeded).is_err());
        assert!(pipeline_step(PipelineState::Stalled, PipelineEvent::RetryScheduled).is_err());
    }

    /// Every reachable Failure has an event path back to S0: exhaustive
    /// search over the finite transition graph.
    #[test]
    fn recovery_liveness_exhaustive() {
        use std::collections::BTreeSet;
        // Forward reachability from S0.
        let mut reachable = BTreeSet::from([PipelineState::S0]);
        loop {
            let mut grew = false;
            for s in reachable.clone() {
                for e in PipelineEvent::ALL {
                    if let Ok(next) = pipeline_step(s, e) {
                        grew |= reachable.insert(next);
                    }
                }
            }
            if !grew {
                break;
            }
        }
        assert!(reachable.contains(&PipelineState::Failure));
        // From every reachable non-terminal state, S0 must be reachable.
        for start in &reachable {
            if *start == PipelineState::S7Complete {
                continue;
            }
            let mut seen = BTreeSet::from([*start]);
            loop {
                let mut grew = false;
                for s in seen.clone() {
                    for e in PipelineEvent::ALL {
                        if let Ok(next) = pipeline_step(s, e) {
                            grew |= seen.insert(next);
                        }
                    }
                }
                if !grew {
                    break;
                }
            }
            assert!(
                seen.contains(&PipelineState::S0),
                "no recovery path from {start:?}"
            );
        }
    }

    #[test]
    fn transition_ids_are_a_bijection() {
        for t in [
            TransitionId::ToDo,
            TransitionId::InProgress,
            TransitionId::OnHold,
            TransitionId::Done,
        ] {
            assert_eq!(TransitionId::from_id(t.id()), Some(t));
        }
        assert_eq!(TransitionId::from_id(12), None);
    }

    #[test]
    fn lane4_claims_from_todo_only() {
        let c = TicketContract::default();
        assert_eq!(
            c.ticket_step(TicketStatus::ToDo, TransitionId::InProgress, LaneId::Lane4, false),
            Ok(TicketStatus::InProgress)
        );
        assert_eq!(
            c.ticket_step(
                TicketStatus::InProgress,
                TransitionId::InProgress,
                LaneId::Lane4,
                false
            ),
            Err(ContractViolation::ClaimFromNonToDo)
        );
    }

    #[test]
    fn lane6_reopens_to_todo_never_to_in_progress() {
        let c = TicketContract::default();
        assert_eq!(
            c.ticket_step(TicketStatus::InProgress, TransitionId::ToDo, LaneId::Lane6, false),
            Ok(TicketStatus::ToDo)
        );
        assert_eq!(
            c.ticket_step(
                TicketStatus::InProgress,
                TransitionId::InProgress,
                LaneId::Lane6,
                false
            ),
            Err(ContractViolation::ReopenToInProgressForbidden)
        );
    }

    #[test]
    fn done_requires_verification_approval() {
        let c = TicketContract::default();
        assert_eq!(
            c.ticket_step(TicketStatus::InProgress, TransitionId::Done, LaneId::Lane6, false),
            Err(ContractViolation::VerificationNotApproved)
        );
        assert_eq!(
            c.ticket_step(TicketStatus::InProgress, TransitionId::Done, LaneId::Lane6, true),
            Ok(TicketStatus::Done)
        );
    }

    #[test]
    fn unauthorized_lane_is_rejected() {
        let c = TicketContract::default();
        assert_eq!(
            c.ticket_step(TicketStatus::ToDo, TransitionId::InProgress, LaneId::Lane2, false),
            Err(ContractViolation::UnauthorizedLane {
                lane: LaneId::Lane2,
                transition: TransitionId::InProgress,
                from: TicketStatus::ToDo,
            })
        );
    }

    #[test]
    fn authority_table_round_trips_json() {
        let table = AuthorityTable::default();
        let json = serde_json::to_string_pretty(&table).unwrap();
        let back = AuthorityTable::from_json(&json).unwrap();
        assert_eq!(table, back);
    }
}
