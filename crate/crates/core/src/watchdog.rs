//! Lane-5 health monitor: ticket-age thresholds, lock staleness, report
//! freshness, connectivity surveillance, and the daily operations digest.
//!
//! The scan is a pure function of consistent snapshots and the clock, so
//! scanning twice at the same instant yields the same alerts, and
//! advancing the clock can only raise severities, never lower them.
//! Stale In Progress tickets are alerted as requeue candidates, not
//! auto-requeued — that decision stays with a human.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, NaiveDate, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::age_seconds;
use crate::degraded::{ConnectivityStatus, Health};
use crate::evidence::{clopper_pearson, EvidenceRecord, TerminalStatus};
use crate::fsm::{LaneId, TicketStatus};
use crate::lock::Lock;
use crate::scheduler::LaneConfigSet;
use crate::tracker::TicketRecord;

#[derive(Debug, Error)]
pub enum WatchdogError {
    #[error("watchdog I/O failure: {0}")]
    Io(String),
    #[error("malformed evaluation-window config: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Severity {
    #[serde(rename = "INFO")]
    Info,
    #[serde(rename = "WARNING")]
    Warning,
    #[serde(rename = "CRITICAL")]
    Critical,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Severity::Info => write!(f, "INFO"),
            Severity::Warning => write!(f, "WARNING"),
            Severity::Critical => write!(f, "CRITICAL"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlertCategory {
    StaleInProgress,
    AgingOnHold,
    StaleLock,
    StaleReport,
    Connectivity,
    DrainStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub severity: Severity,
    pub category: AlertCategory,
    pub subject: String,
    pub age_seconds: u64,
    pub emitted_at: DateTime<Utc>,
}

/// Age thresholds. All comparisons are strict: an In Progress ticket at
/// exactly four hours is not yet alertable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchdogThresholds {
    pub in_progress_warning_seconds: u64,
    pub in_progress_critical_seconds: u64,
    pub on_hold_warning_seconds: u64,
    /// A lane report is stale when older than cadence × this factor.
    pub report_staleness_factor: u32,
}

impl Default for WatchdogThresholds {
    fn default() -> Self {
        WatchdogThresholds {
            in_progress_warning_seconds: 4 * 3600,
            in_progress_critical_seconds: 10 * 3600,
            on_hold_warning_seconds: 48 * 3600,
            report_staleness_factor: 2,
        }
    }
}

/// Consistent snapshots the scan reads.
pub struct ScanInputs<'a> {
    pub tickets: &'a [TicketRecord],
    pub locks: &'a [Lock],
    /// Last report emission per lane; lanes that have never reported are
    /// still bootstrapping and are not flagged.
    pub last_reports: &'a BTreeMap<LaneId, DateTime<Utc>>,
    pub lane_config: &'a LaneConfigSet,
    pub connectivity: &'a ConnectivityStatus,
}

/// When a ticket entered its current status: the newest transition-log
/// entry. Fixture tickets with no log have no measurable status age.
pub fn status_since(ticket: &TicketRecord) -> Option<DateTime<Utc>> {
    ticket.transition_log.last().map(|e| e.at)
}

/// One read-only health scan. Produces a deterministic, sorted alert
/// list; one alert per ticket at its highest earned severity.
pub fn scan(inputs: &ScanInputs<'_>, thresholds: &WatchdogThresholds, now: DateTime<Utc>) -> Vec<Alert> {
    let mut alerts = Vec::new();

    for ticket in inputs.tickets {
        let Some(since) = status_since(ticket) else {
            continue;
        };
        let age = age_seconds(now, since);
        match ticket.status {
            TicketStatus::InProgress => {
                let severity = if age > thresholds.in_progress_critical_seconds {
                    Some(Severity::Critical)
                } else if age > thresholds.in_progress_warning_seconds {
                    Some(Severity::Warning)
                } else {
                    None
                };
                if let Some(severity) = severity {
                    alerts.push(Alert {
                        severity,
                        category: AlertCategory::StaleInProgress,
                        subject: ticket.key.clone(),
                        age_seconds: age,
                        emitted_at: now,
                    });
                }
            }
            TicketStatus::OnHold => {
                if age > thresholds.on_hold_warning_seconds {
                    alerts.push(Alert {
                        severity: Severity::Warning,
                        category: AlertCategory::AgingOnHold,
                        subject: ticket.key.clone(),
                        age_seconds: age,
                        emitted_at: now,
                    });
                }
            }
            _ => {}
        }
    }

    for lock in inputs.locks {
        let age = age_seconds(now, lock.acquired_at);
        if age > lock.ttl_seconds {
            alerts.push(Alert {
                severity: Severity::Warning,
                category: AlertCategory::StaleLock,
                subject: lock.resource.clone(),
                age_seconds: age,
                emitted_at: now,
            });
        }
    }

    for (lane, last) in inputs.last_reports {
        let cadence = inputs.lane_config.get(*lane).cadence_minutes;
        let limit = cadence * 60 * thresholds.report_staleness_factor as u64;
        let age = age_seconds(now, *last);
        if age > limit {
            alerts.push(Alert {
                severity: Severity::Warning,
                category: AlertCategory::StaleReport,
                subject: lane.to_string(),
                age_seconds: age,
                emitted_at: now,
            });
        }
    }

    if inputs.connectivity.status == Health::Degraded {
        alerts.push(Alert {
            severity: Severity::Warning,
            category: AlertCategory::Connectivity,
            subject: format!("degraded since {}", inputs.connectivity.since.to_rfc3339()),
            age_seconds: age_seconds(now, inputs.connectivity.since),
            emitted_at: now,
        });
    }

    alerts.sort_by(|a, b| {
        (a.category, &a.subject, std::cmp::Reverse(a.severity))
            .cmp(&(b.category, &b.subject, std::cmp::Reverse(b.severity)))
    });
    alerts
}

/// Digest cadence control: exactly one digest per virtual day, emitted at
/// the first scan at or after the daily emission time (07:15).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DigestSchedule {
    pub last_emitted_day: Option<NaiveDate>,
}

pub const DIGEST_HOUR: u32 = 7;
pub const DIGEST_MINUTE: u32 = 15;

impl DigestSchedule {
    /// True exactly once per day: the first call at or after 07:15.
    pub fn due(&mut self, now: DateTime<Utc>) -> bool {
        let today = now.date_naive();
        let past_emission_time = (now.hour(), now.minute()) >= (DIGEST_HOUR, DIGEST_MINUTE);
        if past_emission_time && self.last_emitted_day != Some(today) {
            self.last_emitted_day = Some(today);
            true
        } else {
            false
        }
    }
}

/// Evaluation window over which cumulative reliability metrics are
/// reported, read from a small config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationWindowConfig {
    pub start: DateTime<Utc>,
    pub days: u32,
    pub alpha: f64,
}

impl Default for EvaluationWindowConfig {
    fn default() -> Self {
        EvaluationWindowConfig {
            start: DateTime::<Utc>::UNIX_EPOCH,
            days: 84,
            alpha: 0.05,
        }
    }
}

impl EvaluationWindowConfig {
    pub fn load(path: &Path) -> Result<Self, WatchdogError> {
        let bytes = fs::read(path).map_err(|e| WatchdogError::Io(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| WatchdogError::Malformed(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), WatchdogError> {
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, json).map_err(|e| WatchdogError::Io(e.to_string()))
    }

    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        t >= self.start && t < self.start + Duration::days(self.days as i64)
    }
}

/// Cumulative counters over the evaluation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowCounters {
    pub runs: u64,
    pub clean: u64,
    pub degraded: u64,
    pub failed: u64,
    pub success_lower: f64,
    pub success_upper: f64,
}

pub fn window_counters(
    records: &[EvidenceRecord],
    window: &EvaluationWindowConfig,
) -> WindowCounters {
    let mut counters = WindowCounters {
        runs: 0,
        clean: 0,
        degraded: 0,
        failed: 0,
        success_lower: 0.0,
        success_upper: 1.0,
    };
    for record in records.iter().filter(|r| window.contains(r.timestamp)) {
        counters.runs += 1;
        match record.terminal_status {
            TerminalStatus::Clean => counters.clean += 1,
            TerminalStatus::Degraded => counters.degraded += 1,
            TerminalStatus::Failed => counters.failed += 1,
        }
    }
    // DEGRADED runs finished successfully; only FAILED counts against
    // reliability.
    let successes = counters.clean + counters.degraded;
    if counters.runs > 0 {
        if let Ok(estimate) = clopper_pearson(successes, counters.runs, window.alpha) {
            counters.success_lower = estimate.lower;
            counters.success_upper = estimate.upper;
        }
    }
    counters
}

/// Render the daily digest: per-category alert sections, connectivity,
/// fallback-note count, and the evaluation-window counters.
pub fn render_digest(
    now: DateTime<Utc>,
    alerts: &[Alert],
    connectivity: &ConnectivityStatus,
    fallback_notes: usize,
    counters: &WindowCounters,
    window: &EvaluationWindowConfig,
) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# Daily operations digest — {:04}-{:02}-{:02}\n\n",
        now.year(),
        now.month(),
        now.day()
    ));

    out.push_str("## Connectivity\n");
    out.push_str(&format!(
        "- status: {}\n- since: {}\n- fallback notes on file: {fallback_notes}\n\n",
        match connectivity.status {
            Health::Healthy => "HEALTHY",
            Health::Degraded => "DEGRADED",
        },
        connectivity.since.to_rfc3339(),
    ));

    out.push_str(&format!("## Alerts ({})\n", alerts.len()));
    if alerts.is_empty() {
        out.push_str("- none\n");
    } else {
        let mut by_category: BTreeMap<AlertCategory, Vec<&Alert>> = BTreeMap::new();
        for alert in alerts {
            by_category.entry(alert.category).or_default().push(alert);
        }
        for (category, group) in by_category {
            out.push_str(&format!("\n### {category:?} ({})\n", group.len()));
            for alert in group {
                out.push_str(&format!(
                    "- [{}] {} — age {}h{:02}m\n",
                    alert.severity,
                    alert.subject,
                    alert.age_seconds / 3600,
                    (alert.age_seconds % 3600) / 60,
                ));
            }
        }
    }

    out.push_str(&format!(
        "\n## Evaluation window ({} + {} days)\n",
        window.start.to_rfc3339(),
        window.days
    ));
    out.push_str(&format!(
        "- runs: {} (CLEAN {}, DEGRADED {}, FAILED {})\n",
        counters.runs, counters.clean, counters.degraded, counters.failed
    ));
    if counters.runs > 0 {
        out.push_str(&format!(
            "- success interval ({}%): [{:.4}, {:.4}]\n",
            (1.0 - window.alpha) * 100.0,
            counters.success_lower,
            counters.success_upper
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fsm::TransitionId;
    use crate::tracker::TransitionLogEntry;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2026, 3, 2, 0, 0, 0).unwrap()
    }

    fn ticket(key: &str, status: TicketStatus, since: DateTime<Utc>) -> TicketRecord {
        TicketRecord {
            key: key.into(),
            summary: format!("ticket {key}"),
            description: String::new(),
            status,
            labels: Default::default(),
            comments: vec![],
            transition_log: vec![TransitionLogEntry {
                transition_id: TransitionId::InProgress,
                actor: LaneId::Lane4,
                run_id: "run-0".into(),
                at: since,
            }],
        }
    }

    fn healthy() -> ConnectivityStatus {
        ConnectivityStatus {
            status: Health::Healthy,
            since: t0(),
            detected_by: LaneId::Lane5,
        }
    }

    fn scan_tickets(tickets: &[TicketRecord], now: DateTime<Utc>) -> Vec<Alert> {
        let config = LaneConfigSet::default();
        let inputs = ScanInputs {
            tickets,
            locks: &[],
            last_reports: &BTreeMap::new(),
            lane_config: &config,
            connectivity: &healthy(),
        };
        scan(&inputs, &WatchdogThresholds::default(), now)
    }

    #[test]
    fn in_progress_thresholds_are_strict() {
        let since = t0();
        let tickets = vec![ticket("KAN-1", TicketStatus::InProgress, since)];

        // Exactly four hours: no alert.
        assert!(scan_tickets(&tickets, since + Duration::hours(4)).is_empty());
        // Just past four hours: WARNING.
        let alerts = scan_tickets(&tickets, since + Duration::hours(4) + Duration::seconds(1));
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].severity, Severity::Warning);
        assert_eq!(alerts[0].category, AlertCategory::StaleInProgress);
        // Exactly ten hours: still WARNING.
        let alerts = scan_tickets(&tickets, since + Duration::hours(10));
        assert_eq!(alerts[0].severity, Severity::Warning);
        // Eleven hours: one CRITICAL, not two alerts.
        let alerts = scan_tickets(&tickets, since + Duration::hours(11));
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].severity, Severity::Critical);
    }

    #[test]
    fn on_hold_warns_past_forty_eight_hours() {
        let since = t0();
        let tickets = vec![ticket("KAN-2", TicketStatus::OnHold, since)];
        assert!(scan_tickets(&tickets, since + Duration::hours(48)).is_empty());
        let alerts = scan_tickets(&tickets, since + Duration::hours(49));
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].category, AlertCategory::AgingOnHold);
        assert_eq!(alerts[0].severity, Severity::Warning);
    }

    #[test]
    fn done_and_todo_tickets_never_alert() {
        let since = t0();
        let tickets = vec![
            ticket("KAN-3", TicketStatus::Done, since),
            ticket("KAN-4", TicketStatus::ToDo, since),
        ];
        assert!(scan_tickets(&tickets, since + Duration::days(30)).is_empty());
    }

    #[test]
    fn stale_lock_and_stale_report_flagged() {
        let config = LaneConfigSet::default();
        let locks = vec![Lock {
            resource: "lane4".into(),
            owner: "lane4-runner".into(),
            pid: 1234,
            acquired_at: t0(),
            ttl_seconds: 7200,
        }];
        let mut reports = BTreeMap::new();
        // Lane 2 cadence is 120 min; staleness limit is 240 min.
        reports.insert(LaneId::Lane2, t0());
        let inputs = ScanInputs {
            tickets: &[],
            locks: &locks,
            last_reports: &reports,
            lane_config: &config,
            connectivity: &healthy(),
        };
        let thresholds = WatchdogThresholds::default();

        // At exactly TTL: not stale yet (strict >).
        let alerts = scan(&inputs, &thresholds, t0() + Duration::hours(2));
        assert!(alerts.iter().all(|a| a.category != AlertCategory::StaleLock));
        // Past TTL but exactly at the report limit: only the lock fires.
        let alerts = scan(&inputs, &thresholds, t0() + Duration::hours(4));
        assert_eq!(alerts.len(), 1, "only the lock is past due: {alerts:?}");
        assert_eq!(alerts[0].category, AlertCategory::StaleLock);

        let alerts = scan(&inputs, &thresholds, t0() + Duration::hours(5));
        let categories: Vec<AlertCategory> = alerts.iter().map(|a| a.category).collect();
        assert!(categories.contains(&AlertCategory::StaleLock));
        assert!(categories.contains(&AlertCategory::StaleReport));
    }

    #[test]
    fn degraded_connectivity_raises_an_alert() {
        let config = LaneConfigSet::default();
        let degraded = ConnectivityStatus {
            status: Health::Degraded,
            since: t0(),
            detected_by: LaneId::Lane4,
        };
        let inputs = ScanInputs {
            tickets: &[],
            locks: &[],
            last_reports: &BTreeMap::new(),
            lane_config: &config,
            connectivity: &degraded,
        };
        let alerts = scan(&inputs, &WatchdogThresholds::default(), t0() + Duration::hours(1));
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].category, AlertCategory::Connectivity);
    }

    #[test]
    fn scan_is_idempotent_at_fixed_time() {
        let since = t0();
        let tickets = vec![
            ticket("KAN-1", TicketStatus::InProgress, since),
            ticket("KAN-2", TicketStatus::OnHold, since),
            ticket("KAN-3", TicketStatus::InProgress, since + Duration::hours(3)),
        ];
        let now = since + Duration::hours(50);
        assert_eq!(scan_tickets(&tickets, now), scan_tickets(&tickets, now));
    }

    #[test]
    fn digest_fires_once_per_day_at_or_after_0715() {
        let mut schedule = DigestSchedule::default();
        // Watchdog cycles every two hours from midnight.
        let mut fired_today = Vec::new();
        for hour in (0..24).step_by(2) {
            let now = Utc.with_ymd_and_hms(2026, 3, 2, hour, 0, 0).unwrap();
            if schedule.due(now) {
                fired_today.push(hour);
            }
        }
        assert_eq!(fired_today, vec![8], "first cycle at or after 07:15");

        // Next day fires again, exactly once.
        let mut fired_next = 0;
        for hour in (0..24).step_by(2) {
            let now = Utc.with_ymd_and_hms(2026, 3, 3, hour, 0, 0).unwrap();
            if schedule.due(now) {
                fired_next += 1;
            }
        }
        assert_eq!(fired_next, 1);
    }

    #[test]
    fn window_counters_classify_and_bound() {
        let window = EvaluationWindowConfig {
            start: t0(),
            days: 84,
            alpha: 0.05,
        };
        let mut records = Vec::new();
        let dir = tempfile::tempdir().unwrap();
        let chain = crate::evidence::EvidenceChain::open(&dir.path().join("chain.jsonl"));
        for i in 0..10u32 {
            let status = match i % 5 {
                0 => TerminalStatus::Clean,
                4 => TerminalStatus::Failed,
                _ => TerminalStatus::Degraded,
            };
            records.push(
                chain
                    .append_record(crate::evidence::RecordDraft {
                        run_id: format!("run-{i}"),
                        lane: LaneId::Lane5,
                        timestamp: t0() + Duration::hours(i as i64),
                        input_digests: vec![],
                        output_digests: vec![],
                        exception_count: 0,
                        terminal_status: status,
                    })
                    .unwrap(),
            );
        }
        let counters = window_counters(&records, &window);
        assert_eq!(counters.runs, 10);
        assert_eq!(counters.clean, 2);
        assert_eq!(counters.degraded, 6);
        assert_eq!(counters.failed, 2);
        // 8 successes of 10: matches the independent oracle for CP(8, 10).
        assert!(counters.success_lower < 0.8 && counters.success_upper > 0.8);

        let digest = render_digest(
            t0() + Duration::days(1),
            &[],
            &healthy(),
            0,
            &counters,
            &window,
        );
        assert!(digest.contains("CLEAN 2, DEGRADED 6, FAILED 2"));
        assert!(digest.contains("success interval (95%)"));
    }

    proptest! {
        /// For fixed state, advancing the clock never lowers a ticket
        /// alert's severity.
        #[test]
        fn severity_is_monotone_in_time(
            age_hours in 0i64..60,
            advance_hours in 0i64..60,
            on_hold in proptest::bool::ANY,
        ) {
            let since = t0();
            let status = if on_hold { TicketStatus::OnHold } else { TicketStatus::InProgress };
            let tickets = vec![ticket("KAN-1", status, since)];
            let earlier = scan_tickets(&tickets, since + Duration::hours(age_hours));
            let later = scan_tickets(
                &tickets,
                since + Duration::hours(age_hours + advance_hours),
            );
            let rank = |alerts: &[Alert]| alerts.first().map(|a| a.severity);
            prop_assert!(rank(&later) >= rank(&earlier));
        }
    }
}
