//! Tamper-evident evidence chain and reliability statistics.
//!
//! Every lane run appends a hash-linked record: SHA-256 over a canonical
//! serialization of the record's fields plus the previous record's hash,
//! so retroactive modification of any single record is detectable by
//! revalidating the chain. Reliability bounds over run outcomes use the
//! Clopper–Pearson exact interval, with the beta quantile computed by
//! bisection on the regularized incomplete beta function — no statistics
//! dependency.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backlog::hex_string;
use crate::fsm::LaneId;

/// prev_hash of the first record in a chain.
pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

pub const EVIDENCE_CHAIN_FILE: &str = "evidence_chain.jsonl";

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("append refused: chain broken at record {first_bad_index}")]
    AppendRefused { first_bad_index: usize },
    #[error("evidence store I/O failure: {0}")]
    Io(String),
    #[error("malformed evidence record at {path} line {line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("domain error: {0}")]
    DomainError(String),
}

/// How a run ended. DEGRADED means informational alerts were present on
/// an otherwise successful run — it is not a partial failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminalStatus {
    #[serde(rename = "CLEAN")]
    Clean,
    #[serde(rename = "DEGRADED")]
    Degraded,
    #[serde(rename = "FAILED")]
    Failed,
}

/// Classify a finished run: failure dominates; otherwise any
/// informational alert downgrades CLEAN to DEGRADED.
pub fn classify_run(informational_alerts: u32, success: bool) -> TerminalStatus {
    if !success {
        TerminalStatus::Failed
    } else if informational_alerts > 0 {
        TerminalStatus::Degraded
    } else {
        TerminalStatus::Clean
    }
}

/// One hash-linked evidence record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub seq: u64,
    pub run_id: String,
    pub lane: LaneId,
    pub timestamp: DateTime<Utc>,
    pub input_digests: Vec<String>,
    pub output_digests: Vec<String>,
    pub exception_count: u32,
    pub terminal_status: TerminalStatus,
    pub prev_hash: String,
    pub this_hash: String,
}

impl EvidenceRecord {
    /// Relative permalink for receipts and reports: run_id/seq.
    pub fn permalink(&self) -> String {
        format!("{}/{}", self.run_id, self.seq)
    }

    /// Canonical payload the hash covers: every field except this_hash,
    /// serialized as JSON with sorted keys and an RFC 3339 timestamp.
    fn canonical_payload(&self) -> String {
        let mut map = serde_json::Map::new();
        map.insert("exception_count".into(), self.exception_count.into());
        map.insert(
            "input_digests".into(),
            serde_json::to_value(&self.input_digests).expect("digests serialize"),
        );
        map.insert(
            "lane".into(),
            serde_json::to_value(self.lane).expect("lane serializes"),
        );
        map.insert(
            "output_digests".into(),
            serde_json::to_value(&self.output_digests).expect("digests serialize"),
        );
        map.insert("prev_hash".into(), self.prev_hash.clone().into());
        map.insert("run_id".into(), self.run_id.clone().into());
        map.insert("seq".into(), self.seq.into());
        map.insert(
            "terminal_status".into(),
            serde_json::to_value(self.terminal_status).expect("status serializes"),
        );
        map.insert(
            "timestamp".into(),
            self.timestamp
                .to_rfc3339_opts(SecondsFormat::Micros, true)
                .into(),
        );
        serde_json::Value::Object(map).to_string()
    }

    pub fn compute_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_payload().as_bytes());
        hex_string(&hasher.finalize())
    }
}

/// Fields the caller supplies; linkage fields are computed at append.
#[derive(Debug, Clone)]
pub struct RecordDraft {
    pub run_id: String,
    pub lane: LaneId,
    pub timestamp: DateTime<Utc>,
    pub input_digests: Vec<String>,
    pub output_digests: Vec<String>,
    pub exception_count: u32,
    pub terminal_status: TerminalStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainVerdict {
    Valid,
    Broken { first_bad_index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainReport {
    pub verdict: ChainVerdict,
    pub records: usize,
}

/// Recompute every hash and link. Returns the first violated index.
pub fn validate_records(records: &[EvidenceRecord]) -> ChainVerdict {
    let mut prev = GENESIS_HASH.to_string();
    for (i, record) in records.iter().enumerate() {
        if record.seq != i as u64
            || record.prev_hash != prev
            || record.this_hash != record.compute_hash()
        {
            return ChainVerdict::Broken { first_bad_index: i };
        }
        prev = record.this_hash.clone();
    }
    ChainVerdict::Valid
}

/// File-backed chain store: one line-delimited JSON record per line, one
/// continuous chain per deployment state directory. A single appender
/// owns the file for the duration of a run; validators read freely.
pub struct EvidenceChain {
    path: PathBuf,
}

impl EvidenceChain {
    pub fn open(path: &Path) -> Self {
        EvidenceChain {
            path: path.to_path_buf(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn load(&self) -> Result<Vec<EvidenceRecord>, EvidenceError> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&self.path).map_err(io_err)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: EvidenceRecord =
                serde_json::from_str(line).map_err(|e| EvidenceError::Malformed {
                    path: self.path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            records.push(record);
        }
        Ok(records)
    }

    /// Append one record. The whole chain on disk is revalidated first,
    /// so a manual edit anywhere refuses the append and names the first
    /// bad index.
    pub fn append_record(&self, draft: RecordDraft) -> Result<EvidenceRecord, EvidenceError> {
        let records = self.load()?;
        if let ChainVerdict::Broken { first_bad_index } = validate_records(&records) {
            return Err(EvidenceError::AppendRefused { first_bad_index });
        }
        let prev_hash = records
            .last()
            .map(|r| r.this_hash.clone())
            .unwrap_or_else(|| GENESIS_HASH.to_string());
        let mut record = EvidenceRecord {
            seq: records.len() as u64,
            run_id: draft.run_id,
            lane: draft.lane,
            timestamp: draft.timestamp,
            input_digests: draft.input_digests,
            output_digests: draft.output_digests,
            exception_count: draft.exception_count,
            terminal_status: draft.terminal_status,
            prev_hash,
            this_hash: String::new(),
        };
        record.this_hash = record.compute_hash();

        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io_err)?;
        writeln!(
            file,
            "{}",
            serde_json::to_string(&record).expect("record serializes")
        )
        .map_err(io_err)?;
        file.flush().map_err(io_err)?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<ChainReport, EvidenceError> {
        let records = self.load()?;
        Ok(ChainReport {
            verdict: validate_records(&records),
            records: records.len(),
        })
    }
}

/// Clopper–Pearson exact confidence interval over k successes in n
/// trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityEstimate {
    pub k: u64,
    pub n: u64,
    pub alpha: f64,
    pub lower: f64,
    pub upper: f64,
}

/// lower = BetaQuantile(alpha/2; k, n−k+1), zero when k = 0;
/// upper = BetaQuantile(1−alpha/2; k+1, n−k), one when k = n.
pub fn clopper_pearson(k: u64, n: u64, alpha: f64) -> Result<ReliabilityEstimate, EvidenceError> {
    if n == 0 {
        return Err(EvidenceError::DomainError("n must be at least 1".into()));
    }
    if k > n {
        return Err(EvidenceError::DomainError(format!(
            "k ({k}) exceeds n ({n})"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EvidenceError::DomainError(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let kf = k as f64;
    let nf = n as f64;
    let lower = if k == 0 {
        0.0
    } else {
        beta_quantile(alpha / 2.0, kf, nf - kf + 1.0)
    };
    let upper = if k == n {
        1.0
    } else {
        beta_quantile(1.0 - alpha / 2.0, kf + 1.0, nf - kf)
    };
    Ok(ReliabilityEstimate {
        k,
        n,
        alpha,
        lower,
        upper,
    })
}

/// Quantile of Beta(a, b) by bisection on the regularized incomplete
/// beta function.
pub fn beta_quantile(p: f64, a: f64, b: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if regularized_incomplete_beta(a, b, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// I_x(a, b) via the standard continued-fraction evaluation, switching
/// tails for numerical stability.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // Even step.
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation of ln Γ(x) for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn io_err(e: std::io::Error) -> EvidenceError {
    EvidenceError::Io(e.to_string())
}
