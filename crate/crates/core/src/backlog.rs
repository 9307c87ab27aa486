//! Canonical backlog: item model, seven-field intake validation, SHA-1
//! change fingerprinting, and the line-delimited JSON store.
//!
//! The store is the local authoritative record. One JSON object per line,
//! unknown fields preserved on rewrite. Write exclusivity is the lock
//! manager's job, not this module's.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};
use thiserror::Error;

use crate::fsm::TicketStatus;

/// The closed set of backlog families. CERTREQ was eliminated; the loader
/// rejects it by name instead of ignoring it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FamilyName {
    #[serde(rename = "KAN")]
    Kan,
    #[serde(rename = "AUTO-DROP")]
    AutoDrop,
    #[serde(rename = "EMU")]
    Emu,
    #[serde(rename = "AUTO-CERT")]
    AutoCert,
    #[serde(rename = "AUTO-SEC")]
    AutoSec,
    #[serde(rename = "AUTO-OPS")]
    AutoOps,
    #[serde(rename = "AUTO-TECH")]
    AutoTech,
}

impl FamilyName {
    pub fn parse(s: &str) -> Result<Self, BacklogError> {
        match s {
            "KAN" => Ok(FamilyName::Kan),
            "AUTO-DROP" => Ok(FamilyName::AutoDrop),
            "EMU" => Ok(FamilyName::Emu),
            "AUTO-CERT" => Ok(FamilyName::AutoCert),
            "AUTO-SEC" => Ok(FamilyName::AutoSec),
            "AUTO-OPS" => Ok(FamilyName::AutoOps),
            "AUTO-TECH" => Ok(FamilyName::AutoTech),
            "CERTREQ" => Err(BacklogError::CertreqEliminated),
            other => Err(BacklogError::UnknownFamily(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FamilyName::Kan => "KAN",
            FamilyName::AutoDrop => "AUTO-DROP",
            FamilyName::Emu => "EMU",
            FamilyName::AutoCert => "AUTO-CERT",
            FamilyName::AutoSec => "AUTO-SEC",
            FamilyName::AutoOps => "AUTO-OPS",
            FamilyName::AutoTech => "AUTO-TECH",
        }
    }
}

/// Family with its autonomy flag. The flag is configuration loaded at
/// startup, never inferred from item content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Family {
    pub name: FamilyName,
    pub autonomy_authorized: bool,
}

impl Family {
    pub fn new(name: FamilyName, autonomy_authorized: bool) -> Self {
        Self {
            name,
            autonomy_authorized,
        }
    }
}

/// A canonical work item. The seven quality fields (id, title, description,
/// source_ref, tags, priority, owner) are mandatory and non-empty for any
/// item past intake.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacklogItem {
    pub id: String,
    pub title: String,
    pub description: String,
    pub source_ref: String,
    pub tags: BTreeSet<String>,
    pub priority: u8,
    pub owner: String,
    pub family: Family,
    pub status: TicketStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracker_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    /// Fields this version does not know about survive a rewrite.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// SHA-1 fingerprint of one source document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFingerprint {
    pub document_path: String,
    pub digest: String,
    pub observed_at: DateTime<Utc>,
}

pub const QUALITY_FIELDS: [&str; 7] = [
    "id",
    "title",
    "description",
    "source_ref",
    "tags",
    "priority",
    "owner",
];

pub const PRIORITY_MIN: u8 = 1;
pub const PRIORITY_MAX: u8 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("intake validation failed; missing or empty fields: {}", missing_fields.join(", "))]
pub struct ValidationFailure {
    pub missing_fields: Vec<String>,
}

#[derive(Debug, Error)]
pub enum BacklogError {
    #[error("family CERTREQ was eliminated; items must be re-homed to a live family")]
    CertreqEliminated,
    #[error("unknown family: {0}")]
    UnknownFamily(String),
    #[error("duplicate item id in store: {0}")]
    DuplicateId(String),
    #[error("tracker key already assigned for {id}: {existing} (attempted {attempted})")]
    TrackerKeyReassigned {
        id: String,
        existing: String,
        attempted: String,
    },
    #[error("unknown item id: {0}")]
    UnknownId(String),
    #[error("invalid priority {0}: expected {PRIORITY_MIN}..={PRIORITY_MAX}")]
    InvalidPriority(String),
    #[error("store line {line} is not a valid item record: {source}")]
    MalformedRecord {
        line: usize,
        source: serde_json::Error,
    },
    #[error("intake I/O failure on {path}: {source}")]
    IntakeIo {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Validate a parsed intake field-map against the seven-field quality
/// standard. Every missing or empty field is reported; nothing is defaulted.
pub fn validate_item(
    raw: &BTreeMap<String, String>,
    families: &FamilyPolicy,
) -> Result<BacklogItem, ValidationFailure> {
    let mut missing = Vec::new();
    for field in QUALITY_FIELDS {
        match raw.get(field) {
            Some(v) if !v.trim().is_empty() => {}
            _ => missing.push(field.to_string()),
        }
    }
    // Priority must also parse as an ordinal once present.
    let priority = raw
        .get("priority")
        .and_then(|p| p.trim().parse::<u8>().ok())
        .filter(|p| (PRIORITY_MIN..=PRIORITY_MAX).contains(p));
    if raw.get("priority").map(|p| !p.trim().is_empty()) == Some(true) && priority.is_none() {
        missing.push("priority".to_string());
    }
    if !missing.is_empty() {
        missing.dedup();
        return Err(ValidationFailure {
            missing_fields: missing,
        });
    }

    let tags: BTreeSet<String> = raw["tags"]
        .split(',')
        .map(|t| t.trim().to_lowercase())
        .filter(|t| !t.is_empty())
        .collect();
    if tags.is_empty() {
        return Err(ValidationFailure {
            missing_fields: vec!["tags".to_string()],
        });
    }

    let family_name = match raw.get("family") {
        Some(f) if !f.trim().is_empty() => match FamilyName::parse(f.trim()) {
            Ok(name) => name,
            // A named-but-invalid family is an intake defect, surfaced on
            // the family field.
            Err(_) => {
                return Err(ValidationFailure {
                    missing_fields: vec!["family".to_string()],
                })
            }
        },
        _ => FamilyName::Kan,
    };

    Ok(BacklogItem {
        id: raw["id"].trim().to_string(),
        title: raw["title"].trim().to_string(),
        description: raw["description"].trim().to_string(),
        source_ref: raw["source_ref"].trim().to_string(),
        tags,
        priority: priority.unwrap(),
        owner: raw["owner"].trim().to_string(),
        family: families.family(family_name),
        status: TicketStatus::ToDo,
        tracker_key: None,
        confidence: None,
        extra: BTreeMap::new(),
    })
}

/// Which families are authorized for autonomous action. Pure configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyPolicy {
    pub autonomy_authorized: BTreeSet<FamilyName>,
}

impl FamilyPolicy {
    pub fn family(&self, name: FamilyName) -> Family {
        Family::new(name, self.autonomy_authorized.contains(&name))
    }
}

impl Default for FamilyPolicy {
    fn default() -> Self {
        FamilyPolicy {
            autonomy_authorized: BTreeSet::from([FamilyName::AutoSec]),
        }
    }
}

/// Deterministic digest of raw document bytes. Re-reading unchanged bytes
/// yields an equal digest, which is what makes intake idempotent.
pub fn sha1_hex(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(bytes);
    hex_string(&h.finalize())
}

pub fn fingerprint(
    document_path: &str,
    document_bytes: &[u8],
    observed_at: DateTime<Utc>,
) -> SourceFingerprint {
    SourceFingerprint {
        document_path: document_path.to_string(),
        digest: sha1_hex(document_bytes),
        observed_at,
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Fingerprint ledger: document path -> last seen digest. Drives the
/// idempotent-intake gate.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IntakeLedger {
    pub seen: BTreeMap<String, String>,
}

impl IntakeLedger {
    pub fn load(path: &Path) -> Result<Self, BacklogError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let bytes = fs::read(path).map_err(|source| BacklogError::IntakeIo {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|source| BacklogError::MalformedRecord {
            line: 0,
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), BacklogError> {
        let json = serde_json::to_string_pretty(self).expect("ledger serializes");
        fs::write(path, json).map_err(|source| BacklogError::IntakeIo {
            path: path.to_path_buf(),
            source,
        })
    }

    /// True when the document is new or its bytes changed since last intake.
    pub fn is_dirty(&self, fp: &SourceFingerprint) -> bool {
        self.seen.get(&fp.document_path) != Some(&fp.digest)
    }

    pub fn record(&mut self, fp: &SourceFingerprint) {
        self.seen
            .insert(fp.document_path.clone(), fp.digest.clone());
    }
}

/// Line-delimited JSON backlog store. Append-friendly and diff-friendly;
/// ids are unique; tracker keys are write-once.
#[derive(Debug, Default)]
pub struct BacklogStore {
    items: Vec<BacklogItem>,
    index: BTreeMap<String, usize>,
}

impl BacklogStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, BacklogError> {
        let mut store = Self::new();
        if !path.exists() {
            return Ok(store);
        }
        let text = fs::read_to_string(path).map_err(|source| BacklogError::IntakeIo {
            path: path.to_path_buf(),
            source,
        })?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            // Family names are validated before full deserialization so a
            // CERTREQ row fails by name, not as a generic parse error.
            let probe: serde_json::Value =
                serde_json::from_str(line).map_err(|source| BacklogError::MalformedRecord {
                    line: i + 1,
                    source,
                })?;
            if let Some(name) = probe
                .get("family")
                .and_then(|f| f.get("name"))
                .and_then(|n| n.as_str())
            {
                FamilyName::parse(name)?;
            }
            let item: BacklogItem =
                serde_json::from_str(line).map_err(|source| BacklogError::MalformedRecord {
                    line: i + 1,
                    source,
                })?;
            store.insert(item)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), BacklogError> {
        let mut out = Vec::new();
        for item in &self.items {
            serde_json::to_writer(&mut out, item).expect("item serializes");
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|source| BacklogError::IntakeIo {
            path: path.to_path_buf(),
            source,
        })?;
        f.write_all(&out).map_err(|source| BacklogError::IntakeIo {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn insert(&mut self, item: BacklogItem) -> Result<(), BacklogError> {
        if self.index.contains_key(&item.id) {
            return Err(BacklogError::DuplicateId(item.id));
        }
        self.index.insert(item.id.clone(), self.items.len());
        self.items.push(item);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&BacklogItem> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn items(&self) -> &[BacklogItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Assign a tracker key. Once assigned it never changes.
    pub fn assign_tracker_key(&mut self, id: &str, key: &str) -> Result<(), BacklogError> {
        let idx = *self
            .index
            .get(id)
            .ok_or_else(|| BacklogError::UnknownId(id.to_string()))?;
        let item = &mut self.items[idx];
        match &item.tracker_key {
            Some(existing) if existing != key => Err(BacklogError::TrackerKeyReassigned {
                id: id.to_string(),
                existing: existing.clone(),
                attempted: key.to_string(),
            }),
            _ => {
                item.tracker_key = Some(key.to_string());
                Ok(())
            }
        }
    }

    pub fn set_status(&mut self, id: &str, status: TicketStatus) -> Result<(), BacklogError> {
        let idx = *self
            .index
            .get(id)
            .ok_or_else(|| BacklogError::UnknownId(id.to_string()))?;
        self.items[idx].status = status;
        Ok(())
    }

    pub fn set_confidence(&mut self, id: &str, confidence: f64) -> Result<(), BacklogError> {
        let idx = *self
            .index
            .get(id)
            .ok_or_else(|| BacklogError::UnknownId(id.to_string()))?;
        self.items[idx].confidence = Some(confidence);
        Ok(())
    }
}

/// Parse one intake line record into a field-map.
///
/// Supported shapes are plain-text and Markdown-like bullet lines with
/// `::`-separated fields in quality-field order:
///
/// ```text
/// - id :: title :: description :: source_ref :: tag1,tag2 :: 3 :: owner
/// ```
///
/// An optional eighth field names the family.
pub fn parse_line_record(line: &str) -> BTreeMap<String, String> {
    let body = line
        .trim()
        .strip_prefix("- ")
        .or_else(|| line.trim().strip_prefix("* "))
        .unwrap_or(line.trim());
    let parts: Vec<&str> = body.split("::").map(str::trim).collect();
    let mut map = BTreeMap::new();
    let names = [
        "id",
        "title",
        "description",
        "source_ref",
        "tags",
        "priority",
        "owner",
        "family",
    ];
    for (name, value) in names.iter().zip(parts.iter()) {
        map.insert(name.to_string(), value.to_string());
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_map() -> BTreeMap<String, String> {
        BTreeMap::from(
            [
                ("id", "BL-001"),
                ("title", "Harden token storage"),
                ("description", "Move tokens out of local storage"),
                ("source_ref", "docs/security.md#L10"),
                ("tags", "auth,Security"),
                ("priority", "3"),
                ("owner", "platform"),
            ]
            .map(|(k, v)| (k.to_string(), v.to_string())),
        )
    }

    #[test]
    fn complete_input_validates() {
        let item = validate_item(&full_map(), &FamilyPolicy::default()).unwrap();
        assert_eq!(item.id, "BL-001");
        assert_eq!(item.priority, 3);
        assert_eq!(item.status, TicketStatus::ToDo);
        // tags are lowercased tokens
        assert!(item.tags.contains("security"));
        assert_eq!(item.family.name, FamilyName::Kan);
    }

    #[test]
    fn single_missing_field_is_named() {
        let mut raw = full_map();
        raw.remove("owner");
        let err = validate_item(&raw, &FamilyPolicy::default()).unwrap_err();
        assert_eq!(err.missing_fields, vec!["owner".to_string()]);
    }

    #[test]
    fn empty_map_lists_all_seven() {
        let err = validate_item(&BTreeMap::new(), &FamilyPolicy::default()).unwrap_err();
        assert_eq!(err.missing_fields.len(), 7);
        for f in QUALITY_FIELDS {
            assert!(err.missing_fields.contains(&f.to_string()), "missing {f}");
        }
    }

    #[test]
    fn whitespace_only_field_counts_as_missing() {
        let mut raw = full_map();
        raw.insert("title".into(), "   ".into());
        let err = validate_item(&raw, &FamilyPolicy::default()).unwrap_err();
        assert_eq!(err.missing_fields, vec!["title".to_string()]);
    }

    #[test]
    fn out_of_range_priority_rejected() {
        let mut raw = full_map();
        raw.insert("priority".into(), "9".into());
        let err = validate_item(&raw, &FamilyPolicy::default()).unwrap_err();
        assert_eq!(err.missing_fields, vec!["priority".to_string()]);
    }

    #[test]
    fn certreq_family_rejected_by_name() {
        assert!(matches!(
            FamilyName::parse("CERTREQ"),
            Err(BacklogError::CertreqEliminated)
        ));
        let mut raw = full_map();
        raw.insert("family".into(), "CERTREQ".into());
        assert!(validate_item(&raw, &FamilyPolicy::default()).is_err());
    }

    #[test]
    fn sha1_of_empty_input_matches_standard_vector() {
        assert_eq!(sha1_hex(b""), "da39a3ee5e6b4b0d3255bfef95601890afd80709");
    }

    #[test]
    fn sha1_is_deterministic() {
        let doc = b"item record line one\nitem record line two\n";
        assert_eq!(sha1_hex(doc), sha1_hex(doc));
    }

    /// Expected digests computed with an independent SHA-1 implementation
    /// before this module was written.
    #[test]
    fn one_byte_change_flips_digest() {
        let doc = b"item record line one\nitem record line two\n";
        let doc_changed = b"item record line one\nitem record line Two\n";
        assert_eq!(sha1_hex(doc), "e1113d3a5b637ad60b8db3a29d8060ba5cf17314");
        assert_eq!(
            sha1_hex(doc_changed),
            "0c4df2663bf08f56a5c2c12accc246e6a017bba7"
        );
        assert_ne!(sha1_hex(doc), sha1_hex(doc_changed));
    }

    #[test]
    fn ledger_gate_is_idempotent() {
        let mut ledger = IntakeLedger::default();
        let t = Utc::now();
        let fp = fingerprint("docs/a.md", b"alpha", t);
        assert!(ledger.is_dirty(&fp));
        ledger.record(&fp);
        assert!(!ledger.is_dirty(&fp));
        let fp2 = fingerprint("docs/a.md", b"alpha beta", t);
        assert!(ledger.is_dirty(&fp2));
    }

    #[test]
    fn store_rejects_duplicate_ids() {
        let mut store = BacklogStore::new();
        let item = validate_item(&full_map(), &FamilyPolicy::default()).unwrap();
        store.insert(item.clone()).unwrap();
        assert!(matches!(
            store.insert(item),
            Err(BacklogError::DuplicateId(_))
        ));
    }

    #[test]
    fn tracker_key_is_write_once() {
        let mut store = BacklogStore::new();
        store
            .insert(validate_item(&full_map(), &FamilyPolicy::default()).unwrap())
            .unwrap();
        store.assign_tracker_key("BL-001", "KAN-7").unwrap();
        // idempotent re-assign of the same key is fine
        store.assign_tracker_key("BL-001", "KAN-7").unwrap();
        assert!(store.assign_tracker_key("BL-001", "KAN-8").is_err());
    }

    #[test]
    fn store_round_trip_preserves_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backlog.jsonl");
        let mut item = validate_item(&full_map(), &FamilyPolicy::default()).unwrap();
        item.extra
            .insert("legacy_field".into(), serde_json::json!({"keep": true}));
        let mut store = BacklogStore::new();
        store.insert(item).unwrap();
        store.save(&path).unwrap();

        let reloaded = BacklogStore::load(&path).unwrap();
        reloaded.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("legacy_field"), "unknown field dropped");
    }

    #[test]
    fn loader_rejects_certreq_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backlog.jsonl");
        let row = r#"{"id":"X","title":"t","description":"d","source_ref":"s","tags":["a"],"priority":1,"owner":"o","family":{"name":"CERTREQ","autonomy_authorized":false},"status":"ToDo"}"#;
        fs::write(&path, format!("{row}\n")).unwrap();
        assert!(matches!(
            BacklogStore::load(&path),
            Err(BacklogError::CertreqEliminated)
        ));
    }

    #[test]
    fn line_record_parser_maps_fields_in_order() {
        let map =
            parse_line_record("- BL-2 :: Title here :: Desc :: doc.md#L3 :: a,b :: 2 :: ops");
        assert_eq!(map["id"], "BL-2");
        assert_eq!(map["owner"], "ops");
        assert!(validate_item(&map, &FamilyPolicy::default()).is_ok());
    }
}
