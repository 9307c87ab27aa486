//! Centralized TTL locks with PID verification, clock-skew clamping, and
//! race-safe stale-lock clearing, plus the local ticket-claim fallback
//! used while the tracker is unreachable.
//!
//! One JSON file per resource. Creation is atomic-with-content (write a
//! temp file, hard-link it into place), so readers never observe a partial
//! lock. Every removal (release or stale clear) happens under a per-resource
//! advisory latch and re-verifies the file content first, so a racing
//! clearer can never remove a lock that was re-acquired after it last
//! looked. Exactly one contender wins any stale-clear race: the latch
//! serializes removal and the hard-link create admits a single winner.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::age_seconds;

/// Default tolerance for producer clocks running ahead of ours.
pub const DEFAULT_SKEW_TOLERANCE_SECONDS: u64 = 300;

/// A granted lock. Also the exact on-disk JSON shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lock {
    pub resource: String,
    pub owner: String,
    pub pid: u32,
    pub acquired_at: DateTime<Utc>,
    pub ttl_seconds: u64,
}

#[derive(Debug, Error)]
pub enum LockError {
    #[error("resource {resource} is held by {holder}")]
    Contention { resource: String, holder: String },
    #[error("lock not held; stored lock does not match the one presented")]
    NotHeld,
    #[error("lock I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: io::Error,
    },
    #[error("lock file for {resource} is malformed: {source}")]
    Malformed {
        resource: String,
        source: serde_json::Error,
    },
}

/// Answers "does this pid belong to a live process of this system".
/// Pluggable so the simulator can kill processes deterministically.
pub trait LivenessProbe: Send + Sync {
    fn is_alive(&self, pid: u32) -> bool;
}

/// Real probe: a pid is alive when /proc/<pid> exists. Where /proc is not
/// available the probe reports alive; uncertainty must never steal a lock.
pub struct SystemProbe;

impl LivenessProbe for SystemProbe {
    fn is_alive(&self, pid: u32) -> bool {
        if Path::new("/proc").is_dir() {
            Path::new("/proc").join(pid.to_string()).exists()
        } else {
            true
        }
    }
}

/// Test probe with an explicit dead-set.
#[derive(Default)]
pub struct ScriptedProbe {
    dead: RwLock<std::collections::BTreeSet<u32>>,
}

impl ScriptedProbe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mark_dead(&self, pid: u32) {
        self.dead.write().expect("probe poisoned").insert(pid);
    }

    pub fn mark_alive(&self, pid: u32) {
        self.dead.write().expect("probe poisoned").remove(&pid);
    }
}

impl LivenessProbe for ScriptedProbe {
    fn is_alive(&self, pid: u32) -> bool {
        !self.dead.read().expect("probe poisoned").contains(&pid)
    }
}

/// Filesystem lock manager rooted at one locks directory.
pub struct LockManager {
    locks_dir: PathBuf,
    graveyard: PathBuf,
    probe: Arc<dyn LivenessProbe>,
    skew_tolerance_seconds: u64,
    nonce: AtomicU64,
}

impl LockManager {
    pub fn new(
        locks_dir: impl Into<PathBuf>,
        probe: Arc<dyn LivenessProbe>,
        skew_tolerance_seconds: u64,
    ) -> Result<Self, LockError> {
        let locks_dir = locks_dir.into();
        let graveyard = locks_dir.join("graveyard");
        for dir in [&locks_dir, &graveyard] {
            fs::create_dir_all(dir).map_err(|source| LockError::Io {
                path: dir.clone(),
                source,
            })?;
        }
        Ok(LockManager {
            locks_dir,
            graveyard,
            probe,
            skew_tolerance_seconds,
            nonce: AtomicU64::new(0),
        })
    }

    fn lock_path(&self, resource: &str) -> PathBuf {
        self.locks_dir.join(format!("{}.lock", file_stem(resource)))
    }

    fn latch_path(&self, resource: &str) -> PathBuf {
        self.locks_dir.join(format!(".latch.{}", file_stem(resource)))
    }

    fn unique_suffix(&self) -> String {
        format!(
            "{}.{}",
            std::process::id(),
            self.nonce.fetch_add(1, Ordering::Relaxed)
        )
    }

    /// Exclusive advisory latch serializing removals for one resource.
    /// Held only across short local filesystem work, never across a
    /// network call.
    fn removal_latch(&self, resource: &str) -> Result<fs::File, LockError> {
        let path = self.latch_path(resource);
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(false)
            .open(&path)
            .map_err(|source| LockError::Io {
                path: path.clone(),
                source,
            })?;
        file.lock().map_err(|source| LockError::Io { path, source })?;
        Ok(file)
    }

    /// Read the current lock for a resource, if any.
    pub fn read(&self, resource: &str) -> Result<Option<Lock>, LockError> {
        let path = self.lock_path(resource);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|source| LockError::Malformed {
                    resource: resource.to_string(),
                    source,
                }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(LockError::Io { path, source }),
        }
    }

    /// Staleness per the clamped-age rule: a lock is stale iff its clamped
    /// age strictly exceeds its TTL, or its pid is no longer alive.
    /// acquired_at beyond now + tolerance is treated as now (age 0).
    pub fn is_stale(&self, lock: &Lock, now: DateTime<Utc>) -> bool {
        let horizon = now + chrono::Duration::seconds(self.skew_tolerance_seconds as i64);
        let effective_acquired_at = if lock.acquired_at > horizon {
            now
        } else {
            lock.acquired_at
        };
        let age = age_seconds(now, effective_acquired_at);
        age > lock.ttl_seconds || !self.probe.is_alive(lock.pid)
    }

    /// Atomically create the lock file with its full content. Returns
    /// false when the resource is already locked.
    fn try_create(&self, lock: &Lock) -> Result<bool, LockError> {
        let tmp = self
            .locks_dir
            .join(format!(".tmp.{}", self.unique_suffix()));
        let bytes = serde_json::to_vec_pretty(lock).expect("lock serializes");
        fs::write(&tmp, bytes).map_err(|source| LockError::Io {
            path: tmp.clone(),
            source,
        })?;
        let target = self.lock_path(&lock.resource);
        let outcome = match fs::hard_link(&tmp, &target) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Ok(false),
            Err(source) => Err(LockError::Io {
                path: target,
                source,
            }),
        };
        let _ = fs::remove_file(&tmp);
        outcome
    }

    /// Move the current lock file to the graveyard. Caller must hold the
    /// removal latch and must have verified the content it intends to
    /// remove while holding it.
    fn bury(&self, resource: &str) -> Result<(), LockError> {
        let from = self.lock_path(resource);
        let to = self
            .graveyard
            .join(format!("{}.{}", file_stem(resource), self.unique_suffix()));
        fs::rename(&from, &to).map_err(|source| LockError::Io { path: from, source })
    }

    /// Acquire the lock for a resource. Succeeds iff no live lock exists,
    /// or the existing lock is stale and this contender wins the clear
    /// race. One bounded attempt; a held resource reports Contention
    /// immediately, with no waiting on TTL expiry.
    pub fn acquire(
        &self,
        resource: &str,
        owner: &str,
        pid: u32,
        ttl_seconds: u64,
        now: DateTime<Utc>,
    ) -> Result<Lock, LockError> {
        assert!(!resource.is_empty(), "resource key must be non-empty");
        let candidate = Lock {
            resource: resource.to_string(),
            owner: owner.to_string(),
            pid,
            acquired_at: now,
            ttl_seconds,
        };
        if self.try_create(&candidate)? {
            return Ok(candidate);
        }

        // The fast path lost. Judge the incumbent under the removal latch:
        // while the latch is held nobody else can remove the file, and
        // nobody can create over an existing file, so the verdict stays
        // valid until we act on it.
        let latch = self.removal_latch(resource)?;
        let verdict = match self.read(resource)? {
            None => None,
            Some(existing) if self.is_stale(&existing, now) => {
                self.bury(resource)?;
                None
            }
            Some(existing) => Some(existing.owner),
        };
        if let Some(holder) = verdict {
            drop(latch);
            return Err(LockError::Contention {
                resource: resource.to_string(),
                holder,
            });
        }
        // Resource is now free; race the create. Exactly one contender
        // wins; losers see the winner's lock.
        let created = self.try_create(&candidate)?;
        drop(latch);
        if created {
            Ok(candidate)
        } else {
            let holder = self
                .read(resource)?
                .map(|l| l.owner)
                .unwrap_or_else(|| "unknown".to_string());
            Err(LockError::Contention {
                resource: resource.to_string(),
                holder,
            })
        }
    }

    /// Release a previously granted lock. Succeeds iff the stored lock
    /// still matches the presented one (owner, pid, acquired_at). A lock
    /// that was cleared as stale and re-acquired by someone else reports
    /// NotHeld and the caller must abandon its work.
    pub fn release(&self, lock: &Lock) -> Result<(), LockError> {
        let _latch = self.removal_latch(&lock.resource)?;
        match self.read(&lock.resource)? {
            Some(stored)
                if stored.owner == lock.owner
                    && stored.pid == lock.pid
                    && stored.acquired_at == lock.acquired_at =>
            {
                self.bury(&lock.resource)
            }
            _ => Err(LockError::NotHeld),
        }
    }

    /// Clear the lock for a resource iff it is currently stale. Returns
    /// true when a stale lock was removed.
    pub fn clear_stale(&self, resource: &str, now: DateTime<Utc>) -> Result<bool, LockError> {
        let _latch = self.removal_latch(resource)?;
        match self.read(resource)? {
            Some(existing) if self.is_stale(&existing, now) => {
                self.bury(resource)?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    /// Snapshot of every lock currently on disk, in resource order.
    /// Unparseable files are skipped: a half-written temp never carries
    /// the .lock suffix, so anything malformed here is operator damage,
    /// which acquire() handles separately.
    pub fn list(&self) -> Result<Vec<Lock>, LockError> {
        let mut locks = Vec::new();
        let entries = fs::read_dir(&self.locks_dir).map_err(|source| LockError::Io {
            path: self.locks_dir.clone(),
            source,
        })?;
        for entry in entries.flatten() {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("lock") {
                continue;
            }
            if let Ok(bytes) = fs::read(&path) {
                if let Ok(lock) = serde_json::from_slice::<Lock>(&bytes) {
                    locks.push(lock);
                }
            }
        }
        locks.sort_by(|a, b| a.resource.cmp(&b.resource));
        Ok(locks)
    }
}

/// Stable filesystem-safe stem for a resource key. A short content hash
/// keeps distinct keys distinct even after character replacement.
fn file_stem(resource: &str) -> String {
    let safe: String = resource
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let digest = Sha256::digest(resource.as_bytes());
    format!("{}_{:02x}{:02x}{:02x}{:02x}", safe, digest[0], digest[1], digest[2], digest[3])
}

/// Ticket claim map used only while the tracker is unreachable. Plain
/// JSON file; claims are advisory and reconciled during replay.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalTicketLocks {
    pub claims: BTreeMap<String, TicketClaim>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TicketClaim {
    pub owner: String,
    pub acquired_at: DateTime<Utc>,
}

impl LocalTicketLocks {
    pub fn load(path: &Path) -> Result<Self, LockError> {
        match fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|source| LockError::Malformed {
                resource: path.display().to_string(),
                source,
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Self::default()),
            Err(source) => Err(LockError::Io {
                path: path.to_path_buf(),
                source,
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), LockError> {
        let json = serde_json::to_string_pretty(self).expect("claims serialize");
        fs::write(path, json).map_err(|source| LockError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Claim a ticket locally. Idempotent for the same owner; false when
    /// another owner already holds the claim.
    pub fn claim(&mut self, ticket_key: &str, owner: &str, now: DateTime<Utc>) -> bool {
        match self.claims.get(ticket_key) {
            Some(existing) => existing.owner == owner,
            None => {
                self.claims.insert(
                    ticket_key.to_string(),
                    TicketClaim {
                        owner: owner.to_string(),
                        acquired_at: now,
                    },
                );
                true
            }
        }
    }

    pub fn release(&mut self, ticket_key: &str, owner: &str) -> bool {
        match self.claims.get(ticket_key) {
            Some(existing) if existing.owner == owner => {
                self.claims.remove(ticket_key);
                true
            }
            _ => false,
        }
    }
}
