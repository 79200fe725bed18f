//! Append-only audit trail and terminal-state notification.
//!
//! Every state transition and identity binding lands in the audit log as
//! one JSON record per line, with a strictly increasing, gap-free sequence
//! number. Records are immutable once written; each append is flushed and
//! synced before the call returns.
//!
//! Replaying a log through the receipt state machine must reproduce every
//! receipt's final state — that is the integrity check the rest of the
//! system leans on, and [`replay`] implements it.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::intake::{transition_allowed, ReceiptState};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub ts: u64,
    pub receipt_id: String,
    /// DN of the acting user, or "system".
    pub actor: String,
    pub event: String,
    pub detail: String,
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit log unwritable: {0}")]
    LogUnwritable(String),
    #[error("bad audit record at line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
    #[error("sequence gap: expected {expected}, found {found}")]
    SequenceGap { expected: u64, found: u64 },
    #[error("illegal replayed transition for receipt {receipt_id}: {from} -> {to}")]
    IllegalReplay {
        receipt_id: String,
        from: String,
        to: String,
    },
}

pub struct AuditLog {
    path: PathBuf,
    file: Mutex<File>,
    next_seq: AtomicU64,
    clock: Box<dyn Fn() -> u64 + Send + Sync>,
}

impl AuditLog {
    pub fn open(path: &Path) -> Result<AuditLog, AuditError> {
        Self::open_with_clock(path, Box::new(wall_clock_ms))
    }

    /// Open with an injected clock for timestamp fields (tests run on
    /// logical time).
    pub fn open_with_clock(
        path: &Path,
        clock: Box<dyn Fn() -> u64 + Send + Sync>,
    ) -> Result<AuditLog, AuditError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| AuditError::LogUnwritable(e.to_string()))?;
        // Resume the sequence after an existing log.
        let last = read_records(path).map(|recs| recs.last().map(|r| r.seq).unwrap_or(0));
        let next = match last {
            Ok(n) => n + 1,
            Err(_) => 1,
        };
        Ok(AuditLog {
            path: path.to_path_buf(),
            file: Mutex::new(file),
            next_seq: AtomicU64::new(next),
            clock,
        })
    }

    /// Append one record, assigning the next sequence number. Errors are
    /// reported but the record content is never partially visible.
    pub fn try_append(
        &self,
        receipt_id: &str,
        actor: &str,
        event: &str,
        detail: &str,
    ) -> Result<AuditRecord, AuditError> {
        let mut file = self.file.lock().unwrap();
        let record = AuditRecord {
            seq: self.next_seq.fetch_add(1, Ordering::SeqCst),
            ts: (self.clock)(),
            receipt_id: receipt_id.to_string(),
            actor: actor.to_string(),
            event: event.to_string(),
            detail: detail.to_string(),
        };
        let line = serde_json::to_string(&record).expect("audit record serializes");
        writeln!(file, "{line}").map_err(|e| AuditError::LogUnwritable(e.to_string()))?;
        file.flush().map_err(|e| AuditError::LogUnwritable(e.to_string()))?;
        let _ = file.sync_data();
        Ok(record)
    }

    /// Append, panicking on an unwritable log. Pipeline call sites use
    /// this: an audit trail that silently loses records is worse than a
    /// halted broker.
    pub fn append(&self, receipt_id: &str, actor: &str, event: &str, detail: &str) -> AuditRecord {
        self.try_append(receipt_id, actor, event, detail)
            .expect("audit log writable")
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> Result<Vec<AuditRecord>, AuditError> {
        read_records(&self.path)
    }
}

fn wall_clock_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn read_records(path: &Path) -> Result<Vec<AuditRecord>, AuditError> {
    let file = File::open(path).map_err(|e| AuditError::LogUnwritable(e.to_string()))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| AuditError::LogUnwritable(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AuditRecord =
            serde_json::from_str(&line).map_err(|e| AuditError::BadRecord {
                line: idx + 1,
                reason: e.to_string(),
            })?;
        out.push(record);
    }
    Ok(out)
}

/// Replay an audit log through the receipt state machine. Verifies that
/// sequence numbers are gap-free starting at 1 and that every transition is
/// legal, then returns each receipt's final state.
pub fn replay(records: &[AuditRecord]) -> Result<BTreeMap<String, ReceiptState>, AuditError> {
    let mut expected = 1u64;
    let mut states: BTreeMap<String, ReceiptState> = BTreeMap::new();
    for record in records {
        if record.seq != expected {
            return Err(AuditError::SequenceGap {
                expected,
                found: record.seq,
            });
        }
        expected += 1;
        if record.event == "transition" {
            let to = ReceiptState::from_name(&record.detail).ok_or_else(|| {
                AuditError::BadRecord {
                    line: record.seq as usize,
                    reason: format!("unknown state {:?}", record.detail),
                }
            })?;
            match states.get(&record.receipt_id) {
                None => {
                    if to != ReceiptState::Queued {
                        return Err(AuditError::IllegalReplay {
                            receipt_id: record.receipt_id.clone(),
                            from: "(none)".into(),
                            to: record.detail.clone(),
                        });
                    }
                    states.insert(record.receipt_id.clone(), to);
                }
                Some(&from) => {
                    if !transition_allowed(from, to) {
                        return Err(AuditError::IllegalReplay {
                            receipt_id: record.receipt_id.clone(),
                            from: from.name().into(),
                            to: record.detail.clone(),
                        });
                    }
                    states.insert(record.receipt_id.clone(), to);
                }
            }
        }
    }
    Ok(states)
}

/// Where terminal-state notifications go. Email in spirit; a sink in
/// practice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NotificationSink {
    File(PathBuf),
    Stdout,
    Null,
}

/// Fires exactly one notification per receipt terminal state. A sink
/// failure is audited and swallowed; it never blocks pipeline completion.
pub struct Notifier {
    sink: NotificationSink,
    notified: Mutex<std::collections::HashSet<String>>,
}

impl Notifier {
    pub fn new(sink: NotificationSink) -> Notifier {
        Notifier {
            sink,
            notified: Mutex::new(std::collections::HashSet::new()),
        }
    }

    /// Notify for a terminal state. Repeat calls for the same receipt are
    /// suppressed. Returns whether a message was emitted.
    pub fn notify(
        &self,
        audit: &AuditLog,
        receipt_id: &str,
        state: ReceiptState,
        location: Option<&str>,
    ) -> bool {
        debug_assert!(state.is_terminal());
        {
            let mut notified = self.notified.lock().unwrap();
            if !notified.insert(receipt_id.to_string()) {
                return false;
            }
        }
        let message = match location {
            Some(loc) => format!("receipt={receipt_id} state={} location={loc}", state.name()),
            None => format!("receipt={receipt_id} state={}", state.name()),
        };
        let delivered = match &self.sink {
            NotificationSink::Null => Ok(()),
            NotificationSink::Stdout => {
                println!("{message}");
                Ok(())
            }
            NotificationSink::File(path) => OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| writeln!(f, "{message}")),
        };
        match delivered {
            Ok(()) => {
                audit.append(receipt_id, "system", "notify", state.name());
                true
            }
            Err(e) => {
                audit.append(receipt_id, "system", "notify-failed", &e.to_string());
                false
            }
        }
    }
}
