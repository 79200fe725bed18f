//! Content-addressed cache of completed extractions.
//!
//! Entries are keyed by the canonical request key and live under
//! `<root>/<first two hex>/<key>/` next to an `entry` metadata file.
//! Admission is single-flight: concurrent callers asking for the same key
//! produce exactly one extraction; the rest block and observe the
//! committed entry. Eviction is LRU by last hit under a byte budget, and
//! an entry currently being served is never evicted.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};

use thiserror::Error;

use crate::request::RequestKey;

pub const DEFAULT_BUDGET_BYTES: u64 = 1024 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub key: RequestKey,
    pub result_path: PathBuf,
    pub byte_size: u64,
    pub created_at: u64,
    pub last_hit_at: u64,
    pub hit_count: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CacheError {
    #[error("stale ticket for key {0}")]
    StaleTicket(String),
    #[error("entry of {size} bytes exceeds total budget {budget}")]
    OverBudgetEntry { size: u64, budget: u64 },
    #[error("cannot fit {needed} bytes within budget {budget}")]
    CannotFit { needed: u64, budget: u64 },
    #[error("cache io: {0}")]
    Io(String),
}

/// Single-flight admission ticket. Exactly one caller per key holds one;
/// it must be resolved by `commit` or `abort`.
#[derive(Debug)]
pub struct Ticket {
    key: RequestKey,
}

impl Ticket {
    pub fn key(&self) -> &RequestKey {
        &self.key
    }
}

pub enum Lookup {
    Hit(CacheEntry, ServeGuard),
    Begin(Ticket),
}

/// Pins an entry while its bytes are being delivered; eviction skips
/// pinned entries.
pub struct ServeGuard {
    cache: Arc<Cache>,
    key: RequestKey,
}

impl Drop for ServeGuard {
    fn drop(&mut self) {
        let mut state = self.cache.state.lock().unwrap();
        if let Some(count) = state.pins.get_mut(&self.key) {
            *count -= 1;
            if *count == 0 {
                state.pins.remove(&self.key);
            }
        }
    }
}

struct CacheState {
    entries: HashMap<RequestKey, CacheEntry>,
    in_flight: HashSet<RequestKey>,
    pins: HashMap<RequestKey, usize>,
    resident_bytes: u64,
    tick: u64,
}

pub struct Cache {
    root: PathBuf,
    budget_bytes: u64,
    state: Mutex<CacheState>,
    flight_done: Condvar,
}

impl Cache {
    pub fn new(root: &Path, budget_bytes: u64) -> Result<Arc<Cache>, CacheError> {
        std::fs::create_dir_all(root).map_err(|e| CacheError::Io(e.to_string()))?;
        Ok(Arc::new(Cache {
            root: root.to_path_buf(),
            budget_bytes,
            state: Mutex::new(CacheState {
                entries: HashMap::new(),
                in_flight: HashSet::new(),
                pins: HashMap::new(),
                resident_bytes: 0,
                tick: 0,
            }),
            flight_done: Condvar::new(),
        }))
    }

    pub fn budget_bytes(&self) -> u64 {
        self.budget_bytes
    }

    pub fn resident_bytes(&self) -> u64 {
        self.state.lock().unwrap().resident_bytes
    }

    pub fn entry_count(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }

    pub fn entry_dir(&self, key: &RequestKey) -> PathBuf {
        self.root.join(&key.as_str()[..2]).join(key.as_str())
    }

    /// Hit, or the right to perform the one extraction for this key.
    /// Callers that find the key in flight block until it resolves.
    pub fn lookup_or_begin(self: &Arc<Cache>, key: &RequestKey) -> Lookup {
        let mut state = self.state.lock().unwrap();
        loop {
            if state.entries.contains_key(key) {
                state.tick += 1;
                let tick = state.tick;
                let entry = state.entries.get_mut(key).unwrap();
                entry.last_hit_at = tick;
                entry.hit_count += 1;
                let snapshot = entry.clone();
                *state.pins.entry(key.clone()).or_insert(0) += 1;
                self.write_entry_meta(&snapshot);
                return Lookup::Hit(
                    snapshot,
                    ServeGuard {
                        cache: self.clone(),
                        key: key.clone(),
                    },
                );
            }
            if state.in_flight.insert(key.clone()) {
                return Lookup::Begin(Ticket { key: key.clone() });
            }
            state = self.flight_done.wait(state).unwrap();
        }
    }

    /// Publish a completed extraction under the ticket's key. The result
    /// directory's files are copied into the cache; eviction runs first so
    /// the budget holds when commit returns.
    pub fn commit(self: &Arc<Cache>, ticket: Ticket, result_dir: &Path) -> Result<CacheEntry, CacheError> {
        let size = dir_size(result_dir)?;
        {
            let mut state = self.state.lock().unwrap();
            if !state.in_flight.contains(&ticket.key) {
                return Err(CacheError::StaleTicket(ticket.key.as_str().to_string()));
            }
            if size > self.budget_bytes {
                // served once by the caller, stored nowhere
                state.in_flight.remove(&ticket.key);
                drop(state);
                self.flight_done.notify_all();
                return Err(CacheError::OverBudgetEntry {
                    size,
                    budget: self.budget_bytes,
                });
            }
            self.evict_locked(&mut state, size)?;
        }

        let dir = self.entry_dir(&ticket.key);
        std::fs::create_dir_all(&dir).map_err(|e| CacheError::Io(e.to_string()))?;
        for item in std::fs::read_dir(result_dir).map_err(|e| CacheError::Io(e.to_string()))? {
            let item = item.map_err(|e| CacheError::Io(e.to_string()))?;
            std::fs::copy(item.path(), dir.join(item.file_name()))
                .map_err(|e| CacheError::Io(e.to_string()))?;
        }

        let mut state = self.state.lock().unwrap();
        state.tick += 1;
        let entry = CacheEntry {
            key: ticket.key.clone(),
            result_path: dir,
            byte_size: size,
            created_at: state.tick,
            last_hit_at: state.tick,
            hit_count: 0,
        };
        state.entries.insert(ticket.key.clone(), entry.clone());
        state.resident_bytes += size;
        state.in_flight.remove(&ticket.key);
        drop(state);
        self.write_entry_meta(&entry);
        self.flight_done.notify_all();
        Ok(entry)
    }

    /// Resolve a failed flight so blocked callers can take their turn.
    pub fn abort(&self, ticket: Ticket) {
        let mut state = self.state.lock().unwrap();
        state.in_flight.remove(&ticket.key);
        drop(state);
        self.flight_done.notify_all();
    }

    /// Evict least-recently-hit entries until `needed_bytes` fit.
    pub fn evict_to_fit(&self, needed_bytes: u64) -> Result<Vec<RequestKey>, CacheError> {
        let mut state = self.state.lock().unwrap();
        self.evict_locked(&mut state, needed_bytes)
    }

    fn evict_locked(
        &self,
        state: &mut CacheState,
        needed_bytes: u64,
    ) -> Result<Vec<RequestKey>, CacheError> {
        if needed_bytes > self.budget_bytes {
            return Err(CacheError::CannotFit {
                needed: needed_bytes,
                budget: self.budget_bytes,
            });
        }
        let mut evicted = Vec::new();
        while state.resident_bytes + needed_bytes > self.budget_bytes {
            let victim = state
                .entries
                .values()
                .filter(|e| !state.pins.contains_key(&e.key))
                .min_by_key(|e| e.last_hit_at)
                .map(|e| e.key.clone());
            match victim {
                Some(key) => {
                    let entry = state.entries.remove(&key).unwrap();
                    state.resident_bytes -= entry.byte_size;
                    let _ = std::fs::remove_dir_all(&entry.result_path);
                    evicted.push(key);
                }
                None => {
                    return Err(CacheError::CannotFit {
                        needed: needed_bytes,
                        budget: self.budget_bytes,
                    })
                }
            }
        }
        Ok(evicted)
    }

    fn write_entry_meta(&self, entry: &CacheEntry) {
        let text = format!(
            "key={}\nbytes={}\ncreated_at={}\nlast_hit_at={}\nhits={}\n",
            entry.key, entry.byte_size, entry.created_at, entry.last_hit_at, entry.hit_count
        );
        let _ = std::fs::write(entry.result_path.join("entry"), text);
    }
}

fn dir_size(dir: &Path) -> Result<u64, CacheError> {
    let mut total = 0;
    for item in std::fs::read_dir(dir).map_err(|e| CacheError::Io(e.to_string()))? {
        let item = item.map_err(|e| CacheError::Io(e.to_string()))?;
        total += item
            .metadata()
            .map_err(|e| CacheError::Io(e.to_string()))?
            .len();
    }
    Ok(total)
}
