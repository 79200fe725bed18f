//! Identity mapping: grid-mapfile lookups and sandboxed pool-account
//! leases.
//!
//! A DN listed in the map file binds to its own local account and bypasses
//! quotas (per-user disk limits are an external reality we do not model
//! for mapped accounts). Everyone else competes for a fixed pool of
//! sandboxed accounts, each with a byte quota. A lease confines all writes
//! to its sandbox root, which is purged on release.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::RngCore;
use thiserror::Error;

pub const DEFAULT_POOL_SIZE: usize = 8;
pub const DEFAULT_QUOTA_BYTES: u64 = 256 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AccountBinding {
    /// DN found in the map file; account is the user's own.
    Mapped { dn: String, account: String },
    /// DN not mapped; a pool account was leased.
    Pooled { dn: String, lease: AccountLease },
}

impl AccountBinding {
    pub fn account(&self) -> &str {
        match self {
            AccountBinding::Mapped { account, .. } => account,
            AccountBinding::Pooled { lease, .. } => &lease.account,
        }
    }

    pub fn lease_id(&self) -> Option<&str> {
        match self {
            AccountBinding::Mapped { .. } => None,
            AccountBinding::Pooled { lease, .. } => Some(&lease.lease_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccountLease {
    pub lease_id: String,
    pub account: String,
    pub quota_bytes: u64,
    pub used_bytes: u64,
    pub sandbox_root: PathBuf,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdentityError {
    #[error("no identity available: dn unmapped and pool exhausted; retry later")]
    NoIdentity,
    #[error("pool exhausted; retry later")]
    PoolExhausted,
    #[error("requested {needed} bytes exceeds per-account quota {quota}")]
    QuotaTooSmall { needed: u64, quota: u64 },
    #[error("quota exceeded: {used} + {delta} > {quota}")]
    QuotaExceeded { used: u64, delta: u64, quota: u64 },
    #[error("unknown lease: {0}")]
    UnknownLease(String),
    #[error("bad map file line {0}")]
    BadMapFile(usize),
    #[error("sandbox io: {0}")]
    SandboxIo(String),
}

struct PoolState {
    free: Vec<String>,
    active: HashMap<String, AccountLease>,
}

pub struct IdentityService {
    map: BTreeMap<String, String>,
    quota_bytes: u64,
    sandbox_base: PathBuf,
    pool: Mutex<PoolState>,
}

/// Parse a grid-mapfile: one `"<DN>" <account>` entry per line, `#`
/// comments and blank lines ignored.
pub fn parse_map_file(text: &str) -> Result<BTreeMap<String, String>, IdentityError> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let rest = line
            .strip_prefix('"')
            .ok_or(IdentityError::BadMapFile(idx + 1))?;
        let (dn, account) = rest
            .split_once('"')
            .ok_or(IdentityError::BadMapFile(idx + 1))?;
        let account = account.trim();
        if dn.is_empty() || account.is_empty() || account.contains(char::is_whitespace) {
            return Err(IdentityError::BadMapFile(idx + 1));
        }
        map.insert(dn.to_string(), account.to_string());
    }
    Ok(map)
}

impl IdentityService {
    pub fn new(
        map: BTreeMap<String, String>,
        pool_accounts: Vec<String>,
        quota_bytes: u64,
        sandbox_base: &Path,
    ) -> IdentityService {
        IdentityService {
            map,
            quota_bytes,
            sandbox_base: sandbox_base.to_path_buf(),
            pool: Mutex::new(PoolState {
                free: pool_accounts,
                active: HashMap::new(),
            }),
        }
    }

    pub fn pool_free(&self) -> usize {
        self.pool.lock().unwrap().free.len()
    }

    pub fn pool_active(&self) -> usize {
        self.pool.lock().unwrap().active.len()
    }

    /// Resolve a DN: mapped users bind to their listed account; unmapped
    /// users fall through to pool acquisition with no reserved headroom.
    pub fn map_identity(&self, dn: &str) -> Result<AccountBinding, IdentityError> {
        if let Some(account) = self.map.get(dn) {
            return Ok(AccountBinding::Mapped {
                dn: dn.to_string(),
                account: account.clone(),
            });
        }
        match self.acquire_pool_account(dn, 0) {
            Ok(lease) => Ok(AccountBinding::Pooled {
                dn: dn.to_string(),
                lease,
            }),
            Err(IdentityError::PoolExhausted) => Err(IdentityError::NoIdentity),
            Err(e) => Err(e),
        }
    }

    /// Lease a free pool account. `needed_bytes` above the per-account
    /// quota is never grantable and fails before any allocation.
    pub fn acquire_pool_account(
        &self,
        dn: &str,
        needed_bytes: u64,
    ) -> Result<AccountLease, IdentityError> {
        if needed_bytes > self.quota_bytes {
            return Err(IdentityError::QuotaTooSmall {
                needed: needed_bytes,
                quota: self.quota_bytes,
            });
        }
        let mut pool = self.pool.lock().unwrap();
        let account = pool.free.pop().ok_or(IdentityError::PoolExhausted)?;
        let mut id_bytes = [0u8; 8];
        rand::thread_rng().fill_bytes(&mut id_bytes);
        let lease_id = hex::encode(id_bytes);
        let sandbox_root = self.sandbox_base.join(&account);
        if let Err(e) = std::fs::create_dir_all(&sandbox_root) {
            pool.free.push(account);
            return Err(IdentityError::SandboxIo(e.to_string()));
        }
        let lease = AccountLease {
            lease_id: lease_id.clone(),
            account,
            quota_bytes: self.quota_bytes,
            used_bytes: 0,
            sandbox_root,
        };
        pool.active.insert(lease_id, lease.clone());
        // audit linkage (dn <-> lease) is recorded by the caller, which owns
        // the audit handle and the receipt id
        let _ = dn;
        Ok(lease)
    }

    /// Charge bytes against a lease. The bound is closed: filling the
    /// quota exactly is legal, exceeding it is not.
    pub fn charge_quota(&self, lease_id: &str, delta_bytes: u64) -> Result<AccountLease, IdentityError> {
        let mut pool = self.pool.lock().unwrap();
        let lease = pool
            .active
            .get_mut(lease_id)
            .ok_or_else(|| IdentityError::UnknownLease(lease_id.to_string()))?;
        let new_used = lease.used_bytes.saturating_add(delta_bytes);
        if new_used > lease.quota_bytes {
            return Err(IdentityError::QuotaExceeded {
                used: lease.used_bytes,
                delta: delta_bytes,
                quota: lease.quota_bytes,
            });
        }
        lease.used_bytes = new_used;
        Ok(lease.clone())
    }

    /// Purge the sandbox and return the account to the free set.
    pub fn release(&self, lease_id: &str) -> Result<(), IdentityError> {
        let mut pool = self.pool.lock().unwrap();
        let lease = pool
            .active
            .remove(lease_id)
            .ok_or_else(|| IdentityError::UnknownLease(lease_id.to_string()))?;
        if lease.sandbox_root.exists() {
            std::fs::remove_dir_all(&lease.sandbox_root)
                .map_err(|e| IdentityError::SandboxIo(e.to_string()))?;
        }
        pool.free.push(lease.account);
        Ok(())
    }

    /// Release the lease behind a binding, if any. Mapped bindings have
    /// nothing to release.
    pub fn release_binding(&self, binding: &AccountBinding) -> Result<(), IdentityError> {
        match binding.lease_id() {
            Some(id) => self.release(id),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn service(pool: usize, quota: u64, dir: &tempfile::TempDir) -> IdentityService {
        let map = parse_map_file("\"/DC=org/CN=Mapped User\" mapped1\n").unwrap();
        let accounts = (0..pool).map(|i| format!("pool{i:02}")).collect();
        IdentityService::new(map, accounts, quota, dir.path())
    }

    #[test]
    fn map_file_grammar() {
        let map = parse_map_file(
            "# comment\n\"/DC=org/CN=A\" alice\n\n\"/DC=org/CN=B\"   bob\n",
        )
        .unwrap();
        assert_eq!(map["/DC=org/CN=A"], "alice");
        assert_eq!(map["/DC=org/CN=B"], "bob");
        assert_eq!(parse_map_file("no quotes here\n"), Err(IdentityError::BadMapFile(1)));
    }

    #[test]
    fn mapped_dn_binds_to_listed_account() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(2, 1024, &dir);
        let b = svc.map_identity("/DC=org/CN=Mapped User").unwrap();
        assert_eq!(b.account(), "mapped1");
        // mapped users never consume pool accounts
        assert_eq!(svc.pool_free(), 2);
    }

    #[test]
    fn unmapped_dn_falls_through_to_pool() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(1, 1024, &dir);
        let b = svc.map_identity("/DC=org/CN=Stranger").unwrap();
        assert!(matches!(b, AccountBinding::Pooled { .. }));
        assert_eq!(svc.pool_free(), 0);
    }

    #[test]
    fn exhausted_pool_gives_no_identity() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(1, 1024, &dir);
        svc.map_identity("/DC=org/CN=First").unwrap();
        assert_eq!(svc.map_identity("/DC=org/CN=Second"), Err(IdentityError::NoIdentity));
    }

    #[test]
    fn zero_byte_acquisition_is_legal() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(1, 1024, &dir);
        assert!(svc.acquire_pool_account("/CN=x", 0).is_ok());
    }

    #[test]
    fn oversized_need_never_grantable() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(4, 1024, &dir);
        assert_eq!(
            svc.acquire_pool_account("/CN=x", 1025),
            Err(IdentityError::QuotaTooSmall { needed: 1025, quota: 1024 })
        );
        // nothing was allocated
        assert_eq!(svc.pool_free(), 4);
    }

    #[test]
    fn concurrent_acquisition_grants_exactly_pool_size() {
        let dir = tempfile::tempdir().unwrap();
        let svc = std::sync::Arc::new(service(8, 1024, &dir));
        let mut handles = Vec::new();
        for i in 0..20 {
            let svc = svc.clone();
            handles.push(std::thread::spawn(move || {
                svc.acquire_pool_account(&format!("/CN=u{i}"), 0).is_ok()
            }));
        }
        let granted = handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .filter(|&ok| ok)
            .count();
        assert_eq!(granted, 8);
        assert_eq!(svc.pool_active(), 8);
    }

    #[test]
    fn quota_boundary_is_closed() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(1, 100, &dir);
        let lease = svc.acquire_pool_account("/CN=x", 0).unwrap();
        let lease = svc.charge_quota(&lease.lease_id, 100).unwrap();
        assert_eq!(lease.used_bytes, 100);
        assert!(matches!(
            svc.charge_quota(&lease.lease_id, 1),
            Err(IdentityError::QuotaExceeded { .. })
        ));
    }

    #[test]
    fn charge_zero_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(1, 100, &dir);
        let lease = svc.acquire_pool_account("/CN=x", 0).unwrap();
        let after = svc.charge_quota(&lease.lease_id, 0).unwrap();
        assert_eq!(after.used_bytes, 0);
    }

    #[test]
    fn random_charges_match_running_sum_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let dir = tempfile::tempdir().unwrap();
        let svc = service(1, 10_000, &dir);
        let lease = svc.acquire_pool_account("/CN=x", 0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut oracle_used: u64 = 0;
        for _ in 0..2_000 {
            let delta = rng.gen_range(0..400);
            let accepted = svc.charge_quota(&lease.lease_id, delta).is_ok();
            let oracle_accepts = oracle_used + delta <= 10_000;
            assert_eq!(accepted, oracle_accepts);
            if oracle_accepts {
                oracle_used += delta;
            }
        }
    }

    #[test]
    fn release_purges_sandbox_and_frees_account() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(1, 1024, &dir);
        let lease = svc.acquire_pool_account("/CN=x", 0).unwrap();
        let marker = lease.sandbox_root.join("leftover.dat");
        std::fs::write(&marker, b"junk").unwrap();
        svc.release(&lease.lease_id).unwrap();
        assert!(!lease.sandbox_root.exists());
        // fresh lease starts with an empty sandbox
        let again = svc.acquire_pool_account("/CN=y", 0).unwrap();
        assert!(std::fs::read_dir(&again.sandbox_root).unwrap().next().is_none());
    }

    #[test]
    fn double_release_is_unknown_lease() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(1, 1024, &dir);
        let lease = svc.acquire_pool_account("/CN=x", 0).unwrap();
        svc.release(&lease.lease_id).unwrap();
        assert!(matches!(svc.release(&lease.lease_id), Err(IdentityError::UnknownLease(_))));
    }

    // exhaustive small interleavings: any order of acquires and releases
    // keeps active leases within the pool size
    #[test]
    fn interleavings_never_exceed_pool_size() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(2, 1024, &dir);
        // enumerate all 3^6 action strings over {acquire, release-oldest, noop}
        for script in 0..729u32 {
            let mut code = script;
            let mut held: Vec<String> = Vec::new();
            for _ in 0..6 {
                match code % 3 {
                    0 => {
                        if let Ok(lease) = svc.acquire_pool_account("/CN=x", 0) {
                            held.push(lease.lease_id);
                        }
                    }
                    1 => {
                        if !held.is_empty() {
                            let id = held.remove(0);
                            svc.release(&id).unwrap();
                        }
                    }
                    _ => {}
                }
                code /= 3;
                assert!(svc.pool_active() <= 2);
            }
            for id in held {
                svc.release(&id).unwrap();
            }
        }
    }
}
