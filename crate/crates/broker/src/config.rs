//! Server configuration.
//!
//! One TOML document describes everything a broker instance needs: the
//! listen address, its home site, fabric topology, catalog seed, identity
//! policy, and tuning knobs. Every knob has a default; a minimal config is
//! just `work_root`, one site, and one collection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bdb_core::audit::NotificationSink;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerConfig {
    /// TCP listen address; absent for embedded use.
    pub listen: Option<String>,
    /// Scratch, cache, audit, and sandbox directories live under here.
    pub work_root: PathBuf,
    /// The site this broker serves from. Deliveries addressed to it are
    /// written locally without a fabric transfer.
    pub local_site: String,
    #[serde(default = "default_collation_interval_ms")]
    pub collation_interval_ms: u64,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    #[serde(default = "default_backlog_bound")]
    pub backlog_bound: usize,
    #[serde(default = "default_cache_budget_bytes")]
    pub cache_budget_bytes: u64,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries_per_chunk: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    /// How many times an aborted transfer is resumed before the receipt
    /// fails.
    #[serde(default = "default_max_resumes")]
    pub max_resumes: u32,
    #[serde(default = "default_fabric_seed")]
    pub fabric_seed: u64,
    #[serde(default = "default_quota_bytes")]
    pub quota_bytes: u64,
    #[serde(default = "default_pool_accounts")]
    pub pool_accounts: Vec<String>,
    /// DN -> local account. Unlisted DNs fall back to the pool.
    #[serde(default)]
    pub account_map: BTreeMap<String, String>,
    /// Terminal-state notification sink: "null", "stdout", or a file path.
    #[serde(default)]
    pub notify: Option<String>,
    #[serde(rename = "site", default)]
    pub sites: Vec<SiteConfig>,
    #[serde(rename = "collection", default)]
    pub collections: Vec<PlacementConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub site_id: String,
    /// "A" or "C".
    pub tier: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default = "default_latency_ms")]
    pub latency_ms: u64,
    #[serde(default = "default_bandwidth")]
    pub bandwidth_bytes_per_s: u64,
    #[serde(default)]
    pub drop_rate: f64,
    /// Destination files for this site land under here. Defaults to
    /// `<work_root>/sites/<site_id>`.
    pub storage_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementConfig {
    pub collection_id: String,
    pub site_id: String,
    /// "mini", "micro", or "kanga".
    pub format: String,
    /// "disk" or "tape".
    pub storage_class: String,
    pub store_path: PathBuf,
}

fn default_collation_interval_ms() -> u64 {
    900_000
}
fn default_max_concurrent() -> usize {
    20
}
fn default_backlog_bound() -> usize {
    200
}
fn default_cache_budget_bytes() -> u64 {
    bdb_core::cache::DEFAULT_BUDGET_BYTES
}
fn default_chunk_size() -> u64 {
    bdb_core::transfer::DEFAULT_CHUNK_SIZE
}
fn default_max_retries() -> u32 {
    bdb_core::transfer::DEFAULT_MAX_RETRIES
}
fn default_backoff_base_ms() -> u64 {
    bdb_core::transfer::DEFAULT_BACKOFF_BASE_MS
}
fn default_max_resumes() -> u32 {
    20
}
fn default_fabric_seed() -> u64 {
    1
}
fn default_quota_bytes() -> u64 {
    bdb_core::identity::DEFAULT_QUOTA_BYTES
}
fn default_pool_accounts() -> Vec<String> {
    (0..bdb_core::identity::DEFAULT_POOL_SIZE)
        .map(|i| format!("pool{i:02}"))
        .collect()
}
fn default_latency_ms() -> u64 {
    10
}
fn default_bandwidth() -> u64 {
    100 * 1024 * 1024
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(String),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl BrokerConfig {
    pub fn from_toml(text: &str) -> Result<BrokerConfig, ConfigError> {
        let config: BrokerConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<BrokerConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn notification_sink(&self) -> NotificationSink {
        match self.notify.as_deref() {
            None | Some("null") => NotificationSink::Null,
            Some("stdout") => NotificationSink::Stdout,
            Some(path) => NotificationSink::File(PathBuf::from(path)),
        }
    }

    pub fn site_storage_root(&self, site: &SiteConfig) -> PathBuf {
        site.storage_root
            .clone()
            .unwrap_or_else(|| self.work_root.join("sites").join(&site.site_id))
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if !self.sites.iter().any(|s| s.site_id == self.local_site) {
            return Err(ConfigError::Invalid(format!(
                "local_site {:?} has no [[site]] entry",
                self.local_site
            )));
        }
        for site in &self.sites {
            if site.tier != "A" && site.tier != "C" {
                return Err(ConfigError::Invalid(format!(
                    "site {:?}: tier must be \"A\" or \"C\", got {:?}",
                    site.site_id, site.tier
                )));
            }
        }
        for placement in &self.collections {
            if !self.sites.iter().any(|s| s.site_id == placement.site_id) {
                return Err(ConfigError::Invalid(format!(
                    "collection {:?} placed at unknown site {:?}",
                    placement.collection_id, placement.site_id
                )));
            }
            if bdb_core::catalog::Format::from_keyword(&placement.format).is_none() {
                return Err(ConfigError::Invalid(format!(
                    "collection {:?}: unknown format {:?}",
                    placement.collection_id, placement.format
                )));
            }
            if placement.storage_class != "disk" && placement.storage_class != "tape" {
                return Err(ConfigError::Invalid(format!(
                    "collection {:?}: storage_class must be \"disk\" or \"tape\"",
                    placement.collection_id
                )));
            }
        }
        if self.chunk_size == 0 {
            return Err(ConfigError::Invalid("chunk_size must be positive".into()));
        }
        if self.pool_accounts.is_empty() {
            return Err(ConfigError::Invalid("pool_accounts must not be empty".into()));
        }
        Ok(())
    }
}
