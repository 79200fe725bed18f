//! The broker service: one process that owns the catalog, intake queue,
//! identity pool, scheduler, extraction cache, and site fabric, and drives
//! every receipt from `Queued` to a terminal state.
//!
//! Time is logical and owned by the fabric clock. The server binary pumps
//! it; embedded users call [`Broker::advance`] and [`Broker::tick`]
//! themselves, which makes whole-pipeline runs deterministic under test.

pub mod bundle;
pub mod config;
pub mod server;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use bdb_core::audit::{AuditLog, Notifier};
use bdb_core::cache::{Cache, Lookup};
use bdb_core::catalog::{Catalog, CollectionPlacement, Site, StorageClass, Tier};
use bdb_core::extraction::{deep_copy, select_events, QuotaScope};
use bdb_core::fabric::{EndpointConfig, Fabric};
use bdb_core::identity::{AccountBinding, IdentityService};
use bdb_core::intake::{Intake, IntakeError, Receipt, ReceiptState};
use bdb_core::request::{canonical_key, parse_request, ExtractionRequest, ParseError};
use bdb_core::scheduler::{JobOutcome, Scheduler, SchedulerConfig};
use bdb_core::store::EventStore;
use bdb_core::transfer::{
    plan_transfer, resume_transfer, run_transfer, TransferOptions, TransferOutcome,
};

use crate::config::BrokerConfig;

pub use crate::config::ConfigError;

#[derive(Debug, thiserror::Error)]
pub enum BrokerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("broker setup: {0}")]
    Setup(String),
}

#[derive(Debug, thiserror::Error)]
pub enum SubmitError {
    #[error("bad request document: {0}")]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Intake(#[from] IntakeError),
}

/// What one [`Broker::tick`] did.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct TickStats {
    /// Whether a collation ran this round.
    pub collated_round: bool,
    /// Receipts collated into the scheduler this round.
    pub collated: usize,
    /// Receipts rejected for backlog overflow.
    pub rejected: usize,
    /// Jobs started this round (never above the concurrency cap).
    pub dispatched: usize,
    /// Running-slot high-water mark observed this round.
    pub peak_running: usize,
    /// Jobs driven to a terminal state this round.
    pub completed: usize,
}

pub struct Broker {
    config: BrokerConfig,
    pub catalog: Catalog,
    pub intake: Intake,
    pub identity: IdentityService,
    pub scheduler: Scheduler,
    pub cache: Arc<Cache>,
    pub fabric: Arc<Fabric>,
    pub audit: Arc<AuditLog>,
    pub notifier: Notifier,
    extractions: AtomicU64,
    scratch: PathBuf,
}

impl Broker {
    /// Build a broker from its config: fabric endpoints are spawned, the
    /// catalog is seeded, and the working directories are created.
    pub fn open(config: BrokerConfig) -> Result<Arc<Broker>, BrokerError> {
        let mkdir = |p: &Path| {
            std::fs::create_dir_all(p)
                .map_err(|e| BrokerError::Setup(format!("{}: {e}", p.display())))
        };
        let scratch = config.work_root.join("scratch");
        let cache_root = config.work_root.join("cache");
        let sandbox_base = config.work_root.join("sandbox");
        mkdir(&config.work_root)?;
        mkdir(&scratch)?;
        mkdir(&sandbox_base)?;

        let fabric = Fabric::new(config.fabric_seed);
        for site in &config.sites {
            let storage_root = config.site_storage_root(site);
            mkdir(&storage_root)?;
            fabric
                .spawn_endpoint(EndpointConfig {
                    site_id: site.site_id.clone(),
                    latency_ms: site.latency_ms,
                    bandwidth_bytes_per_s: site.bandwidth_bytes_per_s,
                    drop_rate: site.drop_rate,
                    storage_root,
                })
                .map_err(|e| BrokerError::Setup(e.to_string()))?;
        }

        let clock_fabric = fabric.clone();
        let audit = Arc::new(
            AuditLog::open_with_clock(
                &config.work_root.join("audit.log"),
                Box::new(move || clock_fabric.now_ms()),
            )
            .map_err(|e| BrokerError::Setup(e.to_string()))?,
        );

        let catalog = Catalog::new();
        for site in &config.sites {
            let tier = if site.tier == "A" { Tier::TierA } else { Tier::TierC };
            catalog
                .register_site(Site {
                    site_id: site.site_id.clone(),
                    tier,
                    name: site.name.clone(),
                    endpoint: site.endpoint.clone(),
                })
                .map_err(|e| BrokerError::Setup(e.to_string()))?;
        }
        let mut by_collection: std::collections::BTreeMap<String, Vec<CollectionPlacement>> =
            Default::default();
        for placement in &config.collections {
            by_collection.entry(placement.collection_id.clone()).or_default().push(
                CollectionPlacement {
                    collection_id: placement.collection_id.clone(),
                    site_id: placement.site_id.clone(),
                    format: bdb_core::catalog::Format::from_keyword(&placement.format)
                        .expect("format validated with the config"),
                    storage_class: if placement.storage_class == "disk" {
                        StorageClass::Disk
                    } else {
                        StorageClass::Tape
                    },
                    store_path: placement.store_path.display().to_string(),
                },
            );
        }
        for (collection_id, placements) in by_collection {
            catalog
                .register_collection(&collection_id, placements)
                .map_err(|e| BrokerError::Setup(e.to_string()))?;
        }

        let intake = Intake::new(config.backlog_bound, config.collation_interval_ms, audit.clone());
        let identity = IdentityService::new(
            config.account_map.clone(),
            config.pool_accounts.clone(),
            config.quota_bytes,
            &sandbox_base,
        );
        let scheduler = Scheduler::new(SchedulerConfig {
            max_concurrent: config.max_concurrent,
            backlog_bound: config.backlog_bound,
        });
        let cache = Cache::new(&cache_root, config.cache_budget_bytes)
            .map_err(|e| BrokerError::Setup(e.to_string()))?;
        let notifier = Notifier::new(config.notification_sink());

        Ok(Arc::new(Broker {
            config,
            catalog,
            intake,
            identity,
            scheduler,
            cache,
            fabric,
            audit,
            notifier,
            extractions: AtomicU64::new(0),
            scratch,
        }))
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn now_ms(&self) -> u64 {
        self.fabric.now_ms()
    }

    pub fn advance(&self, ms: u64) {
        self.fabric.advance(ms);
    }

    /// Deep copies performed so far (cache misses). Hits do not move this.
    pub fn extraction_count(&self) -> u64 {
        self.extractions.load(Ordering::SeqCst)
    }

    /// Parse and queue a request document under an authenticated DN.
    pub fn submit(&self, document: &str, authenticated_dn: &str) -> Result<Receipt, SubmitError> {
        let request = parse_request(document)?;
        Ok(self.intake.submit(request, authenticated_dn, self.now_ms())?)
    }

    pub fn status(&self, receipt_id: &str) -> Result<Receipt, IntakeError> {
        self.intake.status(receipt_id)
    }

    /// Absolute path where a delivery for `site_id` lands.
    pub fn delivered_path(&self, site_id: &str, dest_path: &str) -> Option<PathBuf> {
        let site = self.config.sites.iter().find(|s| s.site_id == site_id)?;
        Some(self.config.site_storage_root(site).join(dest_path.trim_start_matches('/')))
    }

    /// One scheduling round: collate if due, then dispatch and drive every
    /// started job to a terminal state. A failure in one receipt never
    /// touches its neighbors.
    pub fn tick(&self) -> TickStats {
        let mut stats = TickStats::default();
        let now = self.now_ms();
        if self.intake.collation_due(now) {
            stats.collated_round = true;
            let batch = self.intake.collate(now);
            let ids: Vec<String> = batch.into_iter().map(|(id, _)| id).collect();
            stats.collated = ids.len();
            let outcome = self.scheduler.enqueue_batch(ids);
            stats.rejected = outcome.rejected.len();
            for id in outcome.rejected {
                let _ = self.intake.advance(
                    &id,
                    ReceiptState::Rejected,
                    now,
                    Some("scheduler backlog full"),
                );
                self.notifier.notify(&self.audit, &id, ReceiptState::Rejected, None);
            }
        }
        let started = self.scheduler.next_dispatch();
        stats.dispatched = started.len();
        stats.peak_running = self.scheduler.running_count();
        for id in started {
            match self.process_receipt(&id) {
                Ok(location) => {
                    let _ = self.intake.advance(
                        &id,
                        ReceiptState::Done,
                        self.now_ms(),
                        Some(&location),
                    );
                    let _ = self.scheduler.complete_job(&id, JobOutcome::Success);
                    self.notifier.notify(&self.audit, &id, ReceiptState::Done, Some(&location));
                }
                Err(reason) => {
                    let _ = self.intake.advance(
                        &id,
                        ReceiptState::Failed,
                        self.now_ms(),
                        Some(&reason),
                    );
                    let _ = self.scheduler.complete_job(&id, JobOutcome::Failure);
                    self.notifier.notify(&self.audit, &id, ReceiptState::Failed, None);
                }
            }
            stats.completed += 1;
        }
        stats
    }

    /// Advance logical time and tick until nothing is queued, pending, or
    /// running. Returns false if `max_rounds` elapse first.
    pub fn run_until_settled(&self, max_rounds: u32) -> bool {
        for _ in 0..max_rounds {
            if self.intake.pending_count() == 0
                && self.scheduler.pending_count() == 0
                && self.scheduler.running_count() == 0
            {
                return true;
            }
            self.advance(self.config.collation_interval_ms);
            self.tick();
        }
        self.intake.pending_count() == 0
            && self.scheduler.pending_count() == 0
            && self.scheduler.running_count() == 0
    }

    fn process_receipt(&self, receipt_id: &str) -> Result<String, String> {
        let request = self
            .intake
            .request_for(receipt_id)
            .ok_or_else(|| format!("no request stored for receipt {receipt_id}"))?;
        self.intake
            .advance(receipt_id, ReceiptState::Extracting, self.now_ms(), None)
            .map_err(|e| e.to_string())?;

        if !self.fabric.has_endpoint(&request.destination.site_id) {
            return Err(format!("unknown destination site {:?}", request.destination.site_id));
        }

        let binding = self
            .identity
            .map_identity(&request.requester_dn)
            .map_err(|e| format!("identity: {e}"))?;
        self.audit.append(receipt_id, &request.requester_dn, "bind", binding.account());

        let outcome = self.locate_extract_deliver(receipt_id, &request, &binding);
        if let Err(e) = self.identity.release_binding(&binding) {
            self.audit.append(receipt_id, "system", "release-failed", &e.to_string());
        }
        outcome
    }

    fn locate_extract_deliver(
        &self,
        receipt_id: &str,
        request: &ExtractionRequest,
        binding: &AccountBinding,
    ) -> Result<String, String> {
        let placements = self
            .catalog
            .locate(&request.collection, request.format, true)
            .map_err(|e| e.to_string())?;
        let placement = placements.first().ok_or_else(|| {
            format!(
                "no online replica of {} in format {}",
                request.collection,
                request.format.keyword()
            )
        })?;
        self.audit.append(receipt_id, "system", "locate", &placement.site_id);

        let key = canonical_key(request);
        let (result_dir, guard) = match self.cache.lookup_or_begin(&key) {
            Lookup::Hit(entry, guard) => {
                self.audit.append(receipt_id, "system", "cache-hit", key.as_str());
                (entry.result_path, guard)
            }
            Lookup::Begin(ticket) => {
                match self.extract(receipt_id, request, binding, placement) {
                    Ok(dir) => match self.cache.commit(ticket, &dir) {
                        Ok(_) => {
                            let _ = std::fs::remove_dir_all(&dir);
                            // re-lookup pins the fresh entry for the delivery
                            match self.cache.lookup_or_begin(&key) {
                                Lookup::Hit(hit, guard) => (hit.result_path, guard),
                                Lookup::Begin(t) => {
                                    // evicted in the gap between commit and
                                    // pin; rare enough to fail the receipt
                                    self.cache.abort(t);
                                    return Err("cache entry evicted before delivery".into());
                                }
                            }
                        }
                        Err(e) => {
                            let _ = std::fs::remove_dir_all(&dir);
                            return Err(format!("cache: {e}"));
                        }
                    },
                    Err(e) => {
                        self.cache.abort(ticket);
                        return Err(e);
                    }
                }
            }
        };

        let delivered = self.deliver(receipt_id, request, &result_dir);
        drop(guard);
        delivered
    }

    fn extract(
        &self,
        receipt_id: &str,
        request: &ExtractionRequest,
        binding: &AccountBinding,
        placement: &CollectionPlacement,
    ) -> Result<PathBuf, String> {
        let store = EventStore::open(Path::new(&placement.store_path))
            .map_err(|e| format!("source store: {e}"))?;
        let selection = select_events(&store, &request.runs, &request.events);
        let dest_dir = match binding {
            // pool extractions run inside the lease sandbox so a release
            // purges them
            AccountBinding::Pooled { lease, .. } => lease.sandbox_root.join(receipt_id),
            AccountBinding::Mapped { .. } => self.scratch.join(receipt_id),
        };
        let quota = match binding {
            AccountBinding::Pooled { lease, .. } => QuotaScope::Lease {
                service: &self.identity,
                lease_id: &lease.lease_id,
            },
            AccountBinding::Mapped { .. } => QuotaScope::Unmetered,
        };
        let key = canonical_key(request);
        let result = deep_copy(&store, &selection, request.format, &dest_dir, key.as_str(), quota)
            .map_err(|e| format!("extract: {e}"))?;
        self.extractions.fetch_add(1, Ordering::SeqCst);
        self.audit.append(
            receipt_id,
            binding.account(),
            "extract",
            &format!("records={} bytes={}", result.record_count, result.byte_size),
        );
        Ok(dest_dir)
    }

    fn deliver(
        &self,
        receipt_id: &str,
        request: &ExtractionRequest,
        result_dir: &Path,
    ) -> Result<String, String> {
        let dest = &request.destination;
        let location = format!("{}:{}", dest.site_id, dest.path);
        let bundle_path = self.scratch.join(format!("{receipt_id}.bundle"));
        // fixed member list: identical results must pack to identical
        // bundles, so cache bookkeeping files never ride along
        bundle::pack_members(
            result_dir,
            &[
                bdb_core::store::DATA_FILE,
                bdb_core::extraction::EXTRACT_FILE,
                bdb_core::store::MANIFEST_FILE,
            ],
            &bundle_path,
        )
        .map_err(|e| format!("pack: {e}"))?;

        let outcome = if dest.site_id == self.config.local_site {
            // home-site delivery needs no transfer leg
            let target = self
                .delivered_path(&dest.site_id, &dest.path)
                .expect("local site is configured");
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent).map_err(|e| format!("deliver: {e}"))?;
            }
            std::fs::copy(&bundle_path, &target)
                .map(|_| ())
                .map_err(|e| format!("deliver: {e}"))?;
            self.audit.append(receipt_id, "system", "deliver-local", &location);
            Ok(location.clone())
        } else {
            self.intake
                .advance(receipt_id, ReceiptState::Transferring, self.now_ms(), None)
                .map_err(|e| e.to_string())?;
            self.ship(receipt_id, &bundle_path, dest).map(|()| location.clone())
        };
        let _ = std::fs::remove_file(&bundle_path);
        outcome
    }

    fn ship(
        &self,
        receipt_id: &str,
        bundle_path: &Path,
        dest: &bdb_core::request::Destination,
    ) -> Result<(), String> {
        let mut job =
            plan_transfer(bundle_path, &dest.site_id, &dest.path, self.config.chunk_size)
                .map_err(|e| format!("transfer plan: {e}"))?;
        self.fabric
            .register_job(&dest.site_id, job.job_id, &dest.path, self.config.chunk_size)
            .map_err(|e| e.to_string())?;
        let mut link = self.fabric.link(&dest.site_id);
        let options = TransferOptions {
            max_retries_per_chunk: self.config.max_retries_per_chunk,
            backoff_base_ms: self.config.backoff_base_ms,
        };
        let mut report = run_transfer(&mut job, &mut link, options)
            .map_err(|e| format!("transfer: {e}"))?;
        let mut total_sent = report.bytes_sent;
        let mut resumed_sent = 0u64;
        let mut resumes = 0u32;
        while report.outcome == TransferOutcome::Aborted && resumes < self.config.max_resumes {
            resumes += 1;
            report = resume_transfer(&mut job, &mut link, options)
                .map_err(|e| format!("transfer resume: {e}"))?;
            total_sent += report.bytes_sent;
            resumed_sent += report.bytes_sent;
        }
        if report.outcome != TransferOutcome::Complete {
            return Err(format!("transfer aborted after {resumes} resumes"));
        }
        self.audit.append(
            receipt_id,
            "system",
            "transfer",
            &format!(
                "bytes={} sent={} resumed_sent={} resumes={resumes}",
                job.total_bytes, total_sent, resumed_sent
            ),
        );
        Ok(())
    }
}
