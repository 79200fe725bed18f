//! Core library for a desk-scale data location and retrieval broker.
//!
//! Users ask for deep copies of event collections. The broker locates the
//! data in a tiered multi-site catalog, extracts the selected events under a
//! mapped or pooled account, caches the extraction for reuse, and ships the
//! result to the requested destination over a chunked, resumable transfer
//! protocol.
//!
//! The modules here map onto the stages of that pipeline:
//!
//! - [`catalog`] — which sites hold which collections, in which format,
//!   online or on tape.
//! - [`request`] — the request document grammar, normalization, and the
//!   canonical cache key.
//! - [`intake`] — receipts, the pending queue, and periodic collation.
//! - [`identity`] — grid-mapfile lookups and sandboxed pool-account leases
//!   with byte quotas.
//! - [`scheduler`] — FIFO dispatch under a hard concurrency cap with a
//!   bounded backlog; overload is explicit rejection, never silent loss.
//! - [`store`] — the binary event-store container format.
//! - [`extraction`] — selection evaluation and deterministic deep copies.
//! - [`cache`] — content-addressed extraction cache with LRU eviction and
//!   single-flight admission.
//! - [`transfer`] — the chunked, checksummed, resumable push protocol.
//! - [`fabric`] — in-process simulated destination endpoints with latency,
//!   bandwidth, and fault injection.
//! - [`audit`] — append-only audit trail and terminal-state notification.
//!
//! A quick tour, catalog to cache key:
//!
//! ```
//! use bdb_core::catalog::{Catalog, Site, Tier, CollectionPlacement, StorageClass};
//! use bdb_core::request::{parse_request, canonical_key, Format};
//!
//! let catalog = Catalog::new();
//! catalog.register_site(Site {
//!     site_id: "slac".into(),
//!     tier: Tier::TierA,
//!     name: "SLAC".into(),
//!     endpoint: "slac.example:7070".into(),
//! }).unwrap();
//! catalog.register_collection("bsemi", vec![CollectionPlacement {
//!     collection_id: "bsemi".into(),
//!     site_id: "slac".into(),
//!     format: Format::Micro,
//!     storage_class: StorageClass::Disk,
//!     store_path: "/data/bsemi-micro".into(),
//! }]).unwrap();
//!
//! let request = parse_request("
//!     collection: bsemi
//!     format: micro
//!     runs: 3-5,1-2
//!     events: all
//!     destination: edinburgh:/scratch/out
//!     requester: /DC=org/CN=A User
//! ").unwrap();
//!
//! // Adjacent ranges merge during normalization.
//! assert_eq!(request.runs.len(), 1);
//! // The key excludes destination and requester, so two users asking for
//! // the same data share one cache entry.
//! let key = canonical_key(&request);
//! assert_eq!(key.as_str().len(), 64);
//!
//! let sources = catalog.locate("bsemi", Format::Micro, true).unwrap();
//! assert_eq!(sources.len(), 1);
//! ```

pub mod audit;
pub mod cache;
pub mod catalog;
pub mod extraction;
pub mod fabric;
pub mod identity;
pub mod intake;
pub mod request;
pub mod scheduler;
pub mod store;
pub mod transfer;
