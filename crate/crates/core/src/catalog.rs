//! Registry of sites, collections, and placements.
//!
//! The catalog answers one question: which sites hold this collection in
//! this format, online. No site stores everything on disk, so a request may
//! resolve to a tape-only placement set and an empty online answer.
//!
//! Ordering of `locate` results is deterministic: Tier A sites first (major
//! resource centres are the preferred extraction sources), ties broken by
//! `site_id`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The two classes of computing site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    /// Major resource centre; primary data holder and extraction source.
    #[serde(rename = "A")]
    TierA,
    /// Institute-level facility; typical destination for extracted data.
    #[serde(rename = "C")]
    TierC,
}

/// Event data formats of differing granularity. Payloads are opaque here;
/// each format occupies a numbered section of an event record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Mini,
    Micro,
    Kanga,
}

impl Format {
    /// Section tag in the event-store container. Fixed, total mapping.
    pub fn section_tag(self) -> u8 {
        match self {
            Format::Micro => 1,
            Format::Mini => 2,
            Format::Kanga => 3,
        }
    }

    pub fn from_section_tag(tag: u8) -> Option<Format> {
        match tag {
            1 => Some(Format::Micro),
            2 => Some(Format::Mini),
            3 => Some(Format::Kanga),
            _ => None,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Format::Mini => "mini",
            Format::Micro => "micro",
            Format::Kanga => "kanga",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Format> {
        match s {
            "mini" => Some(Format::Mini),
            "micro" => Some(Format::Micro),
            "kanga" => Some(Format::Kanga),
            _ => None,
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageClass {
    Disk,
    Tape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Site {
    pub site_id: String,
    pub tier: Tier,
    pub name: String,
    /// Transfer address: `host:port` or an in-process handle.
    pub endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionPlacement {
    pub collection_id: String,
    pub site_id: String,
    pub format: Format,
    pub storage_class: StorageClass,
    /// Root of the event store. Nonempty for disk placements.
    pub store_path: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("site already registered: {0}")]
    DuplicateSite(String),
    #[error("unknown site: {0}")]
    UnknownSite(String),
    #[error("duplicate placement: {collection} at {site} ({format})")]
    DuplicatePlacement {
        collection: String,
        site: String,
        format: Format,
    },
    #[error("unknown collection: {0}")]
    UnknownCollection(String),
    #[error("bad snapshot record at line {line}: {reason}")]
    BadSnapshot { line: usize, reason: String },
    #[error("snapshot io: {0}")]
    SnapshotIo(String),
}

#[derive(Default)]
struct CatalogState {
    sites: BTreeMap<String, Site>,
    // collection_id -> placements
    collections: BTreeMap<String, Vec<CollectionPlacement>>,
}

/// Shared catalog handle. Reads are concurrent; registration is serialized.
#[derive(Default)]
pub struct Catalog {
    state: RwLock<CatalogState>,
}

impl Catalog {
    pub fn new() -> Catalog {
        Catalog::default()
    }

    pub fn register_site(&self, site: Site) -> Result<String, CatalogError> {
        let mut state = self.state.write().unwrap();
        if state.sites.contains_key(&site.site_id) {
            return Err(CatalogError::DuplicateSite(site.site_id));
        }
        let id = site.site_id.clone();
        state.sites.insert(id.clone(), site);
        Ok(id)
    }

    pub fn site(&self, site_id: &str) -> Option<Site> {
        self.state.read().unwrap().sites.get(site_id).cloned()
    }

    pub fn sites(&self) -> Vec<Site> {
        self.state.read().unwrap().sites.values().cloned().collect()
    }

    pub fn register_collection(
        &self,
        collection_id: &str,
        placements: Vec<CollectionPlacement>,
    ) -> Result<String, CatalogError> {
        let mut state = self.state.write().unwrap();
        for p in &placements {
            if !state.sites.contains_key(&p.site_id) {
                return Err(CatalogError::UnknownSite(p.site_id.clone()));
            }
        }
        {
            let existing = state
                .collections
                .get(collection_id)
                .map(|v| v.as_slice())
                .unwrap_or(&[]);
            for (i, p) in placements.iter().enumerate() {
                let clash = existing
                    .iter()
                    .chain(placements[..i].iter())
                    .any(|q| q.site_id == p.site_id && q.format == p.format);
                if clash {
                    return Err(CatalogError::DuplicatePlacement {
                        collection: collection_id.to_string(),
                        site: p.site_id.clone(),
                        format: p.format,
                    });
                }
            }
        }
        state
            .collections
            .entry(collection_id.to_string())
            .or_default()
            .extend(placements);
        Ok(collection_id.to_string())
    }

    /// All placements of `collection_id` in `format`, Tier A sites first,
    /// then lexicographic by site id. With `online_only`, tape placements
    /// are excluded. An unknown collection is an error; a known collection
    /// with no match is an empty list.
    pub fn locate(
        &self,
        collection_id: &str,
        format: Format,
        online_only: bool,
    ) -> Result<Vec<CollectionPlacement>, CatalogError> {
        let state = self.state.read().unwrap();
        let placements = state
            .collections
            .get(collection_id)
            .ok_or_else(|| CatalogError::UnknownCollection(collection_id.to_string()))?;
        let mut out: Vec<CollectionPlacement> = placements
            .iter()
            .filter(|p| p.format == format)
            .filter(|p| !online_only || p.storage_class == StorageClass::Disk)
            .cloned()
            .collect();
        out.sort_by(|a, b| {
            let ta = state.sites[&a.site_id].tier;
            let tb = state.sites[&b.site_id].tier;
            ta.cmp(&tb).then_with(|| a.site_id.cmp(&b.site_id))
        });
        Ok(out)
    }

    pub fn known_collection(&self, collection_id: &str) -> bool {
        self.state.read().unwrap().collections.contains_key(collection_id)
    }
}

/// One line of the snapshot file. `kind` selects which fields are present.
#[derive(Serialize, Deserialize)]
struct SnapshotRecord {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    site_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tier: Option<Tier>,
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    collection_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    format: Option<Format>,
    #[serde(skip_serializing_if = "Option::is_none")]
    storage_class: Option<StorageClass>,
    #[serde(skip_serializing_if = "Option::is_none")]
    store_path: Option<String>,
}

impl Catalog {
    /// Write the catalog as line-delimited JSON records: one per site,
    /// collection, and placement.
    pub fn save_snapshot(&self, path: &Path) -> Result<(), CatalogError> {
        let state = self.state.read().unwrap();
        let mut out = Vec::new();
        for site in state.sites.values() {
            let rec = SnapshotRecord {
                kind: "site".into(),
                site_id: Some(site.site_id.clone()),
                tier: Some(site.tier),
                name: Some(site.name.clone()),
                endpoint: Some(site.endpoint.clone()),
                collection_id: None,
                format: None,
                storage_class: None,
                store_path: None,
            };
            out.push(serde_json::to_string(&rec).unwrap());
        }
        for (cid, placements) in &state.collections {
            out.push(
                serde_json::to_string(&SnapshotRecord {
                    kind: "collection".into(),
                    site_id: None,
                    tier: None,
                    name: None,
                    endpoint: None,
                    collection_id: Some(cid.clone()),
                    format: None,
                    storage_class: None,
                    store_path: None,
                })
                .unwrap(),
            );
            for p in placements {
                out.push(
                    serde_json::to_string(&SnapshotRecord {
                        kind: "placement".into(),
                        site_id: Some(p.site_id.clone()),
                        tier: None,
                        name: None,
                        endpoint: None,
                        collection_id: Some(p.collection_id.clone()),
                        format: Some(p.format),
                        storage_class: Some(p.storage_class),
                        store_path: Some(p.store_path.clone()),
                    })
                    .unwrap(),
                );
            }
        }
        let mut file = std::fs::File::create(path)
            .map_err(|e| CatalogError::SnapshotIo(e.to_string()))?;
        for line in out {
            writeln!(file, "{line}").map_err(|e| CatalogError::SnapshotIo(e.to_string()))?;
        }
        Ok(())
    }

    /// Reload a snapshot written by [`Catalog::save_snapshot`].
    pub fn load_snapshot(path: &Path) -> Result<Catalog, CatalogError> {
        let file = std::fs::File::open(path)
            .map_err(|e| CatalogError::SnapshotIo(e.to_string()))?;
        let catalog = Catalog::new();
        let mut placements: Vec<CollectionPlacement> = Vec::new();
        let mut collections: Vec<String> = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| CatalogError::SnapshotIo(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SnapshotRecord =
                serde_json::from_str(&line).map_err(|e| CatalogError::BadSnapshot {
                    line: idx + 1,
                    reason: e.to_string(),
                })?;
            let bad = |reason: &str| CatalogError::BadSnapshot {
                line: idx + 1,
                reason: reason.to_string(),
            };
            match rec.kind.as_str() {
                "site" => {
                    catalog.register_site(Site {
                        site_id: rec.site_id.ok_or_else(|| bad("missing site_id"))?,
                        tier: rec.tier.ok_or_else(|| bad("missing tier"))?,
                        name: rec.name.unwrap_or_default(),
                        endpoint: rec.endpoint.unwrap_or_default(),
                    })?;
                }
                "collection" => {
                    collections.push(rec.collection_id.ok_or_else(|| bad("missing collection_id"))?);
                }
                "placement" => {
                    placements.push(CollectionPlacement {
                        collection_id: rec
                            .collection_id
                            .ok_or_else(|| bad("missing collection_id"))?,
                        site_id: rec.site_id.ok_or_else(|| bad("missing site_id"))?,
                        format: rec.format.ok_or_else(|| bad("missing format"))?,
                        storage_class: rec
                            .storage_class
                            .ok_or_else(|| bad("missing storage_class"))?,
                        store_path: rec.store_path.unwrap_or_default(),
                    });
                }
                other => return Err(bad(&format!("unknown kind {other:?}"))),
            }
        }
        for cid in collections {
            catalog.register_collection(&cid, Vec::new())?;
        }
        for p in placements {
            let cid = p.collection_id.clone();
            catalog.register_collection(&cid, vec![p])?;
        }
        Ok(catalog)
    }
}
