//! The on-disk event-store container.
//!
//! A store is a directory holding a `manifest` text file and a `data`
//! binary file. The data file layout is bit-exact:
//!
//! ```text
//! magic "BDBS", version byte 0x01
//! per record:
//!   run     u32 little-endian
//!   event   u32 little-endian
//!   count   u8                      number of sections
//!   per section:
//!     tag     u8                    1=micro, 2=mini, 3=kanga
//!     length  u32 little-endian
//!     payload bytes
//! ```
//!
//! The manifest is UTF-8 `key=value` lines: `collection`, `events` (record
//! count), `runs` (span `lo-hi`), `formats` (comma-joined keywords), and
//! `checksum` (SHA-256 hex of the data file). Opening a store verifies the
//! checksum against the bytes on disk.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::Format;

pub const DATA_MAGIC: &[u8; 4] = b"BDBS";
pub const DATA_VERSION: u8 = 0x01;
pub const DATA_FILE: &str = "data";
pub const MANIFEST_FILE: &str = "manifest";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub run: u32,
    pub event: u32,
    /// Format tag -> opaque payload. At least one section per record.
    pub sections: BTreeMap<u8, Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub collection: String,
    pub event_count: u64,
    /// Inclusive run span over all records; `None` for an empty store.
    pub run_span: Option<(u32, u32)>,
    pub formats: Vec<Format>,
    pub checksum: String,
}

#[derive(Debug, Clone)]
pub struct EventStore {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<EventRecord>,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("missing manifest at {0}")]
    MissingManifest(PathBuf),
    #[error("bad magic in data file")]
    BadMagic,
    #[error("checksum mismatch: manifest {expected}, data file {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("truncated data file")]
    Truncated,
    #[error("manifest field {0:?} missing or malformed")]
    BadManifest(&'static str),
    #[error("record count mismatch: manifest says {expected}, data holds {actual}")]
    CountMismatch { expected: u64, actual: u64 },
    #[error("store io: {0}")]
    Io(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> StoreError {
        StoreError::Io(e.to_string())
    }
}

/// Serialize records into data-file bytes. Deterministic: records in the
/// order given, sections ascending by tag.
pub fn encode_records(records: &[EventRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.push(DATA_VERSION);
    for rec in records {
        out.extend_from_slice(&rec.run.to_le_bytes());
        out.extend_from_slice(&rec.event.to_le_bytes());
        out.push(rec.sections.len() as u8);
        for (tag, payload) in &rec.sections {
            out.push(*tag);
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(payload);
        }
    }
    out
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<EventRecord>, StoreError> {
    if bytes.len() < 5 || &bytes[..4] != DATA_MAGIC || bytes[4] != DATA_VERSION {
        return Err(StoreError::BadMagic);
    }
    let mut pos = 5usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], StoreError> {
        if *pos + n > bytes.len() {
            return Err(StoreError::Truncated);
        }
        let slice = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(slice)
    };
    let mut records = Vec::new();
    while pos < bytes.len() {
        let run = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let event = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let count = take(&mut pos, 1)?[0];
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let tag = take(&mut pos, 1)?[0];
            let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            sections.insert(tag, take(&mut pos, len)?.to_vec());
        }
        records.push(EventRecord { run, event, sections });
    }
    Ok(records)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn manifest_text(manifest: &Manifest) -> String {
    let runs = match manifest.run_span {
        Some((lo, hi)) => format!("{lo}-{hi}"),
        None => String::new(),
    };
    let formats = manifest
        .formats
        .iter()
        .map(|f| f.keyword())
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "collection={}\nevents={}\nruns={}\nformats={}\nchecksum={}\n",
        manifest.collection, manifest.event_count, runs, formats, manifest.checksum
    )
}

fn parse_manifest(text: &str) -> Result<Manifest, StoreError> {
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(StoreError::BadManifest("line"))?;
        fields.insert(k.trim(), v.trim());
    }
    let collection = fields
        .get("collection")
        .ok_or(StoreError::BadManifest("collection"))?
        .to_string();
    let event_count: u64 = fields
        .get("events")
        .ok_or(StoreError::BadManifest("events"))?
        .parse()
        .map_err(|_| StoreError::BadManifest("events"))?;
    let run_span = match *fields.get("runs").ok_or(StoreError::BadManifest("runs"))? {
        "" => None,
        span => {
            let (lo, hi) = span.split_once('-').ok_or(StoreError::BadManifest("runs"))?;
            Some((
                lo.parse().map_err(|_| StoreError::BadManifest("runs"))?,
                hi.parse().map_err(|_| StoreError::BadManifest("runs"))?,
            ))
        }
    };
    let formats = fields
        .get("formats")
        .ok_or(StoreError::BadManifest("formats"))?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| Format::from_keyword(s).ok_or(StoreError::BadManifest("formats")))
        .collect::<Result<Vec<_>, _>>()?;
    let checksum = fields
        .get("checksum")
        .ok_or(StoreError::BadManifest("checksum"))?
        .to_string();
    Ok(Manifest {
        collection,
        event_count,
        run_span,
        formats,
        checksum,
    })
}

/// Derive manifest summary fields from a record list.
pub fn summarize(collection: &str, records: &[EventRecord], data_bytes: &[u8]) -> Manifest {
    let run_span = records
        .iter()
        .map(|r| r.run)
        .fold(None, |acc: Option<(u32, u32)>, run| match acc {
            None => Some((run, run)),
            Some((lo, hi)) => Some((lo.min(run), hi.max(run))),
        });
    let mut formats: Vec<Format> = records
        .iter()
        .flat_map(|r| r.sections.keys())
        .filter_map(|t| Format::from_section_tag(*t))
        .collect();
    formats.sort_by_key(|f| f.section_tag());
    formats.dedup();
    Manifest {
        collection: collection.to_string(),
        event_count: records.len() as u64,
        run_span,
        formats,
        checksum: sha256_hex(data_bytes),
    }
}

/// Write a store directory (data + manifest). Overwrites existing files.
pub fn write_store(root: &Path, collection: &str, records: &[EventRecord]) -> Result<EventStore, StoreError> {
    std::fs::create_dir_all(root)?;
    let data = encode_records(records);
    let manifest = summarize(collection, records, &data);
    std::fs::write(root.join(DATA_FILE), &data)?;
    let mut f = std::fs::File::create(root.join(MANIFEST_FILE))?;
    f.write_all(manifest_text(&manifest).as_bytes())?;
    Ok(EventStore {
        root: root.to_path_buf(),
        manifest,
        records: records.to_vec(),
    })
}

impl EventStore {
    /// Open and verify a store: manifest parsed, data checksum and record
    /// count checked against the manifest.
    pub fn open(root: &Path) -> Result<EventStore, StoreError> {
        let manifest_path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|_| StoreError::MissingManifest(manifest_path.clone()))?;
        let manifest = parse_manifest(&text)?;
        let data = std::fs::read(root.join(DATA_FILE))?;
        let actual = sha256_hex(&data);
        if actual != manifest.checksum {
            return Err(StoreError::ChecksumMismatch {
                expected: manifest.checksum,
                actual,
            });
        }
        let records = decode_records(&data)?;
        if records.len() as u64 != manifest.event_count {
            return Err(StoreError::CountMismatch {
                expected: manifest.event_count,
                actual: records.len() as u64,
            });
        }
        Ok(EventStore {
            root: root.to_path_buf(),
            manifest,
            records,
        })
    }

    pub fn data_path(&self) -> PathBuf {
        self.root.join(DATA_FILE)
    }
}
