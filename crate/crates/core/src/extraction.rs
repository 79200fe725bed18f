//! Selection evaluation and deterministic deep copies.
//!
//! A deep copy is a self-contained output store holding exactly the
//! selected records, each reduced to the requested format's section.
//! Output records are written in ascending `(run, event)` order regardless
//! of input order, so identical inputs always produce bit-identical output
//! files — the property the extraction cache depends on.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::catalog::Format;
use crate::identity::{IdentityError, IdentityService};
use crate::request::{EventSelector, RunRange};
use crate::store::{
    encode_records, summarize, EventRecord, EventStore, StoreError, DATA_FILE, MANIFEST_FILE,
};

pub const EXTRACT_FILE: &str = "extract";

/// Quota accounting scope for an extraction. Mapped accounts are not
/// metered; pool leases are charged for every byte written.
pub enum QuotaScope<'a> {
    Unmetered,
    Lease {
        service: &'a IdentityService,
        lease_id: &'a str,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionResult {
    pub root: PathBuf,
    pub request_key: String,
    pub record_count: u64,
    pub source_checksum: String,
    pub output_checksum: String,
    pub byte_size: u64,
}

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("selection matched no events")]
    EmptySelection,
    #[error("format {0} absent from every selected record")]
    FormatAbsent(Format),
    #[error(transparent)]
    Quota(#[from] IdentityError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("extraction io: {0}")]
    Io(String),
}

/// All and only records with run in a selected range and, when explicit
/// events are given, `(run, event)` listed. Ascending `(run, event)`.
pub fn select_events(
    store: &EventStore,
    runs: &[RunRange],
    events: &EventSelector,
) -> Vec<(u32, u32)> {
    let mut selected: Vec<(u32, u32)> = store
        .records
        .iter()
        .filter(|r| runs.iter().any(|range| range.contains(r.run)))
        .filter(|r| match events {
            EventSelector::All => true,
            EventSelector::Explicit(pairs) => pairs.binary_search(&(r.run, r.event)).is_ok(),
        })
        .map(|r| (r.run, r.event))
        .collect();
    selected.sort();
    selected
}

fn extract_manifest_text(result: &ExtractionResult) -> String {
    format!(
        "request_key={}\nselection={}\nsource_checksum={}\noutput_checksum={}\nbytes={}\n",
        result.request_key,
        result.record_count,
        result.source_checksum,
        result.output_checksum,
        result.byte_size
    )
}

/// Produce a self-contained deep copy of `selection` from `store` in the
/// requested format under `dest_dir`.
///
/// Records lacking the requested section are skipped; if every selected
/// record lacks it the extraction fails with `FormatAbsent`. Bytes written
/// are charged to the quota scope; on `QuotaExceeded` the partial output is
/// purged.
pub fn deep_copy(
    store: &EventStore,
    selection: &[(u32, u32)],
    format: Format,
    dest_dir: &Path,
    request_key: &str,
    quota: QuotaScope<'_>,
) -> Result<ExtractionResult, ExtractionError> {
    if selection.is_empty() {
        return Err(ExtractionError::EmptySelection);
    }
    let tag = format.section_tag();
    let wanted: std::collections::BTreeSet<(u32, u32)> = selection.iter().copied().collect();
    let mut output: Vec<EventRecord> = store
        .records
        .iter()
        .filter(|r| wanted.contains(&(r.run, r.event)))
        .filter_map(|r| {
            r.sections.get(&tag).map(|payload| EventRecord {
                run: r.run,
                event: r.event,
                sections: BTreeMap::from([(tag, payload.clone())]),
            })
        })
        .collect();
    if output.is_empty() {
        return Err(ExtractionError::FormatAbsent(format));
    }
    output.sort_by_key(|r| (r.run, r.event));

    let data = encode_records(&output);
    let manifest = summarize(&store.manifest.collection, &output, &data);
    let manifest_text = crate::store::manifest_text(&manifest);

    let mut result = ExtractionResult {
        root: dest_dir.to_path_buf(),
        request_key: request_key.to_string(),
        record_count: output.len() as u64,
        source_checksum: store.manifest.checksum.clone(),
        output_checksum: manifest.checksum.clone(),
        byte_size: 0,
    };
    // total on-disk size: data + manifest + extract metadata; the extract
    // file's own `bytes` field covers data and manifest only, so the total
    // stays computable before writing
    let data_and_manifest = data.len() as u64 + manifest_text.len() as u64;
    result.byte_size = data_and_manifest;
    let extract_text = extract_manifest_text(&result);
    let total_bytes = data_and_manifest + extract_text.len() as u64;

    std::fs::create_dir_all(dest_dir).map_err(|e| ExtractionError::Io(e.to_string()))?;
    std::fs::write(dest_dir.join(DATA_FILE), &data).map_err(|e| ExtractionError::Io(e.to_string()))?;
    std::fs::write(dest_dir.join(MANIFEST_FILE), manifest_text.as_bytes())
        .map_err(|e| ExtractionError::Io(e.to_string()))?;
    std::fs::write(dest_dir.join(EXTRACT_FILE), extract_text.as_bytes())
        .map_err(|e| ExtractionError::Io(e.to_string()))?;

    if let QuotaScope::Lease { service, lease_id } = quota {
        if let Err(e) = service.charge_quota(lease_id, total_bytes) {
            let _ = std::fs::remove_dir_all(dest_dir);
            return Err(ExtractionError::Quota(e));
        }
    }
    Ok(result)
}

/// Parse an `extract` metadata file back into an [`ExtractionResult`].
pub fn read_extract_manifest(root: &Path) -> Result<ExtractionResult, ExtractionError> {
    let text = std::fs::read_to_string(root.join(EXTRACT_FILE))
        .map_err(|e| ExtractionError::Io(e.to_string()))?;
    let mut fields = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .cloned()
            .ok_or_else(|| ExtractionError::Io(format!("extract manifest missing {k}")))
    };
    Ok(ExtractionResult {
        root: root.to_path_buf(),
        request_key: get("request_key")?,
        record_count: get("selection")?.parse().map_err(|_| ExtractionError::Io("bad selection".into()))?,
        source_checksum: get("source_checksum")?,
        output_checksum: get("output_checksum")?,
        byte_size: get("bytes")?.parse().map_err(|_| ExtractionError::Io("bad bytes".into()))?,
    })
}
