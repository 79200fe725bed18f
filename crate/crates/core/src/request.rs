//! Extraction request documents: parsing, normalization, and the canonical
//! cache key.
//!
//! A request is a small UTF-8 document, one `key: value` field per line,
//! order-insensitive, with `#` comments:
//!
//! ```text
//! request-version: 1
//! collection: bsemi
//! format: micro
//! runs: 1-10,12-12
//! events: all
//! destination: edinburgh:/scratch/out
//! requester: /DC=org/CN=A User
//! ```
//!
//! Parsing normalizes run ranges (sorted, overlapping and adjacent ranges
//! merged), so semantically identical requests have one canonical form. The
//! [`canonical_key`] digest covers only the data selection (version,
//! collection, format, runs, events) — two users asking for the same data
//! from different destinations share a cache entry.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use crate::catalog::Format;

/// Inclusive run range, `lo <= hi`, both positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunRange {
    pub lo: u32,
    pub hi: u32,
}

impl RunRange {
    pub fn contains(&self, run: u32) -> bool {
        self.lo <= run && run <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventSelector {
    /// Every event in the selected runs.
    All,
    /// Explicit `(run, event)` pairs, sorted and deduplicated.
    Explicit(Vec<(u32, u32)>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Destination {
    pub site_id: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionRequest {
    pub version: u32,
    pub collection: String,
    pub format: Format,
    pub runs: Vec<RunRange>,
    pub events: EventSelector,
    pub destination: Destination,
    pub requester_dn: String,
}

/// 64-hex digest of the canonical request serialization.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestKey(String);

impl RequestKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn from_hex(s: &str) -> Option<RequestKey> {
        if s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) {
            Some(RequestKey(s.to_string()))
        } else {
            None
        }
    }
}

impl std::fmt::Display for RequestKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("syntax error at line {0}")]
    SyntaxError(usize),
    #[error("unknown format {0:?}")]
    UnknownFormat(String),
    #[error("bad range {0:?}")]
    BadRange(String),
    #[error("missing field {0:?}")]
    MissingField(&'static str),
}

/// Merge a list of inclusive ranges: sort, drop overlaps, join adjacent
/// ranges (`1-2,3-5` becomes `1-5`).
pub fn normalize_ranges(mut ranges: Vec<RunRange>) -> Vec<RunRange> {
    ranges.sort();
    let mut out: Vec<RunRange> = Vec::with_capacity(ranges.len());
    for r in ranges {
        match out.last_mut() {
            Some(last) if r.lo <= last.hi.saturating_add(1) => {
                last.hi = last.hi.max(r.hi);
            }
            _ => out.push(r),
        }
    }
    out
}

fn parse_range_list(value: &str) -> Result<Vec<RunRange>, ParseError> {
    let mut ranges = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err(ParseError::BadRange(value.to_string()));
        }
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (part, part),
        };
        let lo: u32 = lo.parse().map_err(|_| ParseError::BadRange(part.to_string()))?;
        let hi: u32 = hi.parse().map_err(|_| ParseError::BadRange(part.to_string()))?;
        if lo == 0 || lo > hi {
            return Err(ParseError::BadRange(part.to_string()));
        }
        ranges.push(RunRange { lo, hi });
    }
    Ok(normalize_ranges(ranges))
}

fn parse_event_list(value: &str) -> Result<EventSelector, ParseError> {
    if value.eq_ignore_ascii_case("all") {
        return Ok(EventSelector::All);
    }
    let mut pairs = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        let (run, event) = part
            .split_once(':')
            .ok_or_else(|| ParseError::BadRange(part.to_string()))?;
        let run: u32 = run.trim().parse().map_err(|_| ParseError::BadRange(part.to_string()))?;
        let event: u32 = event.trim().parse().map_err(|_| ParseError::BadRange(part.to_string()))?;
        if run == 0 || event == 0 {
            return Err(ParseError::BadRange(part.to_string()));
        }
        pairs.push((run, event));
    }
    pairs.sort();
    pairs.dedup();
    Ok(EventSelector::Explicit(pairs))
}

/// Parse and normalize a request document. The diagnostic for a malformed
/// line names the first offending line number.
pub fn parse_request(text: &str) -> Result<ExtractionRequest, ParseError> {
    let mut version: Option<u32> = None;
    let mut collection: Option<String> = None;
    let mut format: Option<Format> = None;
    let mut runs: Option<Vec<RunRange>> = None;
    let mut events: Option<EventSelector> = None;
    let mut destination: Option<Destination> = None;
    let mut requester: Option<String> = None;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once(':').ok_or(ParseError::SyntaxError(lineno))?;
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim();
        if value.is_empty() {
            return Err(ParseError::SyntaxError(lineno));
        }
        match key.as_str() {
            "request-version" => {
                version = Some(value.parse().map_err(|_| ParseError::SyntaxError(lineno))?);
            }
            "collection" => collection = Some(value.to_string()),
            "format" => {
                format = Some(
                    Format::from_keyword(&value.to_ascii_lowercase())
                        .ok_or_else(|| ParseError::UnknownFormat(value.to_string()))?,
                );
            }
            "runs" => runs = Some(parse_range_list(value)?),
            "events" => events = Some(parse_event_list(value)?),
            "destination" => {
                let (site, path) = value
                    .split_once(':')
                    .ok_or(ParseError::SyntaxError(lineno))?;
                destination = Some(Destination {
                    site_id: site.trim().to_string(),
                    path: path.trim().to_string(),
                });
            }
            "requester" => requester = Some(value.to_string()),
            _ => return Err(ParseError::SyntaxError(lineno)),
        }
    }

    let requester_dn = requester.ok_or(ParseError::MissingField("requester"))?;
    if requester_dn.is_empty() {
        return Err(ParseError::MissingField("requester"));
    }
    Ok(ExtractionRequest {
        version: version.unwrap_or(1),
        collection: collection.ok_or(ParseError::MissingField("collection"))?,
        format: format.ok_or(ParseError::MissingField("format"))?,
        runs: runs.ok_or(ParseError::MissingField("runs"))?,
        events: events.unwrap_or(EventSelector::All),
        destination: destination.ok_or(ParseError::MissingField("destination"))?,
        requester_dn,
    })
}

/// Render a normalized request back to document form. `parse_request`
/// of the output reproduces the request exactly.
pub fn to_document(req: &ExtractionRequest) -> String {
    let mut doc = String::new();
    let _ = writeln!(doc, "request-version: {}", req.version);
    let _ = writeln!(doc, "collection: {}", req.collection);
    let _ = writeln!(doc, "format: {}", req.format.keyword());
    let _ = writeln!(doc, "runs: {}", range_list_string(&req.runs));
    let _ = writeln!(doc, "events: {}", event_list_string(&req.events));
    let _ = writeln!(doc, "destination: {}:{}", req.destination.site_id, req.destination.path);
    let _ = writeln!(doc, "requester: {}", req.requester_dn);
    doc
}

fn range_list_string(ranges: &[RunRange]) -> String {
    ranges
        .iter()
        .map(|r| format!("{}-{}", r.lo, r.hi))
        .collect::<Vec<_>>()
        .join(",")
}

fn event_list_string(events: &EventSelector) -> String {
    match events {
        EventSelector::All => "all".to_string(),
        EventSelector::Explicit(pairs) => pairs
            .iter()
            .map(|(r, e)| format!("{r}:{e}"))
            .collect::<Vec<_>>()
            .join(","),
    }
}

/// The canonical byte string behind [`canonical_key`]. Fixed field order,
/// lowercase keywords, ascending comma-joined ranges, line-feed separators.
/// Destination and requester are excluded.
pub fn canonical_string(req: &ExtractionRequest) -> String {
    format!(
        "version:{}\ncollection:{}\nformat:{}\nruns:{}\nevents:{}\n",
        req.version,
        req.collection,
        req.format.keyword(),
        range_list_string(&req.runs),
        event_list_string(&req.events),
    )
}

/// SHA-256 of the canonical serialization, as 64 lowercase hex characters.
pub fn canonical_key(req: &ExtractionRequest) -> RequestKey {
    let digest = Sha256::digest(canonical_string(req).as_bytes());
    RequestKey(hex::encode(digest))
}
