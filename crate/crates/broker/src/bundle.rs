//! Deterministic single-file packing of an extraction result.
//!
//! A transfer job moves exactly one file, so the result directory (`data`,
//! `manifest`, `extract`) is packed before shipping and can be unpacked at
//! the far end. Identical directories pack to identical bytes.
//!
//! Layout: magic `BDBB`, version byte, u32le file count, then per file in
//! ascending name order: u16le name length, name, u64le content length,
//! content.

use std::path::Path;

pub const BUNDLE_MAGIC: &[u8; 4] = b"BDBB";
pub const BUNDLE_VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("bundle io: {0}")]
    Io(String),
    #[error("not a bundle")]
    BadMagic,
    #[error("unsupported bundle version {0}")]
    BadVersion(u8),
    #[error("truncated bundle")]
    Truncated,
    #[error("bundle member has invalid name")]
    BadName,
}

/// Pack the regular files directly under `dir` into `out`.
pub fn pack(dir: &Path, out: &Path) -> Result<(), BundleError> {
    let mut names: Vec<String> = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| BundleError::Io(e.to_string()))?;
    for entry in entries {
        let entry = entry.map_err(|e| BundleError::Io(e.to_string()))?;
        if entry.file_type().map_err(|e| BundleError::Io(e.to_string()))?.is_file() {
            names.push(entry.file_name().into_string().map_err(|_| BundleError::BadName)?);
        }
    }
    names.sort();
    pack_members(dir, &names, out)
}

/// Pack exactly the named files under `dir` into `out`, in the order
/// given. Callers that must produce identical bundles for identical
/// content pass a fixed name list, keeping incidental neighbors (caching
/// metadata, scratch files) out of the payload.
pub fn pack_members<S: AsRef<str>>(dir: &Path, names: &[S], out: &Path) -> Result<(), BundleError> {
    let names: Vec<&str> = names.iter().map(AsRef::as_ref).collect();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(BUNDLE_MAGIC);
    bytes.push(BUNDLE_VERSION);
    bytes.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for name in &names {
        let content = std::fs::read(dir.join(name))
            .map_err(|e| BundleError::Io(format!("{name}: {e}")))?;
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(content.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&content);
    }
    std::fs::write(out, bytes).map_err(|e| BundleError::Io(e.to_string()))
}

/// Unpack a bundle file into `dir`, creating it if needed.
pub fn unpack(bundle: &Path, dir: &Path) -> Result<Vec<String>, BundleError> {
    let bytes = std::fs::read(bundle).map_err(|e| BundleError::Io(e.to_string()))?;
    let members = parse(&bytes)?;
    std::fs::create_dir_all(dir).map_err(|e| BundleError::Io(e.to_string()))?;
    let mut names = Vec::with_capacity(members.len());
    for (name, content) in members {
        std::fs::write(dir.join(&name), content).map_err(|e| BundleError::Io(e.to_string()))?;
        names.push(name);
    }
    Ok(names)
}

fn parse(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>, BundleError> {
    if bytes.len() < 9 {
        return Err(BundleError::Truncated);
    }
    if &bytes[0..4] != BUNDLE_MAGIC {
        return Err(BundleError::BadMagic);
    }
    if bytes[4] != BUNDLE_VERSION {
        return Err(BundleError::BadVersion(bytes[4]));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let mut members = Vec::with_capacity(count);
    let mut at = 9usize;
    for _ in 0..count {
        let name_len = u16::from_le_bytes(
            bytes.get(at..at + 2).ok_or(BundleError::Truncated)?.try_into().unwrap(),
        ) as usize;
        at += 2;
        let name = std::str::from_utf8(bytes.get(at..at + name_len).ok_or(BundleError::Truncated)?)
            .map_err(|_| BundleError::BadName)?;
        if name.is_empty() || name.contains('/') || name.contains('\\') || name.starts_with('.') {
            return Err(BundleError::BadName);
        }
        at += name_len;
        let content_len = u64::from_le_bytes(
            bytes.get(at..at + 8).ok_or(BundleError::Truncated)?.try_into().unwrap(),
        ) as usize;
        at += 8;
        let content = bytes.get(at..at + content_len).ok_or(BundleError::Truncated)?.to_vec();
        at += content_len;
        members.push((name.to_string(), content));
    }
    if at != bytes.len() {
        return Err(BundleError::Truncated);
    }
    Ok(members)
}
