//! Chunked, checksummed, resumable push of a result file to a destination
//! endpoint.
//!
//! Wire framing per message, all integers little-endian:
//!
//! ```text
//! magic "BDBT", u8 version=1, u8 type, 16-byte job id,
//! u32 chunk index, u32 payload length, payload
//! ```
//!
//! Types: 1=DATA, 2=ACK, 3=VERIFY, 4=VERIFY_OK, 5=ERR. VERIFY carries the
//! 32-byte SHA-256 of the whole file; the destination recomputes and
//! confirms, so `Complete` always means byte-identical content at both
//! ends. A job's acked-chunk bitmap survives an abort, and resume never
//! retransmits an acked chunk.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const WIRE_MAGIC: &[u8; 4] = b"BDBT";
pub const WIRE_VERSION: u8 = 1;
pub const DEFAULT_CHUNK_SIZE: u64 = 4 * 1024 * 1024;
pub const DEFAULT_MAX_RETRIES: u32 = 5;
pub const DEFAULT_BACKOFF_BASE_MS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    Data = 1,
    Ack = 2,
    Verify = 3,
    VerifyOk = 4,
    Err = 5,
}

impl FrameType {
    fn from_u8(b: u8) -> Option<FrameType> {
        Some(match b {
            1 => FrameType::Data,
            2 => FrameType::Ack,
            3 => FrameType::Verify,
            4 => FrameType::VerifyOk,
            5 => FrameType::Err,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub job_id: [u8; 16],
    pub chunk_index: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("bad frame magic")]
    BadMagic,
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("unknown frame type {0}")]
    BadType(u8),
    #[error("truncated frame")]
    Truncated,
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(30 + frame.payload.len());
    out.extend_from_slice(WIRE_MAGIC);
    out.push(WIRE_VERSION);
    out.push(frame.frame_type as u8);
    out.extend_from_slice(&frame.job_id);
    out.extend_from_slice(&frame.chunk_index.to_le_bytes());
    out.extend_from_slice(&(frame.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&frame.payload);
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, WireError> {
    if bytes.len() < 30 {
        return Err(WireError::Truncated);
    }
    if &bytes[..4] != WIRE_MAGIC {
        return Err(WireError::BadMagic);
    }
    if bytes[4] != WIRE_VERSION {
        return Err(WireError::BadVersion(bytes[4]));
    }
    let frame_type = FrameType::from_u8(bytes[5]).ok_or(WireError::BadType(bytes[5]))?;
    let mut job_id = [0u8; 16];
    job_id.copy_from_slice(&bytes[6..22]);
    let chunk_index = u32::from_le_bytes(bytes[22..26].try_into().unwrap());
    let len = u32::from_le_bytes(bytes[26..30].try_into().unwrap()) as usize;
    if bytes.len() < 30 + len {
        return Err(WireError::Truncated);
    }
    Ok(Frame {
        frame_type,
        job_id,
        chunk_index,
        payload: bytes[30..30 + len].to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferState {
    Planned,
    InFlight,
    Complete,
    Aborted,
}

#[derive(Debug, Clone)]
pub struct TransferJob {
    pub job_id: [u8; 16],
    pub source: PathBuf,
    pub destination_site: String,
    pub destination_path: String,
    pub chunk_size: u64,
    pub chunks_acked: Vec<bool>,
    pub total_bytes: u64,
    pub file_checksum: String,
    pub state: TransferState,
    /// Destination verify confirmed. A resumed job with every chunk acked
    /// but no confirmation still runs the verify round.
    pub verified: bool,
}

impl TransferJob {
    pub fn chunk_count(&self) -> u32 {
        self.chunks_acked.len() as u32
    }

    pub fn acked_count(&self) -> u32 {
        self.chunks_acked.iter().filter(|&&a| a).count() as u32
    }

    fn chunk_len(&self, index: u32) -> u64 {
        let start = index as u64 * self.chunk_size;
        (self.total_bytes - start).min(self.chunk_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferOutcome {
    Complete,
    Aborted,
}

#[derive(Debug, Clone)]
pub struct TransferReport {
    pub job_id: [u8; 16],
    /// Payload bytes pushed in this call, retransmits included.
    pub bytes_sent: u64,
    pub retries: u32,
    pub duration_ms: u64,
    pub outcome: TransferOutcome,
}

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("unknown destination site: {0}")]
    UnknownDestination(String),
    #[error("destination unreachable")]
    DestinationUnreachable,
    #[error("destination checksum verify failed")]
    ChecksumMismatch,
    #[error("transfer io: {0}")]
    Io(String),
}

/// One request/response exchange with the destination. The transfer plane
/// always speaks encoded frames; the link carries them and may lose them.
pub trait ChunkLink {
    fn exchange(&mut self, frame_bytes: &[u8]) -> LinkOutcome;
    /// Simulated milliseconds spent so far, for reports.
    fn elapsed_ms(&self) -> u64 {
        0
    }
    /// Advance simulated time without traffic (retry backoff).
    fn sleep(&mut self, _ms: u64) {}
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinkOutcome {
    Reply(Vec<u8>),
    Dropped,
    Unreachable,
}

#[derive(Debug, Clone, Copy)]
pub struct TransferOptions {
    pub max_retries_per_chunk: u32,
    pub backoff_base_ms: u64,
}

impl Default for TransferOptions {
    fn default() -> TransferOptions {
        TransferOptions {
            max_retries_per_chunk: DEFAULT_MAX_RETRIES,
            backoff_base_ms: DEFAULT_BACKOFF_BASE_MS,
        }
    }
}

/// Plan a transfer of `source` (a single packed file) to a destination.
/// Chunk count is `ceil(total / chunk_size)`; a zero-byte file has zero
/// chunks and still verifies.
pub fn plan_transfer(
    source: &Path,
    destination_site: &str,
    destination_path: &str,
    chunk_size: u64,
) -> Result<TransferJob, TransferError> {
    let bytes = std::fs::metadata(source)
        .map_err(|e| TransferError::Io(e.to_string()))?
        .len();
    let content = std::fs::read(source).map_err(|e| TransferError::Io(e.to_string()))?;
    let checksum = hex::encode(Sha256::digest(&content));
    let chunk_count = bytes.div_ceil(chunk_size);
    let mut job_id = [0u8; 16];
    rand::RngCore::fill_bytes(&mut rand::thread_rng(), &mut job_id);
    Ok(TransferJob {
        job_id,
        source: source.to_path_buf(),
        destination_site: destination_site.to_string(),
        destination_path: destination_path.to_string(),
        chunk_size,
        chunks_acked: vec![false; chunk_count as usize],
        total_bytes: bytes,
        file_checksum: checksum,
        state: TransferState::Planned,
        verified: false,
    })
}

/// Send all unacked chunks in order, then run the verify round. On chunk
/// retry exhaustion the job aborts with its bitmap preserved for resume.
pub fn run_transfer(
    job: &mut TransferJob,
    link: &mut dyn ChunkLink,
    options: TransferOptions,
) -> Result<TransferReport, TransferError> {
    let started_ms = link.elapsed_ms();
    if job.state == TransferState::Complete {
        return Ok(TransferReport {
            job_id: job.job_id,
            bytes_sent: 0,
            retries: 0,
            duration_ms: 0,
            outcome: TransferOutcome::Complete,
        });
    }
    job.state = TransferState::InFlight;
    let content = std::fs::read(&job.source).map_err(|e| TransferError::Io(e.to_string()))?;
    let mut bytes_sent = 0u64;
    let mut retries = 0u32;

    for index in 0..job.chunk_count() {
        if job.chunks_acked[index as usize] {
            continue;
        }
        let start = index as u64 * job.chunk_size;
        let len = job.chunk_len(index);
        let payload = content[start as usize..(start + len) as usize].to_vec();
        let frame = encode_frame(&Frame {
            frame_type: FrameType::Data,
            job_id: job.job_id,
            chunk_index: index,
            payload,
        });
        let mut acked = false;
        for attempt in 0..=options.max_retries_per_chunk {
            if attempt > 0 {
                retries += 1;
                link.sleep(options.backoff_base_ms << (attempt - 1));
            }
            bytes_sent += len;
            match link.exchange(&frame) {
                LinkOutcome::Reply(reply) => match decode_frame(&reply) {
                    Ok(f) if f.frame_type == FrameType::Ack && f.chunk_index == index => {
                        acked = true;
                        break;
                    }
                    _ => continue,
                },
                LinkOutcome::Dropped => continue,
                LinkOutcome::Unreachable => {
                    job.state = TransferState::Aborted;
                    return Err(TransferError::DestinationUnreachable);
                }
            }
        }
        if !acked {
            job.state = TransferState::Aborted;
            return Ok(TransferReport {
                job_id: job.job_id,
                bytes_sent,
                retries,
                duration_ms: link.elapsed_ms() - started_ms,
                outcome: TransferOutcome::Aborted,
            });
        }
        job.chunks_acked[index as usize] = true;
    }

    // verify round: the destination recomputes the file checksum
    let checksum_bytes = hex::decode(&job.file_checksum).expect("checksum is hex");
    let verify = encode_frame(&Frame {
        frame_type: FrameType::Verify,
        job_id: job.job_id,
        chunk_index: 0,
        payload: checksum_bytes,
    });
    let mut verified = false;
    for attempt in 0..=options.max_retries_per_chunk {
        if attempt > 0 {
            retries += 1;
            link.sleep(options.backoff_base_ms << (attempt - 1));
        }
        match link.exchange(&verify) {
            LinkOutcome::Reply(reply) => match decode_frame(&reply) {
                Ok(f) if f.frame_type == FrameType::VerifyOk => {
                    verified = true;
                    break;
                }
                Ok(f) if f.frame_type == FrameType::Err => {
                    job.state = TransferState::Aborted;
                    return Err(TransferError::ChecksumMismatch);
                }
                _ => continue,
            },
            LinkOutcome::Dropped => continue,
            LinkOutcome::Unreachable => {
                job.state = TransferState::Aborted;
                return Err(TransferError::DestinationUnreachable);
            }
        }
    }
    if !verified {
        job.state = TransferState::Aborted;
        return Ok(TransferReport {
            job_id: job.job_id,
            bytes_sent,
            retries,
            duration_ms: link.elapsed_ms() - started_ms,
            outcome: TransferOutcome::Aborted,
        });
    }
    job.verified = true;
    job.state = TransferState::Complete;
    Ok(TransferReport {
        job_id: job.job_id,
        bytes_sent,
        retries,
        duration_ms: link.elapsed_ms() - started_ms,
        outcome: TransferOutcome::Complete,
    })
}

/// Retransmit only unacked chunks; completion semantics are identical to
/// [`run_transfer`]. Resuming a Complete job is a no-op.
pub fn resume_transfer(
    job: &mut TransferJob,
    link: &mut dyn ChunkLink,
    options: TransferOptions,
) -> Result<TransferReport, TransferError> {
    run_transfer(job, link, options)
}
