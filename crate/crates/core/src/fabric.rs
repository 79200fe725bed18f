//! In-process simulated destination endpoints.
//!
//! The fabric is the test double for remote sites: it speaks the real
//! transfer wire framing over an in-process link, applies configurable
//! latency, bandwidth, and seeded random chunk loss, and supports targeted
//! fault injection (one-shot or sticky). Time is a logical clock, so every
//! timing test is deterministic and fast, and a fixed seed reproduces the
//! full event log bit for bit.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::transfer::{decode_frame, encode_frame, ChunkLink, Frame, FrameType, LinkOutcome};

#[derive(Debug, Clone, Deserialize)]
pub struct EndpointConfig {
    pub site_id: String,
    /// Simulated milliseconds per message exchange.
    #[serde(default)]
    pub latency_ms: u64,
    /// Bytes per simulated second. Must be positive.
    pub bandwidth_bytes_per_s: u64,
    /// Probability a chunk message is lost, per send.
    #[serde(default)]
    pub drop_rate: f64,
    pub storage_root: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FaultKind {
    /// Drop DATA frames; `chunk: None` matches any index.
    DropData { chunk: Option<u32> },
    /// Flip a byte in the VERIFY payload so the destination check fails.
    CorruptVerify,
    /// Refuse everything: the site is down.
    Unreachable,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    /// Sticky faults persist; one-shot faults clear after first trigger.
    #[serde(default)]
    pub sticky: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FabricError {
    #[error("endpoint already spawned for site {0}")]
    DuplicateEndpoint(String),
    #[error("unknown endpoint: {0}")]
    UnknownEndpoint(String),
    #[error("bandwidth must be positive")]
    BadBandwidth,
    #[error("drop rate must be within [0, 1]")]
    BadDropRate,
}

struct JobInfo {
    dest_path: PathBuf,
    chunk_size: u64,
}

struct Endpoint {
    config: EndpointConfig,
    faults: Vec<FaultSpec>,
    jobs: HashMap<[u8; 16], JobInfo>,
}

struct FabricState {
    now_ms: u64,
    rng: ChaCha8Rng,
    endpoints: HashMap<String, Endpoint>,
    log: Vec<String>,
}

/// One fabric instance: a logical clock, a seeded drop sequence, and a set
/// of endpoints.
pub struct Fabric {
    state: Mutex<FabricState>,
}

impl Fabric {
    pub fn new(seed: u64) -> Arc<Fabric> {
        Arc::new(Fabric {
            state: Mutex::new(FabricState {
                now_ms: 0,
                rng: ChaCha8Rng::seed_from_u64(seed),
                endpoints: HashMap::new(),
                log: Vec::new(),
            }),
        })
    }

    pub fn now_ms(&self) -> u64 {
        self.state.lock().unwrap().now_ms
    }

    pub fn advance(&self, ms: u64) {
        self.state.lock().unwrap().now_ms += ms;
    }

    pub fn event_log(&self) -> Vec<String> {
        self.state.lock().unwrap().log.clone()
    }

    pub fn spawn_endpoint(&self, config: EndpointConfig) -> Result<(), FabricError> {
        if config.bandwidth_bytes_per_s == 0 {
            return Err(FabricError::BadBandwidth);
        }
        if !(0.0..=1.0).contains(&config.drop_rate) {
            return Err(FabricError::BadDropRate);
        }
        let mut state = self.state.lock().unwrap();
        if state.endpoints.contains_key(&config.site_id) {
            return Err(FabricError::DuplicateEndpoint(config.site_id));
        }
        state.endpoints.insert(
            config.site_id.clone(),
            Endpoint {
                config,
                faults: Vec::new(),
                jobs: HashMap::new(),
            },
        );
        Ok(())
    }

    pub fn has_endpoint(&self, site_id: &str) -> bool {
        self.state.lock().unwrap().endpoints.contains_key(site_id)
    }

    pub fn inject_fault(&self, site_id: &str, spec: FaultSpec) -> Result<(), FabricError> {
        let mut state = self.state.lock().unwrap();
        let endpoint = state
            .endpoints
            .get_mut(site_id)
            .ok_or_else(|| FabricError::UnknownEndpoint(site_id.to_string()))?;
        endpoint.faults.push(spec);
        Ok(())
    }

    /// Tell the endpoint where a job's bytes land, relative to its storage
    /// root. The chunk plane carries only the 16-byte job id.
    pub fn register_job(
        &self,
        site_id: &str,
        job_id: [u8; 16],
        dest_path: &str,
        chunk_size: u64,
    ) -> Result<(), FabricError> {
        let mut state = self.state.lock().unwrap();
        let endpoint = state
            .endpoints
            .get_mut(site_id)
            .ok_or_else(|| FabricError::UnknownEndpoint(site_id.to_string()))?;
        let dest = endpoint
            .config
            .storage_root
            .join(dest_path.trim_start_matches('/'));
        endpoint.jobs.insert(
            job_id,
            JobInfo {
                dest_path: dest,
                chunk_size,
            },
        );
        Ok(())
    }

    pub fn destination_file(&self, site_id: &str, job_id: [u8; 16]) -> Option<PathBuf> {
        let state = self.state.lock().unwrap();
        state
            .endpoints
            .get(site_id)?
            .jobs
            .get(&job_id)
            .map(|j| j.dest_path.clone())
    }

    /// Lower bound on simulated transfer time for `bytes` through an
    /// endpoint: per-message latency plus the bandwidth term.
    pub fn simulated_duration_ms(
        &self,
        site_id: &str,
        bytes: u64,
        chunk_size: u64,
    ) -> Result<u64, FabricError> {
        let state = self.state.lock().unwrap();
        let endpoint = state
            .endpoints
            .get(site_id)
            .ok_or_else(|| FabricError::UnknownEndpoint(site_id.to_string()))?;
        // data messages plus the verify round
        let messages = bytes.div_ceil(chunk_size) + 1;
        Ok(endpoint.config.latency_ms * messages
            + bytes * 1000 / endpoint.config.bandwidth_bytes_per_s)
    }

    pub fn link(self: &Arc<Fabric>, site_id: &str) -> FabricLink {
        FabricLink {
            fabric: self.clone(),
            site_id: site_id.to_string(),
        }
    }

    fn handle_exchange(&self, site_id: &str, frame_bytes: &[u8]) -> LinkOutcome {
        let mut state = self.state.lock().unwrap();
        let state = &mut *state;
        let Some(endpoint) = state.endpoints.get_mut(site_id) else {
            return LinkOutcome::Unreachable;
        };
        let Ok(mut frame) = decode_frame(frame_bytes) else {
            return LinkOutcome::Reply(encode_frame(&Frame {
                frame_type: FrameType::Err,
                job_id: [0; 16],
                chunk_index: 0,
                payload: b"bad frame".to_vec(),
            }));
        };

        // clock: latency per exchange plus payload over bandwidth
        state.now_ms += endpoint.config.latency_ms
            + frame.payload.len() as u64 * 1000 / endpoint.config.bandwidth_bytes_per_s;

        // targeted faults take precedence over random loss
        if let Some(idx) = endpoint.faults.iter().position(|f| match f.kind {
            FaultKind::DropData { chunk } => {
                frame.frame_type == FrameType::Data
                    && chunk.map_or(true, |c| c == frame.chunk_index)
            }
            FaultKind::CorruptVerify => frame.frame_type == FrameType::Verify,
            FaultKind::Unreachable => true,
        }) {
            let fault = endpoint.faults[idx];
            if !fault.sticky {
                endpoint.faults.remove(idx);
            }
            match fault.kind {
                FaultKind::DropData { .. } => {
                    state.log.push(format!(
                        "t={} site={} chunk={} fault-drop",
                        state.now_ms, site_id, frame.chunk_index
                    ));
                    return LinkOutcome::Dropped;
                }
                FaultKind::CorruptVerify => {
                    state.log.push(format!(
                        "t={} site={} verify fault-corrupt",
                        state.now_ms, site_id
                    ));
                    if let Some(byte) = frame.payload.first_mut() {
                        *byte ^= 0xff;
                    }
                }
                FaultKind::Unreachable => {
                    state.log.push(format!("t={} site={} unreachable", state.now_ms, site_id));
                    return LinkOutcome::Unreachable;
                }
            }
        }

        // seeded random chunk loss
        if frame.frame_type == FrameType::Data
            && endpoint.config.drop_rate > 0.0
            && state.rng.gen_bool(endpoint.config.drop_rate)
        {
            state.log.push(format!(
                "t={} site={} chunk={} drop",
                state.now_ms, site_id, frame.chunk_index
            ));
            return LinkOutcome::Dropped;
        }

        let reply = endpoint_handle_frame(endpoint, &frame);
        state.log.push(format!(
            "t={} site={} type={} chunk={} deliver reply={}",
            state.now_ms,
            site_id,
            frame.frame_type as u8,
            frame.chunk_index,
            reply.frame_type as u8,
        ));
        LinkOutcome::Reply(encode_frame(&reply))
    }
}

fn endpoint_handle_frame(endpoint: &mut Endpoint, frame: &Frame) -> Frame {
    let err = |detail: &str| Frame {
        frame_type: FrameType::Err,
        job_id: frame.job_id,
        chunk_index: frame.chunk_index,
        payload: detail.as_bytes().to_vec(),
    };
    let Some(job) = endpoint.jobs.get(&frame.job_id) else {
        return err("unknown job");
    };
    match frame.frame_type {
        FrameType::Data => {
            if let Some(parent) = job.dest_path.parent() {
                if std::fs::create_dir_all(parent).is_err() {
                    return err("storage unavailable");
                }
            }
            let written = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .open(&job.dest_path)
                .and_then(|mut f| {
                    use std::io::{Seek, SeekFrom, Write};
                    f.seek(SeekFrom::Start(frame.chunk_index as u64 * job.chunk_size))?;
                    f.write_all(&frame.payload)
                });
            match written {
                Ok(()) => Frame {
                    frame_type: FrameType::Ack,
                    job_id: frame.job_id,
                    chunk_index: frame.chunk_index,
                    payload: Vec::new(),
                },
                Err(_) => err("write failed"),
            }
        }
        FrameType::Verify => {
            if !job.dest_path.exists() {
                // zero-chunk job: the destination file is empty
                if let Some(parent) = job.dest_path.parent() {
                    let _ = std::fs::create_dir_all(parent);
                }
                if std::fs::write(&job.dest_path, b"").is_err() {
                    return err("storage unavailable");
                }
            }
            let Ok(content) = std::fs::read(&job.dest_path) else {
                return err("read failed");
            };
            let actual = Sha256::digest(&content);
            if actual.as_slice() == frame.payload.as_slice() {
                Frame {
                    frame_type: FrameType::VerifyOk,
                    job_id: frame.job_id,
                    chunk_index: 0,
                    payload: Vec::new(),
                }
            } else {
                err("checksum mismatch")
            }
        }
        _ => err("unexpected frame type"),
    }
}

pub struct FabricLink {
    fabric: Arc<Fabric>,
    site_id: String,
}

impl ChunkLink for FabricLink {
    fn exchange(&mut self, frame_bytes: &[u8]) -> LinkOutcome {
        self.fabric.handle_exchange(&self.site_id, frame_bytes)
    }

    fn elapsed_ms(&self) -> u64 {
        self.fabric.now_ms()
    }

    fn sleep(&mut self, ms: u64) {
        self.fabric.advance(ms);
    }
}

/// Scenario file: line-delimited JSON records describing endpoints and
/// faults to apply at startup.
#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case", tag = "record")]
pub enum ScenarioRecord {
    Endpoint(EndpointConfig),
    Fault { site_id: String, spec: FaultSpec },
}

pub fn load_scenario(fabric: &Arc<Fabric>, text: &str) -> Result<(), String> {
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let record: ScenarioRecord =
            serde_json::from_str(line).map_err(|e| format!("scenario line {}: {e}", idx + 1))?;
        match record {
            ScenarioRecord::Endpoint(config) => fabric
                .spawn_endpoint(config)
                .map_err(|e| format!("scenario line {}: {e}", idx + 1))?,
            ScenarioRecord::Fault { site_id, spec } => fabric
                .inject_fault(&site_id, spec)
                .map_err(|e| format!("scenario line {}: {e}", idx + 1))?,
        }
    }
    Ok(())
}
