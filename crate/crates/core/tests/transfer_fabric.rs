//! Transfer protocol exercised end to end over the simulated fabric.

use std::path::Path;

use bdb_core::fabric::{EndpointConfig, Fabric, FaultKind, FaultSpec};
use bdb_core::transfer::{
    plan_transfer, resume_transfer, run_transfer, TransferError, TransferOptions, TransferOutcome,
    TransferState,
};
use sha2::{Digest, Sha256};

const CHUNK: u64 = 64 * 1024;

fn endpoint(site: &str, root: &Path, drop_rate: f64) -> EndpointConfig {
    EndpointConfig {
        site_id: site.to_string(),
        latency_ms: 1,
        bandwidth_bytes_per_s: 10 * 1024 * 1024,
        drop_rate,
        storage_root: root.to_path_buf(),
    }
}

fn source_file(dir: &Path, bytes: usize, seed: u8) -> std::path::PathBuf {
    let path = dir.join("source.bin");
    let content: Vec<u8> = (0..bytes).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
    std::fs::write(&path, content).unwrap();
    path
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

#[test]
fn fault_free_transfer_delivers_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = Fabric::new(1);
    fabric.spawn_endpoint(endpoint("edinburgh", dir.path(), 0.0)).unwrap();
    let source = source_file(dir.path(), 3 * CHUNK as usize + 100, 1);
    let mut job = plan_transfer(&source, "edinburgh", "/scratch/out.bin", CHUNK).unwrap();
    assert_eq!(job.chunk_count(), 4);
    fabric.register_job("edinburgh", job.job_id, "/scratch/out.bin", CHUNK).unwrap();
    let mut link = fabric.link("edinburgh");
    let report = run_transfer(&mut job, &mut link, TransferOptions::default()).unwrap();
    assert_eq!(report.outcome, TransferOutcome::Complete);
    assert_eq!(job.state, TransferState::Complete);
    assert_eq!(report.bytes_sent, job.total_bytes);
    let dest = fabric.destination_file("edinburgh", job.job_id).unwrap();
    assert_eq!(sha(&dest), sha(&source));
}

#[test]
fn zero_byte_transfer_completes_with_empty_destination() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = Fabric::new(1);
    fabric.spawn_endpoint(endpoint("edinburgh", dir.path(), 0.0)).unwrap();
    let source = dir.path().join("empty.bin");
    std::fs::write(&source, b"").unwrap();
    let mut job = plan_transfer(&source, "edinburgh", "/out/empty.bin", CHUNK).unwrap();
    assert_eq!(job.chunk_count(), 0);
    fabric.register_job("edinburgh", job.job_id, "/out/empty.bin", CHUNK).unwrap();
    let mut link = fabric.link("edinburgh");
    let report = run_transfer(&mut job, &mut link, TransferOptions::default()).unwrap();
    assert_eq!(report.outcome, TransferOutcome::Complete);
    let dest = fabric.destination_file("edinburgh", job.job_id).unwrap();
    assert!(dest.exists());
    assert_eq!(std::fs::metadata(&dest).unwrap().len(), 0);
}

#[test]
fn total_loss_aborts_after_configured_retries() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = Fabric::new(1);
    fabric.spawn_endpoint(endpoint("edinburgh", dir.path(), 1.0)).unwrap();
    let source = source_file(dir.path(), CHUNK as usize, 2);
    let mut job = plan_transfer(&source, "edinburgh", "/out.bin", CHUNK).unwrap();
    fabric.register_job("edinburgh", job.job_id, "/out.bin", CHUNK).unwrap();
    let mut link = fabric.link("edinburgh");
    let report = run_transfer(&mut job, &mut link, TransferOptions::default()).unwrap();
    assert_eq!(report.outcome, TransferOutcome::Aborted);
    assert_eq!(job.state, TransferState::Aborted);
    // 1 try + 5 retries for the single chunk
    assert_eq!(report.retries, 5);
    assert_eq!(report.bytes_sent, 6 * CHUNK);
}

#[test]
fn one_shot_drop_costs_exactly_one_retry() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = Fabric::new(1);
    fabric.spawn_endpoint(endpoint("edinburgh", dir.path(), 0.0)).unwrap();
    fabric
        .inject_fault(
            "edinburgh",
            FaultSpec { kind: FaultKind::DropData { chunk: Some(2) }, sticky: false },
        )
        .unwrap();
    let source = source_file(dir.path(), 4 * CHUNK as usize, 3);
    let mut job = plan_transfer(&source, "edinburgh", "/out.bin", CHUNK).unwrap();
    fabric.register_job("edinburgh", job.job_id, "/out.bin", CHUNK).unwrap();
    let mut link = fabric.link("edinburgh");
    let report = run_transfer(&mut job, &mut link, TransferOptions::default()).unwrap();
    assert_eq!(report.outcome, TransferOutcome::Complete);
    assert_eq!(report.retries, 1);
    assert_eq!(report.bytes_sent, job.total_bytes + CHUNK);
}

#[test]
fn corrupt_verify_surfaces_checksum_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = Fabric::new(1);
    fabric.spawn_endpoint(endpoint("edinburgh", dir.path(), 0.0)).unwrap();
    fabric
        .inject_fault("edinburgh", FaultSpec { kind: FaultKind::CorruptVerify, sticky: false })
        .unwrap();
    let source = source_file(dir.path(), CHUNK as usize, 4);
    let mut job = plan_transfer(&source, "edinburgh", "/out.bin", CHUNK).unwrap();
    fabric.register_job("edinburgh", job.job_id, "/out.bin", CHUNK).unwrap();
    let mut link = fabric.link("edinburgh");
    let err = run_transfer(&mut job, &mut link, TransferOptions::default()).unwrap_err();
    assert!(matches!(err, TransferError::ChecksumMismatch));
    assert_eq!(job.state, TransferState::Aborted);
    // chunks stay acked for resume
    assert_eq!(job.acked_count(), 1);
    // resume on a clean fabric verifies without resending data
    let report = resume_transfer(&mut job, &mut link, TransferOptions::default()).unwrap();
    assert_eq!(report.outcome, TransferOutcome::Complete);
    assert_eq!(report.bytes_sent, 0);
}

#[test]
fn unreachable_destination_reported() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = Fabric::new(1);
    fabric.spawn_endpoint(endpoint("edinburgh", dir.path(), 0.0)).unwrap();
    fabric
        .inject_fault("edinburgh", FaultSpec { kind: FaultKind::Unreachable, sticky: true })
        .unwrap();
    let source = source_file(dir.path(), CHUNK as usize, 5);
    let mut job = plan_transfer(&source, "edinburgh", "/out.bin", CHUNK).unwrap();
    fabric.register_job("edinburgh", job.job_id, "/out.bin", CHUNK).unwrap();
    let mut link = fabric.link("edinburgh");
    assert!(matches!(
        run_transfer(&mut job, &mut link, TransferOptions::default()),
        Err(TransferError::DestinationUnreachable)
    ));
}

#[test]
fn resume_skips_acked_chunks_and_delivers_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = Fabric::new(1);
    fabric.spawn_endpoint(endpoint("edinburgh", dir.path(), 0.0)).unwrap();
    // chunk 2 fails persistently during the first run
    fabric
        .inject_fault(
            "edinburgh",
            FaultSpec { kind: FaultKind::DropData { chunk: Some(2) }, sticky: true },
        )
        .unwrap();
    let source = source_file(dir.path(), 5 * CHUNK as usize, 6);
    let mut job = plan_transfer(&source, "edinburgh", "/out.bin", CHUNK).unwrap();
    fabric.register_job("edinburgh", job.job_id, "/out.bin", CHUNK).unwrap();
    let mut link = fabric.link("edinburgh");
    let report = run_transfer(&mut job, &mut link, TransferOptions::default()).unwrap();
    assert_eq!(report.outcome, TransferOutcome::Aborted);
    assert_eq!(job.acked_count(), 2); // chunks 0 and 1 landed

    // heal the fabric: replace the sticky fault by spawning nothing new,
    // the sticky fault list is internal, so use a fresh fabric sharing the
    // same storage root to model the healthy retry path
    let fabric2 = Fabric::new(2);
    fabric2.spawn_endpoint(endpoint("edinburgh", dir.path(), 0.0)).unwrap();
    fabric2.register_job("edinburgh", job.job_id, "/out.bin", CHUNK).unwrap();
    let mut link2 = fabric2.link("edinburgh");
    let resumed = resume_transfer(&mut job, &mut link2, TransferOptions::default()).unwrap();
    assert_eq!(resumed.outcome, TransferOutcome::Complete);
    // only the three unacked chunks were retransmitted
    assert_eq!(resumed.bytes_sent, 3 * CHUNK);
    assert!(resumed.bytes_sent < job.total_bytes);
    let dest = fabric2.destination_file("edinburgh", job.job_id).unwrap();
    assert_eq!(sha(&dest), sha(&source));
}

#[test]
fn resume_of_complete_job_is_noop() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = Fabric::new(1);
    fabric.spawn_endpoint(endpoint("edinburgh", dir.path(), 0.0)).unwrap();
    let source = source_file(dir.path(), CHUNK as usize, 7);
    let mut job = plan_transfer(&source, "edinburgh", "/out.bin", CHUNK).unwrap();
    fabric.register_job("edinburgh", job.job_id, "/out.bin", CHUNK).unwrap();
    let mut link = fabric.link("edinburgh");
    run_transfer(&mut job, &mut link, TransferOptions::default()).unwrap();
    let before = sha(&fabric.destination_file("edinburgh", job.job_id).unwrap());
    let report = resume_transfer(&mut job, &mut link, TransferOptions::default()).unwrap();
    assert_eq!(report.bytes_sent, 0);
    assert_eq!(report.outcome, TransferOutcome::Complete);
    assert_eq!(sha(&fabric.destination_file("edinburgh", job.job_id).unwrap()), before);
}

#[test]
fn seeded_lossy_transfers_complete_with_identical_bytes() {
    // drop rate 0.3; each seeded run must deliver source bytes exactly,
    // resuming when a run aborts
    for seed in 0..20u64 {
        let dir = tempfile::tempdir().unwrap();
        let fabric = Fabric::new(seed);
        fabric.spawn_endpoint(endpoint("edinburgh", dir.path(), 0.3)).unwrap();
        let source = source_file(dir.path(), 4 * CHUNK as usize + 17, seed as u8);
        let mut job = plan_transfer(&source, "edinburgh", "/out.bin", CHUNK).unwrap();
        fabric.register_job("edinburgh", job.job_id, "/out.bin", CHUNK).unwrap();
        let mut link = fabric.link("edinburgh");
        let mut report = run_transfer(&mut job, &mut link, TransferOptions::default()).unwrap();
        let mut resumes = 0;
        while report.outcome == TransferOutcome::Aborted {
            resumes += 1;
            assert!(resumes < 100, "seed {seed} failed to converge");
            report = resume_transfer(&mut job, &mut link, TransferOptions::default()).unwrap();
        }
        let dest = fabric.destination_file("edinburgh", job.job_id).unwrap();
        assert_eq!(sha(&dest), sha(&source), "seed {seed}");
    }
}
