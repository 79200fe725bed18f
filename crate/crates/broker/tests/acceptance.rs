//! Acceptance gate: eight end-to-end criteria, one test and one printed
//! pass line each. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines; any failed criterion fails its test.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use bdb_broker::config::BrokerConfig;
use bdb_broker::Broker;
use bdb_core::catalog::{Catalog, CollectionPlacement, Format, Site, StorageClass, Tier};
use bdb_core::extraction::{deep_copy, select_events, QuotaScope};
use bdb_core::fabric::{EndpointConfig, Fabric};
use bdb_core::identity::{IdentityError, IdentityService};
use bdb_core::intake::ReceiptState;
use bdb_core::request::{EventSelector, RunRange};
use bdb_core::store::{write_store, EventRecord, EventStore};
use bdb_core::transfer::{
    plan_transfer, resume_transfer, run_transfer, TransferOptions, TransferOutcome,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn pass(n: u32, what: &str) {
    println!("[PASS] criterion {n}: {what}");
}

fn seed_store(dir: &Path, collection: &str, events: u32) {
    let records: Vec<EventRecord> = (1..=events)
        .map(|i| EventRecord {
            run: 1 + (i - 1) / 10,
            event: i,
            sections: BTreeMap::from([(1u8, vec![i as u8; 32]), (2u8, vec![i as u8; 96])]),
        })
        .collect();
    write_store(dir, collection, &records).unwrap();
}

fn broker_fixture(root: &Path, interval_ms: u64) -> Arc<Broker> {
    let source = root.join("source");
    std::fs::create_dir_all(&source).unwrap();
    seed_store(&source, "bsemi", 200);
    let config = BrokerConfig::from_toml(&format!(
        r#"
            work_root = "{root}"
            local_site = "edinburgh"
            collation_interval_ms = {interval_ms}
            fabric_seed = 7
            account_map = {{ "/DC=org/CN=Alice" = "alice" }}

            [[site]]
            site_id = "edinburgh"
            tier = "A"

            [[site]]
            site_id = "ral"
            tier = "C"
            latency_ms = 1

            [[collection]]
            collection_id = "bsemi"
            site_id = "edinburgh"
            format = "micro"
            storage_class = "disk"
            store_path = "{source}"
        "#,
        root = root.display(),
        source = source.display(),
    ))
    .unwrap();
    Broker::open(config).unwrap()
}

fn document(runs: &str, dest_path: &str) -> String {
    format!(
        "request-version: 1\ncollection: bsemi\nformat: micro\nruns: {runs}\nevents: all\ndestination: ral:{dest_path}\nrequester: /DC=org/CN=Alice\n"
    )
}

#[test]
fn criterion_1_capacity_without_loss() {
    let started = std::time::Instant::now();
    let root = tempfile::tempdir().unwrap();
    let broker = broker_fixture(root.path(), 100);

    // 100 simultaneous submissions with distinct selections
    let mut receipt_ids = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for i in 0..100u32 {
            let broker = &broker;
            handles.push(scope.spawn(move || {
                let runs = format!("{}-{}", 1 + i % 20, 1 + i % 20);
                let doc = document(&runs, &format!("/out/{i}.bundle"));
                broker.submit(&doc, "/DC=org/CN=Alice").unwrap().receipt_id
            }));
        }
        for handle in handles {
            receipt_ids.push(handle.join().unwrap());
        }
    });
    assert_eq!(receipt_ids.len(), 100);

    let mut dispatched_total = 0;
    for _ in 0..100 {
        broker.advance(100);
        let stats = broker.tick();
        assert!(stats.peak_running <= 20, "running count above the cap: {}", stats.peak_running);
        assert!(stats.dispatched <= 20);
        dispatched_total += stats.dispatched;
        if dispatched_total == 100 && broker.scheduler.running_count() == 0 {
            break;
        }
    }
    assert_eq!(dispatched_total, 100, "every receipt must be dispatched");

    // conservation: every receipt in exactly one terminal state
    let mut terminal = 0;
    for id in &receipt_ids {
        let receipt = broker.status(id).unwrap();
        assert!(receipt.state.is_terminal(), "receipt {id} ended as {:?}", receipt.state);
        assert_eq!(receipt.state, ReceiptState::Done, "{:?}", receipt.detail);
        let terminal_states = receipt
            .history
            .iter()
            .filter(|(s, _)| s.is_terminal())
            .count();
        assert_eq!(terminal_states, 1);
        terminal += 1;
    }
    assert_eq!(terminal, 100);
    assert!(broker.now_ms() < 30_000, "simulated clock ran to {} ms", broker.now_ms());
    assert!(started.elapsed().as_secs() < 30);
    pass(1, "100 simultaneous requests, cap 20, zero silent loss, conservation exact");
}

#[test]
fn criterion_2_collation_batching() {
    let root = tempfile::tempdir().unwrap();
    let broker = broker_fixture(root.path(), 100);
    // home-site deliveries keep the logical clock exact: no transfer leg,
    // so processing consumes no simulated time
    let document = |runs: &str, dest: &str| {
        format!(
            "request-version: 1\ncollection: bsemi\nformat: micro\nruns: {runs}\nevents: all\ndestination: edinburgh:{dest}\nrequester: /DC=org/CN=Alice\n"
        )
    };

    // establish a collation epoch at t=100
    broker.advance(100);
    let stats = broker.tick();
    assert!(stats.collated_round);
    let epoch = broker.now_ms();

    // everything submitted within one interval forms one FIFO batch
    let a = broker.submit(&document("1-1", "/a"), "/DC=org/CN=Alice").unwrap();
    broker.advance(40);
    let b = broker.submit(&document("2-2", "/b"), "/DC=org/CN=Alice").unwrap();
    broker.advance(59);
    // one tick before the boundary: no collation happens
    let stats = broker.tick();
    assert!(!stats.collated_round);
    assert_eq!(broker.intake.pending_count(), 2);

    broker.advance(1);
    let stats = broker.tick();
    assert!(stats.collated_round);
    assert_eq!(stats.collated, 2);
    assert_eq!(broker.now_ms(), epoch + 100, "local deliveries must not consume simulated time");

    // both receipts collated at exactly the boundary, FIFO order
    for id in [&a.receipt_id, &b.receipt_id] {
        let receipt = broker.status(id).unwrap();
        let collated_at = receipt
            .history
            .iter()
            .find(|(s, _)| *s == ReceiptState::Collated)
            .map(|(_, t)| *t)
            .unwrap();
        assert_eq!(collated_at, epoch + 100);
    }

    // a request arriving one tick after a collation waits exactly one
    // interval
    let late = broker.submit(&document("3-3", "/c"), "/DC=org/CN=Alice").unwrap();
    let submitted_at = broker.now_ms();
    let mut rounds = 0;
    loop {
        broker.advance(1);
        let stats = broker.tick();
        if stats.collated > 0 {
            break;
        }
        rounds += 1;
        assert!(rounds < 200);
    }
    let receipt = broker.status(&late.receipt_id).unwrap();
    let collated_at = receipt
        .history
        .iter()
        .find(|(s, _)| *s == ReceiptState::Collated)
        .map(|(_, t)| *t)
        .unwrap();
    assert_eq!(collated_at, submitted_at + 100);
    pass(2, "collation batches FIFO at the 100 ms logical interval, exact");
}

#[test]
fn criterion_3_cache_transparency_and_single_flight() {
    let root = tempfile::tempdir().unwrap();
    let broker = broker_fixture(root.path(), 100);

    // two identical requests, different destinations
    broker.submit(&document("1-4", "/pair/a"), "/DC=org/CN=Alice").unwrap();
    broker.submit(&document("1-4", "/pair/b"), "/DC=org/CN=Alice").unwrap();
    assert!(broker.run_until_settled(20));
    assert_eq!(broker.extraction_count(), 1, "one extraction serves both");
    let a = std::fs::read(broker.delivered_path("ral", "/pair/a").unwrap()).unwrap();
    let b = std::fs::read(broker.delivered_path("ral", "/pair/b").unwrap()).unwrap();
    assert_eq!(a, b, "delivered stores must be bit-identical");

    // ten concurrent identical requests on a fresh broker
    let root = tempfile::tempdir().unwrap();
    let broker = broker_fixture(root.path(), 100);
    std::thread::scope(|scope| {
        for i in 0..10 {
            let broker = &broker;
            scope.spawn(move || {
                broker
                    .submit(&document("2-6", &format!("/ten/{i}")), "/DC=org/CN=Alice")
                    .unwrap();
            });
        }
    });
    assert!(broker.run_until_settled(20));
    assert_eq!(broker.extraction_count(), 1, "ten identical requests, one extraction");
    let first = std::fs::read(broker.delivered_path("ral", "/ten/0").unwrap()).unwrap();
    for i in 1..10 {
        let other =
            std::fs::read(broker.delivered_path("ral", &format!("/ten/{i}")).unwrap()).unwrap();
        assert_eq!(first, other);
    }
    pass(3, "cache hits are bit-transparent; extraction counter stays at 1");
}

#[test]
fn criterion_4_extraction_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(90210);
    let mut compared = 0;
    for _ in 0..100 {
        let mut used = std::collections::HashSet::new();
        let mut records = Vec::new();
        for _ in 0..rng.gen_range(1..=1000) {
            let run = rng.gen_range(1..30u32);
            let event = rng.gen_range(1..3000u32);
            if !used.insert((run, event)) {
                continue;
            }
            let mut sections = BTreeMap::new();
            for tag in 1..=3u8 {
                if rng.gen_bool(0.5) {
                    let len = rng.gen_range(0..48);
                    sections.insert(tag, (0..len).map(|_| rng.gen()).collect());
                }
            }
            if sections.is_empty() {
                sections.insert(1, vec![7u8; 3]);
            }
            records.push(EventRecord { run, event, sections });
        }
        let dir = tempfile::tempdir().unwrap();
        write_store(dir.path(), "acc", &records).unwrap();
        let store = EventStore::open(dir.path()).unwrap();

        // anchored selection: always nonempty
        let anchor = &records[rng.gen_range(0..records.len())];
        let lo = anchor.run.saturating_sub(rng.gen_range(0..4)).max(1);
        let hi = anchor.run + rng.gen_range(0..6);
        let tags: Vec<u8> = anchor.sections.keys().copied().collect();
        let tag = tags[rng.gen_range(0..tags.len())];
        let format = Format::from_section_tag(tag).unwrap();

        // oracle: independent filter and byte-level rewrite
        let mut expected: Vec<(u32, u32, Vec<u8>)> = records
            .iter()
            .filter(|r| r.run >= lo && r.run <= hi)
            .filter_map(|r| r.sections.get(&tag).map(|p| (r.run, r.event, p.clone())))
            .collect();
        expected.sort_by_key(|r| (r.0, r.1));
        let mut oracle_data = b"BDBS\x01".to_vec();
        for (run, event, payload) in &expected {
            oracle_data.extend_from_slice(&run.to_le_bytes());
            oracle_data.extend_from_slice(&event.to_le_bytes());
            oracle_data.push(1);
            oracle_data.push(tag);
            oracle_data.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            oracle_data.extend_from_slice(payload);
        }

        let selection = select_events(&store, &[RunRange { lo, hi }], &EventSelector::All);
        let out = dir.path().join("copy");
        deep_copy(&store, &selection, format, &out, "k", QuotaScope::Unmetered).unwrap();
        let actual = std::fs::read(out.join("data")).unwrap();
        assert_eq!(actual, oracle_data, "deep copy bytes diverge from the oracle");
        compared += 1;
    }
    assert_eq!(compared, 100);
    pass(4, "deep copy equals the filter-and-rewrite oracle on 100 random stores");
}

#[test]
fn criterion_5_transfer_integrity_and_resume() {
    const CHUNK: u64 = 64 * 1024;
    let payload: Vec<u8> = (0..10 * 1024 * 1024u32).map(|i| (i.wrapping_mul(2654435761) >> 7) as u8).collect();
    let source_sha = hex::encode(Sha256::digest(&payload));

    let mut resumed_runs = 0;
    for seed in 0..100u64 {
        let dir = tempfile::tempdir().unwrap();
        let source = dir.path().join("source.bin");
        std::fs::write(&source, &payload).unwrap();
        let fabric = Fabric::new(seed);
        fabric
            .spawn_endpoint(EndpointConfig {
                site_id: "ral".into(),
                latency_ms: 1,
                bandwidth_bytes_per_s: 50 * 1024 * 1024,
                drop_rate: 0.3,
                storage_root: dir.path().to_path_buf(),
            })
            .unwrap();
        let mut job = plan_transfer(&source, "ral", "/in/copy.bin", CHUNK).unwrap();
        fabric.register_job("ral", job.job_id, "/in/copy.bin", CHUNK).unwrap();
        let mut link = fabric.link("ral");
        let options = TransferOptions::default();
        let mut report = run_transfer(&mut job, &mut link, options).unwrap();
        let acked_before_resume = u64::from(job.acked_count());
        let faulted = report.retries > 0 || report.outcome == TransferOutcome::Aborted;
        // retransmitted = distinct chunk payloads sent by resume legs;
        // retry repeats of one chunk are link noise, not retransmission.
        // chunk size divides the payload exactly, so first-attempt bytes
        // are bytes_sent minus retries * chunk
        let mut retransmitted = 0u64;
        let mut resumes = 0u32;
        while report.outcome == TransferOutcome::Aborted {
            resumes += 1;
            assert!(resumes <= 50, "seed {seed} did not converge");
            report = resume_transfer(&mut job, &mut link, options).unwrap();
            retransmitted += report.bytes_sent - u64::from(report.retries) * CHUNK;
        }
        if resumes > 0 {
            resumed_runs += 1;
        }
        // resume legs never resend a chunk that was acked before the
        // first fault forced the abort
        // each extra leg re-attempts the one chunk whose retries were
        // exhausted, hence the per-leg slack
        if faulted && acked_before_resume >= 1 {
            let unacked = job.total_bytes - acked_before_resume * CHUNK;
            let slack = u64::from(resumes.max(1) - 1) * CHUNK;
            assert!(
                retransmitted <= unacked + slack,
                "seed {seed}: resumed legs resent acked chunks ({retransmitted} of {})",
                job.total_bytes
            );
            assert!(retransmitted < job.total_bytes, "seed {seed}");
        }
        let dest = fabric.destination_file("ral", job.job_id).unwrap();
        let dest_sha = hex::encode(Sha256::digest(std::fs::read(&dest).unwrap()));
        assert_eq!(dest_sha, source_sha, "seed {seed}: destination bytes diverge");
    }
    pass(
        5,
        &format!("100/100 lossy 10 MiB transfers verified; {resumed_runs} needed a resume"),
    );
}

#[test]
fn criterion_6_pool_account_bounds() {
    // exactly 8 leases for 20 concurrent unmapped identities
    let dir = tempfile::tempdir().unwrap();
    let service = Arc::new(IdentityService::new(
        BTreeMap::new(),
        (0..8).map(|i| format!("pool{i:02}")).collect(),
        256 * 1024 * 1024,
        dir.path(),
    ));
    let mut leases = 0;
    let mut exhausted = 0;
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for i in 0..20 {
            let service = service.clone();
            handles.push(scope.spawn(move || {
                service.acquire_pool_account(&format!("/DC=org/CN=U{i}"), 0)
            }));
        }
        for handle in handles {
            match handle.join().unwrap() {
                Ok(_) => leases += 1,
                Err(IdentityError::PoolExhausted) => exhausted += 1,
                Err(e) => panic!("unexpected identity error: {e}"),
            }
        }
    });
    assert_eq!(leases, 8);
    assert_eq!(exhausted, 12);

    // quota charging equals a running-sum oracle over 10^4 random charges
    let dir = tempfile::tempdir().unwrap();
    let quota = 1_000_000u64;
    let service = IdentityService::new(BTreeMap::new(), vec!["p".into()], quota, dir.path());
    let lease = service.acquire_pool_account("/DC=org/CN=Q", 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut oracle_sum = 0u64;
    for _ in 0..10_000 {
        let delta = rng.gen_range(0..1500u64);
        let expect_ok = oracle_sum + delta <= quota;
        match service.charge_quota(&lease.lease_id, delta) {
            Ok(after) => {
                assert!(expect_ok, "service granted a charge the oracle rejects");
                oracle_sum += delta;
                assert_eq!(after.used_bytes, oracle_sum);
            }
            Err(IdentityError::QuotaExceeded { used, .. }) => {
                assert!(!expect_ok, "service rejected a charge the oracle grants");
                assert_eq!(used, oracle_sum);
            }
            Err(e) => panic!("unexpected identity error: {e}"),
        }
    }
    pass(6, "pool grants exactly 8 of 20; quota matches the running-sum oracle");
}

#[test]
fn criterion_7_audit_replay() {
    let root = tempfile::tempdir().unwrap();
    let broker = broker_fixture(root.path(), 100);

    // a mixed run: successes, a cache hit, and a failure
    for i in 0..12u32 {
        broker
            .submit(&document(&format!("1-{}", 1 + i % 4), &format!("/mix/{i}")), "/DC=org/CN=Alice")
            .unwrap();
    }
    broker
        .submit(
            &document("1-2", "/mix/bad").replace("collection: bsemi", "collection: absent"),
            "/DC=org/CN=Alice",
        )
        .unwrap();
    assert!(broker.run_until_settled(20));

    let records = broker.audit.records().unwrap();
    // gap-free sequence from 1
    for (i, record) in records.iter().enumerate() {
        assert_eq!(record.seq, i as u64 + 1, "audit sequence gap at {}", record.seq);
    }
    // replay reproduces every final state
    let replayed = bdb_core::audit::replay(&records).unwrap();
    let receipts = broker.intake.receipts();
    assert_eq!(replayed.len(), receipts.len());
    for receipt in receipts {
        assert_eq!(
            replayed.get(&receipt.receipt_id),
            Some(&receipt.state),
            "replay diverges for {}",
            receipt.receipt_id
        );
    }
    pass(7, "audit log replays to every final receipt state, sequence gap-free");
}

#[test]
fn criterion_8_locate_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    const FORMATS: [Format; 3] = [Format::Mini, Format::Micro, Format::Kanga];
    let mut trials = 0;
    while trials < 10_000 {
        let site_count = rng.gen_range(1..8);
        let sites: Vec<Site> = (0..site_count)
            .map(|i| Site {
                site_id: format!("s{i:02}"),
                tier: if rng.gen_bool(0.5) { Tier::TierA } else { Tier::TierC },
                name: String::new(),
                endpoint: String::new(),
            })
            .collect();
        let mut placements = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..rng.gen_range(0..=50) {
            let placement = CollectionPlacement {
                collection_id: format!("c{}", rng.gen_range(0..3)),
                site_id: format!("s{:02}", rng.gen_range(0..site_count)),
                format: FORMATS[rng.gen_range(0..3)],
                storage_class: if rng.gen_bool(0.5) {
                    StorageClass::Disk
                } else {
                    StorageClass::Tape
                },
                store_path: "/x".into(),
            };
            if seen.insert((placement.collection_id.clone(), placement.site_id.clone(), placement.format)) {
                placements.push(placement);
            }
        }
        let catalog = Catalog::new();
        for site in &sites {
            catalog.register_site(site.clone()).unwrap();
        }
        for c in 0..3 {
            let cid = format!("c{c}");
            let mine: Vec<_> =
                placements.iter().filter(|p| p.collection_id == cid).cloned().collect();
            catalog.register_collection(&cid, mine).unwrap();
        }
        for c in 0..3 {
            let cid = format!("c{c}");
            for format in FORMATS {
                for online_only in [false, true] {
                    let got = catalog.locate(&cid, format, online_only).unwrap();
                    // brute force: filter, then sort by (tier, site id)
                    let mut expected: Vec<CollectionPlacement> = placements
                        .iter()
                        .filter(|p| p.collection_id == cid && p.format == format)
                        .filter(|p| !online_only || p.storage_class == StorageClass::Disk)
                        .cloned()
                        .collect();
                    let tier_rank = |p: &CollectionPlacement| {
                        match sites.iter().find(|s| s.site_id == p.site_id).unwrap().tier {
                            Tier::TierA => 0,
                            Tier::TierC => 1,
                        }
                    };
                    expected.sort_by(|x, y| {
                        tier_rank(x).cmp(&tier_rank(y)).then_with(|| x.site_id.cmp(&y.site_id))
                    });
                    assert_eq!(got, expected);
                    trials += 1;
                }
            }
        }
    }
    pass(8, "locate equals the brute-force oracle over 10,000 trials");
}
