use std::collections::HashSet;
use std::thread;
use std::time::Duration;

use netband::error::NetError;
use netband::message::{PhaseTag, Reply, Upload};
use netband::party::{run_party, PartyConfig, PartyOutcome};
use netband::server::{spawn_server, ServerConfig, ServerOutcome};
use netband::simulator::run_simulation;
use netband::NetResult;
use ppgwas_core::assoc::compare_results;
use ppgwas_core::blockstore::{horizontal_split, Dataset};
use ppgwas_core::config::AnalysisConfig;
use ppgwas_core::oracle::run_oracle;
use ppgwas_core::seedcraft::{MaskSuite, PadPolicy, SeedKey};
use ppgwas_core::synthgen::{generate, SynthConfig};

fn small() -> AnalysisConfig {
    AnalysisConfig {
        blocks: 3,
        ridges: 3,
        folds: 3,
        ..AnalysisConfig::default()
    }
}

fn parts(seed: u64, n: usize, m: usize, p: usize) -> Vec<Dataset> {
    let data = generate(seed, &SynthConfig::new(n, m, 2)).unwrap();
    horizontal_split(&data, p, seed).unwrap()
}

fn suite(tag: &str) -> MaskSuite {
    MaskSuite::new(SeedKey::from_passphrase(tag), PadPolicy::default())
}

/// Runs parties over in-memory links with per-party suites.
fn session(
    data: &[Dataset],
    analysis: &AnalysisConfig,
    suites: &[MaskSuite],
) -> (NetResult<ServerOutcome>, Vec<NetResult<PartyOutcome>>) {
    let sizes: Vec<usize> = data.iter().map(Dataset::samples).collect();
    let (handle, server) = spawn_server(ServerConfig::new(data.len(), analysis.clone())).unwrap();
    let outs = thread::scope(|s| {
        let workers: Vec<_> = data
            .iter()
            .zip(suites)
            .enumerate()
            .map(|(i, (d, su))| {
                let conn = handle.connect_mem().unwrap();
                let cfg = PartyConfig::new(i + 1, sizes.clone(), analysis.clone());
                s.spawn(move || {
                    let mut conn = Some(conn);
                    run_party(|| conn.take().ok_or(NetError::Closed), d, &cfg, su)
                })
            })
            .collect();
        workers.into_iter().map(|w| w.join().unwrap()).collect()
    });
    (server.join().unwrap(), outs)
}

#[test]
fn party_may_reconnect_during_handshake() {
    let data = parts(3, 150, 60, 2);
    let analysis = small();
    let s = suite("reconnect");
    let (handle, server) = spawn_server(ServerConfig::new(2, analysis.clone())).unwrap();
    let mut early = handle.connect_mem().unwrap();
    early.tx.send(&Upload::Hello { party_id: 1, parties: 2 }.to_frame()).unwrap();
    early.tx.close();
    drop(early);
    thread::sleep(Duration::from_millis(100));
    let sizes: Vec<usize> = data.iter().map(Dataset::samples).collect();
    let outs: Vec<_> = thread::scope(|sc| {
        let ws: Vec<_> = data
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let conn = handle.connect_mem().unwrap();
                let cfg = PartyConfig::new(i + 1, sizes.clone(), analysis.clone());
                let s = &s;
                sc.spawn(move || {
                    let mut conn = Some(conn);
                    run_party(|| conn.take().ok_or(NetError::Closed), d, &cfg, s)
                })
            })
            .collect();
        ws.into_iter().map(|w| w.join().unwrap()).collect()
    });
    server.join().unwrap().unwrap();
    assert!(outs.iter().all(Result::is_ok));
}

#[test]
fn duplicate_party_id_is_turned_away() {
    let data = parts(4, 150, 60, 2);
    let analysis = small();
    let s = suite("duplicate");
    let (handle, server) = spawn_server(ServerConfig::new(2, analysis.clone())).unwrap();
    let sizes: Vec<usize> = data.iter().map(Dataset::samples).collect();
    let first = handle.connect_mem().unwrap();
    let mut intruder = handle.connect_mem().unwrap();
    let second = handle.connect_mem().unwrap();
    let outs: Vec<_> = thread::scope(|sc| {
        let cfg1 = PartyConfig::new(1, sizes.clone(), analysis.clone());
        let d1 = &data[0];
        let s1 = &s;
        let w1 = sc.spawn(move || {
            let mut c = Some(first);
            run_party(|| c.take().ok_or(NetError::Closed), d1, &cfg1, s1)
        });
        thread::sleep(Duration::from_millis(100));
        intruder.tx.send(&Upload::Hello { party_id: 1, parties: 2 }.to_frame()).unwrap();
        let reply = intruder.rx.recv(Some(Duration::from_secs(5))).unwrap().unwrap();
        assert!(matches!(Reply::from_frame(&reply).unwrap(), Reply::Abort(r) if r.contains("duplicate")));
        let cfg2 = PartyConfig::new(2, sizes.clone(), analysis.clone());
        let d2 = &data[1];
        let s2 = &s;
        let w2 = sc.spawn(move || {
            let mut c = Some(second);
            run_party(|| c.take().ok_or(NetError::Closed), d2, &cfg2, s2)
        });
        vec![w1.join().unwrap(), w2.join().unwrap()]
    });
    server.join().unwrap().unwrap();
    assert!(outs.iter().all(Result::is_ok));
}

#[test]
fn inconsistent_seed_aborts_everyone() {
    let data = parts(5, 150, 60, 3);
    let rogue = suite("agreed").with_partition_key(SeedKey::from_passphrase("other folds"));
    let suites = [suite("agreed"), suite("agreed"), rogue];
    let (server, outs) = session(&data, &small(), &suites);
    match server {
        Err(NetError::Protocol(msg)) => assert!(msg.contains("checksum"), "{msg}"),
        other => panic!("expected protocol error, got {:?}", other.map(|o| o.rstar)),
    }
    for out in outs {
        assert!(matches!(out, Err(NetError::Aborted(r)) if r.contains("checksum")));
    }
}

#[test]
fn traffic_is_counted_identically_on_both_ends() {
    let data = parts(6, 240, 90, 3);
    let sim = run_simulation(&data, &small(), &suite("bytes")).unwrap();
    for (i, p) in sim.parties.iter().enumerate() {
        let id = i as u32 + 1;
        let mine = p.bytes.total();
        let seen = sim.server.bytes.party_total(id);
        assert_eq!(mine.sent, seen.received, "party {id} upload");
        assert_eq!(mine.received, seen.sent, "party {id} download");
        for tag in PhaseTag::ALL {
            assert_eq!(p.bytes.phase_total(tag).sent, {
                sim.server
                    .bytes
                    .rows()
                    .filter(|(t, q, _)| *t == tag && *q == id)
                    .map(|(_, _, tr)| tr.received)
                    .sum::<u64>()
            });
        }
    }
}

#[test]
fn each_party_receives_only_its_own_projection() {
    let data = parts(7, 240, 90, 3);
    let sim = run_simulation(&data, &small(), &suite("access")).unwrap();
    for (p, d) in sim.parties.iter().zip(&data) {
        let proj = p.received.iter().filter(|t| **t == PhaseTag::ProjResult).count();
        assert_eq!(proj, 1);
        assert_eq!(p.x_tilde.nrows(), d.samples());
        assert_eq!(p.y_tilde.len(), d.samples());
    }
}

#[test]
fn server_never_sees_plaintext_row_counts() {
    let data = parts(8, 300, 120, 3);
    let analysis = AnalysisConfig {
        folds: 5,
        ..small()
    };
    let s = suite("audit");
    let sim = run_simulation(&data, &analysis, &s).unwrap();
    let sizes: Vec<usize> = data.iter().map(Dataset::samples).collect();
    let plan = s.plan(sim.parties[0].qc.kept.len(), analysis.blocks, &sizes, analysis.folds).unwrap();
    let mut plain: HashSet<usize> = sizes.iter().copied().collect();
    for p in 0..sizes.len() {
        for k in 0..analysis.folds {
            plain.insert(plan.fold_members(p, k).len());
        }
    }
    let n: usize = sizes.iter().sum();
    let m = data[0].snps();
    assert!(!sim.server.audit.is_empty());
    for rec in &sim.server.audit {
        match rec.tag {
            PhaseTag::QcCounts => assert_eq!(rec.rows, m),
            PhaseTag::Moments => assert!(rec.rows == sim.parties[0].qc.kept.len() || rec.rows == 1),
            PhaseTag::ProjUpload => assert!(rec.rows > n, "{rec:?}"),
            PhaseTag::L0Payload | PhaseTag::AssocUpload => {
                assert!(!plain.contains(&rec.rows), "{rec:?}")
            }
            other => panic!("unexpected upload {other}"),
        }
    }
}

#[test]
fn identical_inputs_give_identical_sessions() {
    let data = parts(9, 200, 80, 2);
    let a = run_simulation(&data, &small(), &suite("repeat")).unwrap();
    let b = run_simulation(&data, &small(), &suite("repeat")).unwrap();
    assert_eq!(a.results, b.results);
    assert_eq!(a.server.bytes, b.server.bytes);
}

#[test]
fn fold_count_sweep_tracks_oracle() {
    let data = parts(10, 300, 150, 3);
    for folds in 2..=5 {
        let analysis = AnalysisConfig { folds, ..small() };
        let s = suite("sweep");
        let sim = run_simulation(&data, &analysis, &s).unwrap();
        let orc = run_oracle(&data, &analysis, &s).unwrap();
        let r2 = compare_results(&sim.results, &orc.results).unwrap();
        assert!(r2 >= 0.99, "K={folds}: r2 {r2}");
        assert_eq!(sim.results.meta.rstar, orc.results.meta.rstar);
    }
}
