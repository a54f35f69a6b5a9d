//! Experiment runners and the `bench` command line.

mod common;

use std::process::Command;

use common::{mac_parts, small_genesis};
use fastfab::bench::experiment::{
    self, run_end_to_end, run_peer, EndToEndConfig, ExperimentName, ExperimentSpec, Toggles, DEFAULT_E2E_WORKERS,
};
use fastfab::bench::workload::{prebuild_chain, total_balance};
use fastfab::committer::PipelineConfig;
use fastfab::orderer::OrdererConfig;
use fastfab::transport::Mode;
use fastfab_core::SignatureScheme;

#[test]
fn two_hundred_fifty_txs_in_blocks_of_100_make_three_blocks() {
    let parts = mac_parts(1, 1);
    let w = common::workload(&parts, 250, 100, 41);
    let chain = prebuild_chain(&parts, &w);
    let run = run_peer(&parts, &chain, &small_genesis().state(), &PipelineConfig::default(), Mode::InProc).unwrap();
    assert_eq!(run.result.blocks, 3);
    assert_eq!(run.result.tx_count, 250);
    assert_eq!(run.flags.iter().map(Vec::len).collect::<Vec<_>>(), vec![100, 100, 50]);
    assert_eq!(total_balance(&run.state), small_genesis().total());
    assert_eq!(run.state, w.expected_state);
}

#[test]
fn peer_presets_reach_the_same_state() {
    let parts = mac_parts(1, 2);
    let w = common::workload(&parts, 3_000, 100, 42);
    let chain = prebuild_chain(&parts, &w);
    let genesis = small_genesis().state();
    for t in [Toggles::ALL_OFF, Toggles::P1, Toggles::P2, Toggles::P3] {
        let config = t.pipeline(&PipelineConfig {
            block_shepherds: 4,
            tx_validators: 4,
            ..PipelineConfig::default()
        });
        let run = run_peer(&parts, &chain, &genesis, &config, Mode::InProc).unwrap();
        assert_eq!(run.state, w.expected_state, "{}", t.label());
    }
}

#[test]
fn every_experiment_runs_small() {
    for name in ["e1", "e2", "e3", "e4", "e5", "e6"] {
        let mut spec = ExperimentSpec::new(name.parse().unwrap());
        spec.scheme = SignatureScheme::Mac;
        spec.tx_count = 200;
        spec.genesis = small_genesis();
        spec.endorsers = 2;
        spec.window = 20;
        spec.grid = vec![(1, 1), (2, 2)];
        if spec.name == ExperimentName::E5Blocksize {
            spec.block_sizes = vec![10, 100, 200];
        }
        if spec.name == ExperimentName::E2OrdererPayload {
            spec.payloads = vec![0, 512];
            spec.orderer.block_timeout = std::time::Duration::from_millis(20);
        }
        let rows = experiment::run(&spec).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!rows.is_empty(), "{name}");
        assert!(rows.iter().all(|r| r.result.tx_count == 200 && r.result.throughput_tx_s > 0.0), "{name}");
    }
}

#[test]
fn end_to_end_over_tcp_keeps_every_invariant() {
    let parts = mac_parts(2, 3);
    for t in [Toggles::ALL_OFF, Toggles::ALL_ON] {
        let config = EndToEndConfig {
            toggles: t,
            orderer: OrdererConfig {
                max_block_txs: 50,
                block_timeout: std::time::Duration::from_millis(20),
                ..OrdererConfig::default()
            },
            pipeline: PipelineConfig {
                block_shepherds: 4,
                tx_validators: 4,
                ..PipelineConfig::default()
            },
            tx_count: 500,
            payload: 64,
            window: 40,
            seed: 3,
            genesis: small_genesis(),
            mode: Mode::Tcp,
            topology: None,
            workers: DEFAULT_E2E_WORKERS,
        };
        let run = run_end_to_end(&parts, &config).unwrap();
        run.check(&small_genesis()).unwrap();
        assert_eq!(run.invalid(), 0, "{}", t.label());
        assert_eq!(run.valid(), 500, "{}", t.label());
        assert_eq!(run.chain.height, run.flags.len() as u64 + 1);
    }
}

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bench"))
}

#[test]
fn cli_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("e5.csv");
    let out = bench()
        .args(["run", "e5", "--txs", "300", "--block-size", "100", "--sig-mode", "mac", "--accounts", "200", "--repeats", "2"])
        .arg("--csv")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("seed=42 sig_mode=mac"));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("experiment,toggle_set,block_size,payload,repeat,throughput_tx_s"));
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("E5_blocksize,all-on,100,2900,0,"));
    assert!(lines[2].starts_with("E5_blocksize,all-on,100,2900,1,"));

    // The default sweep includes block size 10000, which 300 transactions cannot fill.
    let out = bench().args(["run", "e5", "--txs", "300", "--sig-mode", "mac"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cli_rejects_bad_arguments() {
    let out = bench().args(["run", "e3", "--repeats", "0", "--sig-mode", "mac"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("repeats"));
    let out = bench().args(["run", "e9"]).output().unwrap();
    assert!(!out.status.success());
    let out = bench().args(["run", "e3", "--toggles", "p9"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn cli_runs_e6_from_a_topology_file() {
    let dir = tempfile::tempdir().unwrap();
    let topo = dir.path().join("net.topo");
    let mut text = String::from("# every node over loopback TCP\n");
    for (id, role) in [
        ("log0", "log"),
        ("orderer0", "orderer"),
        ("peer0", "committer"),
        ("store0", "store"),
        ("e0", "endorser"),
        ("e1", "endorser"),
        ("client0", "client"),
    ] {
        text.push_str(&format!("[node]\nid = {id}\nrole = {role}\nmode = tcp\n\n"));
    }
    std::fs::write(&topo, text).unwrap();
    let out = bench()
        .args(["run", "e6", "--txs", "200", "--sig-mode", "mac", "--accounts", "200", "--window", "20"])
        .arg("--topology")
        .arg(&topo)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = stdout.lines().filter(|l| l.starts_with("E6_end2end,")).collect();
    assert_eq!(rows.len(), 2, "{stdout}");
    assert!(rows.iter().all(|r| r.ends_with(",tcp")));
}
