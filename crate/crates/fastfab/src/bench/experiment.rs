//! Experiment runners. Each one provisions an in-process topology, drives a
//! seeded workload through it and measures the commit span.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam::channel as cb;
use fastfab_core::chaincode::{account_key, decode_balance, TransferProposal};
use fastfab_core::ledger::link_check;
use fastfab_core::wire::{encode_envelope, peek_header};
use fastfab_core::{Block, PublicKey, SignatureScheme, ValidationFlag, VersionedMap};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::report::{Row, RunResult};
use super::topology::{Topology, TopologyError};
use super::workload::{generate, Genesis, Participants, PrebuiltChain, WorkloadSpec};
use crate::blockstore::{BlockStore, BlockStoreError, BlockStoreServer, StoreSink};
use crate::committer::{
    follow_orderer, BlockSink, CommitError, CommitResult, Committer, CommitterContext, PipelineConfig, RemoteSink,
    Verdict,
};
use crate::endorser::{AppliedBlock, EndorseRequestError, Endorser, EndorserClient, EndorserError, EndorserServer, LocalEndorserSink};
use crate::orderer::{Orderer, OrdererClient, OrdererConfig, OrdererContext, OrdererError, SubmitError};
use crate::ordering_log::{LogError, LogServer, OrderingLog};
use crate::proto;
use crate::statestore::{DurableStore, MemoryStore, StateStore, StoreError};
use crate::transport::{ListenerCloser, Mode, Network, TransportError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("state store: {0}")]
    Store(#[from] StoreError),
    #[error("block store: {0}")]
    BlockStore(#[from] BlockStoreError),
    #[error("committer: {0}")]
    Commit(#[from] CommitError),
    #[error("orderer: {0}")]
    Orderer(#[from] OrdererError),
    #[error("submit: {0}")]
    Submit(#[from] SubmitError),
    #[error("ordering log: {0}")]
    Log(#[from] LogError),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("endorser: {0}")]
    Endorser(#[from] EndorserError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error("run failed: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExperimentName {
    E1Transport,
    E2OrdererPayload,
    E3PeerCumulative,
    E4ParamGrid,
    E5Blocksize,
    E6End2end,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 6] = [
        ExperimentName::E1Transport,
        ExperimentName::E2OrdererPayload,
        ExperimentName::E3PeerCumulative,
        ExperimentName::E4ParamGrid,
        ExperimentName::E5Blocksize,
        ExperimentName::E6End2end,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::E1Transport => "E1_transport",
            ExperimentName::E2OrdererPayload => "E2_orderer_payload",
            ExperimentName::E3PeerCumulative => "E3_peer_cumulative",
            ExperimentName::E4ParamGrid => "E4_param_grid",
            ExperimentName::E5Blocksize => "E5_blocksize",
            ExperimentName::E6End2end => "E6_end2end",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = String;

    /// Accepts the full name or just its `eN` prefix, in any case.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|e| {
                let full = e.as_str().to_ascii_lowercase();
                lower == full || full.split('_').next() == Some(lower.as_str())
            })
            .ok_or_else(|| format!("unknown experiment {s:?}; expected one of e1..e6"))
    }
}

/// The five optimization switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Toggles {
    pub o1: bool,
    pub o2: bool,
    pub p1: bool,
    pub p2: bool,
    pub p3: bool,
}

impl Toggles {
    pub const ALL_OFF: Toggles = Toggles {
        o1: false,
        o2: false,
        p1: false,
        p2: false,
        p3: false,
    };
    pub const ALL_ON: Toggles = Toggles {
        o1: true,
        o2: true,
        p1: true,
        p2: true,
        p3: true,
    };
    pub const P1: Toggles = Toggles {
        p1: true,
        ..Self::ALL_OFF
    };
    pub const P2: Toggles = Toggles {
        p2: true,
        ..Self::P1
    };
    pub const P3: Toggles = Toggles {
        p3: true,
        ..Self::P2
    };
    pub const O1: Toggles = Toggles {
        o1: true,
        ..Self::ALL_OFF
    };
    pub const O2: Toggles = Toggles {
        o2: true,
        ..Self::O1
    };

    /// All 32 combinations.
    pub fn every() -> impl Iterator<Item = Toggles> {
        (0u8..32).map(|m| Toggles {
            o1: m & 1 != 0,
            o2: m & 2 != 0,
            p1: m & 4 != 0,
            p2: m & 8 != 0,
            p3: m & 16 != 0,
        })
    }

    pub fn label(self) -> String {
        let named = [
            (Self::ALL_OFF, "baseline"),
            (Self::P1, "P-I"),
            (Self::P2, "P-II"),
            (Self::P3, "P-III"),
            (Self::ALL_ON, "all-on"),
            (Self::O1, "O-I"),
            (Self::O2, "O-I+O-II"),
        ];
        if let Some((_, name)) = named.iter().find(|(t, _)| *t == self) {
            return name.to_string();
        }
        let parts: Vec<&str> = [
            (self.o1, "o1"),
            (self.o2, "o2"),
            (self.p1, "p1"),
            (self.p2, "p2"),
            (self.p3, "p3"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        parts.join("+")
    }

    pub fn orderer(self, base: &OrdererConfig) -> OrdererConfig {
        OrdererConfig {
            opt_o1: self.o1,
            opt_o2: self.o2,
            ..base.clone()
        }
    }

    pub fn pipeline(self, base: &PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            opt_p1: self.p1,
            opt_p2: self.p2,
            opt_p3: self.p3,
            ..base.clone()
        }
    }
}

impl FromStr for Toggles {
    type Err = String;

    /// A preset name or a `+`/`,` separated list of `o1 o2 p1 p2 p3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let preset = match s.to_ascii_lowercase().as_str() {
            "baseline" | "all-off" | "none" | "full-payload" => Some(Self::ALL_OFF),
            "p-i" | "pi" => Some(Self::P1),
            "p-ii" | "pii" => Some(Self::P2),
            "p-iii" | "piii" => Some(Self::P3),
            "all-on" | "all" => Some(Self::ALL_ON),
            "o-i" | "id-only" => Some(Self::O1),
            "o-i+o-ii" => Some(Self::O2),
            _ => None,
        };
        if let Some(t) = preset {
            return Ok(t);
        }
        let mut t = Self::ALL_OFF;
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "o1" => t.o1 = true,
                "o2" => t.o2 = true,
                "p1" => t.p1 = true,
                "p2" => t.p2 = true,
                "p3" => t.p3 = true,
                other => return Err(format!("unknown toggle {other:?}")),
            }
        }
        Ok(t)
    }
}

/// Everything one `bench run` needs.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    /// Toggle sets to compare. E4 and E5 use only the first.
    pub toggle_sets: Vec<Toggles>,
    /// Intake pool, block cut and timeout; the O toggles come from `toggle_sets`.
    pub orderer: OrdererConfig,
    /// Shepherd and validator counts; the P toggles come from `toggle_sets`.
    pub pipeline: PipelineConfig,
    pub tx_count: u64,
    /// Payload sweep (E2) or the single payload of other experiments.
    pub payloads: Vec<u32>,
    /// Block-size sweep (E5) or the single block size of other experiments.
    pub block_sizes: Vec<usize>,
    /// (shepherds, validators) points of E4.
    pub grid: Vec<(usize, usize)>,
    /// Transports of E1; other experiments use the first.
    pub transports: Vec<Mode>,
    pub repeats: u32,
    pub seed: u64,
    pub scheme: SignatureScheme,
    pub genesis: Genesis,
    /// E6 client in-flight window.
    pub window: usize,
    /// E6 endorser count (ignored when a topology names endorsers).
    pub endorsers: usize,
    /// E2 concurrent submitters.
    pub submitters: usize,
    pub topology: Option<Topology>,
}

pub const PAYLOAD_SWEEP: [u32; 5] = [0, 512, 1024, 2048, 4096];
pub const BLOCK_SIZE_SWEEP: [usize; 4] = [10, 100, 1000, 10_000];
pub const GRID_AXIS: [usize; 4] = [1, 4, 16, 32];
pub const DEFAULT_PAYLOAD: u32 = 2900;
pub const DEFAULT_BLOCK_SIZE: usize = 100;

pub fn hardware_threads() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

impl ExperimentSpec {
    /// The experiment's default sweep at 10^4 transactions.
    pub fn new(name: ExperimentName) -> Self {
        use ExperimentName::*;
        let toggle_sets = match name {
            E1Transport => vec![Toggles::ALL_OFF],
            E2OrdererPayload => vec![Toggles::ALL_OFF, Toggles::O1, Toggles::O2],
            E3PeerCumulative => vec![Toggles::ALL_OFF, Toggles::P1, Toggles::P2, Toggles::P3],
            E4ParamGrid => vec![Toggles::P3],
            E5Blocksize => vec![Toggles::ALL_ON],
            E6End2end => vec![Toggles::ALL_OFF, Toggles::ALL_ON],
        };
        Self {
            name,
            toggle_sets,
            orderer: OrdererConfig::default(),
            pipeline: PipelineConfig::default(),
            tx_count: 10_000,
            payloads: if name == E2OrdererPayload {
                PAYLOAD_SWEEP.to_vec()
            } else {
                vec![DEFAULT_PAYLOAD]
            },
            block_sizes: if name == E5Blocksize {
                BLOCK_SIZE_SWEEP.to_vec()
            } else {
                vec![DEFAULT_BLOCK_SIZE]
            },
            grid: GRID_AXIS
                .iter()
                .flat_map(|&s| GRID_AXIS.iter().map(move |&v| (s, v)))
                .collect(),
            transports: if name == E1Transport {
                vec![Mode::InProc, Mode::Tcp]
            } else {
                vec![Mode::InProc]
            },
            repeats: 1,
            seed: 42,
            scheme: SignatureScheme::Ed25519,
            genesis: Genesis::default(),
            window: 1000,
            endorsers: hardware_threads().min(5),
            submitters: 4,
            topology: None,
        }
    }

    pub fn check(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Spec(m));
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.toggle_sets.is_empty() || self.payloads.is_empty() || self.block_sizes.is_empty() {
            return bad("empty sweep".into());
        }
        if self.transports.is_empty() || (self.name == ExperimentName::E4ParamGrid && self.grid.is_empty()) {
            return bad("empty sweep".into());
        }
        if let Some(&b) = self.block_sizes.iter().find(|&&b| b == 0 || (b as u64) > self.tx_count) {
            return bad(format!("block size {b} must be between 1 and the transaction count {}", self.tx_count));
        }
        if self.grid.iter().any(|&(s, v)| s == 0 || v == 0) {
            return bad("shepherds and validators must be at least 1".into());
        }
        if self.genesis.accounts < 4 {
            return bad("need at least 4 genesis accounts".into());
        }
        Ok(())
    }

    fn participants(&self, endorsers: usize) -> Participants {
        match &self.topology {
            Some(t) => Participants::from_topology(self.scheme, self.seed, t),
            None => Participants::new(self.scheme, self.seed, 1, endorsers),
        }
    }

    fn mode(&self) -> Mode {
        self.transports[0]
    }

    fn row(&self, toggle_set: String, block_size: usize, payload: u32, repeat: u32, mode: Mode, result: RunResult) -> Row {
        Row {
            experiment: self.name.as_str().to_string(),
            toggle_set,
            block_size,
            payload,
            repeat,
            result,
            seed: self.seed,
            sig_mode: self.scheme.as_str().to_string(),
            transport: mode.as_str().to_string(),
        }
    }
}

/// Runs every configuration of `spec`, `spec.repeats` times each.
pub fn run(spec: &ExperimentSpec) -> Result<Vec<Row>, BenchError> {
    spec.check()?;
    match spec.name {
        ExperimentName::E1Transport => run_e1(spec),
        ExperimentName::E2OrdererPayload => run_e2(spec),
        ExperimentName::E3PeerCumulative => run_e3(spec),
        ExperimentName::E4ParamGrid => run_e4(spec),
        ExperimentName::E5Blocksize => run_e5(spec),
        ExperimentName::E6End2end => run_e6(spec),
    }
}

fn peer_chain(spec: &ExperimentSpec, parts: &Participants, block_size: usize) -> (PrebuiltChain, VersionedMap) {
    let w = generate(
        parts,
        &spec.genesis,
        &WorkloadSpec::valid(spec.tx_count, block_size, spec.payloads[0], spec.seed),
    );
    w.into_chain(parts)
}

fn run_e1(spec: &ExperimentSpec) -> Result<Vec<Row>, BenchError> {
    let parts = spec.participants(1);
    let block_size = spec.block_sizes[0];
    let (chain, _) = peer_chain(spec, &parts, block_size);
    let mut rows = Vec::new();
    for &mode in &spec.transports {
        for repeat in 0..spec.repeats {
            let r = run_transport(&chain.blocks, chain.tx_count, mode)?;
            rows.push(spec.row(mode.as_str().into(), block_size, spec.payloads[0], repeat, mode, r));
        }
    }
    Ok(rows)
}

fn run_e2(spec: &ExperimentSpec) -> Result<Vec<Row>, BenchError> {
    let parts = spec.participants(1);
    let block_size = spec.block_sizes[0];
    let mut rows = Vec::new();
    for &payload in &spec.payloads {
        let envelopes: Vec<Vec<u8>> = generate(
            &parts,
            &spec.genesis,
            &WorkloadSpec::valid(spec.tx_count, block_size, payload, spec.seed),
        )
        .txs
        .into_iter()
        .map(|t| t.envelope)
        .collect();
        for &t in &spec.toggle_sets {
            let config = OrdererConfig {
                max_block_txs: block_size,
                ..t.orderer(&spec.orderer)
            };
            for repeat in 0..spec.repeats {
                let r = run_orderer(&parts, &envelopes, &config, spec.mode(), spec.submitters)?;
                let label = if t == Toggles::ALL_OFF { "full-payload".into() } else { t.label() };
                rows.push(spec.row(label, block_size, payload, repeat, spec.mode(), r));
            }
        }
    }
    Ok(rows)
}

fn run_e3(spec: &ExperimentSpec) -> Result<Vec<Row>, BenchError> {
    let parts = spec.participants(1);
    let block_size = spec.block_sizes[0];
    let genesis_state = spec.genesis.state();
    let (chain, expected) = peer_chain(spec, &parts, block_size);
    let mut rows = Vec::new();
    for &t in &spec.toggle_sets {
        for repeat in 0..spec.repeats {
            let run = run_peer(&parts, &chain, &genesis_state, &t.pipeline(&spec.pipeline), spec.mode())?;
            if run.state != expected {
                return Err(BenchError::Invariant(format!(
                    "{} final state differs from the sequential execution",
                    t.label()
                )));
            }
            rows.push(spec.row(t.label(), block_size, spec.payloads[0], repeat, spec.mode(), run.result));
        }
    }
    Ok(rows)
}

fn run_e4(spec: &ExperimentSpec) -> Result<Vec<Row>, BenchError> {
    let parts = spec.participants(1);
    let block_size = spec.block_sizes[0];
    let genesis_state = spec.genesis.state();
    let (chain, expected) = peer_chain(spec, &parts, block_size);
    let t = spec.toggle_sets[0];
    let mut rows = Vec::new();
    for &(shepherds, validators) in &spec.grid {
        let config = PipelineConfig {
            block_shepherds: shepherds,
            tx_validators: validators,
            ..t.pipeline(&spec.pipeline)
        };
        for repeat in 0..spec.repeats {
            let run = run_peer(&parts, &chain, &genesis_state, &config, spec.mode())?;
            if run.state != expected {
                return Err(BenchError::Invariant(format!(
                    "({shepherds}, {validators}) final state differs from the sequential execution"
                )));
            }
            let label = format!("{} s{shepherds} v{validators}", t.label());
            rows.push(spec.row(label, block_size, spec.payloads[0], repeat, spec.mode(), run.result));
        }
    }
    Ok(rows)
}

fn run_e5(spec: &ExperimentSpec) -> Result<Vec<Row>, BenchError> {
    let parts = spec.participants(1);
    let genesis_state = spec.genesis.state();
    let t = spec.toggle_sets[0];
    let mut rows = Vec::new();
    let mut first: Option<Vec<(String, u64)>> = None;
    for &block_size in &spec.block_sizes {
        let (chain, _) = peer_chain(spec, &parts, block_size);
        for repeat in 0..spec.repeats {
            let run = run_peer(&parts, &chain, &genesis_state, &t.pipeline(&spec.pipeline), spec.mode())?;
            let b = balances(&run.state);
            let total: u128 = b.iter().map(|(_, v)| *v as u128).sum();
            if total != spec.genesis.total() {
                return Err(BenchError::Invariant(format!("block size {block_size}: balance total {total} changed")));
            }
            match &first {
                None => first = Some(b),
                Some(f) if *f != b => {
                    return Err(BenchError::Invariant(format!(
                        "block size {block_size}: final balances differ from block size {}",
                        spec.block_sizes[0]
                    )))
                }
                Some(_) => {}
            }
            rows.push(spec.row(t.label(), block_size, spec.payloads[0], repeat, spec.mode(), run.result));
        }
    }
    Ok(rows)
}

fn run_e6(spec: &ExperimentSpec) -> Result<Vec<Row>, BenchError> {
    let parts = spec.participants(spec.endorsers);
    let block_size = spec.block_sizes[0];
    let mut rows = Vec::new();
    for &t in &spec.toggle_sets {
        for repeat in 0..spec.repeats {
            let config = EndToEndConfig {
                toggles: t,
                orderer: OrdererConfig {
                    max_block_txs: block_size,
                    ..spec.orderer.clone()
                },
                pipeline: spec.pipeline.clone(),
                tx_count: spec.tx_count,
                payload: spec.payloads[0],
                window: spec.window,
                seed: spec.seed.wrapping_add(repeat as u64),
                genesis: spec.genesis,
                mode: spec.mode(),
                topology: spec.topology.clone(),
                workers: DEFAULT_E2E_WORKERS,
            };
            let run = run_end_to_end(&parts, &config)?;
            run.check(&spec.genesis)?;
            let label = if t == Toggles::ALL_OFF { "all-off".into() } else { t.label() };
            rows.push(spec.row(label, block_size, spec.payloads[0], repeat, spec.mode(), run.result));
        }
    }
    Ok(rows)
}

/// `(account, balance)` pairs in key order.
pub fn balances(state: &VersionedMap) -> Vec<(String, u64)> {
    state
        .sorted()
        .into_iter()
        .filter_map(|(k, e)| decode_balance(&e.value).map(|b| (k.clone(), b)))
        .collect()
}

/// Accepts connections and drops whatever arrives.
struct Drain {
    closer: ListenerCloser,
}

impl Drain {
    fn start(net: &Network, id: &str, mode: Mode) -> Result<Self, BenchError> {
        let listener = net.listen(id, mode)?;
        let closer = listener.closer(net);
        thread::Builder::new().name(format!("{id}-drain")).spawn(move || {
            while let Ok(mut ch) = listener.accept() {
                thread::spawn(move || while ch.recv().is_ok() {});
            }
        })?;
        Ok(Self { closer })
    }
}

impl Drop for Drain {
    fn drop(&mut self) {
        self.closer.close();
    }
}

/// Sends encoded blocks from one node to another, which discards them.
/// Latency samples are send-to-arrival times.
pub fn run_transport(blocks: &[Vec<u8>], tx_count: u64, mode: Mode) -> Result<RunResult, BenchError> {
    let net = Network::new();
    let listener = net.listen("receiver", mode)?;
    let n = blocks.len();
    let receiver = thread::spawn(move || -> Result<Vec<Instant>, TransportError> {
        let mut ch = listener.accept()?;
        let mut arrivals = Vec::with_capacity(n);
        for _ in 0..n {
            drop(ch.recv()?);
            arrivals.push(Instant::now());
        }
        Ok(arrivals)
    });
    let mut ch = net.connect("receiver")?;
    let start = Instant::now();
    let mut sent = Vec::with_capacity(n);
    for b in blocks {
        sent.push(Instant::now());
        ch.send(proto::DELIVER, b)?;
    }
    let arrivals = receiver.join().expect("receiver thread panicked")?;
    let samples = sent
        .iter()
        .zip(&arrivals)
        .map(|(s, a)| a.saturating_duration_since(*s).as_secs_f64() * 1e3)
        .collect();
    let span = arrivals.last().map_or(Duration::ZERO, |l| l.saturating_duration_since(start));
    Ok(RunResult::new(tx_count, n as u64, span, samples))
}

/// Number of envelopes in an encoded block, read without decoding it.
fn block_tx_count(bytes: &[u8]) -> u64 {
    bytes
        .get(72..76)
        .map_or(0, |b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as u64)
}

/// Submits `envelopes` from `submitters` concurrent clients to a fresh
/// orderer and times block delivery to a consumer that discards the blocks.
/// Throughput counts from the first submission to the last block arrival.
pub fn run_orderer(
    parts: &Participants,
    envelopes: &[Vec<u8>],
    config: &OrdererConfig,
    mode: Mode,
    submitters: usize,
) -> Result<RunResult, BenchError> {
    let dir = tempfile::tempdir()?;
    let net = Network::new();
    let log = Arc::new(OrderingLog::with_segment(&dir.path().join("log.seg"))?);
    let _log_server = LogServer::start(&net, &parts.log, mode, log)?;
    let ctx = OrdererContext {
        registry: Arc::new(parts.registry()),
        key: parts.key(&parts.orderer),
        log_node: parts.log.clone(),
    };
    let mut orderer = Orderer::start(&net, &parts.orderer, mode, config.clone(), ctx, Block::genesis())?;

    let total = envelopes.len() as u64;
    let mut consumer = net.connect(&parts.orderer)?;
    consumer.send(proto::DELIVER_FROM, &proto::u64_body(1))?;
    let consumer = thread::spawn(move || -> Result<Vec<Instant>, BenchError> {
        let mut seen = 0;
        let mut arrivals = Vec::new();
        while seen < total {
            match consumer.recv_timeout(STALL_TIMEOUT)? {
                Some(msg) => {
                    seen += block_tx_count(msg.body());
                    arrivals.push(Instant::now());
                }
                None => return Err(BenchError::Invariant(format!("orderer stalled after {seen} of {total} txs"))),
            }
        }
        Ok(arrivals)
    });

    let start = Instant::now();
    let submitters = submitters.max(1);
    thread::scope(|s| -> Result<(), BenchError> {
        let handles: Vec<_> = (0..submitters)
            .map(|k| {
                let net = &net;
                s.spawn(move || -> Result<(), BenchError> {
                    let mut client = OrdererClient::connect(net, &parts.orderer)?;
                    for env in envelopes.iter().skip(k).step_by(submitters) {
                        client.submit(env)?;
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("submitter panicked")?;
        }
        Ok(())
    })?;
    let arrivals = consumer.join().expect("consumer panicked")?;
    if let Some(e) = orderer.fatal_error() {
        return Err(BenchError::Invariant(format!("orderer failed: {e}")));
    }
    orderer.shutdown();
    Ok(RunResult::from_arrivals(total, start, &arrivals))
}

const STALL_TIMEOUT: Duration = Duration::from_secs(60);

/// Outcome of feeding a prebuilt chain to a committer.
#[derive(Debug, Clone)]
pub struct PeerRun {
    pub result: RunResult,
    pub state: VersionedMap,
    pub flags: Vec<Vec<ValidationFlag>>,
}

/// Feeds `chain` to a committer configured by `config`.
///
/// With `opt_p2` the committer hands blocks to a remote block store and a
/// remote endorser, both mocked by nodes that discard what they receive.
/// Without it, blocks are persisted into a local block store before the next
/// block is accepted.
pub fn run_peer(
    parts: &Participants,
    chain: &PrebuiltChain,
    genesis_state: &VersionedMap,
    config: &PipelineConfig,
    mode: Mode,
) -> Result<PeerRun, BenchError> {
    let dir = tempfile::tempdir()?;
    let state: Arc<dyn StateStore> = if config.opt_p1 {
        Arc::new(MemoryStore::from_map(genesis_state.clone()))
    } else {
        let s = DurableStore::open(dir.path().join("state.log"))?;
        s.restore(&genesis_state.snapshot())?;
        Arc::new(s)
    };
    let net = Network::new();
    let mut drains = Vec::new();
    let mut sinks: Vec<Box<dyn BlockSink>> = Vec::new();
    if config.opt_p2 {
        for id in [&parts.store, &parts.endorsers[0]] {
            drains.push(Drain::start(&net, id, mode)?);
            sinks.push(Box::new(RemoteSink::new(&net, id.as_str())));
        }
    } else {
        let store = Arc::new(BlockStore::open(dir.path().join("blocks"))?);
        store.append(&chain.genesis.encode())?;
        sinks.push(Box::new(StoreSink(store)));
    }
    let ctx = CommitterContext {
        validator: parts.validator(),
        orderer_key: parts.key(&parts.orderer).public(),
        state,
        sinks,
    };
    let mut committer = Committer::start(config.clone(), ctx, chain.genesis.header);
    let results = committer.results().clone();
    let state = committer.state().clone();
    for raw in &chain.blocks {
        if let Verdict::Discarded(why) = committer.deliver(raw.clone())? {
            return Err(BenchError::Invariant(format!("prebuilt block rejected: {why:?}")));
        }
    }
    committer.finish()?;
    drop(drains);
    let mut commits: Vec<CommitResult> = results.try_iter().collect();
    commits.sort_by_key(|r| r.block_number);
    if commits.len() != chain.blocks.len() {
        return Err(BenchError::Invariant(format!(
            "{} of {} blocks committed",
            commits.len(),
            chain.blocks.len()
        )));
    }
    Ok(PeerRun {
        result: RunResult::from_commits(&commits),
        state: state.to_map()?,
        flags: commits.into_iter().map(|c| c.flags).collect(),
    })
}

pub const DEFAULT_E2E_WORKERS: usize = 16;

#[derive(Debug, Clone)]
pub struct EndToEndConfig {
    pub toggles: Toggles,
    /// Block cut settings; the O toggles come from `toggles`.
    pub orderer: OrdererConfig,
    /// Shepherd and validator counts; the P toggles come from `toggles`.
    pub pipeline: PipelineConfig,
    pub tx_count: u64,
    pub payload: u32,
    pub window: usize,
    pub seed: u64,
    pub genesis: Genesis,
    pub mode: Mode,
    /// Per-node transport and bind addresses; `mode` applies to nodes it
    /// does not list.
    pub topology: Option<Topology>,
    /// Client threads running endorse-then-submit.
    pub workers: usize,
}

/// Result of a full-topology run plus the post-run audit.
#[derive(Debug, Clone)]
pub struct EndToEndRun {
    pub result: RunResult,
    pub final_state: VersionedMap,
    pub flags: Vec<Vec<ValidationFlag>>,
    pub submitted: u64,
    pub rejected: u64,
    pub chain: ChainReport,
    /// Endorsers whose state differs from the committer's.
    pub diverged_endorsers: Vec<String>,
}

impl EndToEndRun {
    pub fn invalid(&self) -> usize {
        self.flags.iter().flatten().filter(|f| !f.is_valid()).count()
    }

    pub fn valid(&self) -> usize {
        self.flags.iter().flatten().filter(|f| f.is_valid()).count()
    }

    pub fn total_balance(&self) -> u128 {
        super::workload::total_balance(&self.final_state)
    }

    /// Chain integrity, conservation, replica agreement and exactly-once.
    pub fn check(&self, genesis: &Genesis) -> Result<(), BenchError> {
        let fail = |m: String| Err(BenchError::Invariant(m));
        if !self.chain.problems.is_empty() {
            return fail(format!("chain integrity: {}", self.chain.problems.join("; ")));
        }
        if self.total_balance() != genesis.total() {
            return fail(format!(
                "balance total {} differs from genesis {}",
                self.total_balance(),
                genesis.total()
            ));
        }
        if !self.diverged_endorsers.is_empty() {
            return fail(format!("endorser state diverged: {:?}", self.diverged_endorsers));
        }
        if self.valid() as u64 + self.invalid() as u64 != self.submitted - self.rejected {
            return fail(format!(
                "{} committed transactions for {} accepted submissions",
                self.valid() + self.invalid(),
                self.submitted - self.rejected
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChainReport {
    pub height: u64,
    pub problems: Vec<String>,
}

/// Walks every stored block: numbering, hash links, data hash, orderer
/// signature, flag count and tx id uniqueness.
pub fn scan_chain(store: &BlockStore, orderer_key: &PublicKey) -> ChainReport {
    let height = store.height();
    let mut problems = Vec::new();
    let mut prev = None;
    let mut ids = HashSet::new();
    for n in 0..height {
        let block = match store.get_block(n).map(|b| Block::decode(&b)) {
            Ok(Ok(b)) => b,
            Ok(Err(e)) => {
                problems.push(format!("block {n} undecodable: {e}"));
                break;
            }
            Err(e) => {
                problems.push(format!("block {n} unreadable: {e}"));
                break;
            }
        };
        if block.number() != n {
            problems.push(format!("position {n} holds block {}", block.number()));
        }
        if let Some(p) = &prev {
            if !link_check(p, &block.header) {
                problems.push(format!("block {n} does not link to its predecessor"));
            }
        }
        if !block.data_hash_matches() {
            problems.push(format!("block {n} data hash mismatch"));
        }
        if !block.signature_valid(orderer_key) {
            problems.push(format!("block {n} orderer signature invalid"));
        }
        if n > 0 && block.flags.len() != block.envelopes.len() {
            problems.push(format!("block {n} has {} flags for {} txs", block.flags.len(), block.len()));
        }
        for env in &block.envelopes {
            if let Ok(h) = peek_header(env) {
                if !ids.insert(h.tx_id.clone()) {
                    problems.push(format!("tx {} appears twice", h.tx_id));
                }
            }
        }
        prev = Some(block.header);
    }
    ChainReport { height, problems }
}

struct Job {
    nonce: u64,
    accounts: [u32; 2],
    amount: u64,
    client: usize,
    endorser: usize,
}

enum Outcome {
    Committed,
    Rejected(String),
}

/// Client-side bookkeeping: accounts with a transaction in flight stay busy
/// until every endorser has applied the block that settles it, so no
/// endorsement ever reads a version the committer has already replaced.
struct Tracker {
    busy: Mutex<HashSet<u32>>,
    pending: Mutex<HashMap<String, [u32; 2]>>,
    window: cb::Receiver<()>,
    outcomes: cb::Sender<Outcome>,
}

impl Tracker {
    fn release(&self, accounts: [u32; 2], outcome: Outcome) {
        {
            let mut busy = self.busy.lock();
            busy.remove(&accounts[0]);
            busy.remove(&accounts[1]);
        }
        let _ = self.window.recv();
        let _ = self.outcomes.send(outcome);
    }

    fn settle(&self, block: &AppliedBlock) {
        for (id, _) in &block.txs {
            let accounts = self.pending.lock().remove(id);
            if let Some(a) = accounts {
                self.release(a, Outcome::Committed);
            }
        }
    }
}

fn client_worker(
    net: &Network,
    parts: &Participants,
    payload: u32,
    jobs: cb::Receiver<Job>,
    tracker: &Tracker,
) -> Result<(), BenchError> {
    let client_keys: Vec<_> = parts.clients.iter().map(|c| parts.key(c)).collect();
    let mut endorsers: Vec<Option<EndorserClient>> = parts.endorsers.iter().map(|_| None).collect();
    let mut orderer = OrdererClient::connect(net, &parts.orderer)?;
    for job in jobs {
        let proposal = TransferProposal {
            from_account: account_key(job.accounts[0]),
            to_account: account_key(job.accounts[1]),
            amount: job.amount,
            padding_len: payload,
        };
        let conn = match &mut endorsers[job.endorser] {
            Some(c) => c,
            slot => slot.insert(EndorserClient::connect(net, &parts.endorsers[job.endorser])?),
        };
        let endorsed = match conn.endorse(&proposal, &parts.clients[job.client], job.nonce) {
            Ok(e) => e,
            Err(e @ EndorseRequestError::Refused { .. }) => {
                tracker.release(job.accounts, Outcome::Rejected(e.to_string()));
                continue;
            }
            Err(e) => return Err(BenchError::Invariant(format!("endorsement failed: {e}"))),
        };
        let tx_id = endorsed.header.tx_id.clone();
        tracker.pending.lock().insert(tx_id.clone(), job.accounts);
        let envelope = encode_envelope(
            &endorsed.header,
            &endorsed.rwset,
            &[endorsed.endorsement],
            payload as usize,
            &client_keys[job.client],
        );
        if let Err(e) = orderer.submit(&envelope) {
            let was_pending = tracker.pending.lock().remove(&tx_id);
            if was_pending.is_some() {
                tracker.release(job.accounts, Outcome::Rejected(e.to_string()));
            }
            if !matches!(e, SubmitError::Rejected(_)) {
                return Err(e.into());
            }
        }
    }
    Ok(())
}

/// Runs the whole topology: ordering log, orderer, committer, block store,
/// endorsers and a client driver.
///
/// With `p2` the endorsers hold replicas and the block store is a separate
/// node, both fed over the network. Without it the endorsers share the
/// committer's state and blocks are stored inline.
pub fn run_end_to_end(parts: &Participants, config: &EndToEndConfig) -> Result<EndToEndRun, BenchError> {
    let t = config.toggles;
    let dir = tempfile::tempdir()?;
    let net = Network::new();
    let mode_of = |id: &str| -> Mode {
        config
            .topology
            .as_ref()
            .and_then(|topo| topo.nodes.iter().find(|n| n.id == id))
            .map_or(config.mode, |n| n.mode)
    };
    if let Some(topo) = &config.topology {
        for n in &topo.nodes {
            if let Some(a) = n.address {
                net.bind_at(&n.id, a);
            }
        }
    }
    let genesis_state = config.genesis.state();
    let snapshot = genesis_state.snapshot();
    let genesis = parts.genesis_block();
    let orderer_key = parts.key(&parts.orderer);

    let log = Arc::new(OrderingLog::with_segment(&dir.path().join("log.seg"))?);
    let _log_server = LogServer::start(&net, &parts.log, mode_of(&parts.log), log)?;
    let ctx = OrdererContext {
        registry: Arc::new(parts.registry()),
        key: orderer_key.clone(),
        log_node: parts.log.clone(),
    };
    let mut orderer = Orderer::start(
        &net,
        &parts.orderer,
        mode_of(&parts.orderer),
        t.orderer(&config.orderer),
        ctx,
        Block::genesis(),
    )?;

    let store = Arc::new(BlockStore::open(dir.path().join("blocks"))?);
    store.append(&genesis.encode())?;
    let pipeline = t.pipeline(&config.pipeline);
    let state: Arc<dyn StateStore> = if pipeline.opt_p1 {
        Arc::new(MemoryStore::from_map(genesis_state.clone()))
    } else {
        let s = DurableStore::open(dir.path().join("state.log"))?;
        s.restore(&snapshot)?;
        Arc::new(s)
    };

    let mut sinks: Vec<Box<dyn BlockSink>> = Vec::new();
    let mut endorsers = Vec::new();
    let mut servers = Vec::new();
    let _store_server = if pipeline.opt_p2 {
        sinks.push(Box::new(RemoteSink::new(&net, parts.store.as_str())));
        Some(BlockStoreServer::start(&net, &parts.store, mode_of(&parts.store), store.clone())?)
    } else {
        sinks.push(Box::new(StoreSink(store.clone())));
        None
    };
    for id in &parts.endorsers {
        let e = if pipeline.opt_p2 {
            sinks.push(Box::new(RemoteSink::new(&net, id.as_str())));
            Arc::new(Endorser::replica(id.clone(), parts.key(id), &snapshot, 0)?)
        } else {
            let e = Arc::new(Endorser::colocated(id.clone(), parts.key(id), state.clone(), 0));
            sinks.push(Box::new(LocalEndorserSink(e.clone())));
            e
        };
        let store_node = pipeline.opt_p2.then(|| parts.store.clone());
        servers.push(EndorserServer::start(&net, mode_of(id), e.clone(), store_node)?);
        endorsers.push(e);
    }

    let committer = Committer::start(
        pipeline,
        CommitterContext {
            validator: parts.validator(),
            orderer_key: orderer_key.public(),
            state,
            sinks,
        },
        genesis.header,
    );
    let results = committer.results().clone();
    let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let follower = {
        let net = net.clone();
        let orderer_id = parts.orderer.clone();
        let stop = stop.clone();
        let mut committer = committer;
        thread::Builder::new().name("committer-follow".into()).spawn(move || {
            let r = follow_orderer(&net, &orderer_id, &mut committer, None, &stop);
            (committer, r)
        })?
    };

    // Every endorser reports each applied block; a block settles its
    // transactions once all of them have.
    let (window_tx, window_rx) = cb::bounded::<()>(config.window.max(1));
    let (outcomes_tx, outcomes) = cb::unbounded();
    let tracker = Arc::new(Tracker {
        busy: Mutex::new(HashSet::new()),
        pending: Mutex::new(HashMap::new()),
        window: window_rx,
        outcomes: outcomes_tx,
    });
    let (applied_tx, applied_rx) = cb::unbounded::<Arc<AppliedBlock>>();
    for e in &endorsers {
        let rx = e.watch();
        let tx = applied_tx.clone();
        thread::spawn(move || {
            for ev in rx {
                if tx.send(ev).is_err() {
                    return;
                }
            }
        });
    }
    drop(applied_tx);
    {
        let tracker = tracker.clone();
        let n = endorsers.len();
        thread::Builder::new().name("client-tracker".into()).spawn(move || {
            let mut seen: HashMap<u64, usize> = HashMap::new();
            for ev in applied_rx {
                let c = seen.entry(ev.number).or_default();
                *c += 1;
                if *c == n {
                    seen.remove(&ev.number);
                    tracker.settle(&ev);
                }
            }
        })?;
    }

    let (jobs_tx, jobs_rx) = cb::bounded::<Job>(config.window.max(1));
    let workers: Vec<_> = (0..config.workers.max(1))
        .map(|i| {
            let net = net.clone();
            let parts = parts.clone();
            let jobs = jobs_rx.clone();
            let tracker = tracker.clone();
            let payload = config.payload;
            thread::Builder::new()
                .name(format!("client-worker-{i}"))
                .spawn(move || client_worker(&net, &parts, payload, jobs, &tracker))
        })
        .collect::<Result<_, _>>()?;
    drop(jobs_rx);

    let accounts = config.genesis.accounts;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let window_cap = (accounts as usize / 2).saturating_sub(1).max(1);
    let in_flight_cap = config.window.min(window_cap);
    let mut issued = 0u64;
    let driver_error = (|| -> Result<(), BenchError> {
        for nonce in 0..config.tx_count {
            // Fill the window; stay below half the accounts so free pairs exist.
            while tracker.busy.lock().len() / 2 >= in_flight_cap {
                thread::sleep(Duration::from_micros(200));
            }
            if window_tx.send_timeout((), STALL_TIMEOUT).is_err() {
                return Err(BenchError::Invariant("client window never drained".into()));
            }
            let pair = {
                let mut busy = tracker.busy.lock();
                loop {
                    let from = rng.gen_range(0..accounts);
                    let to = rng.gen_range(0..accounts);
                    if from != to && !busy.contains(&from) && !busy.contains(&to) {
                        busy.insert(from);
                        busy.insert(to);
                        break [from, to];
                    }
                }
            };
            let job = Job {
                nonce,
                accounts: pair,
                amount: rng.gen_range(1..=100),
                client: rng.gen_range(0..parts.clients.len()),
                endorser: rng.gen_range(0..parts.endorsers.len()),
            };
            if jobs_tx.send(job).is_err() {
                return Err(BenchError::Invariant("client workers exited early".into()));
            }
            issued += 1;
        }
        Ok(())
    })();
    drop(jobs_tx);

    let mut rejected = 0u64;
    let mut settled = 0u64;
    let mut wait_error = None;
    while settled < issued {
        match outcomes.recv_timeout(STALL_TIMEOUT) {
            Ok(Outcome::Committed) => settled += 1,
            Ok(Outcome::Rejected(why)) => {
                log::warn!("transaction rejected: {why}");
                rejected += 1;
                settled += 1;
            }
            Err(_) => {
                wait_error = Some(BenchError::Invariant(format!(
                    "{settled} of {issued} transactions settled before the run stalled"
                )));
                break;
            }
        }
    }
    for w in workers {
        if let Err(e) = w.join().expect("client worker panicked") {
            wait_error.get_or_insert(e);
        }
    }
    stop.store(true, std::sync::atomic::Ordering::Relaxed);
    let (committer, followed) = follower.join().expect("committer follower panicked");
    let committed = committer.committed_height();
    let final_state = committer.state().clone();
    committer.finish()?;
    orderer.shutdown();
    driver_error?;
    followed?;
    if let Some(e) = wait_error {
        return Err(e);
    }

    // The remote store and replicas may still be applying the last blocks.
    let deadline = Instant::now() + Duration::from_secs(30);
    while store.height() <= committed && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(2));
    }
    let mut diverged = Vec::new();
    let final_state = final_state.to_map()?;
    for e in &endorsers {
        if !e.wait_for_height(committed, Duration::from_secs(30)) || e.state().to_map()? != final_state {
            diverged.push(e.id().to_string());
        }
    }
    drop(servers);

    let mut commits: Vec<CommitResult> = results.try_iter().collect();
    commits.sort_by_key(|r| r.block_number);
    Ok(EndToEndRun {
        result: RunResult::from_commits(&commits),
        final_state,
        flags: commits.into_iter().map(|c| c.flags).collect(),
        submitted: issued,
        rejected,
        chain: scan_chain(&store, &orderer_key.public()),
        diverged_endorsers: diverged,
    })
}
