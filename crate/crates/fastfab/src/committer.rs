//! The committing peer: block verification, pre-MVCC validation, ordered
//! MVCC commit and fan-out of validated blocks.
//!
//! With `opt_p2` on, accepted blocks are handed to a pool of block shepherds
//! that spread transaction checks over a shared validator pool; a single
//! commit worker puts results back into block order, runs MVCC and queues the
//! block for every sink on its own thread. With `opt_p2` off, [`Committer::deliver`]
//! handles one block at a time and runs the sinks inline.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam::channel::{self as cb, Receiver, Sender};
use fastfab_core::ledger::ValidationFlag;
use fastfab_core::mvcc::{mvcc_commit, unread_writes};
use fastfab_core::validate::{FreshLayers, TxLayers, TxValidator};
use fastfab_core::wire::BlockHeader;
use fastfab_core::{link_check, Block, PublicKey};
use parking_lot::Mutex;
use thiserror::Error;

use crate::cache::{CachedBlock, UnmarshalCache};
use crate::proto;
use crate::statestore::{Backend, StateStore, StoreError, StoreView};
use crate::transport::{Network, TransportError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineConfig {
    pub block_shepherds: usize,
    pub tx_validators: usize,
    /// Hash-table world state instead of the durable log.
    pub opt_p1: bool,
    /// Parallel block pipeline and offloaded persistence.
    pub opt_p2: bool,
    /// Unmarshal cache.
    pub opt_p3: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            block_shepherds: 31,
            tx_validators: 25,
            opt_p1: true,
            opt_p2: true,
            opt_p3: true,
        }
    }
}

impl PipelineConfig {
    pub fn baseline() -> Self {
        Self {
            opt_p1: false,
            opt_p2: false,
            opt_p3: false,
            ..Self::default()
        }
    }

    pub fn state_backend(&self) -> Backend {
        if self.opt_p1 {
            Backend::Memory
        } else {
            Backend::Durable
        }
    }

    fn in_flight(&self) -> usize {
        if self.opt_p2 {
            self.block_shepherds.max(1)
        } else {
            1
        }
    }
}

#[derive(Debug, Error)]
pub enum CommitError {
    #[error("state storage failed: {0}")]
    StorageFailure(#[from] StoreError),
    #[error("pipeline halted: {0}")]
    Halted(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Discard {
    Undecodable,
    /// Already accepted earlier.
    Stale { number: u64 },
    Gap { expected: u64, got: u64 },
    BadSignature,
    DataHashMismatch,
    BrokenLink,
    /// Blocks from the orderer carry no flags yet.
    FlagsPresent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accepted,
    Discarded(Discard),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitResult {
    pub block_number: u64,
    pub flags: Vec<ValidationFlag>,
    pub delivered_at: Instant,
    pub commit_time: Instant,
}

impl CommitResult {
    pub fn latency(&self) -> Duration {
        self.commit_time.saturating_duration_since(self.delivered_at)
    }
}

/// A committed block as handed to sinks.
#[derive(Debug, Clone)]
pub struct CommittedBlock {
    pub block: Arc<Block>,
    pub flags: Arc<[ValidationFlag]>,
    /// Block encoding including the flags.
    pub encoded: Arc<[u8]>,
}

impl CommittedBlock {
    fn new(block: Arc<Block>, raw: &[u8], flags: Vec<ValidationFlag>) -> Self {
        // Delivered blocks end in an empty flag list (`u32 0`); swap in ours.
        let body = &raw[..raw.len() - 4];
        let mut encoded = Vec::with_capacity(body.len() + 4 + flags.len());
        encoded.extend_from_slice(body);
        encoded.extend_from_slice(&(flags.len() as u32).to_le_bytes());
        encoded.extend(flags.iter().map(|f| *f as u8));
        Self {
            block,
            flags: flags.into(),
            encoded: encoded.into(),
        }
    }

    pub fn number(&self) -> u64 {
        self.block.number()
    }

    /// The block with flags attached.
    pub fn to_block(&self) -> Block {
        Block {
            flags: self.flags.to_vec(),
            ..(*self.block).clone()
        }
    }
}

#[derive(Debug, Error)]
pub enum SinkError {
    #[error("{0} unreachable")]
    PeerUnreachable(String),
    #[error("{0}")]
    Rejected(String),
}

impl From<TransportError> for SinkError {
    fn from(e: TransportError) -> Self {
        SinkError::PeerUnreachable(e.to_string())
    }
}

/// Destination for committed blocks.
pub trait BlockSink: Send {
    fn name(&self) -> &str;
    fn deliver(&mut self, block: &CommittedBlock) -> Result<(), SinkError>;
}

/// Accepts and drops every block.
#[derive(Debug, Default)]
pub struct DiscardSink;

impl BlockSink for DiscardSink {
    fn name(&self) -> &str {
        "discard"
    }

    fn deliver(&mut self, _: &CommittedBlock) -> Result<(), SinkError> {
        Ok(())
    }
}

/// Forwards blocks to an in-process channel.
pub struct ChannelSink {
    name: String,
    tx: Sender<CommittedBlock>,
}

impl ChannelSink {
    pub fn new(name: impl Into<String>, tx: Sender<CommittedBlock>) -> Self {
        Self { name: name.into(), tx }
    }
}

impl BlockSink for ChannelSink {
    fn name(&self) -> &str {
        &self.name
    }

    fn deliver(&mut self, block: &CommittedBlock) -> Result<(), SinkError> {
        self.tx
            .send(block.clone())
            .map_err(|_| SinkError::Rejected(format!("{} hung up", self.name)))
    }
}

/// Sends `VALIDATED` messages to a remote node, reconnecting as needed.
pub struct RemoteSink {
    net: Network,
    peer: String,
    conn: Option<crate::transport::Channel>,
}

impl RemoteSink {
    pub fn new(net: &Network, peer: impl Into<String>) -> Self {
        Self {
            net: net.clone(),
            peer: peer.into(),
            conn: None,
        }
    }
}

impl BlockSink for RemoteSink {
    fn name(&self) -> &str {
        &self.peer
    }

    fn deliver(&mut self, block: &CommittedBlock) -> Result<(), SinkError> {
        if self.conn.is_none() {
            self.conn = Some(self.net.connect(&self.peer)?);
        }
        let conn = self.conn.as_mut().expect("connected above");
        if let Err(e) = conn.send(proto::VALIDATED, &block.encoded) {
            self.conn = None;
            return Err(e.into());
        }
        Ok(())
    }
}

/// Calls `sink` until it succeeds, backing off on unreachable peers.
/// Returns false if `stop` was raised first.
fn deliver_with_retry(sink: &mut dyn BlockSink, block: &CommittedBlock, stop: &AtomicBool) -> bool {
    let mut backoff = Duration::from_millis(1);
    loop {
        match sink.deliver(block) {
            Ok(()) => return true,
            Err(SinkError::PeerUnreachable(why)) => {
                log::warn!(
                    "block {} to {}: {why}; retrying in {backoff:?}",
                    block.number(),
                    sink.name()
                );
                if stop.load(Ordering::Relaxed) {
                    return false;
                }
                thread::sleep(backoff);
                backoff = (backoff * 2).min(Duration::from_millis(500));
            }
            Err(e) => {
                log::error!("block {} to {}: {e}", block.number(), sink.name());
                return true;
            }
        }
    }
}

/// Static inputs of a committer.
pub struct CommitterContext {
    pub validator: TxValidator,
    pub orderer_key: PublicKey,
    pub state: Arc<dyn StateStore>,
    pub sinks: Vec<Box<dyn BlockSink>>,
}

struct Work {
    block: Arc<Block>,
    raw: Arc<[u8]>,
    cached: Option<Arc<CachedBlock>>,
    delivered_at: Instant,
}

impl Work {
    fn validate(&self, validator: &TxValidator, index: usize) -> ValidationFlag {
        match &self.cached {
            Some(c) => validator.validate(&c.layers(index)),
            None => validator.validate(&FreshLayers::new(&self.block.envelopes[index])),
        }
    }
}

struct TxJob {
    work: Arc<Work>,
    range: std::ops::Range<usize>,
    done: Sender<(usize, ValidationFlag)>,
}

/// Runs every transaction check of `work` on the validator pool and waits.
fn pre_validate(work: &Arc<Work>, pool: &Sender<TxJob>, validators: usize) -> Vec<ValidationFlag> {
    let n = work.block.len();
    let mut flags = vec![ValidationFlag::Malformed; n];
    if n == 0 {
        return flags;
    }
    let chunk = n.div_ceil(validators.max(1));
    let (done_tx, done_rx) = cb::unbounded();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        pool.send(TxJob {
            work: work.clone(),
            range: start..end,
            done: done_tx.clone(),
        })
        .expect("validator pool outlives the pipeline");
        start = end;
    }
    drop(done_tx);
    for (i, f) in done_rx.iter() {
        flags[i] = f;
    }
    flags
}

/// State shared by whichever thread runs the commit step.
struct CommitStage {
    state: Arc<dyn StateStore>,
    results: Sender<CommitResult>,
    committed: Arc<AtomicU64>,
    unread_write_noted: AtomicBool,
}

impl CommitStage {
    fn commit(&self, work: &Work, pre_flags: &[ValidationFlag]) -> Result<CommittedBlock, StoreError> {
        let number = work.block.number();
        let mut view = StoreView(&*self.state);
        let flags = mvcc_commit(&mut view, number, pre_flags, |i| {
            let rwset = match &work.cached {
                Some(c) => c.layers(i).rwset(),
                None => FreshLayers::new(&work.block.envelopes[i]).rwset(),
            };
            let rwset = rwset.ok()?;
            if !self.unread_write_noted.load(Ordering::Relaxed) && unread_writes(&rwset).next().is_some() {
                self.unread_write_noted.store(true, Ordering::Relaxed);
                log::info!("block {number} tx {i} writes keys it never read; only its read set is version-checked");
            }
            Some(rwset)
        })?;
        self.state.commit_block(number)?;
        if let Some(c) = &work.cached {
            c.mark_committed();
        }
        let committed = CommittedBlock::new(work.block.clone(), &work.raw, flags.clone());
        self.committed.store(number, Ordering::Release);
        let _ = self.results.send(CommitResult {
            block_number: number,
            flags,
            delivered_at: work.delivered_at,
            commit_time: Instant::now(),
        });
        Ok(committed)
    }
}

/// A running committer. Feed it blocks with [`deliver`](Self::deliver).
pub struct Committer {
    config: PipelineConfig,
    orderer_key: PublicKey,
    last: BlockHeader,
    cache: Option<Arc<UnmarshalCache>>,
    pool: Option<Sender<TxJob>>,
    stage: Arc<CommitStage>,
    /// Inline mode only.
    sinks: Vec<Box<dyn BlockSink>>,
    /// Pipelined mode only.
    shepherd_tx: Option<Sender<Arc<Work>>>,
    /// One permit per block in flight: acquire by sending, release by receiving.
    permits: (Sender<()>, Receiver<()>),
    failure: Arc<Mutex<Option<String>>>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    sink_threads: Vec<JoinHandle<()>>,
    results: Receiver<CommitResult>,
}

impl Committer {
    /// Starts the pipeline. `last` is the header of the newest block already
    /// reflected in `ctx.state` (normally genesis).
    pub fn start(config: PipelineConfig, ctx: CommitterContext, last: BlockHeader) -> Self {
        assert!(config.block_shepherds >= 1 && config.tx_validators >= 1);
        let (results_tx, results) = cb::unbounded();
        let stage = Arc::new(CommitStage {
            state: ctx.state,
            results: results_tx,
            committed: Arc::new(AtomicU64::new(last.number)),
            unread_write_noted: AtomicBool::new(false),
        });
        let validator = Arc::new(ctx.validator);
        let failure = Arc::new(Mutex::new(None));
        let stop = Arc::new(AtomicBool::new(false));
        let mut threads = Vec::new();

        let (pool_tx, pool_rx) = cb::unbounded::<TxJob>();
        for i in 0..config.tx_validators {
            let rx = pool_rx.clone();
            let validator = validator.clone();
            threads.push(
                thread::Builder::new()
                    .name(format!("tx-validator-{i}"))
                    .spawn(move || {
                        for job in rx.iter() {
                            for idx in job.range.clone() {
                                let _ = job.done.send((idx, job.work.validate(&validator, idx)));
                            }
                        }
                    })
                    .expect("spawn validator"),
            );
        }

        let cache = config.opt_p3.then(|| Arc::new(UnmarshalCache::new(config.in_flight())));
        let permits = cb::bounded(config.in_flight());

        let mut committer = Self {
            config: config.clone(),
            orderer_key: ctx.orderer_key,
            last,
            cache,
            pool: Some(pool_tx.clone()),
            stage: stage.clone(),
            sinks: Vec::new(),
            shepherd_tx: None,
            permits,
            failure: failure.clone(),
            stop: stop.clone(),
            threads,
            sink_threads: Vec::new(),
            results,
        };

        if !config.opt_p2 {
            committer.sinks = ctx.sinks;
            return committer;
        }

        // Fan-out: one thread per sink so a slow or absent peer delays only itself.
        let mut sink_queues = Vec::new();
        for mut sink in ctx.sinks {
            let (tx, rx) = cb::unbounded::<CommittedBlock>();
            let stop = stop.clone();
            committer.sink_threads.push(
                thread::Builder::new()
                    .name(format!("fanout-{}", sink.name()))
                    .spawn(move || {
                        for block in rx.iter() {
                            if !deliver_with_retry(&mut *sink, &block, &stop) {
                                return;
                            }
                        }
                    })
                    .expect("spawn fan-out"),
            );
            sink_queues.push(tx);
        }

        // Commit worker: reorders shepherd output and commits strictly in order.
        let (commit_tx, commit_rx) = cb::unbounded::<(Arc<Work>, Vec<ValidationFlag>)>();
        let permits_rx = committer.permits.1.clone();
        {
            let stage = stage.clone();
            let failure = failure.clone();
            let mut next = last.number + 1;
            committer.threads.push(
                thread::Builder::new()
                    .name("commit".into())
                    .spawn(move || {
                        let mut pending = BTreeMap::new();
                        for (work, flags) in commit_rx.iter() {
                            pending.insert(work.block.number(), (work, flags));
                            while let Some((work, flags)) = pending.remove(&next) {
                                match stage.commit(&work, &flags) {
                                    Ok(block) => {
                                        for q in &sink_queues {
                                            let _ = q.send(block.clone());
                                        }
                                    }
                                    Err(e) => {
                                        log::error!("commit of block {next} failed: {e}");
                                        *failure.lock() = Some(e.to_string());
                                        // Release everyone waiting for a permit.
                                        while permits_rx.try_recv().is_ok() {}
                                        return;
                                    }
                                }
                                let _ = permits_rx.recv();
                                next += 1;
                            }
                        }
                    })
                    .expect("spawn commit worker"),
            );
        }

        let (shepherd_tx, shepherd_rx) = cb::unbounded::<Arc<Work>>();
        for i in 0..config.block_shepherds {
            let rx = shepherd_rx.clone();
            let pool = pool_tx.clone();
            let commit_tx = commit_tx.clone();
            let validators = config.tx_validators;
            committer.threads.push(
                thread::Builder::new()
                    .name(format!("shepherd-{i}"))
                    .spawn(move || {
                        for work in rx.iter() {
                            let flags = pre_validate(&work, &pool, validators);
                            if commit_tx.send((work, flags)).is_err() {
                                return;
                            }
                        }
                    })
                    .expect("spawn shepherd"),
            );
        }
        committer.shepherd_tx = Some(shepherd_tx);
        committer
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Number the next accepted block must carry.
    pub fn next_expected(&self) -> u64 {
        self.last.number + 1
    }

    /// Highest block number whose commit finished.
    pub fn committed_height(&self) -> u64 {
        self.stage.committed.load(Ordering::Acquire)
    }

    pub fn results(&self) -> &Receiver<CommitResult> {
        &self.results
    }

    pub fn state(&self) -> &Arc<dyn StateStore> {
        &self.stage.state
    }

    pub fn cache(&self) -> Option<&Arc<UnmarshalCache>> {
        self.cache.as_ref()
    }

    /// Checks signature, data hash and chain link against the last accepted block.
    pub fn verify_block(&self, block: &Block) -> Verdict {
        let expected = self.next_expected();
        let discard = if block.number() < expected {
            Discard::Stale {
                number: block.number(),
            }
        } else if block.number() > expected {
            Discard::Gap {
                expected,
                got: block.number(),
            }
        } else if !block.flags.is_empty() {
            Discard::FlagsPresent
        } else if !block.signature_valid(&self.orderer_key) {
            Discard::BadSignature
        } else if !block.data_hash_matches() {
            Discard::DataHashMismatch
        } else if !link_check(&self.last, &block.header) {
            Discard::BrokenLink
        } else {
            return Verdict::Accepted;
        };
        Verdict::Discarded(discard)
    }

    fn check_failure(&self) -> Result<(), CommitError> {
        match &*self.failure.lock() {
            Some(why) => Err(CommitError::Halted(why.clone())),
            None => Ok(()),
        }
    }

    /// Verifies an encoded block and, if accepted, runs it through the
    /// pipeline. Blocks while the pipeline is full; with `opt_p2` off,
    /// returns only after the block is committed and persisted.
    pub fn deliver(&mut self, raw: Vec<u8>) -> Result<Verdict, CommitError> {
        self.check_failure()?;
        let Ok(block) = Block::decode(&raw) else {
            log::warn!("discarding undecodable block");
            return Ok(Verdict::Discarded(Discard::Undecodable));
        };
        let verdict = self.verify_block(&block);
        if let Verdict::Discarded(why) = verdict {
            log::warn!("discarding block {}: {why:?}", block.number());
            return Ok(verdict);
        }
        self.last = block.header;
        let block = Arc::new(block);

        // Wait for a slot; a committed block releases one.
        if self.permits.0.send(()).is_err() {
            return Err(CommitError::Halted("commit worker gone".into()));
        }
        self.check_failure()?;
        // Latency counts from pipeline entry, not from time spent waiting for a slot.
        let delivered_at = Instant::now();
        let cached = self.cache.as_ref().map(|c| c.admit(block.clone()));
        let work = Arc::new(Work {
            block,
            raw: raw.into(),
            cached,
            delivered_at,
        });

        match &self.shepherd_tx {
            Some(tx) => {
                tx.send(work).map_err(|_| CommitError::Halted("shepherds gone".into()))?;
            }
            None => {
                let pool = self.pool.as_ref().expect("pool lives until drop");
                let pre = pre_validate(&work, pool, self.config.tx_validators);
                let committed = self.stage.commit(&work, &pre).inspect_err(|e| {
                    *self.failure.lock() = Some(e.to_string());
                })?;
                for sink in &mut self.sinks {
                    deliver_with_retry(&mut **sink, &committed, &self.stop);
                }
                let _ = self.permits.1.recv();
            }
        }
        Ok(Verdict::Accepted)
    }

    /// Waits until every accepted block is committed and handed to all sinks,
    /// then stops all workers.
    pub fn finish(mut self) -> Result<(), CommitError> {
        self.shutdown(false);
        self.check_failure()
    }

    fn shutdown(&mut self, abandon_sinks: bool) {
        if abandon_sinks {
            self.stop.store(true, Ordering::Relaxed);
        }
        self.shepherd_tx = None;
        self.pool = None;
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        if !abandon_sinks {
            for t in self.sink_threads.drain(..) {
                let _ = t.join();
            }
        }
    }
}

impl Drop for Committer {
    fn drop(&mut self) {
        self.shutdown(true);
    }
}

/// Streams blocks from the orderer into `committer` until block `until` is
/// accepted or `stop` is raised. A discarded block ends the stream and
/// re-subscribes from the next expected number.
pub fn follow_orderer(
    net: &Network,
    orderer: &str,
    committer: &mut Committer,
    until: Option<u64>,
    stop: &AtomicBool,
) -> Result<(), CommitError> {
    let mut attempts = 0u32;
    while !stop.load(Ordering::Relaxed) {
        if until.is_some_and(|u| committer.next_expected() > u) {
            return Ok(());
        }
        let mut ch = match net.connect(orderer) {
            Ok(ch) => ch,
            Err(e) => {
                attempts += 1;
                if attempts > 50 {
                    return Err(CommitError::Halted(format!("orderer unreachable: {e}")));
                }
                thread::sleep(Duration::from_millis(20));
                continue;
            }
        };
        if ch
            .send(proto::DELIVER_FROM, &proto::u64_body(committer.next_expected()))
            .is_err()
        {
            continue;
        }
        loop {
            if until.is_some_and(|u| committer.next_expected() > u) || stop.load(Ordering::Relaxed) {
                return Ok(());
            }
            let msg = match ch.recv_timeout(Duration::from_millis(100)) {
                Ok(Some(m)) => m,
                Ok(None) => continue,
                Err(_) => break,
            };
            if msg.msg_type != proto::DELIVER {
                log::warn!("unexpected message {:#06x} on deliver stream", msg.msg_type);
                break;
            }
            match committer.deliver(msg.into_body())? {
                Verdict::Accepted => attempts = 0,
                Verdict::Discarded(Discard::Stale { .. }) => {}
                Verdict::Discarded(why) => {
                    attempts += 1;
                    if attempts > 50 {
                        return Err(CommitError::Halted(format!(
                            "block {} keeps failing verification: {why:?}",
                            committer.next_expected()
                        )));
                    }
                    thread::sleep(Duration::from_millis(10));
                    break;
                }
            }
        }
    }
    Ok(())
}
