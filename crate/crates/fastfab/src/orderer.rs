//! Ordering node: client intake, publication to the ordering log, block
//! cutting and block delivery.
//!
//! With `opt_o1` the orderer keeps each envelope in a local payload table and
//! publishes only its 64-character transaction id; envelopes are put back
//! together when the ids come back from the log. With `opt_o2` up to
//! `intake_pool` submissions are processed concurrently, otherwise one at a
//! time across all client connections.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam::channel::{self as cb, RecvTimeoutError};
use fastfab_core::wire::{peek_header, BlockHeader};
use fastfab_core::{Block, Registry, SigningKey, DEFAULT_CHANNEL};
use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::ordering_log::{LogClient, LogError};
use crate::proto::{self, RejectCode};
use crate::transport::{Channel, ListenerCloser, Mode, Network, TransportError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrdererConfig {
    pub opt_o1: bool,
    pub opt_o2: bool,
    pub max_block_txs: usize,
    pub block_timeout: Duration,
    pub intake_pool: usize,
    pub channel_id: String,
}

impl Default for OrdererConfig {
    fn default() -> Self {
        Self {
            opt_o1: false,
            opt_o2: false,
            max_block_txs: 100,
            block_timeout: Duration::from_millis(100),
            intake_pool: 2 * thread::available_parallelism().map_or(1, |n| n.get()),
            channel_id: DEFAULT_CHANNEL.to_string(),
        }
    }
}

#[derive(Debug, Error)]
pub enum OrdererError {
    #[error("ordered transaction id {0} has no stored payload")]
    UnknownTxId(String),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Error)]
pub enum SubmitError {
    #[error("submission rejected: {0:?}")]
    Rejected(RejectCode),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("unexpected reply {0:#06x}")]
    Protocol(u16),
}

/// Counting semaphore over a bounded channel: `acquire` sends, `release` receives.
struct Gate {
    tx: cb::Sender<()>,
    rx: cb::Receiver<()>,
}

impl Gate {
    fn new(permits: usize) -> Self {
        let (tx, rx) = cb::bounded(permits.max(1));
        Self { tx, rx }
    }

    fn acquire(&self) -> GatePermit<'_> {
        self.tx.send(()).expect("gate holds its own receiver");
        GatePermit(self)
    }
}

struct GatePermit<'a>(&'a Gate);

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let _ = self.0.rx.recv();
    }
}

/// Signed, encoded blocks in chain order, starting with genesis.
#[derive(Default)]
struct Chain {
    blocks: Mutex<Vec<Arc<[u8]>>>,
    grew: Condvar,
}

struct Shared {
    config: OrdererConfig,
    registry: Arc<Registry>,
    net: Network,
    log_node: String,
    /// Envelopes awaiting their id from the log (`opt_o1`).
    payloads: Mutex<HashMap<String, Vec<u8>>>,
    /// Ids accepted at intake and not yet placed in a block.
    pending: Mutex<HashSet<String>>,
    log_clients: Mutex<Vec<LogClient>>,
    gate: Gate,
    chain: Chain,
    stop: AtomicBool,
    fatal: Mutex<Option<String>>,
}

impl Shared {
    fn with_log_client<T>(&self, f: impl FnOnce(&mut LogClient) -> Result<T, LogError>) -> Result<T, LogError> {
        let pooled = self.log_clients.lock().pop();
        let mut client = match pooled {
            Some(c) => c,
            None => LogClient::connect(&self.net, &self.log_node)?,
        };
        let out = f(&mut client);
        if out.is_ok() {
            self.log_clients.lock().push(client);
        }
        out
    }

    fn handle_submit(&self, envelope: Vec<u8>) -> Result<u64, RejectCode> {
        let header = peek_header(&envelope).map_err(|_| RejectCode::Malformed)?;
        if !self.registry.is_authorized_client(&header.creator) {
            return Err(RejectCode::Unauthorized);
        }
        if !self.pending.lock().insert(header.tx_id.clone()) {
            return Err(RejectCode::Duplicate);
        }
        let channel = &self.config.channel_id;
        let published = if self.config.opt_o1 {
            self.payloads.lock().insert(header.tx_id.clone(), envelope);
            let r = self.with_log_client(|c| c.publish(channel, header.tx_id.as_bytes()));
            if r.is_err() {
                self.payloads.lock().remove(&header.tx_id);
            }
            r
        } else {
            self.with_log_client(|c| c.publish(channel, &envelope))
        };
        published.map_err(|e| {
            log::warn!("publish of {} failed: {e}", header.tx_id);
            self.pending.lock().remove(&header.tx_id);
            RejectCode::Unavailable
        })
    }

    fn append_block(&self, block: Block) {
        let encoded: Arc<[u8]> = block.encode().into();
        self.chain.blocks.lock().push(encoded);
        self.chain.grew.notify_all();
    }

    fn fail(&self, e: OrdererError) {
        log::error!("orderer halted: {e}");
        *self.fatal.lock() = Some(e.to_string());
        self.stop.store(true, Ordering::SeqCst);
        self.chain.grew.notify_all();
    }
}

/// Identity and collaborators of an orderer node.
pub struct OrdererContext {
    pub registry: Arc<Registry>,
    pub key: SigningKey,
    /// Node id of the ordering log service.
    pub log_node: String,
}

pub struct Orderer {
    shared: Arc<Shared>,
    closer: ListenerCloser,
    threads: Vec<JoinHandle<()>>,
}

impl Orderer {
    /// Starts intake on `node_id` and assembly from the log. `genesis` must
    /// be block 0; it is signed here and becomes the head of the chain.
    pub fn start(
        net: &Network,
        node_id: &str,
        mode: Mode,
        config: OrdererConfig,
        ctx: OrdererContext,
        mut genesis: Block,
    ) -> Result<Self, OrdererError> {
        let OrdererContext { registry, key, log_node } = ctx;
        let log_node = log_node.as_str();
        assert!(config.max_block_txs >= 1 && config.intake_pool >= 1);
        assert_eq!(genesis.number(), 0, "chain must start at block 0");
        let gate = Gate::new(if config.opt_o2 { config.intake_pool } else { 1 });
        let shared = Arc::new(Shared {
            config,
            registry,
            net: net.clone(),
            log_node: log_node.to_string(),
            payloads: Mutex::new(HashMap::new()),
            pending: Mutex::new(HashSet::new()),
            log_clients: Mutex::new(Vec::new()),
            gate,
            chain: Chain::default(),
            stop: AtomicBool::new(false),
            fatal: Mutex::new(None),
        });
        genesis.sign(&key);
        let genesis_header = genesis.header;
        shared.append_block(genesis);

        let mut subscription = LogClient::subscribe(net, log_node, &shared.config.channel_id, 0)?;
        let listener = net.listen(node_id, mode)?;
        let closer = listener.closer(net);
        let mut threads = Vec::new();

        let (records_tx, records_rx) = cb::bounded(65_536);
        {
            let shared = shared.clone();
            threads.push(
                thread::Builder::new()
                    .name("orderer-log-reader".into())
                    .spawn(move || {
                        while !shared.stop.load(Ordering::Relaxed) {
                            match subscription.next_record() {
                                Ok(r) => {
                                    if records_tx.send(r).is_err() {
                                        return;
                                    }
                                }
                                Err(e) => {
                                    if !shared.stop.load(Ordering::Relaxed) {
                                        shared.fail(e.into());
                                    }
                                    return;
                                }
                            }
                        }
                    })
                    .expect("spawn log reader"),
            );
        }
        {
            let shared = shared.clone();
            threads.push(
                thread::Builder::new()
                    .name("orderer-assembler".into())
                    .spawn(move || assemble(&shared, records_rx, genesis_header, key))
                    .expect("spawn assembler"),
            );
        }
        {
            let shared = shared.clone();
            threads.push(
                thread::Builder::new()
                    .name(format!("{node_id}-accept"))
                    .spawn(move || {
                        while let Ok(ch) = listener.accept() {
                            let shared = shared.clone();
                            thread::spawn(move || serve_connection(ch, &shared));
                        }
                    })
                    .expect("spawn orderer acceptor"),
            );
        }
        Ok(Self {
            shared,
            closer,
            threads,
        })
    }

    pub fn config(&self) -> &OrdererConfig {
        &self.shared.config
    }

    /// Number of blocks in the chain, genesis included.
    pub fn height(&self) -> u64 {
        self.shared.chain.blocks.lock().len() as u64
    }

    pub fn block(&self, number: u64) -> Option<Arc<[u8]>> {
        self.shared.chain.blocks.lock().get(number as usize).cloned()
    }

    /// Waits until the chain holds block `number` or `timeout` passes.
    pub fn wait_for_block(&self, number: u64, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut blocks = self.shared.chain.blocks.lock();
        while blocks.len() as u64 <= number {
            if self.shared.stop.load(Ordering::Relaxed)
                || self.shared.chain.grew.wait_until(&mut blocks, deadline).timed_out()
            {
                return blocks.len() as u64 > number;
            }
        }
        true
    }

    /// Entries currently held in the payload table.
    pub fn stored_payloads(&self) -> usize {
        self.shared.payloads.lock().len()
    }

    pub fn fatal_error(&self) -> Option<String> {
        self.shared.fatal.lock().clone()
    }

    pub fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.chain.grew.notify_all();
        self.closer.close();
        // The log reader may be parked on a subscription that only ends when
        // the log shuts down, so it is left detached.
        let reader = self.threads.remove(0);
        drop(reader);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Orderer {
    fn drop(&mut self) {
        if !self.threads.is_empty() {
            self.shutdown();
        }
    }
}

fn assemble(
    shared: &Shared,
    records: cb::Receiver<crate::ordering_log::LogRecord>,
    genesis: BlockHeader,
    key: SigningKey,
) {
    let config = &shared.config;
    let mut prev = genesis;
    let mut batch: Vec<Vec<u8>> = Vec::with_capacity(config.max_block_txs);
    let mut batch_ids: Vec<String> = Vec::with_capacity(config.max_block_txs);
    let mut deadline: Option<Instant> = None;
    loop {
        if shared.stop.load(Ordering::Relaxed) {
            return;
        }
        let wait = deadline.map_or(Duration::from_millis(50), |d| d.saturating_duration_since(Instant::now()));
        let cut = match records.recv_timeout(wait.min(Duration::from_millis(50))) {
            Ok(record) => {
                let envelope = if config.opt_o1 {
                    let id = String::from_utf8_lossy(&record.payload).into_owned();
                    match shared.payloads.lock().remove(&id) {
                        Some(env) => {
                            batch_ids.push(id);
                            env
                        }
                        None => return shared.fail(OrdererError::UnknownTxId(id)),
                    }
                } else {
                    if let Ok(h) = peek_header(&record.payload) {
                        batch_ids.push(h.tx_id);
                    }
                    record.payload.to_vec()
                };
                if batch.is_empty() {
                    deadline = Some(Instant::now() + config.block_timeout);
                }
                batch.push(envelope);
                batch.len() >= config.max_block_txs
            }
            Err(RecvTimeoutError::Timeout) => deadline.is_some_and(|d| Instant::now() >= d),
            Err(RecvTimeoutError::Disconnected) => return,
        };
        if cut && !batch.is_empty() {
            let mut block = Block::child_of(&prev, std::mem::take(&mut batch));
            block.sign(&key);
            prev = block.header;
            {
                let mut pending = shared.pending.lock();
                for id in batch_ids.drain(..) {
                    pending.remove(&id);
                }
            }
            shared.append_block(block);
            deadline = None;
        }
    }
}

fn serve_connection(mut ch: Channel, shared: &Shared) {
    loop {
        let Ok(msg) = ch.recv() else { return };
        match msg.msg_type {
            proto::SUBMIT => {
                let reply = {
                    let _permit = shared.gate.acquire();
                    shared.handle_submit(msg.into_body())
                };
                let sent = match reply {
                    Ok(offset) => ch.send(proto::ACK, &proto::u64_body(offset)),
                    Err(code) => ch.send(proto::REJECT, &[code as u8]),
                };
                if sent.is_err() {
                    return;
                }
            }
            proto::DELIVER_FROM => {
                let Ok(from) = proto::parse_u64(msg.body()) else { return };
                stream_blocks(ch, shared, from);
                return;
            }
            other => {
                log::warn!("orderer got unexpected message {other:#06x}");
                return;
            }
        }
    }
}

fn stream_blocks(ch: Channel, shared: &Shared, mut next: u64) {
    let (mut tx, _rx) = ch.split();
    loop {
        let batch: Vec<Arc<[u8]>> = {
            let mut blocks = shared.chain.blocks.lock();
            while blocks.len() as u64 <= next {
                if shared.stop.load(Ordering::Relaxed) {
                    return;
                }
                shared.chain.grew.wait_for(&mut blocks, Duration::from_millis(100));
            }
            blocks[next as usize..].to_vec()
        };
        for b in batch {
            if tx.send(proto::DELIVER, &b).is_err() {
                return;
            }
            next += 1;
        }
    }
}

/// Client connection to an orderer.
pub struct OrdererClient {
    ch: Channel,
}

impl OrdererClient {
    pub fn connect(net: &Network, orderer: &str) -> Result<Self, TransportError> {
        Ok(Self {
            ch: net.connect(orderer)?,
        })
    }

    /// Submits one envelope; returns its log offset once ordered.
    pub fn submit(&mut self, envelope: &[u8]) -> Result<u64, SubmitError> {
        let reply = self.ch.call(proto::SUBMIT, envelope)?;
        match reply.msg_type {
            proto::ACK => proto::parse_u64(reply.body()).map_err(|_| SubmitError::Protocol(proto::ACK)),
            proto::REJECT => Err(SubmitError::Rejected(
                reply
                    .body()
                    .first()
                    .and_then(|b| RejectCode::from_u8(*b))
                    .ok_or(SubmitError::Protocol(proto::REJECT))?,
            )),
            other => Err(SubmitError::Protocol(other)),
        }
    }
}
