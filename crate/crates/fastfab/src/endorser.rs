//! Endorsing node: simulates transfers against a state replica and keeps the
//! replica current by applying validated blocks from the committer.
//!
//! A replica endorser owns a hash-table state and applies the write sets of
//! `Valid` transactions itself. A co-located endorser shares the committer's
//! store, so applying a block only advances its height and notifies watchers.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam::channel::{self as cb, Sender};
use fastfab_core::chaincode::{endorse, EndorseError, Endorsed, TransferProposal};
use fastfab_core::validate::{FreshLayers, TxLayers};
use fastfab_core::wire::peek_header;
use fastfab_core::{Block, SigningKey, ValidationFlag, Version, DEFAULT_CHANNEL};
use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::blockstore::BlockStoreClient;
use crate::committer::{BlockSink, CommittedBlock, SinkError};
use crate::proto;
use crate::statestore::{MemoryStore, StateStore, StoreError, StoreView};
use crate::transport::{Channel, ListenerCloser, Mode, Network, TransportError};

#[derive(Debug, Error)]
pub enum EndorserError {
    #[error("expected block {expected}, got {got}")]
    GapDetected { expected: u64, got: u64 },
    #[error("block {0} carries no validation flags")]
    Unvalidated(u64),
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Outcome of one transaction as reported to watchers.
pub type AppliedTx = (String, ValidationFlag);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppliedBlock {
    pub number: u64,
    pub txs: Vec<AppliedTx>,
}

pub struct Endorser {
    id: String,
    key: SigningKey,
    channel_id: String,
    state: Arc<dyn StateStore>,
    replica: bool,
    applied: Mutex<u64>,
    advanced: Condvar,
    watchers: Mutex<Vec<Sender<Arc<AppliedBlock>>>>,
}

impl std::fmt::Debug for Endorser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endorser")
            .field("id", &self.id)
            .field("replica", &self.replica)
            .field("applied", &*self.applied.lock())
            .finish()
    }
}

impl Endorser {
    /// Endorser with its own replica, seeded from `snapshot` taken at `height`.
    pub fn replica(id: impl Into<String>, key: SigningKey, snapshot: &[u8], height: u64) -> Result<Self, StoreError> {
        let state = MemoryStore::new();
        state.restore(snapshot)?;
        Ok(Self::build(id.into(), key, Arc::new(state), true, height))
    }

    /// Endorser reading the committer's store directly.
    pub fn colocated(id: impl Into<String>, key: SigningKey, state: Arc<dyn StateStore>, height: u64) -> Self {
        Self::build(id.into(), key, state, false, height)
    }

    fn build(id: String, key: SigningKey, state: Arc<dyn StateStore>, replica: bool, height: u64) -> Self {
        Self {
            id,
            key,
            channel_id: DEFAULT_CHANNEL.to_string(),
            state,
            replica,
            applied: Mutex::new(height),
            advanced: Condvar::new(),
            watchers: Mutex::new(Vec::new()),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn state(&self) -> &Arc<dyn StateStore> {
        &self.state
    }

    /// Number of the newest applied block.
    pub fn applied_height(&self) -> u64 {
        *self.applied.lock()
    }

    pub fn wait_for_height(&self, height: u64, timeout: Duration) -> bool {
        let mut applied = self.applied.lock();
        let deadline = std::time::Instant::now() + timeout;
        while *applied < height {
            if self.advanced.wait_until(&mut applied, deadline).timed_out() {
                return *applied >= height;
            }
        }
        true
    }

    /// Simulates `proposal` and signs the result. Reads only.
    pub fn endorse(
        &self,
        proposal: &TransferProposal,
        client: &str,
        nonce: u64,
    ) -> Result<Endorsed, EndorseError<StoreError>> {
        endorse(
            &StoreView(&*self.state),
            proposal,
            &self.channel_id,
            client,
            nonce,
            &self.id,
            &self.key,
        )
    }

    /// Applies the writes of every `Valid` transaction of a flagged block.
    /// Re-applying an old block is a no-op.
    pub fn apply_validated(&self, block: &Block) -> Result<bool, EndorserError> {
        let mut applied = self.applied.lock();
        let number = block.number();
        if number <= *applied {
            return Ok(false);
        }
        if number != *applied + 1 {
            return Err(EndorserError::GapDetected {
                expected: *applied + 1,
                got: number,
            });
        }
        if block.flags.len() != block.envelopes.len() {
            return Err(EndorserError::Unvalidated(number));
        }
        let mut txs = Vec::with_capacity(block.len());
        for (i, (env, flag)) in block.envelopes.iter().zip(&block.flags).enumerate() {
            if self.replica && flag.is_valid() {
                // Valid means the committer decoded this rwset already.
                let rwset = FreshLayers::new(env)
                    .rwset()
                    .expect("valid transaction has a decodable rwset");
                self.state.apply_writes(&rwset.writes, Version::new(number, i as u32))?;
            }
            txs.push((peek_header(env).map(|h| h.tx_id).unwrap_or_default(), *flag));
        }
        *applied = number;
        drop(applied);
        self.advanced.notify_all();
        let event = Arc::new(AppliedBlock { number, txs });
        self.watchers.lock().retain(|w| w.send(event.clone()).is_ok());
        Ok(true)
    }

    /// Applied-block events from now on.
    pub fn watch(&self) -> cb::Receiver<Arc<AppliedBlock>> {
        let (tx, rx) = cb::unbounded();
        self.watchers.lock().push(tx);
        rx
    }
}

/// Applies committed blocks to an in-process endorser.
pub struct LocalEndorserSink(pub Arc<Endorser>);

impl BlockSink for LocalEndorserSink {
    fn name(&self) -> &str {
        self.0.id()
    }

    fn deliver(&mut self, block: &CommittedBlock) -> Result<(), SinkError> {
        self.0
            .apply_validated(&block.to_block())
            .map(|_| ())
            .map_err(|e| SinkError::Rejected(e.to_string()))
    }
}

const ERR_INSUFFICIENT: u8 = 1;
const ERR_UNKNOWN_ACCOUNT: u8 = 2;
const ERR_BAD_PROPOSAL: u8 = 3;
const ERR_STORAGE: u8 = 4;

/// Network front end of an [`Endorser`].
pub struct EndorserServer {
    closer: ListenerCloser,
    endorser: Arc<Endorser>,
}

impl EndorserServer {
    /// `store_node`, if given, is asked for blocks missing from the
    /// validated stream.
    pub fn start(
        net: &Network,
        mode: Mode,
        endorser: Arc<Endorser>,
        store_node: Option<String>,
    ) -> Result<Self, EndorserError> {
        let listener = net.listen(endorser.id(), mode)?;
        let closer = listener.closer(net);
        let (blocks_tx, blocks_rx) = cb::unbounded::<Block>();
        {
            let endorser = endorser.clone();
            let net = net.clone();
            thread::Builder::new()
                .name(format!("{}-apply", endorser.id()))
                .spawn(move || apply_worker(&endorser, blocks_rx, &net, store_node.as_deref()))
                .expect("spawn apply worker");
        }
        {
            let endorser = endorser.clone();
            thread::Builder::new()
                .name(format!("{}-accept", endorser.id()))
                .spawn(move || {
                    while let Ok(ch) = listener.accept() {
                        let endorser = endorser.clone();
                        let blocks = blocks_tx.clone();
                        thread::spawn(move || serve_connection(ch, &endorser, &blocks));
                    }
                })
                .expect("spawn endorser acceptor");
        }
        Ok(Self { closer, endorser })
    }

    pub fn endorser(&self) -> &Arc<Endorser> {
        &self.endorser
    }

    pub fn shutdown(&self) {
        self.closer.close();
    }
}

impl Drop for EndorserServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn apply_worker(endorser: &Endorser, blocks: cb::Receiver<Block>, net: &Network, store_node: Option<&str>) {
    let mut early: BTreeMap<u64, Block> = BTreeMap::new();
    for block in blocks.iter() {
        match endorser.apply_validated(&block) {
            Ok(_) => {}
            Err(EndorserError::GapDetected { expected, got }) => {
                log::warn!("{}: expected block {expected}, got {got}", endorser.id());
                early.insert(got, block);
                if let Some(store) = store_node {
                    fill_from_store(endorser, net, store, got);
                }
            }
            Err(e) => {
                log::error!("{}: cannot apply block {}: {e}", endorser.id(), block.number());
                return;
            }
        }
        while let Some(next) = early.remove(&(endorser.applied_height() + 1)) {
            if let Err(e) = endorser.apply_validated(&next) {
                log::error!("{}: cannot apply block {}: {e}", endorser.id(), next.number());
                return;
            }
        }
        early.retain(|n, _| *n > endorser.applied_height());
    }
}

fn fill_from_store(endorser: &Endorser, net: &Network, store: &str, up_to: u64) {
    let Ok(mut client) = BlockStoreClient::connect(net, store) else {
        return;
    };
    while endorser.applied_height() + 1 < up_to {
        let n = endorser.applied_height() + 1;
        let Ok(bytes) = client.get_block(n) else { return };
        match Block::decode(&bytes) {
            Ok(b) if endorser.apply_validated(&b).is_ok() => {}
            _ => return,
        }
    }
}

fn serve_connection(mut ch: Channel, endorser: &Endorser, blocks: &Sender<Block>) {
    loop {
        let Ok(msg) = ch.recv() else { return };
        let sent = match msg.msg_type {
            proto::ENDORSE => match proto::decode_endorse(msg.body()) {
                Ok((proposal, client, nonce)) => match endorser.endorse(&proposal, &client, nonce) {
                    Ok(e) => ch.send(proto::ENDORSED, &proto::encode_endorsed(&e)),
                    Err(e) => {
                        let code = match e {
                            EndorseError::InsufficientFunds { .. } => ERR_INSUFFICIENT,
                            EndorseError::UnknownAccount(_) => ERR_UNKNOWN_ACCOUNT,
                            EndorseError::BadProposal(_) => ERR_BAD_PROPOSAL,
                            EndorseError::Storage(_) => ERR_STORAGE,
                        };
                        ch.send(proto::ENDORSE_ERROR, &proto::encode_endorse_error(code, &e.to_string()))
                    }
                },
                Err(_) => ch.send(
                    proto::ENDORSE_ERROR,
                    &proto::encode_endorse_error(ERR_BAD_PROPOSAL, "undecodable proposal"),
                ),
            },
            proto::VALIDATED => {
                match Block::decode(msg.body()) {
                    Ok(b) => {
                        let _ = blocks.send(b);
                    }
                    Err(e) => log::warn!("{}: undecodable validated block: {e}", endorser.id()),
                }
                Ok(())
            }
            proto::WATCH_APPLIED => {
                let events = endorser.watch();
                let (mut tx, _rx) = ch.split();
                for ev in events.iter() {
                    if tx.send(proto::APPLIED, &proto::encode_applied(ev.number, &ev.txs)).is_err() {
                        return;
                    }
                }
                return;
            }
            other => {
                log::warn!("{}: unexpected message {other:#06x}", endorser.id());
                return;
            }
        };
        if sent.is_err() {
            return;
        }
    }
}

#[derive(Debug, Error)]
pub enum EndorseRequestError {
    #[error("endorsement refused ({code}): {message}")]
    Refused { code: u8, message: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("unexpected reply {0:#06x}")]
    Protocol(u16),
}

impl EndorseRequestError {
    pub fn is_insufficient_funds(&self) -> bool {
        matches!(self, Self::Refused { code: ERR_INSUFFICIENT, .. })
    }
}

/// Client connection to an endorser.
pub struct EndorserClient {
    ch: Channel,
}

impl EndorserClient {
    pub fn connect(net: &Network, endorser: &str) -> Result<Self, TransportError> {
        Ok(Self {
            ch: net.connect(endorser)?,
        })
    }

    pub fn endorse(&mut self, proposal: &TransferProposal, client: &str, nonce: u64) -> Result<Endorsed, EndorseRequestError> {
        let reply = self.ch.call(proto::ENDORSE, &proto::encode_endorse(proposal, client, nonce))?;
        match reply.msg_type {
            proto::ENDORSED => proto::decode_endorsed(reply.body()).map_err(|_| EndorseRequestError::Protocol(proto::ENDORSED)),
            proto::ENDORSE_ERROR => {
                let (code, message) = proto::decode_endorse_error(reply.body())
                    .map_err(|_| EndorseRequestError::Protocol(proto::ENDORSE_ERROR))?;
                Err(EndorseRequestError::Refused { code, message })
            }
            other => Err(EndorseRequestError::Protocol(other)),
        }
    }

    /// Turns this connection into a stream of applied-block events.
    pub fn watch(mut self) -> Result<AppliedStream, TransportError> {
        self.ch.send(proto::WATCH_APPLIED, &[])?;
        Ok(AppliedStream { ch: self.ch })
    }
}

pub struct AppliedStream {
    ch: Channel,
}

impl AppliedStream {
    pub fn next_event(&mut self, timeout: Duration) -> Result<Option<AppliedBlock>, TransportError> {
        let Some(msg) = self.ch.recv_timeout(timeout)? else {
            return Ok(None);
        };
        if msg.msg_type != proto::APPLIED {
            return Err(TransportError::ChannelClosed);
        }
        let (number, txs) = proto::decode_applied(msg.body()).map_err(|_| TransportError::ChannelClosed)?;
        Ok(Some(AppliedBlock { number, txs }))
    }
}
