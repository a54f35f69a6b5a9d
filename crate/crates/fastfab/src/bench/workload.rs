//! Participants, genesis state and seeded transfer workloads.

use std::sync::Arc;

use fastfab_core::chaincode::{account_key, decode_balance, encode_balance, simulate_transfer, TransferProposal};
use fastfab_core::validate::TxValidator;
use fastfab_core::wire::{encode_envelope, endorse_rwset};
use fastfab_core::{
    Block, EndorsementPolicy, Registry, Role, SignatureScheme, SigningKey, TxHeader, Version, VersionedMap,
    DEFAULT_CHANNEL,
};
use rand::{Rng, SeedableRng};

use super::topology::{NodeRole, Topology};
use rand_chacha::ChaCha8Rng;

pub const ORDERER: &str = "orderer0";
pub const COMMITTER: &str = "peer0";
pub const STORE: &str = "store0";
pub const LOG: &str = "log0";

/// Node ids and keys of one run. Keys derive from the run seed.
#[derive(Debug, Clone)]
pub struct Participants {
    pub scheme: SignatureScheme,
    pub seed: u64,
    pub clients: Vec<String>,
    pub endorsers: Vec<String>,
    pub orderer: String,
    pub committer: String,
    pub store: String,
    pub log: String,
}

impl Participants {
    pub fn new(scheme: SignatureScheme, seed: u64, clients: usize, endorsers: usize) -> Self {
        Self {
            scheme,
            seed,
            clients: (0..clients.max(1)).map(|i| format!("client{i}")).collect(),
            endorsers: (0..endorsers.max(1)).map(|i| format!("endorser{i}")).collect(),
            orderer: ORDERER.to_string(),
            committer: COMMITTER.to_string(),
            store: STORE.to_string(),
            log: LOG.to_string(),
        }
    }

    /// Node ids taken from `topology`; roles it leaves out keep their
    /// default ids.
    pub fn from_topology(scheme: SignatureScheme, seed: u64, topology: &Topology) -> Self {
        let mut p = Self::new(scheme, seed, 1, 1);
        let first = |role| topology.with_role(role).next().map(|n| n.id.clone());
        let clients: Vec<String> = topology.with_role(NodeRole::Client).map(|n| n.id.clone()).collect();
        let endorsers: Vec<String> = topology.with_role(NodeRole::Endorser).map(|n| n.id.clone()).collect();
        if !clients.is_empty() {
            p.clients = clients;
        }
        if !endorsers.is_empty() {
            p.endorsers = endorsers;
        }
        if let Some(id) = first(NodeRole::Orderer) {
            p.orderer = id;
        }
        if let Some(id) = first(NodeRole::Committer) {
            p.committer = id;
        }
        if let Some(id) = first(NodeRole::Store) {
            p.store = id;
        }
        if let Some(id) = first(NodeRole::Log) {
            p.log = id;
        }
        p
    }

    pub fn key(&self, node_id: &str) -> SigningKey {
        SigningKey::derive(self.scheme, self.seed, node_id)
    }

    pub fn registry(&self) -> Registry {
        let mut r = Registry::new(self.scheme);
        let mut add = |id: &str, role| {
            r.register(id, role, self.key(id).public())
                .expect("participant ids are unique");
        };
        for c in &self.clients {
            add(c, Role::Client);
        }
        for e in &self.endorsers {
            add(e, Role::Endorser);
        }
        add(&self.orderer, Role::Orderer);
        add(&self.committer, Role::Committer);
        add(&self.store, Role::BlockStore);
        r
    }

    /// One signature from any endorser.
    pub fn policy(&self) -> EndorsementPolicy {
        EndorsementPolicy::new(1, self.endorsers.iter().cloned()).expect("at least one endorser")
    }

    pub fn validator(&self) -> TxValidator {
        let mut v = TxValidator::new(Arc::new(self.registry()), Arc::new(self.policy()));
        v.channel_id = Some(DEFAULT_CHANNEL.to_string());
        v
    }

    /// Block 0, signed by the orderer.
    pub fn genesis_block(&self) -> Block {
        let mut g = Block::genesis();
        g.sign(&self.key(&self.orderer));
        g
    }
}

/// Accounts present before block 1, all at version `(0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Genesis {
    pub accounts: u32,
    pub balance: u64,
}

impl Default for Genesis {
    fn default() -> Self {
        Self {
            accounts: 10_000,
            balance: 1_000_000,
        }
    }
}

impl Genesis {
    pub fn state(&self) -> VersionedMap {
        let mut m = VersionedMap::with_capacity(self.accounts as usize);
        for i in 0..self.accounts {
            m.put(account_key(i), encode_balance(self.balance), Version::GENESIS);
        }
        m
    }

    pub fn total(&self) -> u128 {
        self.accounts as u128 * self.balance as u128
    }
}

/// Sum of every decodable balance in `state`.
pub fn total_balance(state: &VersionedMap) -> u128 {
    state
        .iter()
        .filter_map(|(_, e)| decode_balance(&e.value))
        .map(u128::from)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub txs: u64,
    pub block_size: usize,
    /// Zero padding per transaction, in bytes.
    pub payload: u32,
    pub seed: u64,
    /// Share of transactions endorsed against a version that can never match.
    pub conflict_rate: f64,
    /// Share of transactions whose signature bytes get flipped.
    pub corrupt_rate: f64,
}

impl WorkloadSpec {
    pub fn valid(txs: u64, block_size: usize, payload: u32, seed: u64) -> Self {
        Self {
            txs,
            block_size,
            payload,
            seed,
            conflict_rate: 0.0,
            corrupt_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    Valid,
    Conflict,
    Corrupt,
}

#[derive(Debug, Clone)]
pub struct GeneratedTx {
    pub envelope: Vec<u8>,
    pub expect: Expect,
}

/// A workload executed sequentially ahead of time.
#[derive(Debug, Clone)]
pub struct Workload {
    pub spec: WorkloadSpec,
    pub txs: Vec<GeneratedTx>,
    /// State after committing every `Valid` transaction, assuming blocks of
    /// exactly `spec.block_size` in submission order.
    pub expected_state: VersionedMap,
}

/// Generates `spec.txs` transfers over `genesis` accounts.
///
/// Each transfer is endorsed against the state left by all earlier valid
/// transfers, with versions `(block, index)` as a committer cutting blocks of
/// `spec.block_size` would assign them. Without injected conflicts or
/// corruption every transaction therefore commits as `Valid`.
pub fn generate(parts: &Participants, genesis: &Genesis, spec: &WorkloadSpec) -> Workload {
    assert!(spec.block_size >= 1);
    assert!(genesis.accounts >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut state = genesis.state();
    let client_keys: Vec<SigningKey> = parts.clients.iter().map(|c| parts.key(c)).collect();
    let endorser_keys: Vec<SigningKey> = parts.endorsers.iter().map(|e| parts.key(e)).collect();
    let mut txs = Vec::with_capacity(spec.txs as usize);
    for n in 0..spec.txs {
        let block = n / spec.block_size as u64 + 1;
        let index = (n % spec.block_size as u64) as u32;
        let from = rng.gen_range(0..genesis.accounts);
        let mut to = rng.gen_range(0..genesis.accounts - 1);
        if to >= from {
            to += 1;
        }
        let proposal = TransferProposal {
            from_account: account_key(from),
            to_account: account_key(to),
            amount: rng.gen_range(1..=100),
            padding_len: spec.payload,
        };
        let c = rng.gen_range(0..client_keys.len());
        let e = rng.gen_range(0..endorser_keys.len());
        let conflict = rng.gen_bool(spec.conflict_rate);
        let corrupt = !conflict && rng.gen_bool(spec.corrupt_rate);

        let mut rwset = simulate_transfer(&state, &proposal).expect("workload amounts stay far below balances");
        if conflict {
            rwset.reads[0].1 = Version::new(u64::MAX, u32::MAX);
        }
        let header = TxHeader::new(DEFAULT_CHANNEL, parts.clients[c].clone(), n);
        let endorsement = endorse_rwset(parts.endorsers[e].clone(), &endorser_keys[e], &rwset, spec.payload as usize);
        let mut envelope = encode_envelope(&header, &rwset, &[endorsement], spec.payload as usize, &client_keys[c]);
        let expect = if conflict {
            Expect::Conflict
        } else if corrupt {
            // Envelope = u32 sig_len ‖ sig ‖ ...; flip a signature byte.
            let sig_len = u32::from_le_bytes(envelope[..4].try_into().unwrap()) as usize;
            let pos = 4 + rng.gen_range(0..sig_len);
            envelope[pos] ^= 1 << rng.gen_range(0..8);
            Expect::Corrupt
        } else {
            for (k, v) in &rwset.writes {
                state.put(k.clone(), v.clone(), Version::new(block, index));
            }
            Expect::Valid
        };
        txs.push(GeneratedTx { envelope, expect });
    }
    Workload {
        spec: spec.clone(),
        txs,
        expected_state: state,
    }
}

/// Orderer-signed blocks 1..=n holding the workload in order.
#[derive(Debug, Clone)]
pub struct PrebuiltChain {
    pub genesis: Block,
    pub blocks: Vec<Vec<u8>>,
    pub tx_count: u64,
}

pub fn prebuild_chain(parts: &Participants, workload: &Workload) -> PrebuiltChain {
    chain_of(parts, workload.txs.iter().map(|t| t.envelope.clone()), workload.spec.block_size)
}

impl Workload {
    /// Moves the envelopes into blocks; returns the chain and the expected
    /// final state.
    pub fn into_chain(self, parts: &Participants) -> (PrebuiltChain, VersionedMap) {
        let chain = chain_of(parts, self.txs.into_iter().map(|t| t.envelope), self.spec.block_size);
        (chain, self.expected_state)
    }
}

fn chain_of(parts: &Participants, envelopes: impl Iterator<Item = Vec<u8>>, block_size: usize) -> PrebuiltChain {
    let key = parts.key(&parts.orderer);
    let genesis = parts.genesis_block();
    let mut prev = genesis.header;
    let mut blocks = Vec::new();
    let mut tx_count = 0;
    let mut envelopes = envelopes.peekable();
    while envelopes.peek().is_some() {
        let chunk: Vec<Vec<u8>> = envelopes.by_ref().take(block_size).collect();
        tx_count += chunk.len() as u64;
        let mut b = Block::child_of(&prev, chunk);
        b.sign(&key);
        prev = b.header;
        blocks.push(b.encode());
    }
    PrebuiltChain {
        genesis,
        blocks,
        tx_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fastfab_core::validate::FreshLayers;

    #[test]
    fn generated_transactions_validate() {
        let parts = Participants::new(SignatureScheme::Mac, 1, 2, 2);
        let genesis = Genesis {
            accounts: 50,
            balance: 100_000,
        };
        let spec = WorkloadSpec {
            conflict_rate: 0.1,
            corrupt_rate: 0.1,
            ..WorkloadSpec::valid(200, 10, 16, 3)
        };
        let w = generate(&parts, &genesis, &spec);
        let v = parts.validator();
        for tx in &w.txs {
            let flag = v.validate(&FreshLayers::new(&tx.envelope));
            assert_eq!(flag.is_valid(), tx.expect != Expect::Corrupt, "{:?}", tx.expect);
        }
        assert_eq!(total_balance(&w.expected_state), genesis.total());
    }

    #[test]
    fn same_seed_same_workload() {
        let parts = Participants::new(SignatureScheme::Ed25519, 1, 1, 1);
        let g = Genesis {
            accounts: 10,
            balance: 100_000,
        };
        let a = generate(&parts, &g, &WorkloadSpec::valid(20, 5, 0, 9));
        let b = generate(&parts, &g, &WorkloadSpec::valid(20, 5, 0, 9));
        assert!(a.txs.iter().zip(&b.txs).all(|(x, y)| x.envelope == y.envelope));
        let chain = prebuild_chain(&parts, &a);
        assert_eq!(chain.blocks.len(), 4);
    }
}
