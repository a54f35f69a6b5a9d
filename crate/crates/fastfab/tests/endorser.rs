//! Endorsement, replica maintenance and the endorser service.

mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{mac_parts, small_genesis, WAIT};
use fastfab::bench::workload::{prebuild_chain, Participants};
use fastfab::blockstore::{BlockStore, BlockStoreServer};
use fastfab::committer::{Committer, CommitterContext, PipelineConfig};
use fastfab::endorser::{EndorseRequestError, Endorser, EndorserClient, EndorserError, EndorserServer};
use fastfab::proto;
use fastfab::statestore::{MemoryStore, StateStore};
use fastfab::transport::{Mode, Network};
use fastfab_core::chaincode::{decode_balance, encode_balance, EndorseError, TransferProposal};
use fastfab_core::wire::encode_envelope;
use fastfab_core::{Block, ValidationFlag, Version, VersionedMap};

fn ab_state() -> VersionedMap {
    let mut s = VersionedMap::new();
    s.put("A", encode_balance(100), Version::new(1, 0));
    s.put("B", encode_balance(0), Version::new(1, 1));
    s.put("C", encode_balance(0), Version::new(1, 2));
    s
}

fn transfer(from: &str, to: &str, amount: u64) -> TransferProposal {
    TransferProposal {
        from_account: from.into(),
        to_account: to.into(),
        amount,
        padding_len: 0,
    }
}

/// Endorser whose replica already reflects block 1.
fn endorser(parts: &Participants, state: &VersionedMap) -> Endorser {
    Endorser::replica("endorser0", parts.key("endorser0"), &state.snapshot(), 1).unwrap()
}

/// Empty block 1; the example state stands for the state after it.
fn block_one(parts: &Participants) -> Block {
    let mut b = Block::child_of(&parts.genesis_block().header, Vec::new());
    b.sign(&parts.key(&parts.orderer));
    b
}

fn balance(s: &dyn StateStore, key: &str) -> u64 {
    decode_balance(&s.get(key).unwrap().unwrap().value).unwrap()
}

#[test]
fn transfer_of_ten_reads_versions_and_writes_balances() {
    let parts = mac_parts(1, 1);
    let e = endorser(&parts, &ab_state());
    let out = e.endorse(&transfer("A", "B", 10), "client0", 1).unwrap();
    assert_eq!(out.rwset.reads, vec![("A".to_string(), Version::new(1, 0)), ("B".to_string(), Version::new(1, 1))]);
    assert_eq!(out.rwset.writes, vec![("A".to_string(), encode_balance(90)), ("B".to_string(), encode_balance(10))]);
    assert_eq!(out.endorsement.endorser, "endorser0");
    // Endorsement only reads.
    assert_eq!(balance(&**e.state(), "A"), 100);
    assert_eq!(e.endorse(&transfer("A", "B", 10), "client0", 1).unwrap(), out);
}

#[test]
fn overdraft_is_refused() {
    let parts = mac_parts(1, 1);
    let e = endorser(&parts, &ab_state());
    assert!(matches!(
        e.endorse(&transfer("A", "B", 101), "client0", 1),
        Err(EndorseError::InsufficientFunds { balance: 100, amount: 101, .. })
    ));
    assert!(matches!(e.endorse(&transfer("A", "Z", 1), "client0", 1), Err(EndorseError::UnknownAccount(_))));
}

/// Block 2: two transfers out of A endorsed against the same version.
fn double_spend_block(parts: &Participants, e: &Endorser) -> Block {
    let client = parts.key("client0");
    let envs = [("B", 1), ("C", 2)]
        .iter()
        .map(|(to, nonce)| {
            let out = e.endorse(&transfer("A", to, 60), "client0", *nonce).unwrap();
            encode_envelope(&out.header, &out.rwset, &[out.endorsement], 0, &client)
        })
        .collect();
    let mut b = Block::child_of(&block_one(parts).header, envs);
    b.sign(&parts.key(&parts.orderer));
    b
}

#[test]
fn second_spend_of_the_same_version_conflicts() {
    let parts = mac_parts(1, 1);
    let e = endorser(&parts, &ab_state());
    let block = double_spend_block(&parts, &e);
    let state = Arc::new(MemoryStore::from_map(ab_state()));
    let ctx = CommitterContext {
        validator: parts.validator(),
        orderer_key: parts.key(&parts.orderer).public(),
        state: state.clone(),
        sinks: Vec::new(),
    };
    let mut c = Committer::start(PipelineConfig::baseline(), ctx, block_one(&parts).header);
    let results = c.results().clone();
    c.deliver(block.encode()).unwrap();
    c.finish().unwrap();
    assert_eq!(results.recv().unwrap().flags, vec![ValidationFlag::Valid, ValidationFlag::MvccConflict]);
    assert_eq!(balance(&*state, "A"), 40);
    assert_eq!(balance(&*state, "B"), 60);
    assert_eq!(balance(&*state, "C"), 0);
    assert_eq!(state.get("A").unwrap().unwrap().version, Version::new(2, 0));
    assert_eq!(state.get("C").unwrap().unwrap().version, Version::new(1, 2));

    // The replica applies the same outcome from the flags.
    let mut flagged = block;
    flagged.flags = vec![ValidationFlag::Valid, ValidationFlag::MvccConflict];
    assert!(e.apply_validated(&flagged).unwrap());
    assert_eq!(e.state().to_map().unwrap(), state.to_map().unwrap());
}

#[test]
fn gaps_are_refused_and_reapplication_is_a_no_op() {
    let parts = mac_parts(1, 1);
    let w = common::workload(&parts, 30, 10, 31);
    let chain = prebuild_chain(&parts, &w);
    let flagged: Vec<Block> = chain
        .blocks
        .iter()
        .map(|raw| {
            let mut b = Block::decode(raw).unwrap();
            b.flags = vec![ValidationFlag::Valid; b.len()];
            b
        })
        .collect();
    let genesis = small_genesis().state();
    let e = Endorser::replica("endorser0", parts.key("endorser0"), &genesis.snapshot(), 0).unwrap();
    assert!(matches!(e.apply_validated(&flagged[1]), Err(EndorserError::GapDetected { expected: 1, got: 2 })));
    assert_eq!(e.state().to_map().unwrap(), genesis);
    let unflagged = Block::decode(&chain.blocks[0]).unwrap();
    assert!(matches!(e.apply_validated(&unflagged), Err(EndorserError::Unvalidated(1))));

    for b in &flagged {
        assert!(e.apply_validated(b).unwrap());
    }
    let after = e.state().to_map().unwrap();
    assert_eq!(after, w.expected_state);
    assert!(!e.apply_validated(&flagged[0]).unwrap());
    assert_eq!(e.state().to_map().unwrap(), after);
    assert_eq!(e.applied_height(), 3);
}

#[test]
fn service_endorses_refuses_and_reports_applied_blocks() {
    let parts = mac_parts(1, 1);
    for mode in [Mode::InProc, Mode::Tcp] {
        let net = Network::new();
        let e = Arc::new(endorser(&parts, &ab_state()));
        let _server = EndorserServer::start(&net, mode, e.clone(), None).unwrap();
        let mut client = EndorserClient::connect(&net, "endorser0").unwrap();
        let local = e.endorse(&transfer("A", "B", 10), "client0", 9).unwrap();
        assert_eq!(client.endorse(&transfer("A", "B", 10), "client0", 9).unwrap(), local);
        let refused = client.endorse(&transfer("A", "B", 1_000), "client0", 9).unwrap_err();
        assert!(refused.is_insufficient_funds(), "{refused}");
        assert!(matches!(
            client.endorse(&transfer("A", "A", 1), "client0", 9),
            Err(EndorseRequestError::Refused { .. })
        ));

        let mut events = EndorserClient::connect(&net, "endorser0").unwrap().watch().unwrap();
        // Give the watch registration time to land before the block does.
        std::thread::sleep(Duration::from_millis(50));
        let mut block = double_spend_block(&parts, &e);
        block.flags = vec![ValidationFlag::Valid, ValidationFlag::MvccConflict];
        net.connect("endorser0").unwrap().send(proto::VALIDATED, &block.encode()).unwrap();
        let ev = events.next_event(WAIT).unwrap().expect("applied event");
        assert_eq!(ev.number, 2);
        assert_eq!(ev.txs.iter().map(|t| t.1).collect::<Vec<_>>(), block.flags);
        assert_eq!(balance(&**e.state(), "A"), 40);
    }
}

#[test]
fn missing_blocks_are_fetched_from_the_store() {
    let parts = mac_parts(1, 1);
    let w = common::workload(&parts, 50, 10, 32);
    let chain = prebuild_chain(&parts, &w);
    let net = Network::new();
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(BlockStore::open(dir.path()).unwrap());
    store.append(&chain.genesis.encode()).unwrap();
    let mut flagged = Vec::new();
    for raw in &chain.blocks {
        let mut b = Block::decode(raw).unwrap();
        b.flags = vec![ValidationFlag::Valid; b.len()];
        store.append(&b.encode()).unwrap();
        flagged.push(b.encode());
    }
    let _store_server = BlockStoreServer::start(&net, &parts.store, Mode::InProc, store).unwrap();
    let e = Arc::new(Endorser::replica("endorser0", parts.key("endorser0"), &small_genesis().state().snapshot(), 0).unwrap());
    let _server = EndorserServer::start(&net, Mode::InProc, e.clone(), Some(parts.store.clone())).unwrap();
    // Only the last block arrives on the validated stream.
    net.connect("endorser0").unwrap().send(proto::VALIDATED, flagged.last().unwrap()).unwrap();
    assert!(e.wait_for_height(5, WAIT));
    assert_eq!(e.state().to_map().unwrap(), w.expected_state);
}
