//! Block store recovery, lookups and the network service.

mod common;

use std::sync::Arc;

use fastfab::bench::experiment::scan_chain;
use fastfab::bench::workload::{prebuild_chain, Participants};
use fastfab::blockstore::{BlockStore, BlockStoreClient, BlockStoreError, BlockStoreServer, CrashPoint};
use fastfab::transport::{Mode, Network};
use fastfab_core::wire::peek_header;
use fastfab_core::{Block, ValidationFlag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Genesis plus `blocks` validated blocks of 5 transfers each.
fn validated_chain(blocks: u64) -> (Vec<Vec<u8>>, Participants) {
    let parts = common::mac_parts(2, 2);
    let w = common::workload(&parts, blocks * 5, 5, 1);
    let chain = prebuild_chain(&parts, &w);
    let mut out = vec![chain.genesis.encode()];
    for raw in &chain.blocks {
        let mut b = Block::decode(raw).unwrap();
        b.flags = vec![ValidationFlag::Valid; b.len()];
        out.push(b.encode());
    }
    (out, parts)
}

#[test]
fn every_crash_point_recovers_to_a_prefix() {
    let (chain, _) = validated_chain(12);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let points = |len: usize, rng: &mut ChaCha8Rng| {
        [
            CrashPoint::TornSegment(rng.gen_range(0..len + 4)),
            CrashPoint::AfterSegment,
            CrashPoint::TornIndex(rng.gen_range(0..12)),
            CrashPoint::AfterIndex,
        ]
    };
    for trial in 0..20 {
        let k = rng.gen_range(1..chain.len());
        for crash in points(chain[k].len(), &mut rng) {
            let dir = tempfile::tempdir().unwrap();
            {
                let store = BlockStore::open(dir.path()).unwrap();
                for b in &chain[..k] {
                    store.append(b).unwrap();
                }
                store.append_until(&chain[k], crash).unwrap();
            }
            let store = BlockStore::open(dir.path()).unwrap();
            let kept = if crash == CrashPoint::AfterIndex { k + 1 } else { k };
            assert_eq!(store.height(), kept as u64, "trial {trial} crash {crash:?} at {k}");
            for (i, b) in chain[..kept].iter().enumerate() {
                assert_eq!(&store.get_block(i as u64).unwrap(), b);
            }
            let last = Block::decode(&chain[kept - 1]).unwrap();
            if let Some(env) = last.envelopes.first() {
                let id = peek_header(env).unwrap().tx_id;
                assert_eq!(store.get_tx(&id).unwrap(), (kept as u64 - 1, 0));
            }
            // The store keeps accepting blocks where it left off.
            for b in &chain[kept..] {
                store.append(b).unwrap();
            }
            assert_eq!(store.height(), chain.len() as u64);
        }
    }
}

#[test]
fn blocks_read_back_byte_for_byte_after_reopen() {
    let (chain, _) = validated_chain(30);
    let dir = tempfile::tempdir().unwrap();
    {
        let store = BlockStore::open(dir.path()).unwrap();
        for b in &chain {
            store.append(b).unwrap();
        }
    }
    let store = BlockStore::open(dir.path()).unwrap();
    for (i, b) in chain.iter().enumerate() {
        assert_eq!(&store.get_block(i as u64).unwrap(), b);
    }
    assert!(matches!(store.get_block(chain.len() as u64), Err(BlockStoreError::NotFound)));
}

#[test]
fn tx_lookup_finds_every_transaction() {
    let (chain, _) = validated_chain(8);
    let dir = tempfile::tempdir().unwrap();
    let store = BlockStore::open(dir.path()).unwrap();
    for b in &chain {
        store.append(b).unwrap();
    }
    for (n, raw) in chain.iter().enumerate() {
        for (i, env) in Block::decode(raw).unwrap().envelopes.iter().enumerate() {
            let id = peek_header(env).unwrap().tx_id;
            assert_eq!(store.get_tx(&id).unwrap(), (n as u64, i as u32));
        }
    }
    assert!(matches!(store.get_tx(&"0".repeat(64)), Err(BlockStoreError::NotFound)));
}

#[test]
fn scan_chain_flags_a_single_corrupted_byte() {
    let (chain, parts) = validated_chain(6);
    let key = parts.key(&parts.orderer).public();
    let dir = tempfile::tempdir().unwrap();
    let store = BlockStore::open(dir.path()).unwrap();
    for b in &chain {
        store.append(b).unwrap();
    }
    let clean = scan_chain(&store, &key);
    assert_eq!(clean.height, 7);
    assert!(clean.problems.is_empty(), "{:?}", clean.problems);

    // Flip one byte inside an envelope of block 3 on disk.
    let dir2 = tempfile::tempdir().unwrap();
    let store2 = BlockStore::open(dir2.path()).unwrap();
    for (i, b) in chain.iter().enumerate() {
        let mut b = b.clone();
        if i == 3 {
            let pos = b.len() / 2;
            b[pos] ^= 0x40;
        }
        store2.append(&b).unwrap();
    }
    let report = scan_chain(&store2, &key);
    assert_eq!(report.problems, vec!["block 3 data hash mismatch".to_string()]);
}

#[test]
fn network_round_trip_both_modes() {
    let (chain, _) = validated_chain(4);
    for mode in [Mode::InProc, Mode::Tcp] {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::new();
        let store = Arc::new(BlockStore::open(dir.path()).unwrap());
        let _server = BlockStoreServer::start(&net, "store0", mode, store.clone()).unwrap();
        let mut client = BlockStoreClient::connect(&net, "store0").unwrap();
        for b in &chain {
            client.send_validated(b).unwrap();
        }
        for (i, b) in chain.iter().enumerate() {
            assert_eq!(&client.get_block(i as u64).unwrap(), b, "{mode}");
        }
        assert!(matches!(client.get_block(99), Err(BlockStoreError::NotFound)));
        let env = &Block::decode(&chain[2]).unwrap().envelopes[1];
        let id = peek_header(env).unwrap().tx_id;
        assert_eq!(client.get_tx(&id).unwrap(), (2, 1));
        assert!(matches!(client.get_tx("missing"), Err(BlockStoreError::NotFound)));
        client.put_snapshot(4, b"state").unwrap();
        assert_eq!(store.latest_snapshot().unwrap(), Some((4, b"state".to_vec())));
    }
}
