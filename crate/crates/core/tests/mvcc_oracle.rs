//! `mvcc_commit` against a naive executor that keeps its own map of
//! `key -> (balance, version)` and replays transactions one at a time.

use std::collections::BTreeMap;

use fastfab_core::chaincode::{account_key, decode_balance, encode_balance};
use fastfab_core::mvcc::mvcc_commit;
use fastfab_core::{ReadWriteSet, ValidationFlag, Version, VersionedMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Default)]
struct Naive {
    accounts: BTreeMap<String, (u64, (u64, u32))>,
}

impl Naive {
    fn run_block(&mut self, block: u64, txs: &[(ReadWriteSet, bool)]) -> Vec<ValidationFlag> {
        let mut flags = vec![];
        for (i, (rw, pre_ok)) in txs.iter().enumerate() {
            if !pre_ok {
                flags.push(ValidationFlag::BadEndorsement);
                continue;
            }
            let fresh = rw.reads.iter().all(|(k, v)| {
                let seen = self.accounts.get(k).map(|a| a.1).unwrap_or((0, 0));
                seen == (v.block_num, v.tx_num)
            });
            if fresh {
                for (k, val) in &rw.writes {
                    let bal = u64::from_le_bytes(val[..].try_into().unwrap());
                    self.accounts.insert(k.clone(), (bal, (block, i as u32)));
                }
                flags.push(ValidationFlag::Valid);
            } else {
                flags.push(ValidationFlag::MvccConflict);
            }
        }
        flags
    }
}

/// Transfers endorsed against a lagging snapshot of state, so some reads are
/// stale by the time they commit.
fn workload(rng: &mut impl Rng, snapshot: &VersionedMap, accounts: u32, n: usize) -> Vec<(ReadWriteSet, bool)> {
    (0..n)
        .map(|_| {
            let from = rng.gen_range(0..accounts);
            let mut to = rng.gen_range(0..accounts);
            if to == from {
                to = (to + 1) % accounts;
            }
            let (fk, tk) = (account_key(from), account_key(to));
            let read = |k: &str| {
                snapshot
                    .get(k)
                    .map(|e| (decode_balance(&e.value).unwrap(), e.version))
                    .unwrap_or((0, Version::GENESIS))
            };
            let (fb, fv) = read(&fk);
            let (tb, tv) = read(&tk);
            let amount = rng.gen_range(0..=fb.min(10));
            let rw = ReadWriteSet {
                reads: vec![(fk.clone(), fv), (tk.clone(), tv)],
                writes: vec![(fk, encode_balance(fb - amount)), (tk, encode_balance(tb + amount))],
            };
            (rw, rng.gen_bool(0.97))
        })
        .collect()
}

#[test]
fn matches_naive_executor_on_random_workloads() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for round in 0..200 {
        let accounts = rng.gen_range(2..40);
        let mut state = VersionedMap::new();
        let mut naive = Naive::default();
        for a in 0..accounts {
            state.put(account_key(a), encode_balance(100), Version::GENESIS);
            naive.accounts.insert(account_key(a), (100, (0, 0)));
        }
        let mut snapshot = state.clone();
        for block in 1..=5u64 {
            let n = rng.gen_range(1..40);
            let txs = workload(&mut rng, &snapshot, accounts, n);
            let pre: Vec<ValidationFlag> = txs
                .iter()
                .map(|(_, ok)| if *ok { ValidationFlag::Valid } else { ValidationFlag::BadEndorsement })
                .collect();
            let flags = mvcc_commit(&mut state, block, &pre, |i| Some(&txs[i].0)).unwrap();
            assert_eq!(flags, naive.run_block(block, &txs), "round {round} block {block}");
            if rng.gen_bool(0.5) {
                snapshot = state.clone();
            }
        }
        for (k, (bal, (b, t))) in &naive.accounts {
            let e = state.get(k).unwrap();
            assert_eq!(decode_balance(&e.value), Some(*bal));
            assert_eq!(e.version, Version::new(*b, *t));
        }
        assert_eq!(state.len(), naive.accounts.len());
    }
}
