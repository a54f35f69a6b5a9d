//! Sequential read-set validation and commit.
//!
//! For each transaction whose pre-MVCC flag is `Valid`, in block order: every
//! read `(key, version)` must equal the key's current committed version (an
//! absent key matches only [`Version::GENESIS`]). On success the writes are
//! applied at `(block_number, tx_index)` before the next transaction is
//! checked, so a later transaction in the same block sees them.

use alloc::vec::Vec;
use core::ops::Deref;

use crate::ledger::ValidationFlag;
use crate::state::{StateRead, StateWrite};
use crate::wire::{ReadWriteSet, Version};

/// Whether every read in `rwset` still matches `state`.
pub fn reads_current<S: StateRead + ?Sized>(rwset: &ReadWriteSet, state: &S) -> Result<bool, S::Error> {
    for (key, read_version) in &rwset.reads {
        let current = state.version_of(key)?;
        let ok = match current {
            Some(v) => v == *read_version,
            None => *read_version == Version::GENESIS,
        };
        if !ok {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Write keys with no matching read; their versions go unchecked.
pub fn unread_writes(rwset: &ReadWriteSet) -> impl Iterator<Item = &str> {
    rwset
        .writes
        .iter()
        .map(|(k, _)| k.as_str())
        .filter(|k| !rwset.reads.iter().any(|(r, _)| r == k))
}

/// Runs MVCC over one block and applies the surviving write sets.
///
/// `rwset_of(i)` is only called for transactions pre-flagged `Valid`; `None`
/// there means the rwset could not be decoded and the transaction is marked
/// `Malformed`.
pub fn mvcc_commit<S, F, R>(
    state: &mut S,
    block_number: u64,
    pre_flags: &[ValidationFlag],
    mut rwset_of: F,
) -> Result<Vec<ValidationFlag>, S::Error>
where
    S: StateWrite + ?Sized,
    F: FnMut(usize) -> Option<R>,
    R: Deref<Target = ReadWriteSet>,
{
    let mut flags = Vec::with_capacity(pre_flags.len());
    for (i, pre) in pre_flags.iter().enumerate() {
        if !pre.is_valid() {
            flags.push(*pre);
            continue;
        }
        let Some(rwset) = rwset_of(i) else {
            flags.push(ValidationFlag::Malformed);
            continue;
        };
        if reads_current(&*rwset, state)? {
            state.apply_writes(&rwset.writes, Version::new(block_number, i as u32))?;
            flags.push(ValidationFlag::Valid);
        } else {
            flags.push(ValidationFlag::MvccConflict);
        }
    }
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::VersionedMap;
    use alloc::string::String;
    use alloc::vec;

    fn transfer(from: &str, to: &str, v_from: Version, v_to: Version) -> ReadWriteSet {
        ReadWriteSet {
            reads: vec![(from.into(), v_from), (to.into(), v_to)],
            writes: vec![(from.into(), vec![0]), (to.into(), vec![1])],
        }
    }

    #[test]
    fn double_spend_in_one_block() {
        let mut state = VersionedMap::new();
        let v = Version::new(1, 0);
        state.put("A", vec![100], v);
        state.put("B", vec![0], v);
        state.put("C", vec![0], v);
        let txs = [transfer("A", "B", v, v), transfer("A", "C", v, v)];
        let flags = mvcc_commit(&mut state, 2, &[ValidationFlag::Valid; 2], |i| Some(&txs[i])).unwrap();
        assert_eq!(flags, [ValidationFlag::Valid, ValidationFlag::MvccConflict]);
        assert_eq!(state.get("A").unwrap().version, Version::new(2, 0));
        assert_eq!(state.get("C").unwrap().version, v);
    }

    #[test]
    fn absent_key_matches_genesis_read() {
        let mut state = VersionedMap::new();
        let rw = ReadWriteSet {
            reads: vec![("fresh".into(), Version::GENESIS)],
            writes: vec![("fresh".into(), vec![1])],
        };
        let flags = mvcc_commit(&mut state, 1, &[ValidationFlag::Valid], |_| Some(&rw)).unwrap();
        assert_eq!(flags, [ValidationFlag::Valid]);

        let stale = ReadWriteSet {
            reads: vec![("other".into(), Version::new(1, 0))],
            writes: vec![],
        };
        let flags = mvcc_commit(&mut state, 2, &[ValidationFlag::Valid], |_| Some(&stale)).unwrap();
        assert_eq!(flags, [ValidationFlag::MvccConflict]);
    }

    #[test]
    fn failing_pre_flags_kept_and_not_applied() {
        let mut state = VersionedMap::new();
        let rw = ReadWriteSet {
            reads: vec![],
            writes: vec![("k".into(), vec![1])],
        };
        let pre = [ValidationFlag::BadEndorsement, ValidationFlag::Valid];
        let flags = mvcc_commit(&mut state, 5, &pre, |_| Some(&rw)).unwrap();
        assert_eq!(flags, [ValidationFlag::BadEndorsement, ValidationFlag::Valid]);
        assert_eq!(state.get("k").unwrap().version, Version::new(5, 1));
    }

    #[test]
    fn undecodable_rwset_is_malformed() {
        let mut state = VersionedMap::new();
        let flags = mvcc_commit(&mut state, 1, &[ValidationFlag::Valid], |_| None::<&ReadWriteSet>).unwrap();
        assert_eq!(flags, [ValidationFlag::Malformed]);
    }

    #[test]
    fn unread_write_detection() {
        let rw = ReadWriteSet {
            reads: vec![("a".into(), Version::GENESIS)],
            writes: vec![("a".into(), vec![]), ("b".into(), vec![])],
        };
        let keys: Vec<String> = unread_writes(&rw).map(String::from).collect();
        assert_eq!(keys, ["b"]);
    }
}
