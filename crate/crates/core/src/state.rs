//! Versioned world state: `key → (value, version)`.

use alloc::string::String;
use alloc::vec::Vec;
use core::convert::Infallible;

use hashbrown::HashMap;

use crate::codec::{Reader, WireError, Writer};
use crate::wire::Version;

pub const MAX_KEY_LEN: usize = 256;
pub const MAX_VALUE_LEN: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateEntry {
    pub value: Vec<u8>,
    pub version: Version,
}

/// Read side of a world state.
pub trait StateRead {
    type Error;

    fn get_entry(&self, key: &str) -> Result<Option<StateEntry>, Self::Error>;

    fn version_of(&self, key: &str) -> Result<Option<Version>, Self::Error> {
        Ok(self.get_entry(key)?.map(|e| e.version))
    }
}

/// Single-writer side of a world state.
pub trait StateWrite: StateRead {
    /// Applies all `writes` at `version`; visible atomically to later reads.
    fn apply_writes(&mut self, writes: &[(String, Vec<u8>)], version: Version) -> Result<(), Self::Error>;
}

/// Plain hash-table state with no synchronization.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VersionedMap {
    entries: HashMap<String, StateEntry>,
}

impl VersionedMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(cap: usize) -> Self {
        Self {
            entries: HashMap::with_capacity(cap),
        }
    }

    pub fn get(&self, key: &str) -> Option<&StateEntry> {
        self.entries.get(key)
    }

    pub fn put(&mut self, key: impl Into<String>, value: Vec<u8>, version: Version) {
        self.entries.insert(key.into(), StateEntry { value, version });
    }

    pub fn insert_entry(&mut self, key: String, entry: StateEntry) {
        self.entries.insert(key, entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &StateEntry)> {
        self.entries.iter()
    }

    /// Entries sorted by key.
    pub fn sorted(&self) -> Vec<(&String, &StateEntry)> {
        let mut all: Vec<_> = self.entries.iter().collect();
        all.sort_unstable_by(|a, b| a.0.cmp(b.0));
        all
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn snapshot(&self) -> Vec<u8> {
        encode_snapshot(self.sorted())
    }

    pub fn restore(bytes: &[u8]) -> Result<Self, WireError> {
        let mut map = Self::new();
        for (key, entry) in decode_snapshot(bytes)? {
            map.entries.insert(key, entry);
        }
        Ok(map)
    }
}

impl StateRead for VersionedMap {
    type Error = Infallible;

    fn get_entry(&self, key: &str) -> Result<Option<StateEntry>, Infallible> {
        Ok(self.entries.get(key).cloned())
    }

    fn version_of(&self, key: &str) -> Result<Option<Version>, Infallible> {
        Ok(self.entries.get(key).map(|e| e.version))
    }
}

impl StateWrite for VersionedMap {
    fn apply_writes(&mut self, writes: &[(String, Vec<u8>)], version: Version) -> Result<(), Infallible> {
        for (key, value) in writes {
            self.put(key.clone(), value.clone(), version);
        }
        Ok(())
    }
}

/// `u32 key_len ‖ key ‖ u32 val_len ‖ val ‖ u64 block_num ‖ u32 tx_num`
pub fn encode_entry(w: &mut Writer, key: &str, entry: &StateEntry) {
    w.str(key)
        .bytes(&entry.value)
        .u64(entry.version.block_num)
        .u32(entry.version.tx_num);
}

pub fn decode_entry(r: &mut Reader<'_>) -> Result<(String, StateEntry), WireError> {
    let key = r.string()?;
    let value = r.bytes()?.to_vec();
    let version = Version::new(r.u64()?, r.u32()?);
    Ok((key, StateEntry { value, version }))
}

/// `u64 n_entries ‖ entry*`
pub fn encode_snapshot<'a, I>(entries: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a String, &'a StateEntry)>,
    I::IntoIter: ExactSizeIterator,
{
    let iter = entries.into_iter();
    let mut w = Writer::new();
    w.u64(iter.len() as u64);
    for (key, entry) in iter {
        encode_entry(&mut w, key, entry);
    }
    w.finish()
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<Vec<(String, StateEntry)>, WireError> {
    let mut r = Reader::new(bytes);
    let n = r.u64()?;
    let mut out = Vec::with_capacity((n as usize).min(r.remaining() / 20));
    for _ in 0..n {
        out.push(decode_entry(&mut r)?);
    }
    r.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn empty_snapshot_has_zero_entries() {
        let snap = VersionedMap::new().snapshot();
        assert_eq!(snap, 0u64.to_le_bytes());
        assert!(decode_snapshot(&snap).unwrap().is_empty());
    }

    #[test]
    fn put_then_get() {
        let mut m = VersionedMap::new();
        assert!(m.get("k").is_none());
        m.put("k", vec![1], Version::new(3, 2));
        assert_eq!(
            m.get("k"),
            Some(&StateEntry {
                value: vec![1],
                version: Version::new(3, 2)
            })
        );
    }

    #[test]
    fn last_write_wins() {
        let mut m = VersionedMap::new();
        m.apply_writes(&[("a".into(), vec![1]), ("b".into(), vec![2])], Version::new(1, 0))
            .unwrap();
        assert_eq!(m.version_of("a").unwrap(), Some(Version::new(1, 0)));
        assert_eq!(m.version_of("b").unwrap(), Some(Version::new(1, 0)));
        m.apply_writes(&[("a".into(), vec![3])], Version::new(1, 1)).unwrap();
        assert_eq!(m.get("a").unwrap().value, vec![3]);
        assert_eq!(m.version_of("a").unwrap(), Some(Version::new(1, 1)));
    }

    #[test]
    fn truncated_snapshot_is_malformed() {
        let mut m = VersionedMap::new();
        m.put("key", vec![1, 2, 3], Version::new(4, 4));
        let snap = m.snapshot();
        assert!(matches!(
            VersionedMap::restore(&snap[..snap.len() - 1]),
            Err(WireError::MalformedFrame { .. })
        ));
    }
}
