//! World-state backends behind one interface.
//!
//! * [`MemoryStore`]: a hash table guarded by a reader-writer lock; persists
//!   nothing on its own (backups go through [`StateStore::snapshot`]).
//! * [`DurableStore`]: an append-only write log plus an in-memory index of
//!   value offsets. Reads go to the file; each block commit is fsynced.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use fastfab_core::codec::{Reader, WireError, Writer};
use fastfab_core::state::{decode_snapshot, encode_entry, encode_snapshot, StateRead, StateWrite};
use fastfab_core::{StateEntry, Version, VersionedMap};
use parking_lot::{Mutex, RwLock};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
    #[error("malformed state frame: {0}")]
    MalformedFrame(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backend {
    Memory,
    Durable,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Memory => "memory",
            Backend::Durable => "durable",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "memory" => Ok(Backend::Memory),
            "durable" => Ok(Backend::Durable),
            other => Err(format!("unknown state backend {other:?}")),
        }
    }
}

/// Many concurrent readers, one committing writer.
pub trait StateStore: Send + Sync {
    fn backend(&self) -> Backend;

    fn get(&self, key: &str) -> Result<Option<StateEntry>, StoreError>;

    fn version_of(&self, key: &str) -> Result<Option<Version>, StoreError> {
        Ok(self.get(key)?.map(|e| e.version))
    }

    /// Applies `writes` at `version`, atomically with respect to `get`.
    fn apply_writes(&self, writes: &[(String, Vec<u8>)], version: Version) -> Result<(), StoreError>;

    /// Durability point after a block's writes.
    fn commit_block(&self, block_number: u64) -> Result<(), StoreError>;

    fn snapshot(&self) -> Result<Vec<u8>, StoreError>;

    fn restore(&self, bytes: &[u8]) -> Result<(), StoreError>;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Full contents as a plain map.
    fn to_map(&self) -> Result<VersionedMap, StoreError> {
        Ok(VersionedMap::restore(&self.snapshot()?)?)
    }
}

/// Adapter exposing a [`StateStore`] through the core state traits.
pub struct StoreView<'a>(pub &'a dyn StateStore);

impl StateRead for StoreView<'_> {
    type Error = StoreError;

    fn get_entry(&self, key: &str) -> Result<Option<StateEntry>, StoreError> {
        self.0.get(key)
    }

    fn version_of(&self, key: &str) -> Result<Option<Version>, StoreError> {
        self.0.version_of(key)
    }
}

impl StateWrite for StoreView<'_> {
    fn apply_writes(&mut self, writes: &[(String, Vec<u8>)], version: Version) -> Result<(), StoreError> {
        self.0.apply_writes(writes, version)
    }
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    map: RwLock<VersionedMap>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(map: VersionedMap) -> Self {
        Self {
            map: RwLock::new(map),
        }
    }
}

impl StateStore for MemoryStore {
    fn backend(&self) -> Backend {
        Backend::Memory
    }

    fn get(&self, key: &str) -> Result<Option<StateEntry>, StoreError> {
        Ok(self.map.read().get(key).cloned())
    }

    fn version_of(&self, key: &str) -> Result<Option<Version>, StoreError> {
        Ok(self.map.read().get(key).map(|e| e.version))
    }

    fn apply_writes(&self, writes: &[(String, Vec<u8>)], version: Version) -> Result<(), StoreError> {
        let mut map = self.map.write();
        for (k, v) in writes {
            map.put(k.clone(), v.clone(), version);
        }
        Ok(())
    }

    fn commit_block(&self, _block_number: u64) -> Result<(), StoreError> {
        Ok(())
    }

    fn snapshot(&self) -> Result<Vec<u8>, StoreError> {
        Ok(self.map.read().snapshot())
    }

    fn restore(&self, bytes: &[u8]) -> Result<(), StoreError> {
        let map = VersionedMap::restore(bytes)?;
        *self.map.write() = map;
        Ok(())
    }

    fn len(&self) -> usize {
        self.map.read().len()
    }

    fn to_map(&self) -> Result<VersionedMap, StoreError> {
        Ok(self.map.read().clone())
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    value_offset: u64,
    value_len: u32,
    version: Version,
}

struct LogWriter {
    file: File,
    end: u64,
}

/// Append-only state log with an in-memory `key → offset` index.
///
/// Log records use the snapshot entry encoding:
/// `u32 key_len ‖ key ‖ u32 val_len ‖ val ‖ u64 block_num ‖ u32 tx_num`.
pub struct DurableStore {
    path: PathBuf,
    index: RwLock<HashMap<String, Slot>>,
    writer: Mutex<LogWriter>,
    reader: File,
}

impl std::fmt::Debug for DurableStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DurableStore").field("path", &self.path).finish()
    }
}

impl DurableStore {
    /// Opens or creates the log at `path`, replaying it into the index. A torn
    /// record at the tail is truncated away.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().create(true).read(true).write(true).truncate(false).open(&path)?;
        let (index, valid_end) = replay(&mut file)?;
        file.set_len(valid_end)?;
        file.seek(SeekFrom::Start(valid_end))?;
        let reader = File::open(&path)?;
        Ok(Self {
            path,
            index: RwLock::new(index),
            writer: Mutex::new(LogWriter { file, end: valid_end }),
            reader,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn read_value(&self, slot: &Slot) -> Result<Vec<u8>, StoreError> {
        let mut buf = vec![0u8; slot.value_len as usize];
        self.reader.read_exact_at(&mut buf, slot.value_offset)?;
        Ok(buf)
    }

    fn append_records(&self, writes: &[(String, Vec<u8>)], version: Version) -> Result<Vec<(String, Slot)>, StoreError> {
        let mut w = Writer::with_capacity(writes.iter().map(|(k, v)| 20 + k.len() + v.len()).sum());
        let mut slots = Vec::with_capacity(writes.len());
        let mut writer = self.writer.lock();
        for (key, value) in writes {
            let value_offset = writer.end + (w.len() + 4 + key.len() + 4) as u64;
            encode_entry(
                &mut w,
                key,
                &StateEntry {
                    value: value.clone(),
                    version,
                },
            );
            slots.push((
                key.clone(),
                Slot {
                    value_offset,
                    value_len: value.len() as u32,
                    version,
                },
            ));
        }
        let bytes = w.finish();
        writer.file.write_all(&bytes)?;
        writer.end += bytes.len() as u64;
        Ok(slots)
    }
}

fn replay(file: &mut File) -> Result<(HashMap<String, Slot>, u64), StoreError> {
    let mut raw = Vec::new();
    file.seek(SeekFrom::Start(0))?;
    BufReader::new(&mut *file).read_to_end(&mut raw)?;
    let mut index = HashMap::new();
    let mut r = Reader::new(&raw);
    let mut valid_end = 0u64;
    loop {
        if r.is_empty() {
            break;
        }
        let start = r.position();
        let parsed = (|| -> Result<(String, u32, Version), WireError> {
            let key = r.string()?;
            let value = r.bytes()?;
            let version = Version::new(r.u64()?, r.u32()?);
            Ok((key, value.len() as u32, version))
        })();
        let Ok((key, value_len, version)) = parsed else {
            break;
        };
        let value_offset = (start + 4 + key.len() + 4) as u64;
        index.insert(
            key,
            Slot {
                value_offset,
                value_len,
                version,
            },
        );
        valid_end = r.position() as u64;
    }
    Ok((index, valid_end))
}

impl StateStore for DurableStore {
    fn backend(&self) -> Backend {
        Backend::Durable
    }

    fn get(&self, key: &str) -> Result<Option<StateEntry>, StoreError> {
        let Some(slot) = self.index.read().get(key).copied() else {
            return Ok(None);
        };
        Ok(Some(StateEntry {
            value: self.read_value(&slot)?,
            version: slot.version,
        }))
    }

    fn version_of(&self, key: &str) -> Result<Option<Version>, StoreError> {
        Ok(self.index.read().get(key).map(|s| s.version))
    }

    fn apply_writes(&self, writes: &[(String, Vec<u8>)], version: Version) -> Result<(), StoreError> {
        if writes.is_empty() {
            return Ok(());
        }
        let slots = self.append_records(writes, version)?;
        let mut index = self.index.write();
        for (k, s) in slots {
            index.insert(k, s);
        }
        Ok(())
    }

    fn commit_block(&self, _block_number: u64) -> Result<(), StoreError> {
        self.writer.lock().file.sync_data()?;
        Ok(())
    }

    fn snapshot(&self) -> Result<Vec<u8>, StoreError> {
        let index = self.index.read();
        let mut keys: Vec<(&String, &Slot)> = index.iter().collect();
        keys.sort_unstable_by(|a, b| a.0.cmp(b.0));
        let entries: Vec<(String, StateEntry)> = keys
            .into_iter()
            .map(|(k, s)| {
                Ok((
                    k.clone(),
                    StateEntry {
                        value: self.read_value(s)?,
                        version: s.version,
                    },
                ))
            })
            .collect::<Result<_, StoreError>>()?;
        Ok(encode_snapshot(entries.iter().map(|(k, e)| (k, e))))
    }

    fn restore(&self, bytes: &[u8]) -> Result<(), StoreError> {
        let entries = decode_snapshot(bytes)?;
        {
            let mut writer = self.writer.lock();
            writer.file.set_len(0)?;
            writer.file.seek(SeekFrom::Start(0))?;
            writer.end = 0;
        }
        self.index.write().clear();
        for (key, entry) in entries {
            let slots = self.append_records(&[(key, entry.value)], entry.version)?;
            self.index.write().extend(slots);
        }
        self.writer.lock().file.sync_all()?;
        Ok(())
    }

    fn len(&self) -> usize {
        self.index.read().len()
    }
}

/// Opens a backend of the requested kind; `dir` is only used for durable.
pub fn open_store(backend: Backend, dir: &Path) -> Result<Box<dyn StateStore>, StoreError> {
    Ok(match backend {
        Backend::Memory => Box::new(MemoryStore::new()),
        Backend::Durable => Box::new(DurableStore::open(dir.join("state.log"))?),
    })
}
