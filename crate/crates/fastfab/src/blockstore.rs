//! Append-only storage of validated blocks.
//!
//! Layout under the store directory:
//!
//! * `blocks_NNNNNN.seg`: `u32 len ‖ block` records, [`BLOCKS_PER_SEGMENT`]
//!   blocks per file.
//! * `blocks.idx`: one fixed 12-byte `u64 offset ‖ u32 len` entry per block.
//! * `txids.idx`: one record per block, `u64 block ‖ u32 n ‖ (u32 len ‖ tx_id)*`.
//! * `snapshot_NNNNNNNNNN.snap`: state snapshots as handed in.
//!
//! Every append is fsynced before it returns. A block counts as stored once
//! its index entry is durable; on open, segment bytes past the last indexed
//! block are cut off and missing transaction-index records are rebuilt.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use fastfab_core::codec::{Reader, WireError, Writer};
use fastfab_core::wire::peek_header;
use fastfab_core::Block;
use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::committer::{BlockSink, CommittedBlock, SinkError};
use crate::proto;
use crate::transport::{Channel, ListenerCloser, Mode, Network, TransportError};

pub const BLOCKS_PER_SEGMENT: u64 = 10_000;
const INDEX_ENTRY: u64 = 12;

#[derive(Debug, Error)]
pub enum BlockStoreError {
    #[error("block store io: {0}")]
    Io(#[from] io::Error),
    #[error("expected block {expected}, got {got}")]
    GapDetected { expected: u64, got: u64 },
    #[error("not found")]
    NotFound,
    #[error("malformed block: {0}")]
    Malformed(#[from] WireError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Where [`BlockStore::append_until`] stops, simulating a crash mid-append.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// Only the first `n` bytes of the segment record reach the file.
    TornSegment(usize),
    /// Segment record written and synced, index untouched.
    AfterSegment,
    /// Only part of the 12-byte index entry written.
    TornIndex(usize),
    /// Segment and index durable, transaction index untouched.
    AfterIndex,
}

struct Appender {
    segment_no: u64,
    segment: File,
    segment_len: u64,
    index: File,
    txids: File,
}

pub struct BlockStore {
    dir: PathBuf,
    appender: Mutex<Appender>,
    /// `(offset, len)` per stored block, by block number.
    locations: RwLock<Vec<(u64, u32)>>,
    tx_index: RwLock<HashMap<String, (u64, u32)>>,
    readers: RwLock<HashMap<u64, Arc<File>>>,
}

impl std::fmt::Debug for BlockStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockStore")
            .field("dir", &self.dir)
            .field("height", &self.height())
            .finish()
    }
}

fn segment_path(dir: &Path, no: u64) -> PathBuf {
    dir.join(format!("blocks_{no:06}.seg"))
}

fn open_rw(path: &Path) -> io::Result<File> {
    OpenOptions::new().create(true).read(true).write(true).truncate(false).open(path)
}

fn tx_record(number: u64, block: &Block) -> Vec<u8> {
    let ids: Vec<String> = block
        .envelopes
        .iter()
        .map(|e| peek_header(e).map(|h| h.tx_id).unwrap_or_default())
        .collect();
    let mut w = Writer::new();
    w.u64(number).u32(ids.len() as u32);
    for id in &ids {
        w.str(id);
    }
    w.finish()
}

impl BlockStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, BlockStoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;

        // Index: whole entries only, each pointing at a complete segment record.
        let index = open_rw(&dir.join("blocks.idx"))?;
        let raw = fs::read(dir.join("blocks.idx"))?;
        let mut locations = Vec::new();
        for (n, chunk) in raw.chunks_exact(INDEX_ENTRY as usize).enumerate() {
            let offset = u64::from_le_bytes(chunk[..8].try_into().unwrap());
            let len = u32::from_le_bytes(chunk[8..].try_into().unwrap());
            let seg_len = fs::metadata(segment_path(&dir, n as u64 / BLOCKS_PER_SEGMENT))
                .map(|m| m.len())
                .unwrap_or(0);
            if offset + 4 + len as u64 > seg_len {
                break;
            }
            locations.push((offset, len));
        }
        index.set_len(locations.len() as u64 * INDEX_ENTRY)?;

        let height = locations.len() as u64;
        let segment_no = height / BLOCKS_PER_SEGMENT;
        let segment = open_rw(&segment_path(&dir, segment_no))?;
        let segment_len = if height % BLOCKS_PER_SEGMENT == 0 {
            0
        } else {
            let (off, len) = locations[height as usize - 1];
            off + 4 + len as u64
        };
        segment.set_len(segment_len)?;
        segment.sync_all()?;
        index.sync_all()?;

        let txids = open_rw(&dir.join("txids.idx"))?;
        let store = Self {
            dir,
            appender: Mutex::new(Appender {
                segment_no,
                segment,
                segment_len,
                index,
                txids,
            }),
            locations: RwLock::new(locations),
            tx_index: RwLock::new(HashMap::new()),
            readers: RwLock::new(HashMap::new()),
        };
        store.recover_tx_index()?;
        Ok(store)
    }

    fn recover_tx_index(&self) -> Result<(), BlockStoreError> {
        let raw = fs::read(self.dir.join("txids.idx"))?;
        let height = self.height();
        let mut r = Reader::new(&raw);
        let mut map = HashMap::new();
        let mut covered = 0u64;
        let mut valid_end = 0usize;
        while !r.is_empty() {
            let parsed = (|| -> Result<(u64, Vec<String>), WireError> {
                let number = r.u64()?;
                let n = r.u32()?;
                let mut ids = Vec::new();
                for _ in 0..n {
                    ids.push(r.string()?);
                }
                Ok((number, ids))
            })();
            let Ok((number, ids)) = parsed else { break };
            if number != covered || number >= height {
                break;
            }
            for (i, id) in ids.into_iter().enumerate() {
                if !id.is_empty() {
                    map.entry(id).or_insert((number, i as u32));
                }
            }
            covered += 1;
            valid_end = r.position();
        }
        let app = self.appender.lock();
        app.txids.set_len(valid_end as u64)?;
        let mut missing = Vec::new();
        for number in covered..height {
            let block = Block::decode(&self.get_block(number)?)?;
            for (i, e) in block.envelopes.iter().enumerate() {
                if let Ok(h) = peek_header(e) {
                    map.entry(h.tx_id).or_insert((number, i as u32));
                }
            }
            missing.extend_from_slice(&tx_record(number, &block));
        }
        app.txids.write_all_at(&missing, valid_end as u64)?;
        app.txids.sync_all()?;
        *self.tx_index.write() = map;
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Number of stored blocks, which is also the next expected block number.
    pub fn height(&self) -> u64 {
        self.locations.read().len() as u64
    }

    /// Appends an encoded validated block. Blocks must arrive in order.
    pub fn append(&self, bytes: &[u8]) -> Result<(), BlockStoreError> {
        let block = Block::decode(bytes)?;
        self.append_decoded(bytes, &block)
    }

    /// Like [`append`](Self::append) when the caller already decoded `bytes`.
    pub fn append_decoded(&self, bytes: &[u8], block: &Block) -> Result<(), BlockStoreError> {
        self.append_inner(bytes, block, None)
    }

    #[doc(hidden)]
    pub fn append_until(&self, bytes: &[u8], crash: CrashPoint) -> Result<(), BlockStoreError> {
        let block = Block::decode(bytes)?;
        self.append_inner(bytes, &block, Some(crash))
    }

    fn append_inner(&self, bytes: &[u8], block: &Block, crash: Option<CrashPoint>) -> Result<(), BlockStoreError> {
        let mut app = self.appender.lock();
        let expected = self.height();
        if block.number() != expected {
            return Err(BlockStoreError::GapDetected {
                expected,
                got: block.number(),
            });
        }
        let segment_no = expected / BLOCKS_PER_SEGMENT;
        if segment_no != app.segment_no {
            app.segment = open_rw(&segment_path(&self.dir, segment_no))?;
            app.segment.set_len(0)?;
            app.segment_no = segment_no;
            app.segment_len = 0;
        }

        let mut record = Vec::with_capacity(4 + bytes.len());
        record.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        record.extend_from_slice(bytes);
        let offset = app.segment_len;
        if let Some(CrashPoint::TornSegment(n)) = crash {
            app.segment.write_all_at(&record[..n.min(record.len())], offset)?;
            return Ok(());
        }
        app.segment.write_all_at(&record, offset)?;
        app.segment.sync_data()?;
        if crash == Some(CrashPoint::AfterSegment) {
            return Ok(());
        }

        let mut entry = [0u8; INDEX_ENTRY as usize];
        entry[..8].copy_from_slice(&offset.to_le_bytes());
        entry[8..].copy_from_slice(&(bytes.len() as u32).to_le_bytes());
        let index_pos = expected * INDEX_ENTRY;
        if let Some(CrashPoint::TornIndex(n)) = crash {
            app.index.write_all_at(&entry[..n.min(entry.len())], index_pos)?;
            return Ok(());
        }
        app.index.write_all_at(&entry, index_pos)?;
        app.index.sync_data()?;
        app.segment_len = offset + record.len() as u64;
        self.locations.write().push((offset, bytes.len() as u32));
        if crash == Some(CrashPoint::AfterIndex) {
            return Ok(());
        }

        let txrec = tx_record(expected, block);
        let end = app.txids.metadata()?.len();
        app.txids.write_all_at(&txrec, end)?;
        app.txids.sync_data()?;
        drop(app);
        let mut tx_index = self.tx_index.write();
        for (i, e) in block.envelopes.iter().enumerate() {
            if let Ok(h) = peek_header(e) {
                tx_index.entry(h.tx_id).or_insert((expected, i as u32));
            }
        }
        Ok(())
    }

    fn reader(&self, segment_no: u64) -> Result<Arc<File>, BlockStoreError> {
        if let Some(f) = self.readers.read().get(&segment_no) {
            return Ok(f.clone());
        }
        let f = Arc::new(File::open(segment_path(&self.dir, segment_no))?);
        self.readers.write().insert(segment_no, f.clone());
        Ok(f)
    }

    /// The exact bytes that were appended as block `number`.
    pub fn get_block(&self, number: u64) -> Result<Vec<u8>, BlockStoreError> {
        let (offset, len) = *self
            .locations
            .read()
            .get(number as usize)
            .ok_or(BlockStoreError::NotFound)?;
        let file = self.reader(number / BLOCKS_PER_SEGMENT)?;
        let mut buf = vec![0u8; len as usize];
        file.read_exact_at(&mut buf, offset + 4)?;
        Ok(buf)
    }

    /// `(block, index)` of the first stored transaction carrying `tx_id`.
    pub fn get_tx(&self, tx_id: &str) -> Result<(u64, u32), BlockStoreError> {
        self.tx_index.read().get(tx_id).copied().ok_or(BlockStoreError::NotFound)
    }

    pub fn put_snapshot(&self, block_number: u64, snapshot: &[u8]) -> Result<PathBuf, BlockStoreError> {
        let path = self.dir.join(format!("snapshot_{block_number:010}.snap"));
        let tmp = path.with_extension("tmp");
        let mut f = File::create(&tmp)?;
        f.write_all(snapshot)?;
        f.sync_all()?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    /// Newest snapshot and the block it was taken at.
    pub fn latest_snapshot(&self) -> Result<Option<(u64, Vec<u8>)>, BlockStoreError> {
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(n) = name
                .strip_prefix("snapshot_")
                .and_then(|s| s.strip_suffix(".snap"))
                .and_then(|s| s.parse::<u64>().ok())
            else {
                continue;
            };
            if best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, path));
            }
        }
        best.map(|(n, p)| Ok((n, fs::read(p)?))).transpose()
    }
}

/// Persists committed blocks into a local [`BlockStore`] on the committer's
/// own thread.
pub struct StoreSink(pub Arc<BlockStore>);

impl BlockSink for StoreSink {
    fn name(&self) -> &str {
        "local-store"
    }

    fn deliver(&mut self, block: &CommittedBlock) -> Result<(), SinkError> {
        let n = block.number();
        if n < self.0.height() {
            return Ok(());
        }
        self.0
            .append_decoded(&block.encoded, &block.block)
            .map_err(|e| SinkError::Rejected(format!("block {n}: {e}")))
    }
}

/// Network front end of a [`BlockStore`].
pub struct BlockStoreServer {
    closer: ListenerCloser,
    store: Arc<BlockStore>,
}

impl BlockStoreServer {
    pub fn start(net: &Network, node_id: &str, mode: Mode, store: Arc<BlockStore>) -> Result<Self, BlockStoreError> {
        let listener = net.listen(node_id, mode)?;
        let closer = listener.closer(net);
        let served = store.clone();
        thread::Builder::new()
            .name(format!("{node_id}-accept"))
            .spawn(move || {
                while let Ok(ch) = listener.accept() {
                    let store = served.clone();
                    thread::spawn(move || serve_connection(ch, &store));
                }
            })
            .expect("spawn block store acceptor");
        Ok(Self { closer, store })
    }

    pub fn store(&self) -> &Arc<BlockStore> {
        &self.store
    }

    pub fn shutdown(&self) {
        self.closer.close();
    }
}

impl Drop for BlockStoreServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(mut ch: Channel, store: &BlockStore) {
    while let Ok(msg) = ch.recv() {
        let sent = match msg.msg_type {
            proto::VALIDATED => {
                if let Err(e) = store.append(msg.body()) {
                    log::warn!("block store rejected validated block: {e}");
                }
                Ok(())
            }
            proto::GET_BLOCK => match proto::parse_u64(msg.body()).map(|n| store.get_block(n)) {
                Ok(Ok(bytes)) => ch.send(proto::BLOCK, &bytes),
                _ => ch.send(proto::NOT_FOUND, &[]),
            },
            proto::GET_TX => match std::str::from_utf8(msg.body()).map(|id| store.get_tx(id)) {
                Ok(Ok((b, i))) => ch.send(proto::TX_LOCATION, &proto::encode_tx_location(b, i)),
                _ => ch.send(proto::NOT_FOUND, &[]),
            },
            proto::PUT_SNAPSHOT => {
                let mut r = Reader::new(msg.body());
                match r.u64().map(|n| store.put_snapshot(n, r.rest())) {
                    Ok(Ok(_)) => ch.send(proto::SNAPSHOT_STORED, &[]),
                    _ => ch.send(proto::STORE_ERROR, &[]),
                }
            }
            _ => ch.send(proto::STORE_ERROR, &[]),
        };
        if sent.is_err() {
            return;
        }
    }
}

/// Client side of the block store service.
pub struct BlockStoreClient {
    ch: Channel,
}

impl BlockStoreClient {
    pub fn connect(net: &Network, store_node: &str) -> Result<Self, BlockStoreError> {
        Ok(Self {
            ch: net.connect(store_node)?,
        })
    }

    pub fn get_block(&mut self, number: u64) -> Result<Vec<u8>, BlockStoreError> {
        let reply = self.ch.call(proto::GET_BLOCK, &proto::u64_body(number))?;
        match reply.msg_type {
            proto::BLOCK => Ok(reply.into_body()),
            _ => Err(BlockStoreError::NotFound),
        }
    }

    pub fn get_tx(&mut self, tx_id: &str) -> Result<(u64, u32), BlockStoreError> {
        let reply = self.ch.call(proto::GET_TX, tx_id.as_bytes())?;
        match reply.msg_type {
            proto::TX_LOCATION => Ok(proto::decode_tx_location(reply.body())?),
            _ => Err(BlockStoreError::NotFound),
        }
    }

    pub fn put_snapshot(&mut self, block_number: u64, snapshot: &[u8]) -> Result<(), BlockStoreError> {
        let mut w = Writer::with_capacity(8 + snapshot.len());
        w.u64(block_number).raw(snapshot);
        let reply = self.ch.call(proto::PUT_SNAPSHOT, &w.finish())?;
        match reply.msg_type {
            proto::SNAPSHOT_STORED => Ok(()),
            _ => Err(BlockStoreError::Io(io::Error::other("snapshot not stored"))),
        }
    }

    /// Sends a validated block without waiting for a reply.
    pub fn send_validated(&mut self, bytes: &[u8]) -> Result<(), BlockStoreError> {
        Ok(self.ch.send(proto::VALIDATED, bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize) -> Vec<Vec<u8>> {
        let mut blocks = vec![Block::genesis()];
        for i in 1..n {
            let b = Block::child_of(&blocks[i - 1].header, vec![vec![i as u8; i]]);
            blocks.push(b);
        }
        blocks.iter().map(Block::encode).collect()
    }

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlockStore::open(dir.path()).unwrap();
        let blocks = chain(5);
        for b in &blocks {
            store.append(b).unwrap();
        }
        for (i, b) in blocks.iter().enumerate() {
            assert_eq!(&store.get_block(i as u64).unwrap(), b);
        }
        assert!(matches!(store.get_block(5), Err(BlockStoreError::NotFound)));
    }

    #[test]
    fn gap_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlockStore::open(dir.path()).unwrap();
        let blocks = chain(3);
        store.append(&blocks[0]).unwrap();
        assert!(matches!(
            store.append(&blocks[2]),
            Err(BlockStoreError::GapDetected { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn snapshots_pick_latest() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlockStore::open(dir.path()).unwrap();
        assert!(store.latest_snapshot().unwrap().is_none());
        store.put_snapshot(5, b"five").unwrap();
        store.put_snapshot(12, b"twelve").unwrap();
        assert_eq!(store.latest_snapshot().unwrap(), Some((12, b"twelve".to_vec())));
    }
}
