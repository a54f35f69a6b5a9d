//! Single-node total-order log, reached over the transport.
//!
//! Each channel is an append-only sequence of records with dense offsets from
//! 0. Publishers get the assigned offset back; subscribers receive every
//! record from a starting offset onward, blocking for new ones.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::proto;
use crate::transport::{Channel, ListenerCloser, Mode, Network, TransportError};

#[derive(Debug, Error)]
pub enum LogError {
    #[error("ordering log unavailable")]
    LogUnavailable,
    #[error("log storage: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("unexpected log reply type {0:#06x}")]
    Protocol(u16),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub offset: u64,
    pub payload: Arc<[u8]>,
}

#[derive(Default)]
struct ChannelLog {
    records: Mutex<Vec<Arc<[u8]>>>,
    grew: Condvar,
}

/// The log itself. Appends are serialized per channel.
pub struct OrderingLog {
    channels: Mutex<HashMap<String, Arc<ChannelLog>>>,
    available: AtomicBool,
    closed: AtomicBool,
    segment: Option<Mutex<BufWriter<File>>>,
}

impl Default for OrderingLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl OrderingLog {
    pub fn in_memory() -> Self {
        Self {
            channels: Mutex::new(HashMap::new()),
            available: AtomicBool::new(true),
            closed: AtomicBool::new(false),
            segment: None,
        }
    }

    /// Also appends every record to `path` (written through to the OS per
    /// record, not fsynced).
    pub fn with_segment(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            segment: Some(Mutex::new(BufWriter::with_capacity(256 * 1024, file))),
            ..Self::in_memory()
        })
    }

    fn channel(&self, name: &str) -> Arc<ChannelLog> {
        let mut channels = self.channels.lock();
        if let Some(c) = channels.get(name) {
            return c.clone();
        }
        let c = Arc::new(ChannelLog::default());
        channels.insert(name.to_string(), c.clone());
        c
    }

    /// Fault injection: while unavailable every call fails with `LogUnavailable`.
    pub fn set_available(&self, up: bool) {
        self.available.store(up, Ordering::SeqCst);
        for c in self.channels.lock().values() {
            c.grew.notify_all();
        }
    }

    /// Wakes all blocked readers and makes further reads fail.
    pub fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        for c in self.channels.lock().values() {
            let _guard = c.records.lock();
            c.grew.notify_all();
        }
    }

    fn check_up(&self) -> Result<(), LogError> {
        if self.available.load(Ordering::SeqCst) && !self.closed.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(LogError::LogUnavailable)
        }
    }

    pub fn publish(&self, channel: &str, payload: &[u8]) -> Result<u64, LogError> {
        self.check_up()?;
        let log = self.channel(channel);
        let record: Arc<[u8]> = Arc::from(payload);
        let mut records = log.records.lock();
        let offset = records.len() as u64;
        if let Some(seg) = &self.segment {
            let mut seg = seg.lock();
            seg.write_all(&offset.to_le_bytes())?;
            seg.write_all(&(channel.len() as u32).to_le_bytes())?;
            seg.write_all(channel.as_bytes())?;
            seg.write_all(&(payload.len() as u32).to_le_bytes())?;
            seg.write_all(payload)?;
            seg.flush()?;
        }
        records.push(record);
        drop(records);
        log.grew.notify_all();
        Ok(offset)
    }

    pub fn len(&self, channel: &str) -> u64 {
        self.channel(channel).records.lock().len() as u64
    }

    /// Up to `max` records from `from`, waiting up to `wait` for at least one.
    pub fn read_from(
        &self,
        channel: &str,
        from: u64,
        max: usize,
        wait: Duration,
    ) -> Result<Vec<LogRecord>, LogError> {
        let log = self.channel(channel);
        let mut records = log.records.lock();
        if (records.len() as u64) <= from {
            self.check_up()?;
            log.grew.wait_for(&mut records, wait);
        }
        self.check_up()?;
        let start = from.min(records.len() as u64) as usize;
        let end = (start + max).min(records.len());
        Ok(records[start..end]
            .iter()
            .enumerate()
            .map(|(i, p)| LogRecord {
                offset: (start + i) as u64,
                payload: p.clone(),
            })
            .collect())
    }

    /// Blocking iterator over records from `from` onward.
    pub fn subscribe_local(self: &Arc<Self>, channel: &str, from: u64) -> LocalSubscription {
        LocalSubscription {
            log: self.clone(),
            channel: channel.to_string(),
            next: from,
            buffered: Vec::new().into_iter(),
        }
    }
}

pub struct LocalSubscription {
    log: Arc<OrderingLog>,
    channel: String,
    next: u64,
    buffered: std::vec::IntoIter<LogRecord>,
}

impl Iterator for LocalSubscription {
    type Item = Result<LogRecord, LogError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(r) = self.buffered.next() {
                self.next = r.offset + 1;
                return Some(Ok(r));
            }
            match self.log.read_from(&self.channel, self.next, 1024, Duration::from_millis(100)) {
                Ok(batch) => self.buffered = batch.into_iter(),
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

/// Network front end of an [`OrderingLog`].
pub struct LogServer {
    closer: ListenerCloser,
    log: Arc<OrderingLog>,
}

impl LogServer {
    pub fn start(net: &Network, node_id: &str, mode: Mode, log: Arc<OrderingLog>) -> Result<Self, LogError> {
        let listener = net.listen(node_id, mode)?;
        let closer = listener.closer(net);
        let served = log.clone();
        thread::Builder::new()
            .name(format!("{node_id}-accept"))
            .spawn(move || {
                while let Ok(ch) = listener.accept() {
                    let log = served.clone();
                    thread::spawn(move || serve_connection(ch, log));
                }
            })
            .expect("spawn log acceptor");
        Ok(Self { closer, log })
    }

    pub fn log(&self) -> &Arc<OrderingLog> {
        &self.log
    }

    pub fn shutdown(&self) {
        self.closer.close();
        self.log.close();
    }
}

impl Drop for LogServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(mut ch: Channel, log: Arc<OrderingLog>) {
    loop {
        let Ok(msg) = ch.recv() else { return };
        match msg.msg_type {
            proto::PUBLISH => {
                let reply = proto::decode_publish(msg.body())
                    .map_err(|_| LogError::Protocol(msg.msg_type))
                    .and_then(|(chan, payload)| log.publish(chan, payload));
                let sent = match reply {
                    Ok(offset) => ch.send(proto::OFFSET, &proto::u64_body(offset)),
                    Err(_) => ch.send(proto::LOG_ERROR, &[]),
                };
                if sent.is_err() {
                    return;
                }
            }
            proto::SUBSCRIBE => {
                let Ok((chan, from)) = proto::decode_subscribe(msg.body()) else {
                    let _ = ch.send(proto::LOG_ERROR, &[]);
                    return;
                };
                stream_records(ch, &log, &chan, from);
                return;
            }
            _ => {
                let _ = ch.send(proto::LOG_ERROR, &[]);
                return;
            }
        }
    }
}

fn stream_records(ch: Channel, log: &OrderingLog, chan: &str, mut next: u64) {
    let (mut tx, _rx) = ch.split();
    loop {
        match log.read_from(chan, next, 256, Duration::from_millis(100)) {
            Ok(batch) => {
                for r in batch {
                    if tx.send(proto::RECORD, &proto::encode_record(r.offset, &r.payload)).is_err() {
                        return;
                    }
                    next = r.offset + 1;
                }
            }
            Err(LogError::LogUnavailable) if !log.closed.load(Ordering::SeqCst) => {
                thread::sleep(Duration::from_millis(10));
            }
            Err(_) => {
                let _ = tx.send(proto::LOG_ERROR, &[]);
                return;
            }
        }
    }
}

/// Publisher connection to a log service.
pub struct LogClient {
    ch: Channel,
}

impl LogClient {
    pub fn connect(net: &Network, log_node: &str) -> Result<Self, LogError> {
        Ok(Self {
            ch: net.connect(log_node)?,
        })
    }

    pub fn publish(&mut self, channel: &str, payload: &[u8]) -> Result<u64, LogError> {
        let reply = self.ch.call(proto::PUBLISH, &proto::encode_publish(channel, payload))?;
        match reply.msg_type {
            proto::OFFSET => proto::parse_u64(reply.body()).map_err(|_| LogError::Protocol(reply.msg_type)),
            proto::LOG_ERROR => Err(LogError::LogUnavailable),
            other => Err(LogError::Protocol(other)),
        }
    }

    pub fn subscribe(net: &Network, log_node: &str, channel: &str, from: u64) -> Result<Subscription, LogError> {
        let mut ch = net.connect(log_node)?;
        ch.send(proto::SUBSCRIBE, &proto::encode_subscribe(channel, from))?;
        Ok(Subscription { ch })
    }
}

/// Remote subscription stream.
pub struct Subscription {
    ch: Channel,
}

impl Subscription {
    pub fn next_record(&mut self) -> Result<LogRecord, LogError> {
        let msg = self.ch.recv()?;
        match msg.msg_type {
            proto::RECORD => {
                let (offset, payload) =
                    proto::decode_record(msg.body()).map_err(|_| LogError::Protocol(msg.msg_type))?;
                Ok(LogRecord {
                    offset,
                    payload: Arc::from(payload),
                })
            }
            proto::LOG_ERROR => Err(LogError::LogUnavailable),
            other => Err(LogError::Protocol(other)),
        }
    }
}

impl Iterator for Subscription {
    type Item = Result<LogRecord, LogError>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_record())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_offsets() {
        let log = OrderingLog::in_memory();
        for i in 0..3 {
            assert_eq!(log.publish("ch", b"x").unwrap(), i);
        }
        assert_eq!(log.publish("other", b"x").unwrap(), 0);
    }

    #[test]
    fn unavailable_log_rejects() {
        let log = OrderingLog::in_memory();
        log.set_available(false);
        assert!(matches!(log.publish("ch", b"x"), Err(LogError::LogUnavailable)));
        log.set_available(true);
        assert_eq!(log.publish("ch", b"x").unwrap(), 0);
    }

    #[test]
    fn local_subscription_sees_later_publish() {
        let log = Arc::new(OrderingLog::in_memory());
        let mut sub = log.subscribe_local("ch", 0);
        let l2 = log.clone();
        let h = thread::spawn(move || {
            thread::sleep(Duration::from_millis(20));
            l2.publish("ch", b"late").unwrap();
        });
        let r = sub.next().unwrap().unwrap();
        assert_eq!((r.offset, &r.payload[..]), (0, &b"late"[..]));
        h.join().unwrap();
    }

    #[test]
    fn segment_file_receives_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.seg");
        let log = OrderingLog::with_segment(&path).unwrap();
        log.publish("ch", &[7; 100]).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 8 + 4 + 2 + 4 + 100);
    }
}
