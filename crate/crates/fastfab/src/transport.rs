//! Framed, ordered, reliable channels between nodes.
//!
//! Every message is `u16 type ‖ u32 len ‖ body` (little-endian) in both
//! modes. In-process channels pass the framed bytes over a bounded queue; TCP
//! channels write the same bytes to a socket.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam::channel::{self as cb, RecvTimeoutError};
use parking_lot::RwLock;
use thiserror::Error;

pub const FRAME_HEADER_LEN: usize = 6;
/// Largest body accepted from a socket.
pub const MAX_BODY_LEN: usize = 512 * 1024 * 1024;

const INPROC_QUEUE: usize = 4096;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer {0} is not reachable")]
    PeerUnreachable(String),
    #[error("channel closed")]
    ChannelClosed,
    #[error("frame body of {0} bytes exceeds limit")]
    FrameTooLarge(usize),
    #[error("transport I/O: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    InProc,
    Tcp,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::InProc => "inproc",
            Mode::Tcp => "tcp",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inproc" | "in-process" | "memory" => Ok(Mode::InProc),
            "tcp" => Ok(Mode::Tcp),
            other => Err(format!("unknown transport mode {other:?}")),
        }
    }
}

/// A received message. The body is a view into the received frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub msg_type: u16,
    frame: Vec<u8>,
}

impl Message {
    pub fn body(&self) -> &[u8] {
        &self.frame[FRAME_HEADER_LEN..]
    }

    pub fn into_body(mut self) -> Vec<u8> {
        self.frame.drain(..FRAME_HEADER_LEN);
        self.frame
    }
}

pub fn encode_frame(msg_type: u16, body: &[u8]) -> Vec<u8> {
    let mut frame = Vec::with_capacity(FRAME_HEADER_LEN + body.len());
    frame.extend_from_slice(&msg_type.to_le_bytes());
    frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
    frame.extend_from_slice(body);
    frame
}

fn parse_header(h: [u8; FRAME_HEADER_LEN]) -> (u16, usize) {
    (
        u16::from_le_bytes([h[0], h[1]]),
        u32::from_le_bytes([h[2], h[3], h[4], h[5]]) as usize,
    )
}

pub enum ChannelSender {
    InProc(cb::Sender<Vec<u8>>),
    Tcp(BufWriter<TcpStream>),
}

impl ChannelSender {
    pub fn send(&mut self, msg_type: u16, body: &[u8]) -> Result<(), TransportError> {
        match self {
            ChannelSender::InProc(tx) => tx
                .send(encode_frame(msg_type, body))
                .map_err(|_| TransportError::ChannelClosed),
            ChannelSender::Tcp(w) => {
                let mut header = [0u8; FRAME_HEADER_LEN];
                header[..2].copy_from_slice(&msg_type.to_le_bytes());
                header[2..].copy_from_slice(&(body.len() as u32).to_le_bytes());
                w.write_all(&header)
                    .and_then(|_| w.write_all(body))
                    .and_then(|_| w.flush())
                    .map_err(closed_or_io)
            }
        }
    }
}

pub enum ChannelReceiver {
    InProc(cb::Receiver<Vec<u8>>),
    Tcp(BufReader<TcpStream>),
}

impl ChannelReceiver {
    pub fn recv(&mut self) -> Result<Message, TransportError> {
        match self {
            ChannelReceiver::InProc(rx) => {
                let frame = rx.recv().map_err(|_| TransportError::ChannelClosed)?;
                Ok(Message {
                    msg_type: parse_header(frame[..FRAME_HEADER_LEN].try_into().unwrap()).0,
                    frame,
                })
            }
            ChannelReceiver::Tcp(r) => {
                let mut header = [0u8; FRAME_HEADER_LEN];
                r.read_exact(&mut header).map_err(closed_or_io)?;
                let (msg_type, len) = parse_header(header);
                if len > MAX_BODY_LEN {
                    return Err(TransportError::FrameTooLarge(len));
                }
                let mut frame = vec![0u8; FRAME_HEADER_LEN + len];
                frame[..FRAME_HEADER_LEN].copy_from_slice(&header);
                r.read_exact(&mut frame[FRAME_HEADER_LEN..]).map_err(closed_or_io)?;
                Ok(Message { msg_type, frame })
            }
        }
    }

    /// In-process receivers honour the timeout; TCP receivers set a socket
    /// read timeout and report expiry as `Ok(None)`.
    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Message>, TransportError> {
        match self {
            ChannelReceiver::InProc(rx) => match rx.recv_timeout(timeout) {
                Ok(frame) => Ok(Some(Message {
                    msg_type: parse_header(frame[..FRAME_HEADER_LEN].try_into().unwrap()).0,
                    frame,
                })),
                Err(RecvTimeoutError::Timeout) => Ok(None),
                Err(RecvTimeoutError::Disconnected) => Err(TransportError::ChannelClosed),
            },
            ChannelReceiver::Tcp(r) => {
                // Only safe when no partial frame is buffered; callers use it on
                // request/response boundaries.
                if !r.buffer().is_empty() {
                    return self.recv().map(Some);
                }
                let ChannelReceiver::Tcp(r) = self else { unreachable!() };
                r.get_ref().set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
                let mut first = [0u8; 1];
                let res = r.read(&mut first);
                r.get_ref().set_read_timeout(None)?;
                match res {
                    Ok(0) => Err(TransportError::ChannelClosed),
                    Ok(_) => {
                        let mut rest = [0u8; FRAME_HEADER_LEN - 1];
                        r.read_exact(&mut rest).map_err(closed_or_io)?;
                        let mut header = [0u8; FRAME_HEADER_LEN];
                        header[0] = first[0];
                        header[1..].copy_from_slice(&rest);
                        let (msg_type, len) = parse_header(header);
                        if len > MAX_BODY_LEN {
                            return Err(TransportError::FrameTooLarge(len));
                        }
                        let mut frame = vec![0u8; FRAME_HEADER_LEN + len];
                        frame[..FRAME_HEADER_LEN].copy_from_slice(&header);
                        r.read_exact(&mut frame[FRAME_HEADER_LEN..]).map_err(closed_or_io)?;
                        Ok(Some(Message { msg_type, frame }))
                    }
                    Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => Ok(None),
                    Err(e) => Err(closed_or_io(e)),
                }
            }
        }
    }
}

fn closed_or_io(e: io::Error) -> TransportError {
    match e.kind() {
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::BrokenPipe
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::NotConnected => TransportError::ChannelClosed,
        _ => TransportError::Io(e),
    }
}

/// Bidirectional conversation with one peer.
pub struct Channel {
    tx: ChannelSender,
    rx: ChannelReceiver,
    mode: Mode,
}

impl fmt::Debug for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Channel").field("mode", &self.mode).finish()
    }
}

impl Channel {
    /// Two connected in-process endpoints.
    pub fn inproc_pair() -> (Channel, Channel) {
        let (a_tx, a_rx) = cb::bounded(INPROC_QUEUE);
        let (b_tx, b_rx) = cb::bounded(INPROC_QUEUE);
        (
            Channel {
                tx: ChannelSender::InProc(a_tx),
                rx: ChannelReceiver::InProc(b_rx),
                mode: Mode::InProc,
            },
            Channel {
                tx: ChannelSender::InProc(b_tx),
                rx: ChannelReceiver::InProc(a_rx),
                mode: Mode::InProc,
            },
        )
    }

    pub fn from_tcp(stream: TcpStream) -> io::Result<Channel> {
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        Ok(Channel {
            tx: ChannelSender::Tcp(BufWriter::with_capacity(64 * 1024, stream)),
            rx: ChannelReceiver::Tcp(BufReader::with_capacity(64 * 1024, reader)),
            mode: Mode::Tcp,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn send(&mut self, msg_type: u16, body: &[u8]) -> Result<(), TransportError> {
        self.tx.send(msg_type, body)
    }

    pub fn recv(&mut self) -> Result<Message, TransportError> {
        self.rx.recv()
    }

    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Message>, TransportError> {
        self.rx.recv_timeout(timeout)
    }

    /// Sends a request and waits for the reply.
    pub fn call(&mut self, msg_type: u16, body: &[u8]) -> Result<Message, TransportError> {
        self.send(msg_type, body)?;
        self.recv()
    }

    pub fn split(self) -> (ChannelSender, ChannelReceiver) {
        (self.tx, self.rx)
    }

    /// Closes both directions; the peer's next `recv` reports `ChannelClosed`.
    pub fn close(self) {
        if let ChannelSender::Tcp(w) = &self.tx {
            let _ = w.get_ref().shutdown(Shutdown::Both);
        }
    }
}

#[derive(Clone)]
enum Endpoint {
    InProc(cb::Sender<Channel>),
    Tcp(SocketAddr),
}

/// Address book mapping node ids to listeners.
#[derive(Clone, Default)]
pub struct Network {
    nodes: Arc<RwLock<HashMap<String, Endpoint>>>,
    binds: Arc<RwLock<HashMap<String, SocketAddr>>>,
}

impl fmt::Debug for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network")
            .field("nodes", &self.nodes.read().keys().cloned().collect::<Vec<_>>())
            .finish()
    }
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `node_id` and returns its listener. TCP listeners bind to
    /// `addr` (port 0 picks a free port).
    pub fn listen_on(&self, node_id: &str, mode: Mode, addr: Option<SocketAddr>) -> Result<Listener, TransportError> {
        let (endpoint, kind) = match mode {
            Mode::InProc => {
                let (tx, rx) = cb::unbounded();
                (Endpoint::InProc(tx), ListenerKind::InProc(rx))
            }
            Mode::Tcp => {
                let bind = addr.unwrap_or_else(|| SocketAddr::from(([127, 0, 0, 1], 0)));
                let listener = TcpListener::bind(bind)?;
                let local = listener.local_addr()?;
                (Endpoint::Tcp(local), ListenerKind::Tcp(listener, local))
            }
        };
        self.nodes.write().insert(node_id.to_string(), endpoint);
        Ok(Listener {
            node_id: node_id.to_string(),
            kind,
            closed: Arc::new(AtomicBool::new(false)),
        })
    }

    /// Binds to the address given by [`bind_at`](Self::bind_at), if any.
    pub fn listen(&self, node_id: &str, mode: Mode) -> Result<Listener, TransportError> {
        let addr = self.binds.read().get(node_id).copied();
        self.listen_on(node_id, mode, addr)
    }

    /// Makes later TCP listeners for `node_id` bind to `addr`.
    pub fn bind_at(&self, node_id: &str, addr: SocketAddr) {
        self.binds.write().insert(node_id.to_string(), addr);
    }

    /// Records an external TCP address for `node_id`.
    pub fn register_tcp(&self, node_id: &str, addr: SocketAddr) {
        self.nodes.write().insert(node_id.to_string(), Endpoint::Tcp(addr));
    }

    pub fn address_of(&self, node_id: &str) -> Option<SocketAddr> {
        match self.nodes.read().get(node_id) {
            Some(Endpoint::Tcp(a)) => Some(*a),
            _ => None,
        }
    }

    pub fn contains(&self, node_id: &str) -> bool {
        self.nodes.read().contains_key(node_id)
    }

    pub fn connect(&self, peer: &str) -> Result<Channel, TransportError> {
        let endpoint = self
            .nodes
            .read()
            .get(peer)
            .cloned()
            .ok_or_else(|| TransportError::PeerUnreachable(peer.to_string()))?;
        match endpoint {
            Endpoint::InProc(incoming) => {
                let (ours, theirs) = Channel::inproc_pair();
                incoming
                    .send(theirs)
                    .map_err(|_| TransportError::PeerUnreachable(peer.to_string()))?;
                Ok(ours)
            }
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(|_| TransportError::PeerUnreachable(peer.to_string()))?;
                Ok(Channel::from_tcp(stream)?)
            }
        }
    }

    /// Removes `node_id`; new connections to it fail.
    pub fn deregister(&self, node_id: &str) {
        self.nodes.write().remove(node_id);
    }
}

enum ListenerKind {
    InProc(cb::Receiver<Channel>),
    Tcp(TcpListener, SocketAddr),
}

pub struct Listener {
    node_id: String,
    kind: ListenerKind,
    closed: Arc<AtomicBool>,
}

/// Wakes a blocked [`Listener::accept`] and makes it return `ChannelClosed`.
#[derive(Clone)]
pub struct ListenerCloser {
    closed: Arc<AtomicBool>,
    tcp: Option<SocketAddr>,
    net: Network,
    node_id: String,
}

impl ListenerCloser {
    pub fn close(&self) {
        if self.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        self.net.deregister(&self.node_id);
        if let Some(addr) = self.tcp {
            let _ = TcpStream::connect_timeout(&addr, Duration::from_millis(200));
        }
    }
}

impl Listener {
    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        match &self.kind {
            ListenerKind::Tcp(_, a) => Some(*a),
            ListenerKind::InProc(_) => None,
        }
    }

    pub fn closer(&self, net: &Network) -> ListenerCloser {
        ListenerCloser {
            closed: self.closed.clone(),
            tcp: self.local_addr(),
            net: net.clone(),
            node_id: self.node_id.clone(),
        }
    }

    pub fn accept(&self) -> Result<Channel, TransportError> {
        loop {
            if self.closed.load(Ordering::SeqCst) {
                return Err(TransportError::ChannelClosed);
            }
            match &self.kind {
                ListenerKind::InProc(rx) => match rx.recv_timeout(Duration::from_millis(50)) {
                    Ok(ch) => return Ok(ch),
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => return Err(TransportError::ChannelClosed),
                },
                ListenerKind::Tcp(l, _) => {
                    let (stream, _) = l.accept()?;
                    if self.closed.load(Ordering::SeqCst) {
                        return Err(TransportError::ChannelClosed);
                    }
                    return Ok(Channel::from_tcp(stream)?);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    fn echo_server(net: &Network, id: &str, mode: Mode) -> ListenerCloser {
        let listener = net.listen(id, mode).unwrap();
        let closer = listener.closer(net);
        thread::spawn(move || {
            while let Ok(mut ch) = listener.accept() {
                thread::spawn(move || {
                    while let Ok(m) = ch.recv() {
                        if ch.send(m.msg_type, m.body()).is_err() {
                            break;
                        }
                    }
                });
            }
        });
        closer
    }

    #[test]
    fn ordered_delivery_both_modes() {
        for mode in [Mode::InProc, Mode::Tcp] {
            let net = Network::new();
            let closer = echo_server(&net, "echo", mode);
            let mut ch = net.connect("echo").unwrap();
            for i in 0..3u16 {
                ch.send(i, &[i as u8; 5]).unwrap();
            }
            for i in 0..3u16 {
                let m = ch.recv().unwrap();
                assert_eq!(m.msg_type, i);
                assert_eq!(m.body(), &[i as u8; 5]);
            }
            closer.close();
        }
    }

    #[test]
    fn unknown_peer_unreachable() {
        let net = Network::new();
        assert!(matches!(net.connect("ghost"), Err(TransportError::PeerUnreachable(_))));
    }

    #[test]
    fn closed_peer_reports_channel_closed() {
        for mode in [Mode::InProc, Mode::Tcp] {
            let net = Network::new();
            let listener = net.listen("srv", mode).unwrap();
            let mut client = net.connect("srv").unwrap();
            let server = listener.accept().unwrap();
            server.close();
            assert!(matches!(client.recv(), Err(TransportError::ChannelClosed)));
        }
    }

    #[test]
    fn recv_timeout_expires() {
        for mode in [Mode::InProc, Mode::Tcp] {
            let net = Network::new();
            let listener = net.listen("srv", mode).unwrap();
            let mut client = net.connect("srv").unwrap();
            let mut server = listener.accept().unwrap();
            assert!(client.recv_timeout(Duration::from_millis(20)).unwrap().is_none());
            server.send(9, b"late").unwrap();
            let m = client.recv_timeout(Duration::from_secs(5)).unwrap().unwrap();
            assert_eq!((m.msg_type, m.into_body()), (9, b"late".to_vec()));
        }
    }

    #[test]
    fn frame_layout() {
        assert_eq!(encode_frame(0x0102, b"xy"), [2, 1, 2, 0, 0, 0, b'x', b'y']);
    }
}
