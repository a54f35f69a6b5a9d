//! Layered transaction encoding.
//!
//! A transaction travels as nested frames, each of which can be peeled on its
//! own while the layers below it stay opaque:
//!
//! ```text
//! Envelope := u32 sig_len ‖ sig ‖ u32 payload_len ‖ payload
//! Payload  := u32 header_len ‖ header ‖ u32 data_len ‖ data
//! Header   := u32 txid_len ‖ txid ‖ u32 chan_len ‖ chan ‖ u32 creator_len ‖ creator ‖ u64 nonce
//! Data     := rwset ‖ u32 n_endorsements ‖ endorsements ‖ u32 pad_len ‖ padding
//! RWSet    := u32 n_reads ‖ (u32 key_len ‖ key ‖ u64 block_num ‖ u32 tx_num)*
//!             ‖ u32 n_writes ‖ (u32 key_len ‖ key ‖ u32 val_len ‖ val)*
//! Endorsement := u32 endorser_len ‖ endorser ‖ u32 sig_len ‖ sig
//! ```
//!
//! The client signs the payload bytes; each endorser signs the rwset bytes
//! followed by the padding bytes.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use sha2::{Digest as _, Sha256};

use crate::codec::{Reader, WireError, Writer};
use crate::identity::SigningKey;

pub type Digest = [u8; 32];

/// SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> Digest {
    Sha256::digest(bytes).into()
}

/// Position of a committed write: `(block number, index within block)`.
///
/// `(0, 0)` is reserved for state created at genesis and is also the version a
/// transaction records when it reads a key that does not exist yet.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Version {
    pub block_num: u64,
    pub tx_num: u32,
}

impl Version {
    pub const GENESIS: Version = Version {
        block_num: 0,
        tx_num: 0,
    };

    pub const fn new(block_num: u64, tx_num: u32) -> Self {
        Self { block_num, tx_num }
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.block_num, self.tx_num)
    }
}

/// Lowercase hex of `sha256(creator ‖ nonce_le)`.
pub fn derive_tx_id(creator: &str, nonce: u64) -> String {
    let mut h = Sha256::new();
    h.update(creator.as_bytes());
    h.update(nonce.to_le_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TxHeader {
    pub tx_id: String,
    pub channel_id: String,
    pub creator: String,
    pub nonce: u64,
}

impl TxHeader {
    pub fn new(channel_id: impl Into<String>, creator: impl Into<String>, nonce: u64) -> Self {
        let creator = creator.into();
        Self {
            tx_id: derive_tx_id(&creator, nonce),
            channel_id: channel_id.into(),
            creator,
            nonce,
        }
    }

    /// True if `tx_id` is the derived id for `(creator, nonce)`.
    pub fn tx_id_matches(&self) -> bool {
        self.tx_id == derive_tx_id(&self.creator, self.nonce)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(
            24 + self.tx_id.len() + self.channel_id.len() + self.creator.len(),
        );
        w.str(&self.tx_id)
            .str(&self.channel_id)
            .str(&self.creator)
            .u64(self.nonce);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let header = Self {
            tx_id: r.string()?,
            channel_id: r.string()?,
            creator: r.string()?,
            nonce: r.u64()?,
        };
        r.finish()?;
        Ok(header)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct ReadWriteSet {
    pub reads: Vec<(String, Version)>,
    pub writes: Vec<(String, Vec<u8>)>,
}

impl ReadWriteSet {
    /// Read keys unique and write keys unique.
    pub fn is_well_formed(&self) -> bool {
        fn unique<'a>(keys: impl Iterator<Item = &'a str>) -> bool {
            let mut seen = hashbrown::HashSet::new();
            keys.into_iter().all(|k| seen.insert(k))
        }
        unique(self.reads.iter().map(|(k, _)| k.as_str()))
            && unique(self.writes.iter().map(|(k, _)| k.as_str()))
    }

    pub fn encode_into(&self, w: &mut Writer) {
        w.u32(self.reads.len() as u32);
        for (key, version) in &self.reads {
            w.str(key).u64(version.block_num).u32(version.tx_num);
        }
        w.u32(self.writes.len() as u32);
        for (key, value) in &self.writes {
            w.str(key).bytes(value);
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }

    fn read_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let n_reads = r.u32()? as usize;
        let mut reads = Vec::with_capacity(n_reads.min(r.remaining() / 16));
        for _ in 0..n_reads {
            let key = r.string()?;
            let version = Version::new(r.u64()?, r.u32()?);
            reads.push((key, version));
        }
        let n_writes = r.u32()? as usize;
        let mut writes = Vec::with_capacity(n_writes.min(r.remaining() / 8));
        for _ in 0..n_writes {
            let key = r.string()?;
            let value = r.bytes()?.to_vec();
            writes.push((key, value));
        }
        Ok(Self { reads, writes })
    }

    fn skip(r: &mut Reader<'_>) -> Result<(), WireError> {
        let n_reads = r.u32()?;
        for _ in 0..n_reads {
            r.bytes()?;
            r.take(12)?;
        }
        let n_writes = r.u32()?;
        for _ in 0..n_writes {
            r.bytes()?;
            r.bytes()?;
        }
        Ok(())
    }

    /// Decodes the rwset at the front of a data section.
    pub fn decode_from_data(data: &[u8]) -> Result<Self, WireError> {
        Self::read_from(&mut Reader::new(data))
    }

    /// Decodes a standalone rwset frame (no trailing bytes allowed).
    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let rw = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(rw)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Endorsement {
    pub endorser: String,
    pub signature: Vec<u8>,
}

/// Bytes an endorser signs: the encoded rwset followed by `padding_len` zeros.
pub fn endorsement_message(rwset_bytes: &[u8], padding: &[u8]) -> Vec<u8> {
    let mut msg = Vec::with_capacity(rwset_bytes.len() + padding.len());
    msg.extend_from_slice(rwset_bytes);
    msg.extend_from_slice(padding);
    msg
}

/// Signs `rwset` plus `padding_len` zero bytes.
pub fn endorse_rwset(
    endorser: impl Into<String>,
    key: &SigningKey,
    rwset: &ReadWriteSet,
    padding_len: usize,
) -> Endorsement {
    let mut msg = rwset.encode();
    msg.resize(msg.len() + padding_len, 0);
    Endorsement {
        endorser: endorser.into(),
        signature: key.sign(&msg),
    }
}

/// Endorsements plus the padding that trails them in a data section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndorsementSection {
    pub endorsements: Vec<Endorsement>,
    pub padding_len: u32,
}

impl EndorsementSection {
    fn read_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let n = r.u32()? as usize;
        let mut endorsements = Vec::with_capacity(n.min(r.remaining() / 8));
        for _ in 0..n {
            endorsements.push(Endorsement {
                endorser: r.string()?,
                signature: r.bytes()?.to_vec(),
            });
        }
        let padding_len = r.bytes()?.len() as u32;
        Ok(Self {
            endorsements,
            padding_len,
        })
    }

    /// Skips the rwset at the front of `data` and decodes the rest.
    pub fn decode_from_data(data: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(data);
        ReadWriteSet::skip(&mut r)?;
        let section = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(section)
    }
}

/// Borrowed views of the three parts of a data section.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataSections<'a> {
    pub rwset: &'a [u8],
    /// `u32 n ‖ endorsements`, undecoded.
    pub endorsements: &'a [u8],
    /// Padding body without its length prefix.
    pub padding: &'a [u8],
}

impl<'a> DataSections<'a> {
    pub fn split(data: &'a [u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(data);
        ReadWriteSet::skip(&mut r)?;
        let rw_end = r.position();
        let n = r.u32()?;
        for _ in 0..n {
            r.bytes()?;
            r.bytes()?;
        }
        let end_end = r.position();
        let padding = r.bytes()?;
        r.finish()?;
        Ok(Self {
            rwset: &data[..rw_end],
            endorsements: &data[rw_end..end_end],
            padding,
        })
    }

    /// The message each endorsement must sign.
    pub fn signed_message(&self) -> Vec<u8> {
        endorsement_message(self.rwset, self.padding)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload {
    pub header: Vec<u8>,
    pub data: Vec<u8>,
}

impl Payload {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(8 + self.header.len() + self.data.len());
        w.bytes(&self.header).bytes(&self.data);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let header = r.bytes()?.to_vec();
        let data = r.bytes()?.to_vec();
        r.finish()?;
        Ok(Self { header, data })
    }
}

/// Outermost layer: client signature over opaque payload bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEnvelope {
    pub signature: Vec<u8>,
    pub payload: Vec<u8>,
}

impl RawEnvelope {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(8 + self.signature.len() + self.payload.len());
        w.bytes(&self.signature).bytes(&self.payload);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let signature = r.bytes()?.to_vec();
        let payload = r.bytes()?.to_vec();
        r.finish()?;
        Ok(Self { signature, payload })
    }
}

/// Builds the data section for `rwset`, `endorsements` and `padding_len` zeros.
pub fn encode_data(rwset: &ReadWriteSet, endorsements: &[Endorsement], padding_len: usize) -> Vec<u8> {
    let mut w = Writer::new();
    rwset.encode_into(&mut w);
    w.u32(endorsements.len() as u32);
    for e in endorsements {
        w.str(&e.endorser).bytes(&e.signature);
    }
    w.zeros(padding_len);
    w.finish()
}

/// Encodes and signs a complete transaction envelope.
pub fn encode_envelope(
    header: &TxHeader,
    rwset: &ReadWriteSet,
    endorsements: &[Endorsement],
    padding_len: usize,
    signer: &SigningKey,
) -> Vec<u8> {
    debug_assert!(!endorsements.is_empty());
    let payload = Payload {
        header: header.encode(),
        data: encode_data(rwset, endorsements, padding_len),
    }
    .encode();
    RawEnvelope {
        signature: signer.sign(&payload),
        payload,
    }
    .encode()
}

/// Peels the outer layers and returns only the header.
pub fn peek_header(envelope: &[u8]) -> Result<TxHeader, WireError> {
    let mut r = Reader::new(envelope);
    r.bytes()?;
    let payload = r.bytes()?;
    r.finish()?;
    let mut p = Reader::new(payload);
    let header = p.bytes()?;
    TxHeader::decode(header)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    /// Input: envelope bytes.
    Envelope,
    /// Input: payload bytes from the envelope.
    Payload,
    /// Input: header bytes from the payload.
    Header,
    /// Input: data bytes from the payload.
    RwSet,
    /// Input: data bytes from the payload.
    Endorsements,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Envelope(RawEnvelope),
    Payload(Payload),
    Header(TxHeader),
    RwSet(ReadWriteSet),
    Endorsements(EndorsementSection),
}

pub fn decode_layer(bytes: &[u8], layer: Layer) -> Result<Decoded, WireError> {
    Ok(match layer {
        Layer::Envelope => Decoded::Envelope(RawEnvelope::decode(bytes)?),
        Layer::Payload => Decoded::Payload(Payload::decode(bytes)?),
        Layer::Header => Decoded::Header(TxHeader::decode(bytes)?),
        Layer::RwSet => Decoded::RwSet(ReadWriteSet::decode_from_data(bytes)?),
        Layer::Endorsements => Decoded::Endorsements(EndorsementSection::decode_from_data(bytes)?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockHeader {
    pub number: u64,
    pub prev_hash: Digest,
    pub data_hash: Digest,
}

impl BlockHeader {
    pub const ENCODED_LEN: usize = 8 + 32 + 32;

    pub fn encode(&self) -> [u8; Self::ENCODED_LEN] {
        let mut out = [0u8; Self::ENCODED_LEN];
        out[..8].copy_from_slice(&self.number.to_le_bytes());
        out[8..40].copy_from_slice(&self.prev_hash);
        out[40..].copy_from_slice(&self.data_hash);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let header = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(header)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            number: r.u64()?,
            prev_hash: r.array()?,
            data_hash: r.array()?,
        })
    }

    pub fn hash(&self) -> Digest {
        content_hash(&self.encode())
    }
}

/// Hash over the concatenated envelope bytes of a block.
pub fn data_hash<B: AsRef<[u8]>>(envelopes: &[B]) -> Digest {
    let mut h = Sha256::new();
    for env in envelopes {
        h.update(env.as_ref());
    }
    h.finalize().into()
}
