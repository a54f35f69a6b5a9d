//! Blocks, validation flags and hash-chain links.

use alloc::vec::Vec;
use core::fmt;

use crate::codec::{Reader, WireError, Writer};
use crate::identity::{PublicKey, SigningKey};
use crate::wire::{data_hash, BlockHeader, Digest};

/// Per-transaction commit verdict stored in block metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ValidationFlag {
    Valid = 0,
    BadEnvelopeSig = 1,
    BadEndorsement = 2,
    MvccConflict = 3,
    Malformed = 4,
}

impl ValidationFlag {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => Self::Valid,
            1 => Self::BadEnvelopeSig,
            2 => Self::BadEndorsement,
            3 => Self::MvccConflict,
            4 => Self::Malformed,
            _ => return None,
        })
    }

    pub fn is_valid(self) -> bool {
        self == Self::Valid
    }
}

impl fmt::Display for ValidationFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    pub envelopes: Vec<Vec<u8>>,
    pub orderer_signature: Vec<u8>,
    /// Empty until validated, then one flag per envelope.
    pub flags: Vec<ValidationFlag>,
}

impl Block {
    /// Block 0: zero prev-hash, no envelopes.
    pub fn genesis() -> Self {
        Self::new(0, [0; 32], Vec::new())
    }

    pub fn new(number: u64, prev_hash: Digest, envelopes: Vec<Vec<u8>>) -> Self {
        Self {
            header: BlockHeader {
                number,
                prev_hash,
                data_hash: data_hash(&envelopes),
            },
            envelopes,
            orderer_signature: Vec::new(),
            flags: Vec::new(),
        }
    }

    /// Next block in the chain after `prev`.
    pub fn child_of(prev: &BlockHeader, envelopes: Vec<Vec<u8>>) -> Self {
        Self::new(prev.number + 1, prev.hash(), envelopes)
    }

    pub fn number(&self) -> u64 {
        self.header.number
    }

    pub fn len(&self) -> usize {
        self.envelopes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envelopes.is_empty()
    }

    pub fn sign(&mut self, orderer: &SigningKey) {
        self.orderer_signature = orderer.sign(&self.header.encode());
    }

    pub fn signature_valid(&self, orderer: &PublicKey) -> bool {
        orderer.verify(&self.header.encode(), &self.orderer_signature)
    }

    pub fn data_hash_matches(&self) -> bool {
        self.header.data_hash == data_hash(&self.envelopes)
    }

    pub fn flags_consistent(&self) -> bool {
        self.flags.is_empty() || self.flags.len() == self.envelopes.len()
    }

    pub fn encoded_len(&self) -> usize {
        BlockHeader::ENCODED_LEN
            + 4
            + self.envelopes.iter().map(|e| 4 + e.len()).sum::<usize>()
            + 4
            + self.orderer_signature.len()
            + 4
            + self.flags.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.encoded_len());
        w.raw(&self.header.encode());
        w.u32(self.envelopes.len() as u32);
        for env in &self.envelopes {
            w.bytes(env);
        }
        w.bytes(&self.orderer_signature);
        w.u32(self.flags.len() as u32);
        for f in &self.flags {
            w.u8(*f as u8);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let header = BlockHeader::read_from(&mut r)?;
        let n_env = r.u32()? as usize;
        let mut envelopes = Vec::with_capacity(n_env.min(r.remaining() / 4));
        for _ in 0..n_env {
            envelopes.push(r.bytes()?.to_vec());
        }
        let orderer_signature = r.bytes()?.to_vec();
        let n_flags = r.u32()? as usize;
        let raw_flags = r.take(n_flags)?;
        let flags = raw_flags
            .iter()
            .map(|b| ValidationFlag::from_u8(*b).ok_or(WireError::BadMagic("unknown validation flag")))
            .collect::<Result<Vec<_>, _>>()?;
        r.finish()?;
        let block = Self {
            header,
            envelopes,
            orderer_signature,
            flags,
        };
        if !block.flags_consistent() {
            return Err(WireError::BadMagic("flag count differs from envelope count"));
        }
        Ok(block)
    }
}

/// `next` directly extends `prev`.
pub fn link_check(prev: &BlockHeader, next: &BlockHeader) -> bool {
    next.number == prev.number.wrapping_add(1) && next.prev_hash == prev.hash()
}

/// Checks every consecutive link, returning the index of the first broken one.
pub fn first_broken_link<'a, I>(headers: I) -> Option<usize>
where
    I: IntoIterator<Item = &'a BlockHeader>,
{
    let mut iter = headers.into_iter();
    let mut prev = iter.next()?;
    for (i, next) in iter.enumerate() {
        if !link_check(prev, next) {
            return Some(i + 1);
        }
        prev = next;
    }
    None
}
