//! Allocation-only core of the fastfab ledger.
//!
//! Everything here is pure computation over byte strings: the layered wire
//! format, signatures and endorsement policies, blocks and their hash chain,
//! the versioned world state, read-set (MVCC) validation and the transfer
//! chaincode. Threads, sockets and files live in the `fastfab` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod chaincode;
pub mod codec;
pub mod identity;
pub mod ledger;
pub mod mvcc;
pub mod state;
pub mod validate;
pub mod wire;

pub use codec::WireError;
pub use identity::{
    check_policy, EndorsementPolicy, NodeIdentity, PublicKey, Registry, Role, SignatureScheme, SigningKey,
};
pub use ledger::{link_check, Block, ValidationFlag};
pub use state::{StateEntry, StateRead, StateWrite, VersionedMap};
pub use wire::{
    content_hash, decode_layer, encode_envelope, BlockHeader, Decoded, Digest, Endorsement, Layer, ReadWriteSet,
    TxHeader, Version,
};

/// Channel every node in this build serves.
pub const DEFAULT_CHANNEL: &str = "mychannel";
