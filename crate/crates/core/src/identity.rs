//! Membership registry, signatures and endorsement policies.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use ed25519_dalek::{Signer as _, Verifier as _};
use hmac::{Hmac, Mac as _};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::wire::Endorsement;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SignatureScheme {
    /// Ed25519 signatures.
    Ed25519,
    /// HMAC-SHA256 with the secret held by the registry. Test mode only.
    Mac,
}

impl SignatureScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            SignatureScheme::Ed25519 => "ed25519",
            SignatureScheme::Mac => "mac",
        }
    }
}

impl fmt::Display for SignatureScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SignatureScheme {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ed25519" => Ok(Self::Ed25519),
            "mac" | "test" => Ok(Self::Mac),
            _ => Err(IdentityError::UnknownScheme),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdentityError {
    #[error("node id {0:?} already registered")]
    DuplicateNode(String),
    #[error("public key has the wrong length or encoding")]
    BadPublicKey,
    #[error("unknown signature scheme")]
    UnknownScheme,
    #[error("unknown role")]
    UnknownRole,
    #[error("policy requires {required} of {eligible} endorsers")]
    BadPolicy { required: u32, eligible: usize },
}

#[derive(Clone)]
pub enum SigningKey {
    Ed25519(ed25519_dalek::SigningKey),
    Mac([u8; 32]),
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("SigningKey").field(&self.scheme()).finish()
    }
}

impl SigningKey {
    pub fn from_seed(scheme: SignatureScheme, seed: [u8; 32]) -> Self {
        match scheme {
            SignatureScheme::Ed25519 => Self::Ed25519(ed25519_dalek::SigningKey::from_bytes(&seed)),
            SignatureScheme::Mac => Self::Mac(seed),
        }
    }

    /// Deterministic key for `node_id` under a run seed.
    pub fn derive(scheme: SignatureScheme, run_seed: u64, node_id: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"fastfab-key");
        h.update(run_seed.to_le_bytes());
        h.update(node_id.as_bytes());
        Self::from_seed(scheme, h.finalize().into())
    }

    pub fn scheme(&self) -> SignatureScheme {
        match self {
            Self::Ed25519(_) => SignatureScheme::Ed25519,
            Self::Mac(_) => SignatureScheme::Mac,
        }
    }

    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        match self {
            Self::Ed25519(k) => k.sign(message).to_bytes().to_vec(),
            Self::Mac(secret) => {
                let mut mac = HmacSha256::new_from_slice(secret).expect("hmac takes any key length");
                mac.update(message);
                mac.finalize().into_bytes().to_vec()
            }
        }
    }

    pub fn public(&self) -> PublicKey {
        match self {
            Self::Ed25519(k) => PublicKey::Ed25519(k.verifying_key()),
            Self::Mac(secret) => PublicKey::Mac(*secret),
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub enum PublicKey {
    Ed25519(ed25519_dalek::VerifyingKey),
    Mac([u8; 32]),
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({}:{})", self.scheme(), hex::encode(&self.to_bytes()[..4]))
    }
}

impl PublicKey {
    pub fn scheme(&self) -> SignatureScheme {
        match self {
            Self::Ed25519(_) => SignatureScheme::Ed25519,
            Self::Mac(_) => SignatureScheme::Mac,
        }
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        match self {
            Self::Ed25519(k) => k.to_bytes(),
            Self::Mac(secret) => *secret,
        }
    }

    pub fn from_bytes(scheme: SignatureScheme, bytes: &[u8]) -> Result<Self, IdentityError> {
        let raw: [u8; 32] = bytes.try_into().map_err(|_| IdentityError::BadPublicKey)?;
        match scheme {
            SignatureScheme::Ed25519 => ed25519_dalek::VerifyingKey::from_bytes(&raw)
                .map(Self::Ed25519)
                .map_err(|_| IdentityError::BadPublicKey),
            SignatureScheme::Mac => Ok(Self::Mac(raw)),
        }
    }

    pub fn verify(&self, message: &[u8], signature: &[u8]) -> bool {
        match self {
            Self::Ed25519(k) => {
                let Ok(sig) = ed25519_dalek::Signature::from_slice(signature) else {
                    return false;
                };
                k.verify(message, &sig).is_ok()
            }
            Self::Mac(secret) => {
                let mut mac = HmacSha256::new_from_slice(secret).expect("hmac takes any key length");
                mac.update(message);
                mac.verify_slice(signature).is_ok()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Client,
    Endorser,
    Orderer,
    Committer,
    BlockStore,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Client => "client",
            Role::Endorser => "endorser",
            Role::Orderer => "orderer",
            Role::Committer => "committer",
            Role::BlockStore => "blockstore",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "client" => Ok(Role::Client),
            "endorser" => Ok(Role::Endorser),
            "orderer" => Ok(Role::Orderer),
            "committer" | "peer" => Ok(Role::Committer),
            "blockstore" | "store" => Ok(Role::BlockStore),
            _ => Err(IdentityError::UnknownRole),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeIdentity {
    pub node_id: String,
    pub role: Role,
    pub public_key: PublicKey,
}

/// Immutable-after-startup membership table.
#[derive(Debug, Clone)]
pub struct Registry {
    scheme: SignatureScheme,
    nodes: BTreeMap<String, NodeIdentity>,
}

impl Registry {
    pub fn new(scheme: SignatureScheme) -> Self {
        Self {
            scheme,
            nodes: BTreeMap::new(),
        }
    }

    pub fn scheme(&self) -> SignatureScheme {
        self.scheme
    }

    pub fn register(
        &mut self,
        node_id: impl Into<String>,
        role: Role,
        public_key: PublicKey,
    ) -> Result<(), IdentityError> {
        let node_id = node_id.into();
        if public_key.scheme() != self.scheme {
            return Err(IdentityError::BadPublicKey);
        }
        if self.nodes.contains_key(&node_id) {
            return Err(IdentityError::DuplicateNode(node_id));
        }
        self.nodes.insert(
            node_id.clone(),
            NodeIdentity {
                node_id,
                role,
                public_key,
            },
        );
        Ok(())
    }

    pub fn get(&self, node_id: &str) -> Option<&NodeIdentity> {
        self.nodes.get(node_id)
    }

    pub fn key_of(&self, node_id: &str) -> Option<&PublicKey> {
        self.nodes.get(node_id).map(|n| &n.public_key)
    }

    /// Orderer admission check: the creator exists and is a client.
    pub fn is_authorized_client(&self, creator: &str) -> bool {
        matches!(self.nodes.get(creator), Some(n) if n.role == Role::Client)
    }

    pub fn verify(&self, node_id: &str, message: &[u8], signature: &[u8]) -> bool {
        self.key_of(node_id)
            .is_some_and(|k| k.verify(message, signature))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeIdentity> {
        self.nodes.values()
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &NodeIdentity> {
        self.nodes.values().filter(move |n| n.role == role)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// k-of-n endorsement requirement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndorsementPolicy {
    required: u32,
    eligible: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PolicyFailure {
    #[error("{valid} distinct valid endorsements, policy requires {required}")]
    Insufficient { valid: u32, required: u32 },
}

impl EndorsementPolicy {
    pub fn new<I, S>(required: u32, eligible: I) -> Result<Self, IdentityError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let eligible: BTreeSet<String> = eligible.into_iter().map(Into::into).collect();
        if required == 0 || required as usize > eligible.len() {
            return Err(IdentityError::BadPolicy {
                required,
                eligible: eligible.len(),
            });
        }
        Ok(Self { required, eligible })
    }

    /// 1-of-n policy over every registered endorser.
    pub fn any_endorser(registry: &Registry) -> Result<Self, IdentityError> {
        Self::new(1, registry.with_role(Role::Endorser).map(|n| n.node_id.clone()))
    }

    pub fn required(&self) -> u32 {
        self.required
    }

    pub fn eligible(&self) -> &BTreeSet<String> {
        &self.eligible
    }

    /// Counts distinct eligible endorsers whose signature over `signed_bytes`
    /// verifies, stopping once the threshold is met.
    pub fn evaluate(
        &self,
        registry: &Registry,
        endorsements: &[Endorsement],
        signed_bytes: &[u8],
    ) -> Result<(), PolicyFailure> {
        let mut counted: BTreeSet<&str> = BTreeSet::new();
        for e in endorsements {
            if counted.len() as u32 >= self.required {
                break;
            }
            if !self.eligible.contains(&e.endorser) || counted.contains(e.endorser.as_str()) {
                continue;
            }
            if registry.verify(&e.endorser, signed_bytes, &e.signature) {
                counted.insert(&e.endorser);
            }
        }
        let valid = counted.len() as u32;
        if valid >= self.required {
            Ok(())
        } else {
            Err(PolicyFailure::Insufficient {
                valid,
                required: self.required,
            })
        }
    }
}

pub fn check_policy(
    policy: &EndorsementPolicy,
    registry: &Registry,
    endorsements: &[Endorsement],
    signed_bytes: &[u8],
) -> bool {
    policy.evaluate(registry, endorsements, signed_bytes).is_ok()
}
