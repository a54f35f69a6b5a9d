//! Pre-MVCC transaction checks: syntax, client signature, endorsement policy.

use alloc::sync::Arc;

use crate::codec::WireError;
use crate::identity::{EndorsementPolicy, Registry, Role};
use crate::ledger::ValidationFlag;
use crate::wire::{DataSections, EndorsementSection, Payload, RawEnvelope, ReadWriteSet, TxHeader};

/// Source of decoded transaction layers.
///
/// Implementations decide whether a layer is decoded afresh on every call or
/// reused from an earlier decode.
pub trait TxLayers {
    fn envelope(&self) -> Result<Arc<RawEnvelope>, WireError>;
    fn payload(&self) -> Result<Arc<Payload>, WireError>;
    fn header(&self) -> Result<Arc<TxHeader>, WireError>;
    fn rwset(&self) -> Result<Arc<ReadWriteSet>, WireError>;
    fn endorsements(&self) -> Result<Arc<EndorsementSection>, WireError>;
}

/// Decodes every requested layer from the raw envelope, every time.
#[derive(Debug, Clone, Copy)]
pub struct FreshLayers<'a> {
    envelope: &'a [u8],
}

impl<'a> FreshLayers<'a> {
    pub fn new(envelope: &'a [u8]) -> Self {
        Self { envelope }
    }
}

impl TxLayers for FreshLayers<'_> {
    fn envelope(&self) -> Result<Arc<RawEnvelope>, WireError> {
        RawEnvelope::decode(self.envelope).map(Arc::new)
    }

    fn payload(&self) -> Result<Arc<Payload>, WireError> {
        Payload::decode(&self.envelope()?.payload).map(Arc::new)
    }

    fn header(&self) -> Result<Arc<TxHeader>, WireError> {
        TxHeader::decode(&self.payload()?.header).map(Arc::new)
    }

    fn rwset(&self) -> Result<Arc<ReadWriteSet>, WireError> {
        ReadWriteSet::decode_from_data(&self.payload()?.data).map(Arc::new)
    }

    fn endorsements(&self) -> Result<Arc<EndorsementSection>, WireError> {
        EndorsementSection::decode_from_data(&self.payload()?.data).map(Arc::new)
    }
}

/// Everything a validator needs besides the transaction itself.
#[derive(Debug, Clone)]
pub struct TxValidator {
    pub registry: Arc<Registry>,
    pub policy: Arc<EndorsementPolicy>,
    pub channel_id: Option<alloc::string::String>,
}

impl TxValidator {
    pub fn new(registry: Arc<Registry>, policy: Arc<EndorsementPolicy>) -> Self {
        Self {
            registry,
            policy,
            channel_id: None,
        }
    }

    /// Flag for one transaction before MVCC.
    ///
    /// Precedence: `Malformed` if any layer fails to decode (or the header id
    /// or rwset is inconsistent), then `BadEnvelopeSig` if the creator is not a
    /// registered client or its signature fails, then `BadEndorsement` if the
    /// policy is not met, else `Valid`.
    pub fn validate(&self, layers: &impl TxLayers) -> ValidationFlag {
        let Ok(envelope) = layers.envelope() else {
            return ValidationFlag::Malformed;
        };
        let Ok(payload) = layers.payload() else {
            return ValidationFlag::Malformed;
        };
        let Ok(header) = layers.header() else {
            return ValidationFlag::Malformed;
        };
        let Ok(sections) = DataSections::split(&payload.data) else {
            return ValidationFlag::Malformed;
        };
        let (Ok(rwset), Ok(endorsements)) = (layers.rwset(), layers.endorsements()) else {
            return ValidationFlag::Malformed;
        };
        if !header.tx_id_matches() || !rwset.is_well_formed() {
            return ValidationFlag::Malformed;
        }
        if self
            .channel_id
            .as_deref()
            .is_some_and(|c| c != header.channel_id)
        {
            return ValidationFlag::Malformed;
        }

        let creator_ok = match self.registry.get(&header.creator) {
            Some(node) if node.role == Role::Client => {
                node.public_key.verify(&envelope.payload, &envelope.signature)
            }
            _ => false,
        };
        if !creator_ok {
            return ValidationFlag::BadEnvelopeSig;
        }

        let signed = sections.signed_message();
        match self
            .policy
            .evaluate(&self.registry, &endorsements.endorsements, &signed)
        {
            Ok(()) => ValidationFlag::Valid,
            Err(_) => ValidationFlag::BadEndorsement,
        }
    }
}
