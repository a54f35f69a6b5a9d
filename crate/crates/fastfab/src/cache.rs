//! Cyclic cache of lazily decoded transaction layers.
//!
//! One slot per block in flight; block `n` lives in slot `n % len`. Each
//! transaction gets one write-once cell per layer. Two validators racing to
//! decode the same layer both compute byte-equal results, so whichever store
//! lands first is kept and the other is dropped.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use arc_swap::ArcSwapOption;
use fastfab_core::codec::WireError;
use fastfab_core::validate::TxLayers;
use fastfab_core::wire::{EndorsementSection, Payload, RawEnvelope};
use fastfab_core::{Block, ReadWriteSet, TxHeader};

#[derive(Debug, Default)]
pub struct TxSlot {
    envelope: OnceLock<Arc<RawEnvelope>>,
    payload: OnceLock<Arc<Payload>>,
    header: OnceLock<Arc<TxHeader>>,
    rwset: OnceLock<Arc<ReadWriteSet>>,
    endorsements: OnceLock<Arc<EndorsementSection>>,
}

#[derive(Debug)]
pub struct CachedBlock {
    pub block: Arc<Block>,
    txs: Box<[TxSlot]>,
    committed: AtomicBool,
    decodes: Arc<AtomicU64>,
}

impl CachedBlock {
    pub fn number(&self) -> u64 {
        self.block.number()
    }

    /// Layer access for transaction `index`.
    pub fn layers(&self, index: usize) -> CachedLayers<'_> {
        CachedLayers {
            slot: &self.txs[index],
            envelope: &self.block.envelopes[index],
            decodes: &self.decodes,
        }
    }

    pub fn mark_committed(&self) {
        self.committed.store(true, Ordering::Release);
    }

    pub fn is_committed(&self) -> bool {
        self.committed.load(Ordering::Acquire)
    }
}

#[derive(Debug)]
pub struct UnmarshalCache {
    slots: Box<[ArcSwapOption<CachedBlock>]>,
    decodes: Arc<AtomicU64>,
}

impl UnmarshalCache {
    pub fn new(slots: usize) -> Self {
        assert!(slots >= 1, "cache needs at least one slot");
        Self {
            slots: (0..slots).map(|_| ArcSwapOption::empty()).collect(),
            decodes: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Places `block` in its slot. The previous occupant must be committed.
    pub fn admit(&self, block: Arc<Block>) -> Arc<CachedBlock> {
        let slot = &self.slots[(block.number() % self.slots.len() as u64) as usize];
        if let Some(old) = slot.load_full() {
            assert!(
                old.is_committed() && old.number() < block.number(),
                "slot for block {} still holds uncommitted block {}",
                block.number(),
                old.number()
            );
        }
        let txs = (0..block.len()).map(|_| TxSlot::default()).collect();
        let entry = Arc::new(CachedBlock {
            block,
            txs,
            committed: AtomicBool::new(false),
            decodes: self.decodes.clone(),
        });
        slot.store(Some(entry.clone()));
        entry
    }

    /// The cached block `number`, if its slot still holds it.
    pub fn get(&self, number: u64) -> Option<Arc<CachedBlock>> {
        let entry = self.slots[(number % self.slots.len() as u64) as usize].load_full()?;
        (entry.number() == number).then_some(entry)
    }

    /// Layer decodes performed through this cache so far.
    pub fn decode_count(&self) -> u64 {
        self.decodes.load(Ordering::Relaxed)
    }
}

/// [`TxLayers`] backed by a cache slot; each layer is decoded at most once
/// per racing reader and then served from the slot.
pub struct CachedLayers<'a> {
    slot: &'a TxSlot,
    envelope: &'a [u8],
    decodes: &'a AtomicU64,
}

fn fill<T>(cell: &OnceLock<Arc<T>>, decodes: &AtomicU64, decode: impl FnOnce() -> Result<T, WireError>) -> Result<Arc<T>, WireError> {
    if let Some(v) = cell.get() {
        return Ok(v.clone());
    }
    decodes.fetch_add(1, Ordering::Relaxed);
    let v = Arc::new(decode()?);
    Ok(cell.get_or_init(|| v).clone())
}

impl TxLayers for CachedLayers<'_> {
    fn envelope(&self) -> Result<Arc<RawEnvelope>, WireError> {
        fill(&self.slot.envelope, self.decodes, || RawEnvelope::decode(self.envelope))
    }

    fn payload(&self) -> Result<Arc<Payload>, WireError> {
        if let Some(v) = self.slot.payload.get() {
            return Ok(v.clone());
        }
        let envelope = self.envelope()?;
        fill(&self.slot.payload, self.decodes, || Payload::decode(&envelope.payload))
    }

    fn header(&self) -> Result<Arc<TxHeader>, WireError> {
        if let Some(v) = self.slot.header.get() {
            return Ok(v.clone());
        }
        let payload = self.payload()?;
        fill(&self.slot.header, self.decodes, || TxHeader::decode(&payload.header))
    }

    fn rwset(&self) -> Result<Arc<ReadWriteSet>, WireError> {
        if let Some(v) = self.slot.rwset.get() {
            return Ok(v.clone());
        }
        let payload = self.payload()?;
        fill(&self.slot.rwset, self.decodes, || ReadWriteSet::decode_from_data(&payload.data))
    }

    fn endorsements(&self) -> Result<Arc<EndorsementSection>, WireError> {
        if let Some(v) = self.slot.endorsements.get() {
            return Ok(v.clone());
        }
        let payload = self.payload()?;
        fill(&self.slot.endorsements, self.decodes, || {
            EndorsementSection::decode_from_data(&payload.data)
        })
    }
}
