use fastfab_core::wire::{
    encode_data, endorse_rwset, EndorsementSection, Payload, RawEnvelope,
};
use fastfab_core::{
    content_hash, decode_layer, encode_envelope, Decoded, Endorsement, Layer, ReadWriteSet, SignatureScheme,
    SigningKey, TxHeader, Version, WireError,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_key_string(rng: &mut impl Rng, prefix: &str, i: usize) -> String {
    let len = rng.gen_range(0..24);
    let tail: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
    format!("{prefix}{i}-{tail}")
}

struct Generated {
    header: TxHeader,
    rwset: ReadWriteSet,
    endorsements: Vec<Endorsement>,
    padding: usize,
    bytes: Vec<u8>,
}

fn generate(rng: &mut impl Rng, signer: &SigningKey) -> Generated {
    let header = TxHeader::new(
        random_key_string(rng, "ch", 0),
        random_key_string(rng, "client", 0),
        rng.gen(),
    );
    let n_reads = rng.gen_range(0..6);
    let n_writes = rng.gen_range(0..6);
    let rwset = ReadWriteSet {
        reads: (0..n_reads)
            .map(|i| (random_key_string(rng, "r", i), Version::new(rng.gen(), rng.gen())))
            .collect(),
        writes: (0..n_writes)
            .map(|i| {
                let len = rng.gen_range(0..64);
                (random_key_string(rng, "w", i), (0..len).map(|_| rng.gen()).collect())
            })
            .collect(),
    };
    let padding = rng.gen_range(0..4096);
    let endorsements: Vec<Endorsement> = (0..rng.gen_range(1..4))
        .map(|i| endorse_rwset(format!("e{i}"), signer, &rwset, padding))
        .collect();
    let bytes = encode_envelope(&header, &rwset, &endorsements, padding, signer);
    Generated {
        header,
        rwset,
        endorsements,
        padding,
        bytes,
    }
}

/// Peels all five layers of 1000 random envelopes and compares each with the
/// values it was built from.
#[test]
fn five_layer_round_trip_random_envelopes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let signer = SigningKey::derive(SignatureScheme::Ed25519, 1, "client");
    for _ in 0..1000 {
        let g = generate(&mut rng, &signer);
        let Decoded::Envelope(env) = decode_layer(&g.bytes, Layer::Envelope).unwrap() else {
            panic!("wrong layer")
        };
        assert!(signer.public().verify(&env.payload, &env.signature));
        let Decoded::Payload(payload) = decode_layer(&env.payload, Layer::Payload).unwrap() else {
            panic!("wrong layer")
        };
        let Decoded::Header(header) = decode_layer(&payload.header, Layer::Header).unwrap() else {
            panic!("wrong layer")
        };
        let Decoded::RwSet(rwset) = decode_layer(&payload.data, Layer::RwSet).unwrap() else {
            panic!("wrong layer")
        };
        let Decoded::Endorsements(section) = decode_layer(&payload.data, Layer::Endorsements).unwrap() else {
            panic!("wrong layer")
        };
        assert_eq!(header, g.header);
        assert_eq!(rwset, g.rwset);
        assert_eq!(section.endorsements, g.endorsements);
        assert_eq!(section.padding_len as usize, g.padding);
    }
}

#[test]
fn every_truncation_of_an_envelope_fails() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let signer = SigningKey::derive(SignatureScheme::Mac, 1, "client");
    let g = generate(&mut rng, &signer);
    for cut in 0..g.bytes.len() {
        assert!(matches!(
            RawEnvelope::decode(&g.bytes[..cut]),
            Err(WireError::MalformedFrame { .. })
        ));
    }
}

#[test]
fn trailing_garbage_is_bad_magic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let signer = SigningKey::derive(SignatureScheme::Mac, 1, "client");
    let mut bytes = generate(&mut rng, &signer).bytes;
    bytes.push(0);
    assert!(matches!(RawEnvelope::decode(&bytes), Err(WireError::BadMagic(_))));
}

/// Flipping one random bit must change the digest, 1000 out of 1000 times.
#[test]
fn single_bit_flip_changes_digest() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let len = rng.gen_range(1..512);
        let mut data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let before = content_hash(&data);
        let bit = rng.gen_range(0..len * 8);
        data[bit / 8] ^= 1 << (bit % 8);
        assert_ne!(content_hash(&data), before);
    }
}

#[test]
fn encoded_size_is_a_function_of_field_lengths() {
    let signer = SigningKey::derive(SignatureScheme::Ed25519, 1, "c");
    let rw = |v: u8| ReadWriteSet {
        reads: vec![("k".into(), Version::new(v as u64, 1))],
        writes: vec![("k".into(), vec![v; 8])],
    };
    let header = |n| TxHeader::new("ch", "c", n);
    let a = encode_envelope(&header(1), &rw(1), &[endorse_rwset("e", &signer, &rw(1), 10)], 10, &signer);
    let b = encode_envelope(&header(2), &rw(2), &[endorse_rwset("e", &signer, &rw(2), 10)], 10, &signer);
    assert_ne!(a, b);
    assert_eq!(a.len(), b.len());
}

proptest! {
    #[test]
    fn data_section_round_trip(
        reads in proptest::collection::vec(("[a-z]{1,12}", any::<u64>(), any::<u32>()), 0..5),
        writes in proptest::collection::vec(("[a-z]{1,12}", proptest::collection::vec(any::<u8>(), 0..32)), 0..5),
        sigs in proptest::collection::vec(("[a-z0-9]{1,8}", proptest::collection::vec(any::<u8>(), 0..80)), 0..4),
        padding in 0usize..3000,
    ) {
        let rwset = ReadWriteSet {
            reads: reads.into_iter().map(|(k, b, t)| (k, Version::new(b, t))).collect(),
            writes,
        };
        let endorsements: Vec<Endorsement> = sigs
            .into_iter()
            .map(|(endorser, signature)| Endorsement { endorser, signature })
            .collect();
        let data = encode_data(&rwset, &endorsements, padding);
        prop_assert_eq!(ReadWriteSet::decode_from_data(&data).unwrap(), rwset.clone());
        let section = EndorsementSection::decode_from_data(&data).unwrap();
        prop_assert_eq!(section.endorsements, endorsements);
        prop_assert_eq!(section.padding_len as usize, padding);

        let payload = Payload { header: vec![1, 2, 3], data };
        prop_assert_eq!(Payload::decode(&payload.encode()).unwrap(), payload);
    }

    #[test]
    fn header_round_trip(chan in "\\PC{0,20}", creator in "\\PC{0,20}", nonce in any::<u64>()) {
        let h = TxHeader::new(chan, creator, nonce);
        prop_assert_eq!(TxHeader::decode(&h.encode()).unwrap(), h);
    }
}
