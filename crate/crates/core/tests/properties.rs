use fastfab_core::{
    check_policy, Endorsement, EndorsementPolicy, Registry, Role, SignatureScheme, SigningKey, Version, VersionedMap,
};
use proptest::prelude::*;

fn registry(n: usize) -> (Registry, Vec<SigningKey>) {
    let mut reg = Registry::new(SignatureScheme::Mac);
    let keys: Vec<SigningKey> = (0..n)
        .map(|i| SigningKey::derive(SignatureScheme::Mac, 5, &format!("e{i}")))
        .collect();
    for (i, k) in keys.iter().enumerate() {
        reg.register(format!("e{i}"), Role::Endorser, k.public()).unwrap();
    }
    (reg, keys)
}

proptest! {
    /// Adding a valid eligible endorsement never turns a passing set into a
    /// failing one.
    #[test]
    fn policy_is_monotone(
        required in 1u32..=4,
        picks in proptest::collection::vec((0usize..4, any::<bool>()), 0..8),
        extra in 0usize..4,
    ) {
        let (reg, keys) = registry(4);
        let policy = EndorsementPolicy::new(required, (0..4).map(|i| format!("e{i}"))).unwrap();
        let msg = b"signed";
        let mut endorsements: Vec<Endorsement> = picks
            .iter()
            .map(|&(i, good)| Endorsement {
                endorser: format!("e{i}"),
                signature: keys[i].sign(if good { msg } else { b"nope" }),
            })
            .collect();
        let before = check_policy(&policy, &reg, &endorsements, msg);
        endorsements.push(Endorsement { endorser: format!("e{extra}"), signature: keys[extra].sign(msg) });
        let after = check_policy(&policy, &reg, &endorsements, msg);
        prop_assert!(!before || after);
    }

    #[test]
    fn snapshot_restore_round_trip(
        entries in proptest::collection::btree_map(
            "[a-zA-Z0-9]{1,32}",
            (proptest::collection::vec(any::<u8>(), 0..64), any::<u64>(), any::<u32>()),
            0..64,
        )
    ) {
        let mut map = VersionedMap::new();
        for (k, (v, b, t)) in &entries {
            map.put(k.clone(), v.clone(), Version::new(*b, *t));
        }
        let restored = VersionedMap::restore(&map.snapshot()).unwrap();
        prop_assert_eq!(&restored, &map);
        prop_assert_eq!(restored.snapshot(), map.snapshot());
    }
}

#[test]
fn thousand_entry_snapshot() {
    let mut map = VersionedMap::new();
    for i in 0..1000u32 {
        map.put(format!("key-{i}"), i.to_le_bytes().repeat((i % 7) as usize), Version::new(i as u64 / 10, i % 10));
    }
    assert_eq!(VersionedMap::restore(&map.snapshot()).unwrap(), map);
}
