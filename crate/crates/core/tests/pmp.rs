mod support;

use proptest::prelude::*;
use support::{brute_check, byte_owner_map, pmp_agree};
use teesim::crypto::Rng;
use teesim::machine::{encode_region, AccessKind, PmpEntry, PmpPerms, PrivMode, RegionEncoding, PMP_ENTRIES};

#[test]
fn random_configs_match_the_brute_force() {
    let mut rng = Rng::new(0x5eed);
    for _ in 0..300 {
        pmp_agree(&mut rng, 64).unwrap();
    }
}

#[test]
fn lowest_entry_wins_even_when_it_denies() {
    let mut entries = [PmpEntry::OFF; PMP_ENTRIES];
    let deny = encode_region(0x100, 0x100).unwrap().entries(PmpPerms::NONE);
    let allow = encode_region(0, 0x1000).unwrap().entries(PmpPerms::RWX);
    entries[2] = deny[0];
    entries[5] = allow[0];
    let owners = byte_owner_map(&entries);
    assert!(!brute_check(&entries, &owners, 0x180, 4, AccessKind::Read, PrivMode::S));
    assert!(brute_check(&entries, &owners, 0x200, 4, AccessKind::Read, PrivMode::S));
    // Straddling the deciding entry's boundary fails even though entry 5
    // would allow every byte on its own.
    assert!(!brute_check(&entries, &owners, 0xfe, 4, AccessKind::Read, PrivMode::S));

    let mut machine = teesim::machine::Machine::new(0x10000, 1).unwrap();
    for (i, e) in entries.iter().enumerate() {
        machine.set_local_pmp(0, i, *e).unwrap();
    }
    for (addr, want) in [(0x180, false), (0x200, true), (0xfe, false)] {
        let got = machine.pmp_check(0, teesim::machine::PhysAddr(addr), 4, AccessKind::Read, PrivMode::S).unwrap();
        assert_eq!(got == teesim::machine::PmpDecision::Allow, want, "{addr:#x}");
    }
}

proptest! {
    #[test]
    fn encoding_round_trips(base_words in 0u64..1 << 20, size_words in 1u64..1 << 16) {
        let (base, size) = (base_words * 4, size_words * 4);
        let enc = encode_region(base, size).unwrap();
        let entries = enc.entries(PmpPerms::RW);
        prop_assert_eq!(entries.len(), enc.slots());
        let mut file = teesim::machine::PmpFile::new();
        for (i, e) in entries.iter().enumerate() {
            file.set(3 + i, *e);
        }
        let region = file.region(2 + entries.len()).unwrap();
        prop_assert_eq!((region.base, region.size), (base, size));
        // Single-slot encodings are used whenever the region allows.
        let napot = size.is_power_of_two() && size >= 8 && base % size == 0;
        prop_assert_eq!(matches!(enc, RegionEncoding::Napot { .. }), napot);
    }

    #[test]
    fn check_matches_brute_force(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        pmp_agree(&mut rng, 32).map_err(TestCaseError::fail)?;
    }
}
