mod common;

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn registry_matches_brute_force_merkle(seed: u64, target in 1usize..200) {
        if let Err(e) = common::check_revocation_sequence(seed, target) {
            prop_assert!(false, "{}", e);
        }
    }
}

#[test]
fn full_registry_matches() {
    common::check_revocation_sequence(7, 1024).unwrap();
}

#[test]
fn single_and_pair_registries_match() {
    for seed in 0..20 {
        common::check_revocation_sequence(seed, 1).unwrap();
        common::check_revocation_sequence(seed, 2).unwrap();
        common::check_revocation_sequence(seed, 3).unwrap();
    }
}
