mod common;

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncated_backward_is_bitwise_slice_of_full(seed in any::<u64>(), depth in 1usize..=4) {
        let compared = common::truncation_instance(seed, Some(depth));
        prop_assert!(compared.is_ok(), "{}", compared.unwrap_err());
    }
}

#[test]
fn random_tiny_networks_truncate_exactly() {
    let mut total = 0;
    for seed in 0..50 {
        total += common::truncation_instance(seed, None).unwrap();
    }
    assert!(total >= 50);
}
