mod common;

use std::time::Instant;

use kvec::sequence::{mask_oracle, MaskBuilder, MaskConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mask_config(rng: &mut impl Rng) -> MaskConfig {
    MaskConfig {
        window: if rng.gen_bool(0.5) { 512 } else { rng.gen_range(1..=70) },
        key_correlation: rng.gen_bool(0.8),
        value_correlation: rng.gen_bool(0.8),
    }
}

#[test]
fn thousand_random_sequences_match_the_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let len = rng.gen_range(1..=64);
        let keys = rng.gen_range(1..=8);
        let flip = rng.gen_range(0.0..0.9);
        let gap = if rng.gen_bool(0.3) { Some(rng.gen_range(1..8)) } else { None };
        let seq = common::random_sequence(&mut rng, len, keys, flip, gap);
        let cfg = mask_config(&mut rng);
        let oracle = mask_oracle(&seq, len, &cfg);
        let incremental = seq.mask_rows(len, &cfg);
        for i in 1..=len {
            let expected = oracle.row(i);
            assert_eq!(seq.mask_row(i, &cfg).unwrap(), expected, "case {case}, row {i}");
            assert_eq!(incremental[i - 1], expected, "case {case}, row {i}");
        }
    }
    assert!(start.elapsed().as_secs_f64() < 10.0, "took {:?}", start.elapsed());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rows_are_causal_windowed_and_self_inclusive(
        seed in any::<u64>(),
        len in 1usize..=64,
        keys in 1usize..=8,
        window in 1usize..=80,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = common::random_sequence(&mut rng, len, keys, 0.4, None);
        let cfg = MaskConfig { window, ..MaskConfig::default() };
        for (r, row) in seq.mask_rows(len, &cfg).iter().enumerate() {
            let i = r + 1;
            prop_assert_eq!(row.last(), Some(&i));
            prop_assert!(row.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(row.iter().all(|&j| j + window > i));
        }
    }

    #[test]
    fn appending_items_never_changes_earlier_rows(
        seed in any::<u64>(),
        len in 2usize..=64,
        keys in 1usize..=8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = common::random_sequence(&mut rng, len, keys, 0.4, None);
        let cfg = MaskConfig::default();
        let full = mask_oracle(&seq, len, &cfg);
        let t = rng.gen_range(1..len);
        let prefix = mask_oracle(&seq, t, &cfg);
        for i in 1..=t {
            prop_assert_eq!(prefix.row(i), full.row(i));
        }
    }

    #[test]
    fn key_only_mask_is_per_key_lower_triangle(
        seed in any::<u64>(),
        len in 1usize..=64,
        keys in 1usize..=8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = common::random_sequence(&mut rng, len, keys, 0.4, None);
        let rows = seq.mask_rows(len, &MaskConfig::key_only(512));
        for (r, row) in rows.iter().enumerate() {
            let key = seq.items()[r].key;
            let expected: Vec<usize> = seq.key_items(key).iter().copied().filter(|&a| a <= r + 1).collect();
            prop_assert_eq!(row, &expected);
        }
    }

    #[test]
    fn builder_rows_match_sequence_rows(
        seed in any::<u64>(),
        len in 1usize..=64,
        keys in 1usize..=8,
        gap in proptest::option::of(1usize..6),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = common::random_sequence(&mut rng, len, keys, 0.5, gap);
        let cfg = MaskConfig::default();
        let mut builder = MaskBuilder::new(cfg, gap);
        for (n, it) in seq.items().iter().enumerate() {
            let row = builder.push(it.key, seq.session_code(it.arrival));
            prop_assert_eq!(row, seq.mask_row(n + 1, &cfg).unwrap());
        }
    }
}
