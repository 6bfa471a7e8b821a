mod common;

use gridda::gridmap::{compose_gridmap, decode_gridmap, encode_gridmap, GridSpec, CH_COUNT};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn hand_traced_rays() {
    for f in common::ray_fixtures() {
        let bad = common::ray_mismatches(&f);
        assert!(bad.is_empty(), "{bad:#?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn count_channel_sums_to_points_inside(seed in 0u64..10_000, n in 0usize..400) {
        let spec = GridSpec::new(0.5, 16.0).unwrap();
        let (pc, inside) = common::random_cloud(&mut ChaCha8Rng::seed_from_u64(seed), spec, n);
        let map = compose_gridmap(&pc, spec).unwrap();
        let total: f64 = map.plane(CH_COUNT).iter().map(|&v| v as f64).sum();
        prop_assert_eq!(total, inside as f64);
        let back = decode_gridmap(&encode_gridmap(&map), "mem".as_ref()).unwrap();
        prop_assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), map.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
