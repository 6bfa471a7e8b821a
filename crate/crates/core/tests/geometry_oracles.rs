mod common;

use std::f64::consts::PI;

use gridda::eval::ap40;
use gridda::geometry::{angle_diff_mod_pi, decode_box, encode_box, rotated_iou, Anchor, OrientedBox};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{ap40_oracle, random_pair, random_sequence, raster_iou};

#[test]
fn iou_matches_rasterization() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (a, b) = random_pair(&mut rng);
        let (got, want) = (rotated_iou(&a, &b), raster_iou(&a, &b, 2048));
        assert!((got - want).abs() < 2e-3, "{a:?} {b:?}: {got} vs {want}");
    }
}

#[test]
fn ap40_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..300 {
        let (tp, n) = random_sequence(&mut rng);
        assert_eq!(ap40(&tp, n), ap40_oracle(&tp, n), "{tp:?} / {n}");
    }
    assert_eq!(ap40(&[], 0), None);
}

fn arb_box() -> impl Strategy<Value = OrientedBox> {
    (-5.0..5.0f64, -5.0..5.0f64, 0.2..6.0f64, 0.2..6.0f64, -PI..PI).prop_map(|(x, y, w, h, t)| OrientedBox::new(x, y, w, h, t).unwrap())
}

fn arb_anchor() -> impl Strategy<Value = Anchor> {
    (-5.0..5.0f64, -5.0..5.0f64, 0.5..8.0f64, 0.5..8.0f64).prop_map(|(x, y, w, h)| Anchor { x, y, w, h, level: 1, cell: (0, 0) })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (ab, ba) = (rotated_iou(&a, &b), rotated_iou(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
    }

    #[test]
    fn iou_with_itself_is_one(a in arb_box()) {
        prop_assert!((rotated_iou(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn encode_decode_round_trip(b in arb_box(), a in arb_anchor()) {
        let d = decode_box(&encode_box(&b, &a).unwrap(), &a);
        for (u, v) in [(d.x, b.x), (d.y, b.y), (d.w, b.w), (d.h, b.h)] {
            prop_assert!((u - v).abs() < 1e-5);
        }
        prop_assert!(angle_diff_mod_pi(d.theta, b.theta).abs() < 1e-5);
    }

    #[test]
    fn rescaling_scores_monotonically_keeps_ap(seed in 0u64..1000) {
        // ap40 only sees the ranking, so any increasing map of the scores
        // leaves the TP sequence and hence the value unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tp, n) = random_sequence(&mut rng);
        let scores: Vec<f64> = (0..tp.len()).map(|i| 1.0 - i as f64 / (tp.len() + 1) as f64).collect();
        let mut order: Vec<usize> = (0..tp.len()).collect();
        order.sort_by(|&i, &j| (scores[j].powi(3) * 7.0).total_cmp(&(scores[i].powi(3) * 7.0)));
        let rescaled: Vec<bool> = order.iter().map(|&i| tp[i]).collect();
        prop_assert_eq!(ap40(&tp, n), ap40(&rescaled, n));
    }

    #[test]
    fn a_trailing_false_positive_never_raises_ap(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut tp, n) = random_sequence(&mut rng);
        let before = ap40(&tp, n).unwrap();
        tp.push(false);
        prop_assert!(ap40(&tp, n).unwrap() <= before);
    }
}
