//! Property-based invariants over randomized inputs.

use proptest::prelude::*;

use tmbr_core::beam::shallow_fuse;
use tmbr_core::math::{log_add, log_softmax_f64};
use tmbr_core::mbr::{edit_distance, NBestSpace};

fn normalized(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0..4.0f64, len..=len).prop_map(|l| log_softmax_f64(&l))
}

proptest! {
    #[test]
    fn fusion_preserves_blank_and_normalization(
        v in 2..6usize,
        lambda in 0.0..1.0f64,
        seed_rnnt in prop::collection::vec(-4.0..4.0f64, 7),
        seed_lm in prop::collection::vec(-4.0..4.0f64, 6),
    ) {
        let rnnt = log_softmax_f64(&seed_rnnt[..v + 1]);
        let lm = log_softmax_f64(&seed_lm[..v]);
        let fused = shallow_fuse(&rnnt, &lm, lambda).unwrap();
        let sum: f64 = fused.iter().map(|&x| x.exp()).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6);
        prop_assert_eq!(fused[0].to_bits(), rnnt[0].to_bits());
    }

    #[test]
    fn fusion_at_zero_is_identity(rnnt in normalized(5), lm in normalized(4)) {
        let fused = shallow_fuse(&rnnt, &lm, 0.0).unwrap();
        prop_assert_eq!(fused, rnnt);
    }

    #[test]
    fn edit_distance_is_a_metric(
        a in prop::collection::vec(1..5usize, 0..8),
        b in prop::collection::vec(1..5usize, 0..8),
        c in prop::collection::vec(1..5usize, 0..8),
    ) {
        let dab = edit_distance(&a, &b);
        prop_assert_eq!(dab, edit_distance(&b, &a));
        prop_assert_eq!(edit_distance(&a, &a), 0);
        // bounds
        prop_assert!(dab >= a.len().abs_diff(b.len()));
        prop_assert!(dab <= a.len().max(b.len()));
        // triangle inequality
        prop_assert!(dab <= edit_distance(&a, &c) + edit_distance(&c, &b));
    }

    #[test]
    fn posterior_is_shift_invariant(
        s in prop::collection::vec(-10.0..0.0f64, 2..5),
        risks_seed in prop::collection::vec(0..6usize, 5),
        shift in -5.0..5.0f64,
    ) {
        let risks: Vec<f64> = risks_seed[..s.len()].iter().map(|&r| r as f64).collect();
        let a = NBestSpace::new(s.clone(), risks.clone()).unwrap();
        let shifted: Vec<f64> = s.iter().map(|v| v + shift).collect();
        let b = NBestSpace::new(shifted, risks).unwrap();
        prop_assert!((a.expected_risk - b.expected_risk).abs() <= 1e-9);
        for (x, y) in a.gamma.iter().zip(&b.gamma) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn gradient_coefficients_sum_to_zero(
        s in prop::collection::vec(-10.0..0.0f64, 2..5),
        risks_seed in prop::collection::vec(0..6usize, 5),
    ) {
        let risks: Vec<f64> = risks_seed[..s.len()].iter().map(|&r| r as f64).collect();
        let space = NBestSpace::new(s, risks).unwrap();
        let sum: f64 = space.gradient_coefficients().iter().sum();
        prop_assert!(sum.abs() <= 1e-12);
    }

    #[test]
    fn log_add_is_commutative_and_dominates(a in -20.0..5.0f64, b in -20.0..5.0f64) {
        let ab = log_add(a, b);
        prop_assert!((ab - log_add(b, a)).abs() <= 1e-12);
        prop_assert!(ab >= a.max(b));
        prop_assert!(ab <= a.max(b) + std::f64::consts::LN_2 + 1e-12);
    }
}
