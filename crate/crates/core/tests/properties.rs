//! Property tests for the arithmetic invariants that hold for arbitrary
//! inputs, not just the seeded cases.

use proptest::prelude::*;

use fjord_core::data::largest_remainder;
use fjord_core::loss::{cross_entropy, kl_divergence, log_softmax, softmax};
use fjord_core::od::DropoutDistribution;
use fjord_core::tensor::kept_units;

proptest! {
    #[test]
    fn kept_units_is_monotone_and_bounded(
        k in 1usize..200,
        p1 in 0.001f64..=1.0,
        p2 in 0.001f64..=1.0,
    ) {
        let lo = p1.min(p2);
        let hi = p1.max(p2);
        let a = kept_units(lo, k);
        let b = kept_units(hi, k);
        prop_assert!(a >= 1 && b <= k);
        prop_assert!(a <= b);
        // Ceiling rule: kept / k >= p always.
        prop_assert!(a as f64 >= lo * k as f64 - 1e-9);
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax(&logits);
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        let lp = log_softmax(&logits);
        for (a, b) in p.iter().zip(&lp) {
            prop_assert!((a.ln() - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(
        logits in prop::collection::vec(-30.0f64..30.0, 2..10),
        label_pick in 0usize..10,
    ) {
        let label = label_pick % logits.len();
        let loss = cross_entropy(&logits, label).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(
        a in prop::collection::vec(-20.0f64..20.0, 2..8),
        b in prop::collection::vec(-20.0f64..20.0, 2..8),
        t in 0.1f64..8.0,
    ) {
        prop_assert_eq!(kl_divergence(&a, &a, t).unwrap(), 0.0);
        if a.len() == b.len() {
            let kl = kl_divergence(&a, &b, t).unwrap();
            prop_assert!(kl >= 0.0 && kl.is_finite());
        }
    }

    #[test]
    fn quotas_sum_to_total_and_respect_zero_weights(
        weights in prop::collection::vec(0.0f64..10.0, 1..12),
        total in 0usize..500,
    ) {
        prop_assume!(weights.iter().sum::<f64>() > 0.0);
        let q = largest_remainder(&weights, total);
        prop_assert_eq!(q.iter().sum::<usize>(), total);
        for (quota, &w) in q.iter().zip(&weights) {
            if w == 0.0 {
                prop_assert_eq!(*quota, 0);
            }
        }
    }

    #[test]
    fn conditional_probabilities_renormalize(
        k in 1usize..12,
        cap_idx in 0usize..12,
    ) {
        let dist = DropoutDistribution::uniform_k(k).unwrap();
        let cap = dist.values()[cap_idx % k];
        let probs = dist.conditional_probabilities(cap).unwrap();
        let sum: f64 = probs.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        for (&v, &q) in dist.values().iter().zip(&probs) {
            if v > cap {
                prop_assert_eq!(q, 0.0);
            } else {
                prop_assert!(q > 0.0);
            }
        }
    }
}
