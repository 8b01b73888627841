use std::collections::BTreeMap;

use proptest::prelude::*;

use valid_core::contrast::{
    compose_decode, contrast, contrast_operator, reliability_mask, CompositionOrder,
    ContrastConfig, ContrastSpace,
};
use valid_core::dist::{entropy, normalize, softmax, LogitVector, TokenDistribution};
use valid_core::fusion::{
    fusion_weights, reference_distribution, select_top_k, CandidateBucket, LayerDistributions,
    LayerId,
};
use valid_core::Error;

fn weights_strategy(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![4 => 1e-3..1.0f64, 1 => Just(0.0)], len)
        .prop_filter("needs mass", |v| v.iter().sum::<f64>() > 0.0)
}

fn dist_strategy(len: std::ops::Range<usize>) -> impl Strategy<Value = TokenDistribution> {
    weights_strategy(len).prop_map(|v| normalize(&v).unwrap())
}

/// Several distributions over one shared vocabulary.
fn dists(n: usize, vocab: std::ops::Range<usize>) -> impl Strategy<Value = Vec<TokenDistribution>> {
    vocab.prop_flat_map(move |v| {
        prop::collection::vec(
            prop::collection::vec(1e-3..1.0f64, v).prop_map(|w| normalize(&w).unwrap()),
            n,
        )
    })
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(
        logits in prop::collection::vec(-30.0..30.0f64, 1..40),
        c in -100.0..100.0f64,
    ) {
        let a = softmax(&LogitVector::new(logits.clone()).unwrap());
        let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
        let b = softmax(&LogitVector::new(shifted).unwrap());
        for (x, y) in a.probs().iter().zip(b.probs()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_is_bounded_and_permutation_invariant(
        p in dist_strategy(1..50),
        seed in any::<u64>(),
    ) {
        let h = entropy(&p).value();
        let v = p.vocab_size() as f64;
        prop_assert!(h >= 0.0 && h <= v.ln() + 1e-12);
        let mut perm: Vec<f64> = p.probs().to_vec();
        // deterministic shuffle from the seed
        let n = perm.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let q = TokenDistribution::new(perm).unwrap();
        prop_assert!((entropy(&q).value() - h).abs() < 1e-12);
    }

    #[test]
    fn normalize_is_idempotent(w in weights_strategy(1..50)) {
        let once = normalize(&w).unwrap();
        let twice = normalize(once.probs()).unwrap();
        for (x, y) in once.probs().iter().zip(twice.probs()) {
            prop_assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_sum_to_one_shift_invariant_and_monotone(
        hs in prop::collection::vec(0.0..10.0f64, 1..12),
        c in 0.0..20.0f64,
    ) {
        let entries = |shift: f64| -> Vec<(LayerId, valid_core::dist::Entropy)> {
            hs.iter()
                .enumerate()
                .map(|(i, h)| (LayerId(i as u16 + 1), valid_core::dist::Entropy::new(h + shift).unwrap()))
                .collect()
        };
        let w = fusion_weights(&entries(0.0)).unwrap();
        let ws: Vec<f64> = w.iter().map(|(_, x)| x).collect();
        prop_assert!((ws.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let w2 = fusion_weights(&entries(c)).unwrap();
        for ((_, a), (_, b)) in w.iter().zip(w2.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for i in 0..hs.len() {
            for j in 0..hs.len() {
                if hs[i] > hs[j] {
                    prop_assert!(ws[i] >= ws[j]);
                }
            }
        }
    }

    #[test]
    fn fused_reference_is_a_convex_combination(
        layers in dists(5, 2..30),
        k in 1usize..=5,
    ) {
        let per_layer: LayerDistributions = layers
            .iter()
            .enumerate()
            .map(|(i, d)| (LayerId(i as u16 + 1), d.clone()))
            .collect();
        let bucket = CandidateBucket::new((1..=5).map(LayerId).collect(), LayerId(6)).unwrap();
        let selected = select_top_k(&per_layer, &bucket, k).unwrap();
        prop_assert_eq!(selected.len(), k);
        let w = fusion_weights(&selected).unwrap();
        let r = reference_distribution(&per_layer, &w).unwrap();
        for t in 0..r.vocab_size() {
            let vals: Vec<f64> = selected.iter().map(|(l, _)| per_layer[l].probs()[t]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.probs()[t] >= lo - 1e-12 && r.probs()[t] <= hi + 1e-12);
        }
        prop_assert!((r.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn alpha_zero_is_the_identity(pair in dists(2, 2..40)) {
        let cfg = ContrastConfig::new(0.0, 0.1, ContrastSpace::Probability, false).unwrap();
        let r = contrast(&pair[0], &pair[1], &cfg).unwrap();
        for (x, y) in r.p_valid.probs().iter().zip(pair[0].probs()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let cfg = cfg.with_truncation(true);
        let r = contrast(&pair[0], &pair[1], &cfg).unwrap();
        prop_assert_eq!(r.p_valid.argmax(), pair[0].argmax());
    }

    #[test]
    fn mask_zeroes_unreliable_tokens(
        pair in dists(2, 2..40),
        beta in prop_oneof![Just(0.1), Just(0.5), Just(1.0), 0.0..=1.0f64],
        alpha in 0.0..5.0f64,
        logit in any::<bool>(),
    ) {
        let space = if logit { ContrastSpace::Logit } else { ContrastSpace::Probability };
        let cfg = ContrastConfig::new(alpha, beta, space, true).unwrap();
        let (p_ori, p_ref) = (&pair[0], &pair[1]);
        let mask = reliability_mask(p_ori, beta).unwrap();
        prop_assert!(mask.contains(&p_ori.argmax()));
        let r = contrast(p_ori, p_ref, &cfg).unwrap();
        let cut = beta * p_ori.max();
        for (t, &p) in p_ori.probs().iter().enumerate() {
            if p < cut {
                prop_assert_eq!(r.p_valid.probs()[t], 0.0);
            }
        }
        prop_assert!((r.p_valid.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn composition_orders_differ_by_the_cross_term(
        trio in dists(3, 2..40),
        alpha in 0.0..3.0f64,
        alpha_prime in 0.0..3.0f64,
    ) {
        let (p_ori, p_ent, p_noi) = (&trio[0], &trio[1], &trio[2]);
        let a = compose_decode(p_ori, p_ent, p_noi, CompositionOrder::VcdThenValid, alpha, alpha_prime).unwrap();
        let b = compose_decode(p_ori, p_ent, p_noi, CompositionOrder::ValidThenVcd, alpha, alpha_prime).unwrap();
        for t in 0..a.len() {
            let gap = alpha * alpha_prime * (p_ent.probs()[t] - p_noi.probs()[t]).abs();
            prop_assert!(((a[t] - b[t]).abs() - gap).abs() < 1e-9);
        }
    }

    #[test]
    fn contrast_favours_what_the_reference_underrates(
        pair in dists(2, 2..30),
        alpha in 0.0..5.0f64,
    ) {
        let (p, r) = (pair[0].probs(), pair[1].probs());
        let raw = contrast_operator(p, r, alpha);
        for i in 0..p.len() {
            for j in 0..p.len() {
                if p[i] >= p[j] && r[i] <= r[j] {
                    prop_assert!(raw[i] >= raw[j] - 1e-15);
                }
            }
        }
    }
}

#[test]
fn k_zero_is_rejected() {
    let per_layer: LayerDistributions = BTreeMap::from([(LayerId(1), TokenDistribution::uniform(3).unwrap())]);
    let bucket = CandidateBucket::new(vec![LayerId(1)], LayerId(2)).unwrap();
    assert!(matches!(select_top_k(&per_layer, &bucket, 0), Err(Error::InvalidConfig(_))));
}
