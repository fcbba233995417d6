mod common;

use hallucheck_core::features::{build_feature_vector, high_contribution_ratio, normalized_from_rows, staticity};
use hallucheck_core::lrp::{distribute, token_contributions, LrpConfig};
use hallucheck_core::metrics::{auc, binary_prf, precision_at_k, repetition_count, sentence_bleu, ScoredPrediction};
use hallucheck_core::model::{force_decode, ModelConfig};
use hallucheck_core::Matrix;
use proptest::prelude::*;

fn tokens(max_len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 1..max_len)
}

/// A bijection on `0..6` applied to every token.
fn relabel(seq: &[u8], perm: &[u8]) -> Vec<u8> {
    seq.iter().map(|&t| perm[t as usize]).collect()
}

fn permutation() -> impl Strategy<Value = Vec<u8>> {
    Just((0u8..6).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #[test]
    fn bleu_of_identical_sequences_is_one(s in tokens(12)) {
        prop_assert!((sentence_bleu(&s, &s, 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_ignores_relabeling(h in tokens(10), r in tokens(10), perm in permutation()) {
        let a = sentence_bleu(&h, &r, 4).unwrap();
        let b = sentence_bleu(&relabel(&h, &perm), &relabel(&r, &perm), 4).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn repetition_ignores_relabeling_and_grows_with_self_copy(s in prop::collection::vec(0u8..6, 0..12), perm in permutation()) {
        prop_assert_eq!(repetition_count(&s, 2, 4), repetition_count(&relabel(&s, &perm), 2, 4));
        let doubled: Vec<u8> = s.iter().chain(&s).copied().collect();
        prop_assert!(repetition_count(&doubled, 2, 4) >= repetition_count(&s, 2, 4));
    }

    #[test]
    fn auc_is_rank_based(scores in prop::collection::vec(-5i32..5, 2..12), labels in prop::collection::vec(any::<bool>(), 12)) {
        let labels = &labels[..scores.len()];
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let preds = |f: &dyn Fn(f64) -> f64| -> Vec<ScoredPrediction> {
            scores.iter().zip(labels).map(|(&s, &l)| ScoredPrediction::new(f(s as f64), l, false)).collect()
        };
        let base = auc(&preds(&|x| x)).unwrap();
        let monotone = auc(&preds(&|x| (0.7 * x).exp() * 3.0 + 1.0)).unwrap();
        prop_assert!((base - monotone).abs() < 1e-12);
    }

    #[test]
    fn auc_of_reversed_scores(perm in Just((0..10).collect::<Vec<i32>>()).prop_shuffle(), labels in prop::collection::vec(any::<bool>(), 10)) {
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let up: Vec<_> = perm.iter().zip(&labels).map(|(&s, &l)| ScoredPrediction::new(s as f64, l, false)).collect();
        let down: Vec<_> = perm.iter().zip(&labels).map(|(&s, &l)| ScoredPrediction::new(-s as f64, l, false)).collect();
        prop_assert!((auc(&up).unwrap() + auc(&down).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn prf_and_auc_match_brute_force() {
    for n in 1..=6usize {
        // Every (label, decision) assignment, scores from a three-level
        // alphabet so ties are common.
        for code in 0..(1usize << (2 * n)) {
            let preds: Vec<ScoredPrediction> = (0..n)
                .map(|i| {
                    let label = code >> (2 * i) & 1 == 1;
                    let decision = code >> (2 * i + 1) & 1 == 1;
                    ScoredPrediction::new(((code / (i + 1)) % 3) as f64, label, decision)
                })
                .collect();
            let tp = preds.iter().filter(|p| p.label && p.decision).count() as f64;
            let fp = preds.iter().filter(|p| !p.label && p.decision).count() as f64;
            let fn_ = preds.iter().filter(|p| p.label && !p.decision).count() as f64;
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            let got = binary_prf(&preds).unwrap();
            assert!((got.precision - p).abs() < 1e-12 && (got.recall - r).abs() < 1e-12 && (got.f1 - f).abs() < 1e-12);

            let pos: Vec<f64> = preds.iter().filter(|p| p.label).map(|p| p.score).collect();
            let neg: Vec<f64> = preds.iter().filter(|p| !p.label).map(|p| p.score).collect();
            if pos.is_empty() || neg.is_empty() {
                assert!(auc(&preds).is_err());
                continue;
            }
            let mut wins = 0.0;
            for a in &pos {
                for b in &neg {
                    wins += if a > b {
                        1.0
                    } else if a == b {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
            let want = wins / (pos.len() * neg.len()) as f64;
            assert!((auc(&preds).unwrap() - want).abs() < 1e-12);
        }
    }
}

#[test]
fn precision_at_k_tracks_base_rate_on_random_labels() {
    use rand::{Rng, SeedableRng};
    let mut total = 0.0;
    let runs = 400;
    for s in 0..runs {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(s);
        let preds: Vec<ScoredPrediction> = (0..100).map(|i| ScoredPrediction::new(rng.gen(), i % 2 == 0, false)).collect();
        total += precision_at_k(&preds, 20).unwrap();
    }
    // Base rate 0.5; each run is hypergeometric with sd ≈ 0.1, so the mean
    // over 400 runs has sd ≈ 0.005.
    assert!((total / runs as f64 - 0.5).abs() < 0.025);
}

fn contribution_rows() -> impl Strategy<Value = Matrix> {
    (2usize..9, 6usize..10).prop_flat_map(|(steps, n)| {
        prop::collection::vec(0.01f64..1.0, steps * n).prop_map(move |v| Matrix::from_vec(steps, n, v))
    })
}

fn rescaled(m: &Matrix, scales: &[f64]) -> Matrix {
    let mut out = m.clone();
    for t in 0..m.rows() {
        out.row_mut(t).iter_mut().for_each(|v| *v *= scales[t]);
    }
    out
}

proptest! {
    #[test]
    fn normalized_contribution_has_mean_one(m in contribution_rows()) {
        let r = normalized_from_rows(&m).unwrap();
        prop_assert!((r.iter().sum::<f64>() / r.len() as f64 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn features_ignore_step_scale(m in contribution_rows(), scales in prop::collection::vec(0.01f64..100.0, 9)) {
        let s = rescaled(&m, &scales);
        let (a, b) = (normalized_from_rows(&m).unwrap(), normalized_from_rows(&s).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        for lambda in [0.5, 1.0, 1.5, 2.0] {
            // Values sitting on the threshold may flip under rounding.
            if a.iter().all(|v| (v - lambda).abs() > 1e-9) {
                prop_assert_eq!(high_contribution_ratio(&a, lambda), high_contribution_ratio(&b, lambda));
            }
        }
        let (va, _) = build_feature_vector(&m, 3, 3).unwrap();
        let (vb, _) = build_feature_vector(&s, 3, 3).unwrap();
        for (x, y) in va.iter().zip(&vb) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn ratio_is_non_increasing_in_lambda(m in contribution_rows(), l1 in 0.0f64..4.0, l2 in 0.0f64..4.0) {
        let r = normalized_from_rows(&m).unwrap();
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let (a, b) = (high_contribution_ratio(&r, lo), high_contribution_ratio(&r, hi));
        prop_assert!(b <= a);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn staticity_ignores_position_permutation(m in contribution_rows(), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut perm: Vec<usize> = (0..m.cols()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let mut p = Matrix::zeros(m.rows(), m.cols());
        for t in 0..m.rows() {
            for (j, &src) in perm.iter().enumerate() {
                p.set(t, j, m.get(t, src));
            }
        }
        for k in 1..=m.rows() / 2 {
            prop_assert!((staticity(&m, k).unwrap() - staticity(&p, k).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_entries_are_finite_and_staticity_bounded(m in contribution_rows()) {
        let (v, _) = build_feature_vector(&m, 3, 3).unwrap();
        prop_assert!(v.iter().all(|x| x.is_finite()));
        for s in &v[6..] {
            prop_assert!((0.0..=1.0).contains(s));
        }
    }

    #[test]
    fn distribution_is_scale_covariant(z in prop::collection::vec(-2.0f64..2.0, 1..8), bias in -1.0f64..1.0, c in 0.1f64..10.0) {
        prop_assume!(z.iter().any(|&v| v > 0.0));
        let cfg = LrpConfig::default();
        let mut a = vec![0.0; z.len()];
        distribute(&z, bias, 1.0, &cfg, &mut a);
        let scaled: Vec<f64> = z.iter().map(|&v| if v > 0.0 { c * v } else { v }).collect();
        let mut b = vec![0.0; z.len()];
        distribute(&scaled, bias, 1.0, &cfg, &mut b);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!(*x >= 0.0);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn relevance_is_conserved_and_non_negative(model_seed in 0u64..1000, src in prop::collection::vec(3u32..9, 1..7), out in prop::collection::vec(2u32..9, 1..7)) {
        let cfg = ModelConfig {
            vocab_size: 9,
            encoder_layers: 2,
            decoder_layers: 2,
            d_model: 4,
            heads: 2,
            d_ff: 6,
            max_source_len: 16,
            max_target_len: 16,
            label_smoothing: 0.1,
        };
        let w = common::randomized(&cfg, model_seed);
        let mut src = src;
        src.push(common::EOS);
        let lrp = LrpConfig::default();
        match token_contributions(&src, &out, &w, &lrp) {
            Ok(r) => {
                prop_assert!(r.identity_error() < 1e-6);
                for step in &r.steps {
                    prop_assert!(step.conservation_error < 1e-5);
                    prop_assert!(step.source.iter().chain(&step.prefix).all(|&v| v >= 0.0));
                }
            }
            Err(hallucheck_core::Error::DegenerateStep { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
        // Attention rows of the trace stay row-stochastic.
        let (trace, _) = force_decode(&w, &src, &out).unwrap();
        for layer in 0..cfg.decoder_layers {
            for a in trace.cross_attention(layer).unwrap() {
                for t in 0..a.rows() {
                    prop_assert!((a.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}
