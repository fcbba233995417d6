//! Text-overlap and classification metrics.
//!
//! BLEU here is sentence-level with add-one smoothing on the n-gram
//! precisions of order two and above; the unigram precision is left
//! unsmoothed, so a hypothesis sharing no token with the reference scores
//! exactly 0. When the hypothesis is shorter than `n`, the smoothed
//! precision of that order is `(0 + 1) / (0 + 1) = 1`.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// A detector output paired with its ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    /// Higher means more hallucination-like.
    pub score: f64,
    pub label: bool,
    pub decision: bool,
}

impl ScoredPrediction {
    pub fn new(score: f64, label: bool, decision: bool) -> Self {
        ScoredPrediction {
            score,
            label,
            decision,
        }
    }
}

fn ngram_counts<T: Ord>(seq: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if seq.len() >= n {
        for g in seq.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the hypothesis n-gram total for order `n`.
fn modified_precision_counts<T: Ord>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, hyp.len().saturating_sub(n - 1))
}

/// Smoothed sentence-level BLEU in `[0, 1]`.
pub fn sentence_bleu<T: Ord>(hyp: &[T], reference: &[T], max_n: usize) -> Result<f64> {
    if hyp.is_empty() || reference.is_empty() {
        return Err(Error::EmptyInput);
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("max_n must be at least 1".into()));
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (matches, total) = modified_precision_counts(hyp, reference, n);
        let smooth = if n >= 2 { 1.0 } else { 0.0 };
        let num = matches as f64 + smooth;
        let den = total as f64 + smooth;
        if num == 0.0 {
            return Ok(0.0);
        }
        log_sum += math::ln(num / den);
    }
    let c = hyp.len() as f64;
    let r = reference.len() as f64;
    let bp = if c > r { 1.0 } else { math::exp(1.0 - r / c) };
    Ok((bp * math::exp(log_sum / max_n as f64)).clamp(0.0, 1.0))
}

/// Σ over distinct n-grams of `max(0, count − 1)`, summed over `n ∈ [n_min, n_max]`.
pub fn repetition_count<T: Ord>(seq: &[T], n_min: usize, n_max: usize) -> usize {
    (n_min.max(1)..=n_max)
        .map(|n| ngram_counts(seq, n).values().map(|&c| c - 1).sum::<usize>())
        .sum()
}

/// Repetition range used by the degeneration heuristics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepetitionConfig {
    pub n_min: usize,
    pub n_max: usize,
}

impl Default for RepetitionConfig {
    fn default() -> Self {
        RepetitionConfig { n_min: 2, n_max: 4 }
    }
}

/// `repetition_count(out) − repetition_count(src)`, signed.
pub fn repetition_excess<T: Ord, U: Ord>(src: &[T], out: &[U], rep: RepetitionConfig) -> i64 {
    repetition_count(out, rep.n_min, rep.n_max) as i64
        - repetition_count(src, rep.n_min, rep.n_max) as i64
}

/// True iff the output has at least `k` more repeated n-grams than the source.
pub fn is_degenerated<T: Ord, U: Ord>(src: &[T], out: &[U], k: usize, rep: RepetitionConfig) -> bool {
    repetition_excess(src, out, rep) >= k as i64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Nothing was predicted positive; precision is reported as 0.
    pub no_predicted_positives: bool,
    /// No positive label present; recall is reported as 0.
    pub no_positive_labels: bool,
}

pub fn binary_prf(preds: &[ScoredPrediction]) -> Result<Prf> {
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for p in preds {
        match (p.decision, p.label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(prf_from_counts(tp, fp, fn_))
}

pub fn prf_from_counts(tp: usize, fp: usize, fn_: usize) -> Prf {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        no_predicted_positives: tp + fp == 0,
        no_positive_labels: tp + fn_ == 0,
    }
}

/// ROC AUC as the normalized Mann–Whitney U statistic (ties count ½).
pub fn auc(preds: &[ScoredPrediction]) -> Result<f64> {
    let n_pos = preds.iter().filter(|p| p.label).count();
    let n_neg = preds.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels("auc needs both classes"));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].score.total_cmp(&preds[b].score));
    // Mid-ranks over tie groups, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && preds[order[j]].score == preds[order[i]].score {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum_pos += mid * order[i..j].iter().filter(|&&k| preds[k].label).count() as f64;
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmdMode {
    Paired,
    Unpaired,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Smd {
    pub value: f64,
    pub mode: SmdMode,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standardized mean difference of `h` relative to `o`.
///
/// Paired: `mean(h − o) / sd(h − o)`. Unpaired: difference of means over
/// the pooled sample standard deviation.
pub fn standardized_mean_difference(h: &[f64], o: &[f64], paired: bool) -> Result<Smd> {
    if h.len() < 2 || o.len() < 2 {
        return Err(Error::InvalidArgument("need at least two values per group".into()));
    }
    if paired {
        if h.len() != o.len() {
            return Err(Error::DimensionMismatch {
                expected: h.len(),
                got: o.len(),
            });
        }
        let d: Vec<f64> = h.iter().zip(o).map(|(a, b)| a - b).collect();
        let sd = math::sqrt(sample_var(&d));
        if !(sd > 1e-12) {
            return Err(Error::DegenerateVariance);
        }
        Ok(Smd {
            value: mean(&d) / sd,
            mode: SmdMode::Paired,
        })
    } else {
        let (nh, no) = (h.len() as f64, o.len() as f64);
        let pooled = ((nh - 1.0) * sample_var(h) + (no - 1.0) * sample_var(o)) / (nh + no - 2.0);
        let sd = math::sqrt(pooled);
        if !(sd > 1e-12) {
            return Err(Error::DegenerateVariance);
        }
        Ok(Smd {
            value: (mean(h) - mean(o)) / sd,
            mode: SmdMode::Unpaired,
        })
    }
}

/// Fraction of true labels among the `k` highest scores. Equal scores keep
/// their input order.
pub fn precision_at_k(preds: &[ScoredPrediction], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if k > preds.len() {
        return Err(Error::InvalidArgument("k exceeds number of predictions".into()));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let hits = order[..k].iter().filter(|&&i| preds[i].label).count();
    Ok(hits as f64 / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sp(score: f64, label: bool) -> ScoredPrediction {
        ScoredPrediction::new(score, label, false)
    }

    #[test]
    fn bleu_identical_is_one() {
        let s = ["a", "b", "c", "d", "e"];
        assert_eq!(sentence_bleu(&s, &s, 4).unwrap(), 1.0);
    }

    #[test]
    fn bleu_disjoint_is_zero() {
        assert_eq!(sentence_bleu(&["a", "b"], &["c", "d"], 4).unwrap(), 0.0);
    }

    #[test]
    fn bleu_short_hypothesis_hand_value() {
        // p1 = 3/3, p2 = 2/2, p3 = 1/1, p4 = (0+1)/(0+1); BP = exp(1 - 4/3).
        let expected = libm::exp(1.0 - 4.0 / 3.0);
        let got = sentence_bleu(&["a", "b", "c"], &["a", "b", "c", "d"], 4).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got - 0.716_531_310_573_789_2).abs() < 1e-12);
    }

    #[test]
    fn bleu_empty_is_error() {
        let empty: [&str; 0] = [];
        assert_eq!(sentence_bleu(&empty, &["a"], 4), Err(Error::EmptyInput));
        assert_eq!(sentence_bleu(&["a"], &empty, 4), Err(Error::EmptyInput));
    }

    #[test]
    fn repetition_counts() {
        assert_eq!(repetition_count(&["a", "b", "a", "b", "a", "b"], 2, 2), 3);
        assert_eq!(repetition_count(&["a", "b", "c", "d"], 2, 4), 0);
        let empty: [u32; 0] = [];
        assert_eq!(repetition_count(&empty, 2, 4), 0);
    }

    #[test]
    fn degeneration_threshold() {
        let rep = RepetitionConfig::default();
        // src rep 0, out rep 3 (bigrams only: a b a b a b → 3; trigrams a b a ×2, b a b ×2 → 2; ...)
        let src = ["x", "y", "z"];
        let out = ["a", "b", "a", "b"]; // bigram (a,b)×2 → 1, trigrams distinct → 1 total
        assert!(!is_degenerated(&src, &out, 3, rep));
        let out3 = ["a", "a", "a", "a"]; // bigrams aa×3 → 2, trigrams aaa×2 → 1 ⇒ 3
        assert_eq!(repetition_count(&out3, 2, 4), 3);
        assert!(is_degenerated(&src, &out3, 3, rep));
        assert!(!is_degenerated(&out3, &out3, 3, rep));
    }

    #[test]
    fn prf_hand_counts() {
        let mut preds = vec![];
        for _ in 0..3 {
            preds.push(ScoredPrediction::new(1.0, true, true));
        }
        preds.push(ScoredPrediction::new(1.0, false, true));
        preds.push(ScoredPrediction::new(0.0, true, false));
        preds.push(ScoredPrediction::new(0.0, false, false));
        let prf = binary_prf(&preds).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.75, 0.75, 0.75));
    }

    #[test]
    fn prf_all_negative_predictions() {
        let preds = [
            ScoredPrediction::new(0.0, true, false),
            ScoredPrediction::new(0.0, false, false),
        ];
        let prf = binary_prf(&preds).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.0, 0.0, 0.0));
        assert!(prf.no_predicted_positives);
        assert_eq!(binary_prf(&[]), Err(Error::EmptyInput));
    }

    #[test]
    fn auc_cases() {
        let preds = [sp(0.9, true), sp(0.4, true), sp(0.5, false), sp(0.1, false)];
        assert_eq!(auc(&preds).unwrap(), 0.75);
        let ties = [sp(0.3, true), sp(0.3, false), sp(0.3, true)];
        assert_eq!(auc(&ties).unwrap(), 0.5);
        let sep = [sp(2.0, true), sp(1.0, false)];
        assert_eq!(auc(&sep).unwrap(), 1.0);
        assert!(matches!(auc(&[sp(1.0, true)]), Err(Error::DegenerateLabels(_))));
    }

    #[test]
    fn smd_cases() {
        let o = [0.0, 1.0, 2.0, 3.0];
        let h = [1.0, 2.0, 5.0, 6.0];
        let smd = standardized_mean_difference(&h, &o, true).unwrap();
        assert!((smd.value - 1.732_050_807_568_877_2).abs() < 1e-12);
        assert_eq!(smd.mode, SmdMode::Paired);
        let rev = standardized_mean_difference(&o, &h, true).unwrap();
        assert_eq!(rev.value, -smd.value);
        assert_eq!(
            standardized_mean_difference(&o, &o, true),
            Err(Error::DegenerateVariance)
        );
        let un = standardized_mean_difference(&h, &o, false).unwrap();
        assert_eq!(un.mode, SmdMode::Unpaired);
    }

    #[test]
    fn precision_at_k_counts() {
        let mut preds = vec![];
        for i in 0..40 {
            // top-20 by score: indices 39..20; three of them labeled true.
            preds.push(sp(i as f64, matches!(i, 39 | 30 | 21 | 5)));
        }
        assert_eq!(precision_at_k(&preds, 20).unwrap(), 0.15);
        assert!(precision_at_k(&preds, 0).is_err());
        assert!(precision_at_k(&preds, 41).is_err());
    }
}
