//! Hallucination detectors: a one-hidden-layer MLP over contribution
//! features, model-free baselines, AND ensembles and threshold tuning.
//!
//! Every scoring detector produces a hallucination score where larger means
//! more likely hallucinated; the decision is `score > threshold`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::metrics::{self, Prf, RepetitionConfig, ScoredPrediction};
use crate::model::{sequence_logprob, TransformerWeights};
use crate::seed;
use crate::tensor::Matrix;
use crate::vocab::TokenId;

/// Per-dimension z-scoring fitted on training features. Dimensions with
/// zero variance are dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub input_dim: usize,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let first = features.first().ok_or(Error::EmptyInput)?;
        let dim = first.len();
        if let Some(bad) = features.iter().find(|f| f.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        let n = features.len() as f64;
        let (mut kept, mut dropped, mut mean, mut std) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for d in 0..dim {
            let m = features.iter().map(|f| f[d]).sum::<f64>() / n;
            let var = features.iter().map(|f| (f[d] - m) * (f[d] - m)).sum::<f64>() / n;
            let s = math::sqrt(var);
            if s > 1e-12 && s.is_finite() {
                kept.push(d);
                mean.push(m);
                std.push(s);
            } else {
                dropped.push(d);
            }
        }
        if kept.is_empty() {
            return Err(Error::DegenerateVariance);
        }
        Ok(Standardizer {
            input_dim: dim,
            kept,
            dropped,
            mean,
            std,
        })
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(self
            .kept
            .iter()
            .enumerate()
            .map(|(j, &d)| (x[d] - self.mean[j]) / self.std[j])
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
}

/// `sigmoid(w2 · act(W1ᵀ z + b1) + b2)` on standardized input `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub standardizer: Standardizer,
    pub activation: Activation,
    /// `kept dims × hidden`.
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MlpParams {
    /// Xavier-uniform weights, zero biases.
    pub fn init(standardizer: Standardizer, hidden: usize, seed_value: u64) -> Self {
        let inputs = standardizer.kept.len();
        let mut rng = seed::rng(seed_value);
        let l1 = math::sqrt(6.0 / (inputs + hidden) as f64);
        let l2 = math::sqrt(6.0 / (hidden + 1) as f64);
        let w1 = Matrix::from_vec(inputs, hidden, (0..inputs * hidden).map(|_| rng.gen_range(-l1..l1)).collect());
        let w2 = (0..hidden).map(|_| rng.gen_range(-l2..l2)).collect();
        MlpParams {
            standardizer,
            activation: Activation::Tanh,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: 0.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn input_dim(&self) -> usize {
        self.standardizer.input_dim
    }

    /// Trainable parameters (standardization statistics excluded).
    pub fn param_count(&self) -> usize {
        self.w1.rows() * self.w1.cols() + self.b1.len() + self.w2.len() + 1
    }

    /// Trainable parameters in the order `w1, b1, w2, b2`.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.w1.data().to_vec();
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: v.len(),
            });
        }
        let (a, rest) = v.split_at(self.w1.data().len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.len());
        self.w1.data_mut().copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2 = d[0];
        Ok(())
    }

    fn hidden_layer(&self, z: &[f64]) -> Vec<f64> {
        let mut h = self.b1.clone();
        for (i, &zi) in z.iter().enumerate() {
            for (hj, &w) in h.iter_mut().zip(self.w1.row(i)) {
                *hj += zi * w;
            }
        }
        match self.activation {
            Activation::Tanh => h.iter_mut().for_each(|v| *v = math::tanh(*v)),
        }
        h
    }

    fn logit_standardized(&self, z: &[f64]) -> (Vec<f64>, f64) {
        let h = self.hidden_layer(z);
        let a = self.b2 + h.iter().zip(&self.w2).map(|(x, w)| x * w).sum::<f64>();
        (h, a)
    }

    /// Pre-sigmoid output for raw features.
    pub fn logit(&self, features: &[f64]) -> Result<f64> {
        let z = self.standardizer.apply(features)?;
        Ok(self.logit_standardized(&z).1)
    }

    /// Mean binary cross-entropy over `data` and its gradient in
    /// [`MlpParams::flat`] order.
    pub fn loss_and_gradient(&self, data: &[(Vec<f64>, bool)]) -> Result<(f64, Vec<f64>)> {
        if data.is_empty() {
            return Err(Error::EmptyInput);
        }
        let (inputs, hidden) = (self.w1.rows(), self.hidden());
        let mut g = vec![0.0; self.param_count()];
        let mut loss = 0.0;
        let n = data.len() as f64;
        let (gw1, rest) = g.split_at_mut(inputs * hidden);
        let (gb1, rest) = rest.split_at_mut(hidden);
        let (gw2, gb2) = rest.split_at_mut(hidden);
        for (x, label) in data {
            let z = self.standardizer.apply(x)?;
            let (h, a) = self.logit_standardized(&z);
            let y = if *label { 1.0 } else { 0.0 };
            loss += a.max(0.0) - a * y + math::ln(1.0 + math::exp(-a.abs()));
            let da = (math::sigmoid(a) - y) / n;
            gb2[0] += da;
            for j in 0..hidden {
                gw2[j] += da * h[j];
                let dh = da * self.w2[j] * (1.0 - h[j] * h[j]);
                gb1[j] += dh;
                for (i, &zi) in z.iter().enumerate() {
                    gw1[i * hidden + j] += dh * zi;
                }
            }
        }
        Ok((loss / n, g))
    }
}

/// Probability of hallucination.
pub fn mlp_forward(params: &MlpParams, features: &[f64]) -> Result<f64> {
    Ok(math::sigmoid(params.logit(features)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpHyper {
    pub hidden: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a better validation F1.
    pub patience: usize,
    pub seeds: usize,
    pub seed: u64,
}

impl Default for MlpHyper {
    fn default() -> Self {
        MlpHyper {
            hidden: 16,
            learning_rate: 0.5,
            max_epochs: 2000,
            patience: 300,
            seeds: 20,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub train_loss: Vec<f64>,
    pub val_f1: Vec<f64>,
}

fn f1_at(params: &MlpParams, data: &[(Vec<f64>, bool)], threshold: f64) -> Result<f64> {
    let preds = data
        .iter()
        .map(|(x, y)| {
            let p = mlp_forward(params, x)?;
            Ok(ScoredPrediction::new(p, *y, p > threshold))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(metrics::binary_prf(&preds)?.f1)
}

fn check_labels(data: &[(Vec<f64>, bool)], which: &'static str) -> Result<()> {
    let pos = data.iter().filter(|(_, y)| *y).count();
    if pos == 0 || pos == data.len() {
        return Err(Error::DegenerateLabels(which));
    }
    Ok(())
}

/// Full-batch gradient descent on binary cross-entropy. Returns the
/// parameters of the epoch with the best validation F1 (earliest on ties).
pub fn mlp_train(train: &[(Vec<f64>, bool)], val: &[(Vec<f64>, bool)], hyper: &MlpHyper, seed_value: u64) -> Result<(MlpParams, TrainingLog)> {
    check_labels(train, "training set needs both labels")?;
    if val.is_empty() {
        return Err(Error::EmptyInput);
    }
    let features: Vec<Vec<f64>> = train.iter().map(|(x, _)| x.clone()).collect();
    let standardizer = Standardizer::fit(&features)?;
    let mut params = MlpParams::init(standardizer, hyper.hidden, seed_value);
    let mut best = params.clone();
    let mut log = TrainingLog {
        best_val_f1: f1_at(&params, val, 0.5)?,
        ..TrainingLog::default()
    };
    log.val_f1.push(log.best_val_f1);
    let mut flat = params.flat();
    for epoch in 1..=hyper.max_epochs {
        let (loss, grad) = params.loss_and_gradient(train)?;
        if !loss.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Diverged { step: epoch, loss });
        }
        for (p, g) in flat.iter_mut().zip(&grad) {
            *p -= hyper.learning_rate * g;
        }
        params.set_flat(&flat)?;
        let f1 = f1_at(&params, val, 0.5)?;
        log.train_loss.push(loss);
        log.val_f1.push(f1);
        log.epochs = epoch;
        if f1 > log.best_val_f1 {
            log.best_val_f1 = f1;
            log.best_epoch = epoch;
            best = params.clone();
        } else if epoch - log.best_epoch >= hyper.patience {
            break;
        }
    }
    Ok((best, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestOfSeeds {
    pub params: MlpParams,
    pub log: TrainingLog,
    /// Index of the winning run.
    pub run: usize,
    /// Validation F1 of every run, in run order.
    pub val_f1: Vec<f64>,
}

/// Seed of run `i` of [`train_best_of_seeds`].
pub fn run_seed(hyper: &MlpHyper, i: usize) -> u64 {
    seed::derive_index(seed::derive(hyper.seed, "mlp"), i as u64)
}

/// Train `n_seeds` runs and keep the best by validation F1 (lowest run
/// index on ties).
pub fn train_best_of_seeds(train: &[(Vec<f64>, bool)], val: &[(Vec<f64>, bool)], hyper: &MlpHyper, n_seeds: usize) -> Result<BestOfSeeds> {
    if n_seeds == 0 {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let mut best: Option<BestOfSeeds> = None;
    let mut scores = Vec::with_capacity(n_seeds);
    for i in 0..n_seeds {
        let (params, log) = mlp_train(train, val, hyper, run_seed(hyper, i))?;
        scores.push(log.best_val_f1);
        if best.as_ref().is_none_or(|b| log.best_val_f1 > b.log.best_val_f1) {
            best = Some(BestOfSeeds {
                params,
                log,
                run: i,
                val_f1: Vec::new(),
            });
        }
    }
    let mut best = best.expect("at least one run");
    best.val_f1 = scores;
    Ok(best)
}

/// Fair coin per sample, driven by the sample id.
pub fn detect_random(seed_value: u64, id: u64) -> (f64, bool) {
    let u: f64 = seed::rng(seed::derive_index(seed_value, id)).gen();
    (u, u >= 0.5)
}

/// Hallucination iff the output repeats `k` more n-grams than the source.
pub fn detect_degeneration<S: Ord, T: Ord>(src: &[S], out: &[T], k: usize, rep: RepetitionConfig) -> bool {
    metrics::is_degenerated(src, out, k, rep)
}

/// Length-normalized log-probability of `out` given `src`.
pub fn normalized_log_prob(w: &TransformerWeights, src: &[TokenId], out: &[TokenId]) -> Result<f64> {
    if out.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(sequence_logprob(w, src, out)? / out.len() as f64)
}

/// Hallucination iff the normalized log-probability is below `threshold`.
pub fn detect_score(w: &TransformerWeights, src: &[TokenId], out: &[TokenId], threshold: f64) -> Result<bool> {
    if threshold.is_nan() {
        return Err(Error::InvalidArgument("threshold is NaN".into()));
    }
    Ok(normalized_log_prob(w, src, out)? < threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub f1: f64,
}

fn below(min: f64) -> f64 {
    min - min.abs().max(1.0)
}

/// Candidate thresholds: one below every score, then the midpoints between
/// adjacent distinct sorted scores.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut out = Vec::with_capacity(s.len());
    if let Some(&min) = s.first() {
        out.push(below(min));
    }
    out.extend(s.windows(2).map(|p| p[0] + (p[1] - p[0]) / 2.0));
    out
}

/// F1-maximizing threshold over [`threshold_candidates`]; ties go to the
/// lower threshold.
pub fn tune_threshold(scores: &[f64], labels: &[bool]) -> Result<ThresholdChoice> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::DegenerateLabels("threshold tuning needs both labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sweep upwards: at each candidate every score above it is positive.
    let (mut tp, mut fp) = (pos, labels.len() - pos);
    let mut best = ThresholdChoice {
        threshold: below(scores[order[0]]),
        f1: metrics::prf_from_counts(tp, fp, 0).f1,
    };
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        if i == order.len() {
            break;
        }
        let f1 = metrics::prf_from_counts(tp, fp, pos - tp).f1;
        if f1 > best.f1 {
            best = ThresholdChoice {
                threshold: s + (scores[order[i]] - s) / 2.0,
                f1,
            };
        }
    }
    Ok(best)
}

/// Per-sample AND of at least two decision streams.
pub fn ensemble_and(streams: &[Vec<bool>]) -> Result<Vec<bool>> {
    if streams.len() < 2 {
        return Err(Error::InvalidArgument("an ensemble needs at least two members".into()));
    }
    let n = streams[0].len();
    if let Some(bad) = streams.iter().find(|s| s.len() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: bad.len(),
        });
    }
    Ok((0..n).map(|i| streams.iter().all(|s| s[i])).collect())
}

/// Threshold whose positive rate (`score > threshold`) is the largest
/// achievable value not above `rate`: the `(⌊rate·N⌋ + 1)`-th highest score,
/// or one below every score when `⌊rate·N⌋ = N`.
pub fn calibrate_rate(scores: &[f64], rate: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument("target rate must be in (0, 1]".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let k = math::floor(rate * s.len() as f64) as usize;
    Ok(if k >= s.len() { below(s[s.len() - 1]) } else { s[k] })
}

/// What a detector can see of one output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSample {
    pub id: u64,
    pub label: bool,
    pub lrp_features: Option<Vec<f64>>,
    pub attention_features: Option<Vec<f64>>,
    /// Length-normalized log-probability of the output.
    pub log_prob: Option<f64>,
    pub repetition_excess: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Detector {
    LrpMlp { params: MlpParams, threshold: f64 },
    AttentionMlp { params: MlpParams, threshold: f64 },
    Random { seed: u64 },
    Degeneration { k: usize },
    /// Fires when the normalized log-probability is below `threshold`.
    NmtScore { threshold: f64 },
    EnsembleAnd { members: Vec<Detector> },
}

impl Detector {
    pub fn name(&self) -> String {
        match self {
            Detector::LrpMlp { .. } => "lrp-mlp".into(),
            Detector::AttentionMlp { .. } => "attention-mlp".into(),
            Detector::Random { .. } => "random".into(),
            Detector::Degeneration { .. } => "degeneration".into(),
            Detector::NmtScore { .. } => "nmt-score".into(),
            Detector::EnsembleAnd { members } => {
                let names: Vec<String> = members.iter().map(Detector::name).collect();
                alloc::format!("and({})", names.join(","))
            }
        }
    }

    /// Hallucination score (when the detector has one) and decision.
    pub fn decide(&self, s: &DetectionSample) -> Result<(Option<f64>, bool)> {
        let missing = |what: &str| Error::InvalidArgument(alloc::format!("sample {} has no {what}", s.id));
        match self {
            Detector::LrpMlp { params, threshold } => {
                let x = s.lrp_features.as_ref().ok_or_else(|| missing("contribution features"))?;
                let p = mlp_forward(params, x)?;
                Ok((Some(p), p > *threshold))
            }
            Detector::AttentionMlp { params, threshold } => {
                let x = s.attention_features.as_ref().ok_or_else(|| missing("attention features"))?;
                let p = mlp_forward(params, x)?;
                Ok((Some(p), p > *threshold))
            }
            Detector::Random { seed } => {
                let (u, d) = detect_random(*seed, s.id);
                Ok((Some(u), d))
            }
            Detector::Degeneration { k } => Ok((None, s.repetition_excess >= *k as i64)),
            Detector::NmtScore { threshold } => {
                let lp = s.log_prob.ok_or_else(|| missing("log-probability"))?;
                Ok((Some(-lp), lp < *threshold))
            }
            Detector::EnsembleAnd { members } => {
                if members.len() < 2 {
                    return Err(Error::InvalidArgument("an ensemble needs at least two members".into()));
                }
                let mut all = true;
                for m in members {
                    all &= m.decide(s)?.1;
                }
                Ok((None, all))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDecision {
    pub id: u64,
    pub label: bool,
    pub score: Option<f64>,
    pub decision: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub detector: String,
    pub samples: usize,
    pub positive_rate: f64,
    pub prf: Prf,
    /// Absent for detectors without a continuous score.
    pub auc: Option<f64>,
    pub decisions: Vec<SampleDecision>,
}

impl DetectionReport {
    /// Recompute metrics from per-sample decisions.
    pub fn from_decisions(detector: String, decisions: Vec<SampleDecision>) -> Result<Self> {
        if decisions.is_empty() {
            return Err(Error::EmptyInput);
        }
        let preds: Vec<ScoredPrediction> = decisions
            .iter()
            .map(|d| ScoredPrediction::new(d.score.unwrap_or(0.0), d.label, d.decision))
            .collect();
        let prf = metrics::binary_prf(&preds)?;
        let scored = decisions.iter().all(|d| d.score.is_some());
        let has_both = preds.iter().any(|p| p.label) && preds.iter().any(|p| !p.label);
        let auc = if scored && has_both { Some(metrics::auc(&preds)?) } else { None };
        Ok(DetectionReport {
            detector,
            samples: decisions.len(),
            positive_rate: decisions.iter().filter(|d| d.decision).count() as f64 / decisions.len() as f64,
            prf,
            auc,
            decisions,
        })
    }
}

pub fn evaluate(detector: &Detector, samples: &[DetectionSample]) -> Result<DetectionReport> {
    let decisions = samples
        .iter()
        .map(|s| {
            let (score, decision) = detector.decide(s)?;
            Ok(SampleDecision {
                id: s.id,
                label: s.label,
                score,
                decision,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DetectionReport::from_decisions(detector.name(), decisions)
}

/// Mean metrics over several runs of one detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanReport {
    pub detector: String,
    pub runs: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

pub fn mean_report(reports: &[DetectionReport]) -> Result<MeanReport> {
    let first = reports.first().ok_or(Error::EmptyInput)?;
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&DetectionReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let auc = if reports.iter().all(|r| r.auc.is_some()) {
        Some(mean(&|r| r.auc.unwrap_or(0.0)))
    } else {
        None
    };
    Ok(MeanReport {
        detector: first.detector.to_string(),
        runs: reports.len(),
        precision: mean(&|r| r.prf.precision),
        recall: mean(&|r| r.prf.recall),
        f1: mean(&|r| r.prf.f1),
        auc,
    })
}

/// F1-best degeneration margin among `candidates` (lowest on ties).
pub fn tune_degeneration_k(samples: &[DetectionSample], candidates: &[usize]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &k in candidates {
        let f1 = evaluate(&Detector::Degeneration { k }, samples)?.prf.f1;
        if best.is_none_or(|(_, b)| f1 > b) {
            best = Some((k, f1));
        }
    }
    best.ok_or(Error::EmptyInput)
}
