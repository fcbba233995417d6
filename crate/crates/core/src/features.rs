//! Contribution metrics and the detector's feature vector.
//!
//! All functions read only the source part of a relevance matrix: one row
//! per generation step, one column per source position (`</s>` included).

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrp::RelevanceMatrix;
use crate::math;
use crate::tensor::{dot, Matrix};

/// `Σ_i R_t(x_i)` for every step.
pub fn relative_source_contribution(r: &RelevanceMatrix) -> Vec<f64> {
    r.steps.iter().map(|s| s.source_total()).collect()
}

/// Each step's source row divided by its total.
fn step_distributions(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for t in 0..m.rows() {
        let total: f64 = m.row(t).iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateStep { step: t + 1 });
        }
        out.row_mut(t).iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// `R̄(x_i) = (1/T) Σ_t n · R_t(x_i) / Σ_i R_t(x_i)` over a `steps × n`
/// matrix of source contributions. The mean over positions is one.
pub fn normalized_from_rows(m: &Matrix) -> Result<Vec<f64>> {
    let (steps, n) = m.shape();
    if steps == 0 || n == 0 {
        return Err(Error::EmptyInput);
    }
    let d = step_distributions(m)?;
    let mut out = vec![0.0; n];
    for t in 0..steps {
        for (o, &v) in out.iter_mut().zip(d.row(t)) {
            *o += v;
        }
    }
    let scale = n as f64 / steps as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}

pub fn normalized_source_contribution(r: &RelevanceMatrix) -> Result<Vec<f64>> {
    normalized_from_rows(&r.source_matrix())
}

/// Share of positions whose normalized contribution exceeds `lambda`.
pub fn high_contribution_ratio(normalized: &[f64], lambda: f64) -> f64 {
    if normalized.is_empty() {
        return 0.0;
    }
    normalized.iter().filter(|&&v| v > lambda).count() as f64 / normalized.len() as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let norms = dot(a, a) * dot(b, b);
    if norms == 0.0 {
        return 0.0;
    }
    (dot(a, b) / math::sqrt(norms)).clamp(-1.0, 1.0)
}

/// Mean cosine similarity between the average contribution vectors of
/// adjacent length-`k` segments. Each step's row is first normalized to a
/// distribution; trailing steps that do not fill a segment are dropped.
pub fn staticity(m: &Matrix, k: usize) -> Result<f64> {
    let steps = m.rows();
    if k == 0 || steps < 2 * k {
        return Err(Error::SequenceTooShort { k, steps });
    }
    let d = step_distributions(m)?;
    let segments = steps / k;
    let n = m.cols();
    let averages: Vec<Vec<f64>> = (0..segments)
        .map(|s| {
            let mut avg = vec![0.0; n];
            for t in s * k..(s + 1) * k {
                for (a, &v) in avg.iter_mut().zip(d.row(t)) {
                    *a += v / k as f64;
                }
            }
            avg
        })
        .collect();
    let total: f64 = averages.windows(2).map(|p| cosine(&p[0], &p[1])).sum();
    Ok(total / (segments - 1) as f64)
}

/// Largest window that still yields two segments, capped at `k_max`.
pub fn largest_valid_window(steps: usize, k_max: usize) -> Option<usize> {
    let k = k_max.min(steps / 2);
    (k >= 1).then_some(k)
}

/// Maximum of `staticity(m, k)` over the valid `k ≤ k_max`.
pub fn max_staticity(m: &Matrix, k_max: usize) -> Result<f64> {
    let Some(top) = largest_valid_window(m.rows(), k_max) else {
        return Err(Error::SequenceTooShort {
            k: 1,
            steps: m.rows(),
        });
    };
    let mut best = f64::NEG_INFINITY;
    for k in 1..=top {
        best = best.max(staticity(m, k)?);
    }
    Ok(best)
}

/// Mean over steps of the `</s>` (last position) share of source mass.
pub fn eos_contribution_share(m: &Matrix) -> Result<f64> {
    let (steps, n) = m.shape();
    if steps == 0 || n == 0 {
        return Err(Error::EmptyInput);
    }
    let d = step_distributions(m)?;
    Ok((0..steps).map(|t| d.get(t, n - 1)).sum::<f64>() / steps as f64)
}

/// `[R̄ of the first k1 positions, R̄ of the last k1, s_1 … s_k2]`.
///
/// A window `k` without two complete segments takes the staticity of the
/// largest valid window; the number of such substitutions is returned.
pub fn build_feature_vector(m: &Matrix, k1: usize, k2: usize) -> Result<(Vec<f64>, usize)> {
    let (steps, n) = m.shape();
    if n < 2 * k1 {
        return Err(Error::SourceTooShortForK1 { k1, n });
    }
    let Some(top) = largest_valid_window(steps, k2.max(1)) else {
        return Err(Error::SequenceTooShort { k: 1, steps });
    };
    let rbar = normalized_from_rows(m)?;
    let mut v = Vec::with_capacity(2 * k1 + k2);
    v.extend_from_slice(&rbar[..k1]);
    v.extend_from_slice(&rbar[n - k1..]);
    let mut fallbacks = 0;
    let fallback = staticity(m, top)?;
    for k in 1..=k2 {
        if k <= top {
            v.push(staticity(m, k)?);
        } else {
            v.push(fallback);
            fallbacks += 1;
        }
    }
    Ok((v, fallbacks))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub k1: usize,
    pub k2: usize,
    /// Windows considered by the max-staticity metric.
    pub max_window: usize,
    /// Threshold for the high-contribution ratio.
    pub lambda: f64,
    /// Sweep grid for the ratio.
    pub lambda_grid: Vec<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            k1: 3,
            k2: 3,
            max_window: 3,
            lambda: 1.5,
            lambda_grid: (0..11).map(|i| 0.5 + 0.25 * i as f64).collect(),
        }
    }
}

impl FeatureConfig {
    pub fn dimension(&self) -> usize {
        2 * self.k1 + self.k2
    }
}

/// Every metric of one relevance matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionFeatures {
    pub relative_source: Vec<f64>,
    pub normalized: Vec<f64>,
    pub high_contribution_ratio: f64,
    /// Ratio at every grid threshold, in grid order.
    pub ratio_sweep: Vec<f64>,
    pub staticity: Vec<f64>,
    pub max_staticity: f64,
    pub eos_share: f64,
    pub vector: Vec<f64>,
    pub staticity_fallbacks: usize,
}

pub fn extract(r: &RelevanceMatrix, cfg: &FeatureConfig) -> Result<ContributionFeatures> {
    extract_from_rows(&r.source_matrix(), relative_source_contribution(r), cfg)
}

/// [`extract`] on a bare `steps × n` matrix; `relative_source` is passed
/// through untouched.
pub fn extract_from_rows(m: &Matrix, relative_source: Vec<f64>, cfg: &FeatureConfig) -> Result<ContributionFeatures> {
    let normalized = normalized_from_rows(m)?;
    let (vector, staticity_fallbacks) = build_feature_vector(m, cfg.k1, cfg.k2)?;
    let staticity = vector[2 * cfg.k1..].to_vec();
    Ok(ContributionFeatures {
        relative_source,
        high_contribution_ratio: high_contribution_ratio(&normalized, cfg.lambda),
        ratio_sweep: cfg.lambda_grid.iter().map(|&l| high_contribution_ratio(&normalized, l)).collect(),
        normalized,
        staticity,
        max_staticity: max_staticity(m, cfg.max_window)?,
        eos_share: eos_contribution_share(m)?,
        vector,
        staticity_fallbacks,
    })
}
