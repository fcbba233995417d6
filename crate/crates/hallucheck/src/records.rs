//! Serialized artifact records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use hallucheck_core::detector::{DetectionReport, Detector, MeanReport, MlpHyper, TrainingLog};
use hallucheck_core::features::ContributionFeatures;
use hallucheck_core::lrp::{RelevanceMatrix, StepRelevance};
use hallucheck_core::metrics::Smd;
use hallucheck_core::perturb::Split;
use hallucheck_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Lrp,
    Attention,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Lrp => "lrp",
            Mode::Attention => "attention",
        }
    }
}

/// Which output of a contrastive pair a record describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// Translation of the perturbed source (the detection sample).
    Perturbed,
    /// Translation of the unperturbed seed source.
    Original,
    /// Translation of an unlabeled input.
    Unlabeled,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Perturbed => "perturbed",
            Role::Original => "original",
            Role::Unlabeled => "unlabeled",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Relative to the output root.
    pub path: String,
    pub sha256: String,
}

/// Written by every command next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub artifact_version: u32,
    pub tool_version: String,
    pub core_version: String,
    pub master_seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    /// SHA-256 of the resolved configuration in TOML form.
    pub config_hash: String,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
}

/// One generation step of a relevance export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub source: Vec<f64>,
    pub prefix: Vec<f64>,
    pub normalization: f64,
    pub bos_mass: f64,
    pub out_of_window_mass: f64,
    pub bias_leak: f64,
    pub fallback_units: usize,
    pub conservation_error: f64,
}

impl From<&StepRelevance> for StepRecord {
    fn from(s: &StepRelevance) -> Self {
        StepRecord {
            step: 0,
            source: s.source.clone(),
            prefix: s.prefix.clone(),
            normalization: s.normalization,
            bos_mass: s.bos_mass,
            out_of_window_mass: s.out_of_window_mass,
            bias_leak: s.bias_leak,
            fallback_units: s.fallback_units,
            conservation_error: s.conservation_error,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceRecord {
    pub sample: u64,
    pub role: Role,
    pub mode: Mode,
    pub source_tokens: Vec<String>,
    pub output_tokens: Vec<String>,
    pub source_clipped: bool,
    pub original_source_len: usize,
    pub steps: Vec<StepRecord>,
}

impl RelevanceRecord {
    pub fn new(sample: u64, role: Role, mode: Mode, r: &RelevanceMatrix, surface: impl Fn(u32) -> String) -> Self {
        RelevanceRecord {
            sample,
            role,
            mode,
            source_tokens: r.source.iter().map(|&t| surface(t)).collect(),
            output_tokens: r.output.iter().map(|&t| surface(t)).collect(),
            source_clipped: r.source_clipped,
            original_source_len: r.original_source_len,
            steps: r
                .steps
                .iter()
                .enumerate()
                .map(|(t, s)| StepRecord {
                    step: t + 1,
                    ..StepRecord::from(s)
                })
                .collect(),
        }
    }

    pub fn source_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.steps.len(), self.source_tokens.len());
        for (t, s) in self.steps.iter().enumerate() {
            m.row_mut(t).copy_from_slice(&s.source);
        }
        m
    }
}

/// Features of one output plus what the baselines need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub sample: u64,
    pub role: Role,
    pub mode: Mode,
    pub seed_id: Option<u64>,
    pub split: Option<Split>,
    pub label: Option<bool>,
    pub degenerated: bool,
    pub repetition_excess: i64,
    /// Length-normalized log-probability of the output.
    pub log_prob: f64,
    pub source_len: usize,
    pub output_len: usize,
    pub features: ContributionFeatures,
}

/// A sample left out of the feature export and why.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub sample: u64,
    pub role: Role,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorFile {
    pub artifact_version: u32,
    pub name: String,
    pub run: usize,
    pub detector: Detector,
    pub mlp: Option<MlpTraining>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpTraining {
    pub hyper: MlpHyper,
    pub winning_seed_run: usize,
    pub seed_val_f1: Vec<f64>,
    pub log: TrainingLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub samples: usize,
    pub positives: usize,
    pub runs: Vec<Vec<DetectionReport>>,
    pub means: Vec<MeanReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMeans {
    pub hallucinated: f64,
    pub original: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioSmd {
    pub lambda: f64,
    pub smd: Option<Smd>,
    pub means: GroupMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub pairs: usize,
    pub degenerated: usize,
    pub max_staticity: MetricComparison,
    pub high_contribution_ratio: MetricComparison,
    /// Grid threshold with the largest |SMD| of the ratio.
    pub selected_lambda: Option<f64>,
    pub ratio_sweep: Vec<RatioSmd>,
    pub eos_share: MetricComparison,
    pub relative_source_contribution: MetricComparison,
    /// Reference effect sizes and whether the toy model's signs agree.
    pub direction: Vec<DirectionCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub means: GroupMeans,
    pub smd: Option<Smd>,
    /// Set when the SMD is undefined.
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionCheck {
    pub metric: String,
    pub reference_sign: i8,
    pub observed: Option<f64>,
    pub sign_matches: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressCandidate {
    pub sample: u64,
    pub score: f64,
    pub source: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressListing {
    pub detector: String,
    /// Decision threshold; calibrated to the target rate when the
    /// detector has a score.
    pub threshold: f64,
    /// Samples with `score > threshold`, in input order.
    pub positives: Vec<u64>,
    /// Highest scores first; ties keep input order.
    pub top: Vec<StressCandidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressReport {
    pub samples: usize,
    pub rate: f64,
    pub top_k: usize,
    pub listings: Vec<StressListing>,
    /// Positives of each ensemble of calibrated detectors.
    pub ensembles: Vec<EnsemblePositives>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePositives {
    pub detector: String,
    pub samples: Vec<u64>,
}

/// Step × position grid as CSV: `sample,role,step,position,token,value`.
/// Values use the shortest representation that parses back exactly.
pub fn heatmap_csv(records: &[RelevanceRecord]) -> String {
    let mut out = String::from("sample,role,step,position,token,value\n");
    for r in records {
        for s in &r.steps {
            for (i, v) in s.source.iter().enumerate() {
                let token = r.source_tokens[i].replace('"', "\"\"");
                writeln!(out, "{},{},{},{},\"{}\",{:?}", r.sample, r.role.name(), s.step, i, token, v).expect("write to string");
            }
        }
    }
    out
}

/// Parse [`heatmap_csv`] output back into per-(sample, role) grids.
pub fn parse_heatmap(text: &str, path: &Path) -> Result<BTreeMap<(u64, String), Matrix>> {
    let mut cells: BTreeMap<(u64, String), Vec<(usize, usize, f64)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", i + 1));
        let mut head = line.splitn(5, ',');
        let sample = head.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("sample"))?;
        let role = head.next().ok_or_else(|| bad("role"))?.to_string();
        let step: usize = head.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("step"))?;
        let pos: usize = head.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("position"))?;
        let rest = head.next().ok_or_else(|| bad("value"))?;
        let value: f64 = rest.rsplit(',').next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("value"))?;
        if step == 0 {
            return Err(bad("steps are 1-based"));
        }
        cells.entry((sample, role)).or_default().push((step - 1, pos, value));
    }
    Ok(cells
        .into_iter()
        .map(|(k, v)| {
            let rows = v.iter().map(|c| c.0).max().unwrap_or(0) + 1;
            let cols = v.iter().map(|c| c.1).max().unwrap_or(0) + 1;
            let mut m = Matrix::zeros(rows, cols);
            for (r, c, x) in v {
                m.set(r, c, x);
            }
            (k, m)
        })
        .collect())
}
