//! Pipeline configuration, read from TOML.
//!
//! Every stage seed is derived from the master `seed` (see
//! [`PipelineConfig::stage_seed`]); the `seed` fields inside the embedded
//! stage sections are overwritten with the derived values.

use std::path::{Path, PathBuf};

use hallucheck_core::detector::MlpHyper;
use hallucheck_core::features::FeatureConfig;
use hallucheck_core::lrp::LrpConfig;
use hallucheck_core::model::{LengthNormalization, ModelConfig, TrainConfig};
use hallucheck_core::perturb::GenConfig;
use hallucheck_core::seed;
use hallucheck_core::toy::ToyConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    /// Master seed.
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub generation: GenConfig,
    pub lrp: LrpConfig,
    pub attention: AttentionSection,
    pub features: FeatureConfig,
    pub detector: DetectorSection,
    pub stress: StressSection,
    pub analysis: AnalysisSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            seed: 1,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig {
                steps: 1200,
                ..TrainConfig::default()
            },
            decode: DecodeConfig::default(),
            generation: GenConfig {
                max_seeds: Some(1500),
                train_size: 160,
                val_size: 60,
                ..GenConfig::toy_detector()
            },
            lrp: LrpConfig::default(),
            attention: AttentionSection::default(),
            features: FeatureConfig::default(),
            detector: DetectorSection::default(),
            stress: StressSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Root of every artifact; `--out` overrides it.
    pub out: PathBuf,
    /// Tab-separated parallel corpus. When absent the toy generator
    /// configured under `[corpus.toy]` is used.
    pub corpus: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out: PathBuf::from("runs/toy"),
            corpus: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub toy: ToyConfig,
    /// The first `heldout` pairs are kept out of training and serve as
    /// perturbation seeds.
    pub heldout: usize,
    /// Words seen fewer times map to `<unk>`.
    pub min_count: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            toy: ToyConfig::default(),
            heldout: 4000,
            min_count: 1,
        }
    }
}

/// [`ModelConfig`] without the vocabulary size, which comes from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub label_smoothing: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ModelConfig::toy(0);
        ModelSection {
            encoder_layers: t.encoder_layers,
            decoder_layers: t.decoder_layers,
            d_model: t.d_model,
            heads: t.heads,
            d_ff: t.d_ff,
            max_source_len: t.max_source_len,
            max_target_len: t.max_target_len,
            label_smoothing: t.label_smoothing,
        }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            max_source_len: self.max_source_len,
            max_target_len: self.max_target_len,
            label_smoothing: self.label_smoothing,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam: usize,
    pub max_len: usize,
    pub length_normalization: LengthNormalization,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            beam: 4,
            max_len: 60,
            length_normalization: LengthNormalization::Average,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSection {
    /// Decoder layer whose cross-attention the attention baseline reads;
    /// the last one when absent.
    pub layer: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub mlp: MlpHyper,
    /// Independent training runs (derived seeds) averaged in reports.
    pub runs: usize,
    /// Repetition margin of the degeneration baseline.
    pub degeneration_k: usize,
    /// Each entry lists detector names joined by AND.
    pub ensembles: Vec<Vec<String>>,
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection {
            mlp: MlpHyper::default(),
            runs: 3,
            degeneration_k: 3,
            ensembles: vec![vec!["lrp-mlp".into(), "nmt-score".into()], vec!["lrp-mlp".into(), "attention-mlp".into()]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StressSection {
    pub top_k: usize,
    /// Target positive rate each detector is calibrated to.
    pub rate: f64,
}

impl Default for StressSection {
    fn default() -> Self {
        StressSection { top_k: 20, rate: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Source length of seeds in the analysis data profile.
    pub source_words: usize,
    /// Only the first `output_clip` generation steps enter the analysis.
    pub output_clip: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            source_words: 12,
            output_clip: 15,
        }
    }
}

/// Recursive table merge; arrays and scalars in `top` replace `base`.
fn overlay(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

pub const DETECTOR_NAMES: [&str; 5] = ["lrp-mlp", "attention-mlp", "random", "degeneration", "nmt-score"];

impl PipelineConfig {
    /// Keys missing from `text` keep the values of [`PipelineConfig::default`],
    /// also inside partially given sections.
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::config(path.display().to_string(), e.to_string());
        // Parsed once on its own for errors that point at the offending line.
        toml::from_str::<PipelineConfig>(text).map_err(|e| bad(&e))?;
        let given: toml::Table = toml::from_str(text).map_err(|e| bad(&e))?;
        let mut merged = toml::Table::try_from(PipelineConfig::default()).expect("config serializes");
        overlay(&mut merged, given);
        let cfg: PipelineConfig = merged.try_into().map_err(|e| bad(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&crate::io::read_string(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Seed of a pipeline stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive(self.seed, stage)
    }

    pub fn toy(&self) -> ToyConfig {
        ToyConfig {
            seed: self.stage_seed("corpus"),
            ..self.corpus.toy.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed("train"),
            ..self.train.clone()
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.stage_seed("generate"),
            ..self.generation.clone()
        }
    }

    /// Generation settings of the analysis profile: every seed has exactly
    /// `analysis.source_words` words.
    pub fn analysis_gen_config(&self) -> GenConfig {
        GenConfig {
            min_source_words: self.analysis.source_words,
            max_source_words: self.analysis.source_words,
            seed: self.stage_seed("generate-analysis"),
            ..self.generation.clone()
        }
    }

    /// MLP settings of detector training run `run`.
    pub fn mlp_hyper(&self, run: usize) -> MlpHyper {
        MlpHyper {
            seed: seed::derive_index(self.stage_seed("detector"), run as u64),
            ..self.detector.mlp.clone()
        }
    }

    pub fn random_seed(&self, run: usize) -> u64 {
        seed::derive_index(self.stage_seed("random"), run as u64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config("version", format!("expected {CONFIG_VERSION}, found {}", self.version)));
        }
        let m = &self.model;
        for (name, v) in [
            ("model.encoder_layers", m.encoder_layers),
            ("model.decoder_layers", m.decoder_layers),
            ("model.d_model", m.d_model),
            ("model.heads", m.heads),
            ("model.d_ff", m.d_ff),
            ("model.max_source_len", m.max_source_len),
            ("model.max_target_len", m.max_target_len),
            ("train.batch_size", self.train.batch_size),
            ("decode.beam", self.decode.beam),
            ("decode.max_len", self.decode.max_len),
            ("detector.runs", self.detector.runs),
            ("detector.mlp.hidden", self.detector.mlp.hidden),
            ("detector.mlp.seeds", self.detector.mlp.seeds),
            ("stress.top_k", self.stress.top_k),
            ("analysis.source_words", self.analysis.source_words),
            ("analysis.output_clip", self.analysis.output_clip),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if m.d_model % m.heads != 0 {
            return Err(Error::config("model.heads", "must divide model.d_model"));
        }
        if !(0.0..1.0).contains(&m.label_smoothing) {
            return Err(Error::config("model.label_smoothing", "must be in [0, 1)"));
        }
        if self.decode.max_len > m.max_target_len {
            return Err(Error::config("decode.max_len", "exceeds model.max_target_len"));
        }
        if !(self.stress.rate > 0.0 && self.stress.rate <= 1.0) {
            return Err(Error::config("stress.rate", "must be in (0, 1]"));
        }
        if !(self.detector.mlp.learning_rate > 0.0) {
            return Err(Error::config("detector.mlp.learning_rate", "must be positive"));
        }
        if self.features.k1 == 0 || self.features.k2 == 0 || self.features.max_window == 0 {
            return Err(Error::config("features", "k1, k2 and max_window must be at least 1"));
        }
        for (i, members) in self.detector.ensembles.iter().enumerate() {
            if members.len() < 2 {
                return Err(Error::config(format!("detector.ensembles[{i}]"), "needs at least two members"));
            }
            if let Some(bad) = members.iter().find(|n| !DETECTOR_NAMES.contains(&n.as_str())) {
                return Err(Error::config(format!("detector.ensembles[{i}]"), format!("unknown detector {bad}")));
            }
        }
        self.lrp.validate().map_err(|e| Error::config("lrp", e.to_string()))?;
        self.generation.validate().map_err(|e| Error::config("generation", e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&cfg.to_toml(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_sections_take_defaults() {
        let cfg = PipelineConfig::from_toml("seed = 9\n[train]\nsteps = 5\n", Path::new("x")).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        let cfg = PipelineConfig::from_toml("[generation]\nval_size = 7\n[generation.thresholds]\nmax_copy = 0.4\n", Path::new("x")).unwrap();
        let default = PipelineConfig::default();
        assert_eq!(cfg.generation.val_size, 7);
        assert_eq!(cfg.generation.thresholds.max_copy, 0.4);
        assert_eq!(cfg.generation.thresholds.max_overlap, default.generation.thresholds.max_overlap);
        assert_eq!(cfg.generation.min_source_words, default.generation.min_source_words);
        assert_eq!(cfg.generation.max_seeds, default.generation.max_seeds);
    }

    #[test]
    fn bad_fields_are_named() {
        let err = PipelineConfig::from_toml("[model]\nheads = 3\n", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("model.heads"), "{err}");
        let err = PipelineConfig::from_toml("[model]\nhedas = 3\n", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("hedas"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }
}
