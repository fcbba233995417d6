//! The pipeline commands. Each reads its inputs from the output root,
//! writes its artifacts plus a manifest, and returns a short summary.
//!
//! Layout under the output root:
//!
//! ```text
//! model/            weights.hcw training.json
//! data[-analysis]/  all_pairs.jsonl train.jsonl val.jsonl report.json
//! contributions[-analysis]/{lrp,attention}/
//!                   relevance.jsonl heatmap.csv features.jsonl skipped.jsonl
//! analysis[-analysis]/ report.json curves_step.csv curves_position.csv
//! detector/run-N/   one JSON file per detector
//! eval/             report.json
//! detect/           <detector>-<split>.json
//! stress/           report.json
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hallucheck_core::detector::{
    calibrate_rate, ensemble_and, evaluate, mean_report, normalized_log_prob, train_best_of_seeds, tune_threshold, DetectionReport,
    DetectionSample, Detector,
};
use hallucheck_core::features::{extract, extract_from_rows, ContributionFeatures};
use hallucheck_core::lrp::{attention_contributions, token_contributions, RelevanceMatrix};
use hallucheck_core::metrics::{repetition_excess, standardized_mean_difference, RepetitionConfig};
use hallucheck_core::model::{train_with, Example, TrainReport};
use hallucheck_core::perturb::{balance_split, build_pairs, ContrastivePair, GenConfig, GenerationReport, Split};
use hallucheck_core::toy::ToyLanguage;
use hallucheck_core::vocab::{TokenId, Vocabulary, EOS};
use hallucheck_core::{Error as CoreError, Matrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, DETECTOR_NAMES};
use crate::error::{Error, Result};
use crate::io::{check_outputs, read_corpus, read_json, read_jsonl, read_sources, write_bytes, write_json, write_jsonl};
use crate::model_file::{self, sha256_hex, ModelFile};
use crate::parallel::{decode, ParallelGradients, ParallelTranslator};
use crate::records::*;

/// Relevance totals must match one within this after normalization.
pub const IDENTITY_TOLERANCE: f64 = 1e-6;

const STAGES: [&str; 6] = ["corpus", "train", "generate", "generate-analysis", "detector", "random"];

/// Which seed filter produced a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Detector training data.
    Detector,
    /// Fixed-length seeds for the contrastive analysis.
    Analysis,
}

impl Profile {
    fn suffix(self) -> &'static str {
        match self {
            Profile::Detector => "",
            Profile::Analysis => "-analysis",
        }
    }
}

pub struct Context {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub overwrite: bool,
}

fn log(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

impl Context {
    pub fn new(cfg: PipelineConfig, out: Option<PathBuf>, overwrite: bool) -> Self {
        let out = out.unwrap_or_else(|| cfg.paths.out.clone());
        Context { cfg, out, overwrite }
    }

    pub fn weights_path(&self) -> PathBuf {
        self.out.join("model/weights.hcw")
    }

    pub fn data_dir(&self, profile: Profile) -> PathBuf {
        self.out.join(format!("data{}", profile.suffix()))
    }

    pub fn contributions_dir(&self, profile: Profile, mode: Mode) -> PathBuf {
        self.out.join(format!("contributions{}", profile.suffix())).join(mode.name())
    }

    pub fn analysis_dir(&self, profile: Profile) -> PathBuf {
        self.out.join(format!("analysis{}", profile.suffix()))
    }

    pub fn detector_path(&self, run: usize, name: &str) -> PathBuf {
        self.out.join(format!("detector/run-{run}/{name}.json"))
    }

    /// The configuration hash ignores the output root, so the same
    /// settings hash identically wherever they are run.
    pub fn config_hash(&self) -> String {
        let mut cfg = self.cfg.clone();
        cfg.paths.out = PathBuf::new();
        sha256_hex(cfg.to_toml().as_bytes())
    }

    fn relative(&self, p: &Path) -> String {
        let r = p.strip_prefix(&self.out).unwrap_or(p);
        r.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
    }

    fn artifact(&self, p: &Path) -> Result<ArtifactRef> {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        Ok(ArtifactRef {
            path: self.relative(p),
            sha256: sha256_hex(&bytes),
        })
    }

    fn manifest(&self, command: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<Manifest> {
        Ok(Manifest {
            command: command.into(),
            artifact_version: ARTIFACT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            core_version: hallucheck_core::VERSION.into(),
            master_seed: self.cfg.seed,
            stage_seeds: STAGES.iter().map(|s| (s.to_string(), self.cfg.stage_seed(s))).collect(),
            config_hash: self.config_hash(),
            inputs: inputs.iter().map(|p| self.artifact(p)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| self.artifact(p)).collect::<Result<_>>()?,
        })
    }

    fn write_manifest(&self, dir: &Path, command: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        write_json(&dir.join("manifest.json"), &self.manifest(command, inputs, outputs)?)
    }

    fn check(&self, paths: &[PathBuf]) -> Result<()> {
        let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
        check_outputs(&refs, self.overwrite)
    }

    fn require(&self, path: &Path, hint: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::Usage(format!("{} not found; run `{hint}` first", path.display())))
        }
    }

    /// The configured corpus file, or the toy corpus.
    fn corpus(&self) -> Result<(Vec<(String, String)>, Option<PathBuf>)> {
        let (pairs, path) = match &self.cfg.paths.corpus {
            Some(p) => (read_corpus(p)?, Some(p.clone())),
            None => (ToyLanguage::new(&self.cfg.toy()).corpus(), None),
        };
        if pairs.is_empty() {
            let shown = path.clone().unwrap_or_else(|| PathBuf::from("<toy corpus>"));
            return Err(Error::format(shown, "corpus is empty"));
        }
        Ok((pairs, path))
    }

    fn heldout(&self, corpus: &[(String, String)]) -> usize {
        self.cfg.corpus.heldout.min(corpus.len())
    }

    fn model(&self) -> Result<ModelFile> {
        let path = self.weights_path();
        self.require(&path, "train-model")?;
        let m = model_file::read(&path)?;
        if m.weights.config() != &self.cfg.model.with_vocab(m.vocab.len()) {
            log(format!("warning: {} was trained with a different [model] section; using the file's", path.display()));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub vocab_size: usize,
    pub parameters: usize,
    pub corpus_pairs: usize,
    pub heldout: usize,
    pub training_examples: usize,
    /// Pairs dropped for exceeding the model's length limits.
    pub too_long: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub report: TrainReport,
}

pub fn train_model(ctx: &Context) -> Result<TrainingRecord> {
    let cfg = &ctx.cfg;
    let dir = ctx.out.join("model");
    let weights_path = ctx.weights_path();
    let log_path = dir.join("training.json");
    ctx.check(&[weights_path.clone(), log_path.clone()])?;

    let (corpus, corpus_path) = ctx.corpus()?;
    let heldout = ctx.heldout(&corpus);
    if heldout == corpus.len() {
        return Err(Error::config("corpus.heldout", format!("leaves no training pairs in a corpus of {}", corpus.len())));
    }
    let vocab = Vocabulary::build(corpus.iter().map(|(s, t)| (s.as_str(), t.as_str())), cfg.corpus.min_count);
    let mcfg = cfg.model.with_vocab(vocab.len());
    let all: Vec<Example> = corpus[heldout..]
        .iter()
        .map(|(s, t)| Example {
            source: vocab.encode_source(s),
            target: vocab.tokenize(t).tokens,
        })
        .collect();
    let total = all.len();
    let examples: Vec<Example> = all
        .into_iter()
        .filter(|e| e.source.len() <= mcfg.max_source_len && e.target.len() < mcfg.max_target_len)
        .collect();
    let too_long = total - examples.len();
    if too_long > 0 {
        log(format!("warning: dropped {too_long} training pairs longer than the model's limits"));
    }
    log(format!(
        "training on {} pairs, vocabulary {}, {} steps",
        examples.len(),
        vocab.len(),
        cfg.train.steps
    ));
    let (weights, report) = train_with(&examples, &mcfg, &cfg.train_config(), &ParallelGradients, |step, loss| {
        if step % 100 == 0 {
            log(format!("step {step} loss {loss:.4}"));
        }
    })?;
    let record = TrainingRecord {
        vocab_size: vocab.len(),
        parameters: weights.tensors().iter().map(|t| t.data().len()).sum(),
        corpus_pairs: corpus.len(),
        heldout,
        training_examples: examples.len(),
        too_long,
        steps: report.losses.len(),
        final_loss: report.losses.last().copied(),
        report,
    };
    model_file::write(&weights_path, &weights, &vocab)?;
    write_json(&log_path, &record)?;
    let inputs: Vec<PathBuf> = corpus_path.into_iter().collect();
    ctx.write_manifest(&dir, "train-model", &inputs, &[weights_path, log_path])?;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub report: GenerationReport,
    pub train: usize,
    pub val: usize,
}

pub fn generate_data(ctx: &Context, profile: Profile) -> Result<DataSummary> {
    let dir = ctx.data_dir(profile);
    let [all_path, train_path, val_path, report_path] = ["all_pairs.jsonl", "train.jsonl", "val.jsonl", "report.json"].map(|f| dir.join(f));
    ctx.check(&[all_path.clone(), train_path.clone(), val_path.clone(), report_path.clone()])?;
    let model = ctx.model()?;
    let (corpus, corpus_path) = ctx.corpus()?;
    let seeds = &corpus[..ctx.heldout(&corpus)];
    let gen = gen_config_for(ctx, profile);
    let translator = ParallelTranslator {
        weights: &model.weights,
        decode: &ctx.cfg.decode,
    };
    let (pairs, report) = build_pairs(&translator, &model.vocab, seeds, &gen).map_err(|e| match e {
        CoreError::EmptyInput => Error::format(
            corpus_path.clone().unwrap_or_else(|| PathBuf::from("<toy corpus>")),
            "no held-out pair passes the seed filter",
        ),
        e => e.into(),
    })?;
    log(format!(
        "{} pairs from {} seeds: {} hallucinated, {} negative, {} discarded",
        report.pairs, report.seeds, report.hallucinated, report.kept_negative, report.discarded
    ));
    let dataset = balance_split(pairs.clone(), &gen, report)?;
    write_jsonl(&all_path, &pairs)?;
    write_jsonl(&train_path, &dataset.train)?;
    write_jsonl(&val_path, &dataset.val)?;
    write_json(&report_path, &dataset.report)?;
    let mut inputs = vec![ctx.weights_path()];
    inputs.extend(corpus_path);
    ctx.write_manifest(&dir, "generate-data", &inputs, &[all_path, train_path, val_path, report_path])?;
    Ok(DataSummary {
        train: dataset.train.len(),
        val: dataset.val.len(),
        report: dataset.report,
    })
}

fn read_pairs(ctx: &Context, profile: Profile) -> Result<(Vec<ContrastivePair>, Vec<PathBuf>)> {
    let dir = ctx.data_dir(profile);
    let paths = vec![dir.join("train.jsonl"), dir.join("val.jsonl")];
    let mut pairs = Vec::new();
    for p in &paths {
        ctx.require(p, "generate-data")?;
        pairs.extend(read_jsonl::<ContrastivePair>(p)?);
    }
    Ok((pairs, paths))
}

/// One translation whose contributions are computed.
struct Job<'a> {
    sample: u64,
    role: Role,
    pair: Option<&'a ContrastivePair>,
    source: &'a str,
    output: &'a str,
    finished: bool,
}

enum Outcome {
    Done(Box<(RelevanceRecord, FeatureRecord)>),
    Skipped(SkippedRecord),
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Errors that make a single sample unusable rather than the run invalid.
fn skippable(e: &CoreError) -> bool {
    matches!(
        e,
        CoreError::DegenerateStep { .. } | CoreError::SequenceTooShort { .. } | CoreError::SourceTooShortForK1 { .. } | CoreError::EmptyInput
    )
}

struct Scored {
    relevance: RelevanceMatrix,
    features: ContributionFeatures,
    log_prob: f64,
}

fn score_output(ctx: &Context, model: &ModelFile, mode: Mode, src: &[TokenId], out: &[TokenId]) -> std::result::Result<Scored, CoreError> {
    let w = &model.weights;
    let relevance = match mode {
        Mode::Lrp => {
            let r = token_contributions(src, out, w, &ctx.cfg.lrp)?;
            r.check(IDENTITY_TOLERANCE)?;
            r
        }
        Mode::Attention => attention_contributions(src, out, w, ctx.cfg.attention.layer, ctx.cfg.lrp.source_clip)?,
    };
    let features = extract(&relevance, &ctx.cfg.features)?;
    Ok(Scored {
        features,
        log_prob: normalized_log_prob(w, src, out)?,
        relevance,
    })
}

fn run_job(ctx: &Context, model: &ModelFile, mode: Mode, job: &Job, rep: RepetitionConfig) -> Result<Outcome> {
    let vocab = &model.vocab;
    let skip = |reason: String| {
        Ok(Outcome::Skipped(SkippedRecord {
            sample: job.sample,
            role: job.role,
            reason,
        }))
    };
    let src = vocab.encode_source(job.source);
    let mut out = vocab.tokenize(job.output).tokens;
    if job.finished {
        out.push(EOS);
    }
    if out.is_empty() {
        return skip("empty output".into());
    }
    let scored = match score_output(ctx, model, mode, &src, &out) {
        Ok(s) => s,
        Err(e) if skippable(&e) => return skip(e.to_string()),
        Err(e) => return Err(e.into()),
    };
    let surface = |t: TokenId| vocab.token(t).to_string();
    let relevance = RelevanceRecord::new(job.sample, job.role, mode, &scored.relevance, surface);
    let features = FeatureRecord {
        sample: job.sample,
        role: job.role,
        mode,
        seed_id: job.pair.map(|p| p.seed_id),
        split: job.pair.map(|p| p.split),
        label: match job.role {
            Role::Perturbed => job.pair.map(|p| p.is_hallucinated()),
            _ => None,
        },
        degenerated: job.pair.is_some_and(|p| p.degenerated) && job.role == Role::Perturbed,
        repetition_excess: repetition_excess(&words(job.source), &words(job.output), rep),
        log_prob: scored.log_prob,
        source_len: src.len(),
        output_len: out.len(),
        features: scored.features,
    };
    Ok(Outcome::Done(Box::new((relevance, features))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionSummary {
    pub samples: usize,
    pub exported: usize,
    pub skipped: usize,
    pub clipped: usize,
}

struct Exported {
    relevance: Vec<RelevanceRecord>,
    features: Vec<FeatureRecord>,
    skipped: Vec<SkippedRecord>,
}

fn run_jobs(ctx: &Context, model: &ModelFile, mode: Mode, jobs: &[Job], rep: RepetitionConfig) -> Result<Exported> {
    let outcomes: Vec<Outcome> = jobs.par_iter().map(|j| run_job(ctx, model, mode, j, rep)).collect::<Result<_>>()?;
    let mut ex = Exported {
        relevance: Vec::new(),
        features: Vec::new(),
        skipped: Vec::new(),
    };
    for o in outcomes {
        match o {
            Outcome::Done(b) => {
                let (r, f) = *b;
                ex.relevance.push(r);
                ex.features.push(f);
            }
            Outcome::Skipped(s) => ex.skipped.push(s),
        }
    }
    let clipped = ex.relevance.iter().filter(|r| r.source_clipped).count();
    if clipped > 0 {
        log(format!(
            "warning: {clipped} sources longer than {} tokens were clipped",
            ctx.cfg.lrp.source_clip
        ));
    }
    Ok(ex)
}

/// Contributions of every perturbed translation in the train and val
/// splits, plus the original translation of each hallucinated pair.
pub fn contributions(ctx: &Context, profile: Profile, mode: Mode) -> Result<ContributionSummary> {
    let dir = ctx.contributions_dir(profile, mode);
    let outputs = ["relevance.jsonl", "heatmap.csv", "features.jsonl", "skipped.jsonl"].map(|f| dir.join(f));
    ctx.check(&outputs)?;
    let model = ctx.model()?;
    let (pairs, mut inputs) = read_pairs(ctx, profile)?;
    let mut jobs = Vec::new();
    for p in &pairs {
        jobs.push(Job {
            sample: p.id,
            role: Role::Perturbed,
            pair: Some(p),
            source: &p.perturbed_source,
            output: &p.perturbed_translation,
            finished: p.perturbed_finished,
        });
        if p.is_hallucinated() {
            jobs.push(Job {
                sample: p.id,
                role: Role::Original,
                pair: Some(p),
                source: &p.source,
                output: &p.original_translation,
                finished: p.original_finished,
            });
        }
    }
    log(format!("{} contributions for {} outputs", mode.name(), jobs.len()));
    let ex = run_jobs(ctx, &model, mode, &jobs, ctx.cfg.generation.repetition)?;
    let [relevance_path, heatmap_path, features_path, skipped_path] = outputs;
    write_jsonl(&relevance_path, &ex.relevance)?;
    write_bytes(&heatmap_path, heatmap_csv(&ex.relevance).as_bytes())?;
    write_jsonl(&features_path, &ex.features)?;
    write_jsonl(&skipped_path, &ex.skipped)?;
    inputs.insert(0, ctx.weights_path());
    ctx.write_manifest(
        &dir,
        &format!("contributions --mode {}", mode.name()),
        &inputs,
        &[relevance_path, heatmap_path, features_path, skipped_path],
    )?;
    Ok(ContributionSummary {
        samples: jobs.len(),
        exported: ex.relevance.len(),
        skipped: ex.skipped.len(),
        clipped: ex.relevance.iter().filter(|r| r.source_clipped).count(),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Paired comparison of one metric between hallucinated outputs and the
/// originals of the same pairs.
pub fn compare(h: &[f64], o: &[f64]) -> MetricComparison {
    let means = GroupMeans {
        hallucinated: mean(h),
        original: mean(o),
    };
    match standardized_mean_difference(h, o, true) {
        Ok(smd) => MetricComparison {
            means,
            smd: Some(smd),
            note: None,
        },
        Err(e) => MetricComparison {
            means,
            smd: None,
            note: Some(e.to_string()),
        },
    }
}

/// First `clip` steps of a relevance export as (source rows, source share
/// per step).
fn clipped_rows(r: &RelevanceRecord, clip: usize) -> (Matrix, Vec<f64>) {
    let m = r.source_matrix();
    let steps = m.rows().min(clip);
    let mut out = Matrix::zeros(steps, m.cols());
    for t in 0..steps {
        out.row_mut(t).copy_from_slice(m.row(t));
    }
    let share = (0..steps).map(|t| m.row(t).iter().sum()).collect();
    (out, share)
}

/// Mean of column `i` over the rows that have it.
fn ragged_means(rows: &[Vec<f64>]) -> Vec<(f64, usize)> {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    (0..width)
        .map(|i| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(i).copied()).collect();
            (mean(&vals), vals.len())
        })
        .collect()
}

fn curve_csv(index: &str, h: &[Vec<f64>], o: &[Vec<f64>]) -> String {
    let (h, o) = (ragged_means(h), ragged_means(o));
    let mut out = format!("{index},hallucinated,hallucinated_n,original,original_n\n");
    for i in 0..h.len().max(o.len()) {
        let cell = |c: &[(f64, usize)]| c.get(i).map_or(",0".to_string(), |(m, n)| format!("{m:?},{n}"));
        writeln!(out, "{},{},{}", i + 1, cell(&h), cell(&o)).expect("write to string");
    }
    out
}

/// Reference effect-size signs: staticity rises and the high-contribution
/// ratio falls for hallucinations.
const REFERENCE_SIGNS: [(&str, i8); 2] = [("max_staticity", 1), ("high_contribution_ratio", -1)];

/// Compare hallucinated outputs with the originals of their pairs.
pub fn analyze(ctx: &Context, profile: Profile) -> Result<AnalysisReport> {
    let dir = ctx.analysis_dir(profile);
    let outputs = ["report.json", "curves_step.csv", "curves_position.csv"].map(|f| dir.join(f));
    ctx.check(&outputs)?;
    let (pairs, mut inputs) = read_pairs(ctx, profile)?;
    let relevance_path = ctx.contributions_dir(profile, Mode::Lrp).join("relevance.jsonl");
    ctx.require(&relevance_path, "contributions --mode lrp")?;
    let records: Vec<RelevanceRecord> = read_jsonl(&relevance_path)?;
    inputs.push(relevance_path.clone());
    let by_key: HashMap<(u64, Role), &RelevanceRecord> = records.iter().map(|r| ((r.sample, r.role), r)).collect();

    let fc = &ctx.cfg.features;
    let clip = ctx.cfg.analysis.output_clip;
    let mut h_feats = Vec::new();
    let mut o_feats = Vec::new();
    let mut degenerated = 0;
    for p in pairs.iter().filter(|p| p.is_hallucinated()) {
        let (Some(h), Some(o)) = (by_key.get(&(p.id, Role::Perturbed)), by_key.get(&(p.id, Role::Original))) else {
            continue;
        };
        let feats = |r: &RelevanceRecord| {
            let (m, share) = clipped_rows(r, clip);
            extract_from_rows(&m, share, fc)
        };
        match (feats(h), feats(o)) {
            (Ok(a), Ok(b)) => {
                degenerated += usize::from(p.degenerated);
                h_feats.push(a);
                o_feats.push(b);
            }
            (Err(e), _) | (_, Err(e)) if skippable(&e) => {}
            (Err(e), _) | (_, Err(e)) => return Err(e.into()),
        }
    }
    if h_feats.len() < 2 {
        return Err(Error::format(
            &relevance_path,
            format!("need at least two hallucinated pairs with both outputs scored, found {}", h_feats.len()),
        ));
    }
    let column = |fs: &[ContributionFeatures], f: &dyn Fn(&ContributionFeatures) -> f64| fs.iter().map(f).collect::<Vec<f64>>();
    let metric = |f: &dyn Fn(&ContributionFeatures) -> f64| compare(&column(&h_feats, f), &column(&o_feats, f));

    let ratio_sweep: Vec<RatioSmd> = fc
        .lambda_grid
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let c = metric(&|f| f.ratio_sweep[i]);
            RatioSmd {
                lambda,
                smd: c.smd,
                means: c.means,
            }
        })
        .collect();
    let selected_lambda = ratio_sweep
        .iter()
        .filter_map(|r| r.smd.map(|s| (r.lambda, s.value.abs())))
        .fold(None, |best: Option<(f64, f64)>, c| if best.is_none_or(|b| c.1 > b.1) { Some(c) } else { best })
        .map(|b| b.0);

    let max_staticity = metric(&|f| f.max_staticity);
    let high_contribution_ratio = metric(&|f| f.high_contribution_ratio);
    let direction = REFERENCE_SIGNS
        .iter()
        .map(|&(name, sign)| {
            let observed = match name {
                "max_staticity" => max_staticity.smd,
                _ => high_contribution_ratio.smd,
            }
            .map(|s| s.value);
            DirectionCheck {
                metric: name.into(),
                reference_sign: sign,
                observed,
                sign_matches: observed.map(|v| v * f64::from(sign) > 0.0),
            }
        })
        .collect();
    let report = AnalysisReport {
        pairs: h_feats.len(),
        degenerated,
        max_staticity,
        high_contribution_ratio,
        selected_lambda,
        ratio_sweep,
        eos_share: metric(&|f| f.eos_share),
        relative_source_contribution: metric(&|f| mean(&f.relative_source)),
        direction,
    };
    let [report_path, step_path, position_path] = outputs;
    write_json(&report_path, &report)?;
    let rel = |fs: &[ContributionFeatures]| fs.iter().map(|f| f.relative_source.clone()).collect::<Vec<_>>();
    let norm = |fs: &[ContributionFeatures]| fs.iter().map(|f| f.normalized.clone()).collect::<Vec<_>>();
    write_bytes(&step_path, curve_csv("step", &rel(&h_feats), &rel(&o_feats)).as_bytes())?;
    write_bytes(&position_path, curve_csv("position", &norm(&h_feats), &norm(&o_feats)).as_bytes())?;
    ctx.write_manifest(&dir, "analyze", &inputs, &[report_path, step_path, position_path])?;
    Ok(report)
}

/// Detection samples of the perturbed outputs in each split, joined from
/// the LRP and attention exports. Samples missing from either are left out.
pub struct Samples {
    pub train: Vec<DetectionSample>,
    pub val: Vec<DetectionSample>,
    pub dropped: usize,
    pub inputs: Vec<PathBuf>,
}

pub fn detection_samples(ctx: &Context) -> Result<Samples> {
    let mut inputs = Vec::new();
    let mut load = |mode: Mode| -> Result<HashMap<u64, FeatureRecord>> {
        let path = ctx.contributions_dir(Profile::Detector, mode).join("features.jsonl");
        ctx.require(&path, &format!("contributions --mode {}", mode.name()))?;
        let records: Vec<FeatureRecord> = read_jsonl(&path)?;
        inputs.push(path);
        Ok(records.into_iter().filter(|r| r.role == Role::Perturbed).map(|r| (r.sample, r)).collect())
    };
    let lrp = load(Mode::Lrp)?;
    let attention = load(Mode::Attention)?;
    let (pairs, data_inputs) = read_pairs(ctx, Profile::Detector)?;
    inputs.extend(data_inputs);
    let mut s = Samples {
        train: Vec::new(),
        val: Vec::new(),
        dropped: 0,
        inputs,
    };
    for p in &pairs {
        let (Some(l), Some(a)) = (lrp.get(&p.id), attention.get(&p.id)) else {
            s.dropped += 1;
            continue;
        };
        let sample = DetectionSample {
            id: p.id,
            label: p.is_hallucinated(),
            lrp_features: Some(l.features.vector.clone()),
            attention_features: Some(a.features.vector.clone()),
            log_prob: Some(l.log_prob),
            repetition_excess: p.repetition_excess,
        };
        match p.split {
            Split::Train => s.train.push(sample),
            Split::Val => s.val.push(sample),
            Split::Unassigned => s.dropped += 1,
        }
    }
    if s.dropped > 0 {
        log(format!("warning: {} pairs lack features and are left out", s.dropped));
    }
    Ok(s)
}

fn xy(samples: &[DetectionSample], f: fn(&DetectionSample) -> Option<&Vec<f64>>) -> Vec<(Vec<f64>, bool)> {
    samples
        .iter()
        .filter_map(|s| f(s).map(|x| (x.clone(), s.label)))
        .collect()
}

/// File stem of an ensemble of named detectors.
pub fn ensemble_name(members: &[String]) -> String {
    format!("and-{}", members.join("+"))
}

/// Every detector file name of one run, in a fixed order.
pub fn detector_names(cfg: &PipelineConfig) -> Vec<String> {
    DETECTOR_NAMES
        .iter()
        .map(|s| s.to_string())
        .chain(cfg.detector.ensembles.iter().map(|m| ensemble_name(m)))
        .collect()
}

fn train_run(ctx: &Context, run: usize, s: &Samples) -> Result<Vec<DetectorFile>> {
    let cfg = &ctx.cfg;
    let hyper = cfg.mlp_hyper(run);
    let mut files: Vec<DetectorFile> = Vec::new();
    let file = |name: &str, detector: Detector, mlp: Option<MlpTraining>| DetectorFile {
        artifact_version: ARTIFACT_VERSION,
        name: name.into(),
        run,
        detector,
        mlp,
    };
    for (name, f) in [
        ("lrp-mlp", (|s: &DetectionSample| s.lrp_features.as_ref()) as fn(&DetectionSample) -> Option<&Vec<f64>>),
        ("attention-mlp", |s: &DetectionSample| s.attention_features.as_ref()),
    ] {
        let best = train_best_of_seeds(&xy(&s.train, f), &xy(&s.val, f), &hyper, hyper.seeds)?;
        let params = best.params;
        let detector = if name == "lrp-mlp" {
            Detector::LrpMlp { params, threshold: 0.5 }
        } else {
            Detector::AttentionMlp { params, threshold: 0.5 }
        };
        let training = MlpTraining {
            hyper: hyper.clone(),
            winning_seed_run: best.run,
            seed_val_f1: best.val_f1,
            log: best.log,
        };
        files.push(file(name, detector, Some(training)));
    }
    files.push(file("random", Detector::Random { seed: cfg.random_seed(run) }, None));
    files.push(file("degeneration", Detector::Degeneration { k: cfg.detector.degeneration_k }, None));
    // The threshold is tuned on −lp (higher means more suspicious).
    let scores: Vec<f64> = s.train.iter().map(|x| -x.log_prob.unwrap_or(0.0)).collect();
    let labels: Vec<bool> = s.train.iter().map(|x| x.label).collect();
    let choice = tune_threshold(&scores, &labels)?;
    files.push(file("nmt-score", Detector::NmtScore { threshold: -choice.threshold }, None));
    for members in &cfg.detector.ensembles {
        let detectors = members
            .iter()
            .map(|m| files.iter().find(|f| &f.name == m).map(|f| f.detector.clone()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::config("detector.ensembles", "unknown member"))?;
        files.push(file(&ensemble_name(members), Detector::EnsembleAnd { members: detectors }, None));
    }
    Ok(files)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub train: usize,
    pub val: usize,
    pub runs: usize,
    pub files: usize,
}

pub fn train_detector(ctx: &Context) -> Result<DetectorSummary> {
    let names = detector_names(&ctx.cfg);
    let runs = ctx.cfg.detector.runs;
    let outputs: Vec<PathBuf> = (0..runs).flat_map(|r| names.iter().map(move |n| (r, n))).map(|(r, n)| ctx.detector_path(r, n)).collect();
    ctx.check(&outputs)?;
    let s = detection_samples(ctx)?;
    log(format!("training detectors on {} samples, validating on {}", s.train.len(), s.val.len()));
    let per_run: Vec<Vec<DetectorFile>> = (0..runs).into_par_iter().map(|r| train_run(ctx, r, &s)).collect::<Result<_>>()?;
    for f in per_run.iter().flatten() {
        write_json(&ctx.detector_path(f.run, &f.name), f)?;
    }
    ctx.write_manifest(&ctx.out.join("detector"), "train-detector", &s.inputs, &outputs)?;
    Ok(DetectorSummary {
        train: s.train.len(),
        val: s.val.len(),
        runs,
        files: outputs.len(),
    })
}

fn read_detector(ctx: &Context, path: &Path) -> Result<DetectorFile> {
    ctx.require(path, "train-detector")?;
    let f: DetectorFile = read_json(path)?;
    if f.artifact_version != ARTIFACT_VERSION {
        return Err(Error::format(path, format!("artifact version {} is not supported", f.artifact_version)));
    }
    Ok(f)
}

/// Every detector of every run on the validation split, with means over runs.
pub fn eval(ctx: &Context) -> Result<EvalReport> {
    let dir = ctx.out.join("eval");
    let report_path = dir.join("report.json");
    ctx.check(std::slice::from_ref(&report_path))?;
    let s = detection_samples(ctx)?;
    let names = detector_names(&ctx.cfg);
    let mut inputs = s.inputs.clone();
    let mut runs = Vec::new();
    for r in 0..ctx.cfg.detector.runs {
        let mut reports = Vec::new();
        for n in &names {
            let path = ctx.detector_path(r, n);
            let f = read_detector(ctx, &path)?;
            inputs.push(path);
            reports.push(evaluate(&f.detector, &s.val)?);
        }
        runs.push(reports);
    }
    let means = (0..names.len())
        .map(|i| mean_report(&runs.iter().map(|r: &Vec<DetectionReport>| r[i].clone()).collect::<Vec<_>>()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let report = EvalReport {
        split: Split::Val,
        samples: s.val.len(),
        positives: s.val.iter().filter(|x| x.label).count(),
        runs,
        means,
    };
    write_json(&report_path, &report)?;
    ctx.write_manifest(&dir, "eval", &inputs, &[report_path])?;
    Ok(report)
}

/// Apply one detector file to a split.
pub fn detect(ctx: &Context, detector: &Path, split: Split) -> Result<DetectionReport> {
    let f = read_detector(ctx, detector)?;
    let split_name = match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Unassigned => return Err(Error::Usage("split must be train or val".into())),
    };
    let dir = ctx.out.join("detect");
    let path = dir.join(format!("{}-run{}-{split_name}.json", f.name, f.run));
    ctx.check(std::slice::from_ref(&path))?;
    let s = detection_samples(ctx)?;
    let samples = if split == Split::Train { &s.train } else { &s.val };
    let report = evaluate(&f.detector, samples)?;
    write_json(&path, &report)?;
    let mut inputs = s.inputs.clone();
    inputs.push(detector.to_path_buf());
    ctx.write_manifest(&dir, &format!("detect {}", f.name), &inputs, &[path])?;
    Ok(report)
}

/// Unlabeled translations with everything the detectors look at.
struct StressSample {
    sample: DetectionSample,
    source: String,
    output: String,
}

fn stress_sample(ctx: &Context, model: &ModelFile, id: u64, source: &str) -> Result<Option<StressSample>> {
    let src = model.vocab.encode_source(source);
    if src.len() > model.weights.config().max_source_len {
        log(format!("warning: input {} has {} tokens and is skipped", id + 1, src.len()));
        return Ok(None);
    }
    let out = decode(&model.weights, &src, &ctx.cfg.decode, false)?.output;
    let mut features = Vec::new();
    let mut log_prob = 0.0;
    for mode in [Mode::Lrp, Mode::Attention] {
        match score_output(ctx, model, mode, &src, &out) {
            Ok(s) => {
                log_prob = s.log_prob;
                features.push(s.features.vector);
            }
            Err(e) if skippable(&e) => {
                log(format!("warning: input {} skipped: {e}", id + 1));
                return Ok(None);
            }
            Err(e) => return Err(e.into()),
        }
    }
    let output = model.vocab.detokenize(&out);
    let attention = features.pop();
    Ok(Some(StressSample {
        sample: DetectionSample {
            id,
            label: false,
            lrp_features: features.pop(),
            attention_features: attention,
            log_prob: Some(log_prob),
            repetition_excess: repetition_excess(&words(source), &words(&output), ctx.cfg.generation.repetition),
        },
        source: source.to_string(),
        output,
    }))
}

/// Score an unlabeled corpus, list the top candidates of every detector and
/// the positives of rate-calibrated ensembles.
pub fn stress(ctx: &Context, input: &Path, run: usize) -> Result<StressReport> {
    let dir = ctx.out.join("stress");
    let report_path = dir.join("report.json");
    ctx.check(std::slice::from_ref(&report_path))?;
    let model = ctx.model()?;
    let sources = read_sources(input)?;
    if sources.is_empty() {
        return Err(Error::format(input, "no input sentences"));
    }
    let scored: Vec<StressSample> = sources
        .par_iter()
        .enumerate()
        .map(|(i, s)| stress_sample(ctx, &model, i as u64, s))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if scored.is_empty() {
        return Err(Error::format(input, "no input sentence could be scored"));
    }
    let n = scored.len();
    let mut top_k = ctx.cfg.stress.top_k;
    if top_k > n {
        log(format!("warning: top_k {top_k} exceeds the {n} scored inputs; listing all"));
        top_k = n;
    }
    let rate = ctx.cfg.stress.rate;
    let mut inputs = vec![ctx.weights_path(), input.to_path_buf()];
    let mut listings = Vec::new();
    let mut decisions: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for name in DETECTOR_NAMES {
        let path = ctx.detector_path(run, name);
        let f = read_detector(ctx, &path)?;
        inputs.push(path);
        let (scores, threshold) = match &f.detector {
            Detector::Degeneration { k } => {
                let scores: Vec<f64> = scored.iter().map(|s| s.sample.repetition_excess as f64).collect();
                (scores, *k as f64 - 0.5)
            }
            d => {
                let scores = scored
                    .iter()
                    .map(|s| Ok(d.decide(&s.sample)?.0.unwrap_or(0.0)))
                    .collect::<Result<Vec<f64>>>()?;
                let t = calibrate_rate(&scores, rate)?;
                (scores, t)
            }
        };
        let fired: Vec<bool> = scores.iter().map(|&s| s > threshold).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        listings.push(StressListing {
            detector: name.into(),
            threshold,
            positives: scored.iter().zip(&fired).filter(|(_, &d)| d).map(|(s, _)| s.sample.id).collect(),
            top: order[..top_k]
                .iter()
                .map(|&i| StressCandidate {
                    sample: scored[i].sample.id,
                    score: scores[i],
                    source: scored[i].source.clone(),
                    output: scored[i].output.clone(),
                })
                .collect(),
        });
        decisions.insert(name.to_string(), fired);
    }
    let ensembles = ctx
        .cfg
        .detector
        .ensembles
        .iter()
        .map(|members| {
            let streams: Vec<Vec<bool>> = members.iter().map(|m| decisions[m.as_str()].clone()).collect();
            let joint = ensemble_and(&streams)?;
            Ok(EnsemblePositives {
                detector: ensemble_name(members),
                samples: scored.iter().zip(&joint).filter(|(_, &d)| d).map(|(s, _)| s.sample.id).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = StressReport {
        samples: n,
        rate,
        top_k,
        listings,
        ensembles,
    };
    write_json(&report_path, &report)?;
    ctx.write_manifest(&dir, "stress", &inputs, &[report_path])?;
    Ok(report)
}

/// Every labeled stage in order, as run by `hallucheck all`.
pub fn run_all(ctx: &Context) -> Result<EvalReport> {
    train_model(ctx)?;
    generate_data(ctx, Profile::Detector)?;
    contributions(ctx, Profile::Detector, Mode::Lrp)?;
    contributions(ctx, Profile::Detector, Mode::Attention)?;
    train_detector(ctx)?;
    eval(ctx)
}

/// Generation settings of a data profile.
pub fn gen_config_for(ctx: &Context, profile: Profile) -> GenConfig {
    match profile {
        Profile::Detector => ctx.cfg.gen_config(),
        Profile::Analysis => ctx.cfg.analysis_gen_config(),
    }
}
