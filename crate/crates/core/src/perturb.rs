//! Source perturbations and BLEU-threshold labeling of contrastive pairs.
//!
//! Each seed pair `(x, y)` is translated as `y′`, perturbed to `x̃` and
//! translated again as `ỹ`. A pair is kept only if `bleu(y, y′)` clears the
//! quality threshold; it is a hallucination when `ỹ` shares almost nothing
//! with `y′` and is not a copy of `x̃`.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, RepetitionConfig};
use crate::seed::{self, Rng};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InsertClass {
    MostFrequent,
    LeastFrequent,
    MidFrequency,
    Punctuation,
}

impl InsertClass {
    pub const ALL: [InsertClass; 4] = [
        InsertClass::MostFrequent,
        InsertClass::LeastFrequent,
        InsertClass::MidFrequency,
        InsertClass::Punctuation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InsertClass::MostFrequent => "most-frequent",
            InsertClass::LeastFrequent => "least-frequent",
            InsertClass::MidFrequency => "mid-frequency",
            InsertClass::Punctuation => "punctuation",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "class")]
pub enum PerturbationKind {
    Misspell,
    Titlecase,
    Insert(InsertClass),
}

impl PerturbationKind {
    pub fn all() -> Vec<PerturbationKind> {
        let mut v = alloc::vec![PerturbationKind::Misspell, PerturbationKind::Titlecase];
        v.extend(InsertClass::ALL.iter().map(|&c| PerturbationKind::Insert(c)));
        v
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbationKind::Misspell => f.write_str("misspell"),
            PerturbationKind::Titlecase => f.write_str("titlecase"),
            PerturbationKind::Insert(c) => write!(f, "insert:{}", c.name()),
        }
    }
}

/// Delete each character with probability `p`; words left empty are
/// removed. With `per_word`, each word is instead selected with probability
/// `p` and loses one uniformly chosen character.
pub fn misspell(text: &str, p: f64, per_word: bool, rng: &mut Rng) -> String {
    let p = p.clamp(0.0, 1.0);
    let mut words: Vec<String> = Vec::new();
    for w in text.split_whitespace() {
        let chars: Vec<char> = w.chars().collect();
        let kept: String = if per_word {
            if rng.gen_bool(p) {
                let drop = rng.gen_range(0..chars.len());
                chars.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, c)| *c).collect()
            } else {
                w.to_string()
            }
        } else {
            chars.iter().filter(|_| !rng.gen_bool(p)).collect()
        };
        if !kept.is_empty() {
            words.push(kept);
        }
    }
    words.join(" ")
}

fn title(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars.flat_map(char::to_lowercase)).collect(),
        None => String::new(),
    }
}

/// Title-case each whitespace word independently with probability `p`.
pub fn titlecase(text: &str, p: f64, rng: &mut Rng) -> String {
    let p = p.clamp(0.0, 1.0);
    text.split_whitespace()
        .map(|w| if rng.gen_bool(p) { title(w) } else { w.to_string() })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Candidate tokens for insertion, grouped by class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsertionClasses {
    pub most_frequent: Vec<TokenId>,
    pub least_frequent: Vec<TokenId>,
    pub mid_frequency: Vec<TokenId>,
    pub punctuation: Vec<TokenId>,
}

impl InsertionClasses {
    /// Rank non-reserved, non-punctuation tokens seen on the source side by
    /// frequency (ties by id). The top and bottom `class_size` form the
    /// frequent/rare classes; `class_size` of the remainder are sampled once
    /// with `seed_value` for the mid-frequency class. Punctuation tokens are
    /// those made only of characters in `punctuation`.
    pub fn build(vocab: &Vocabulary, class_size: usize, punctuation: &str, seed_value: u64) -> Result<Self> {
        let is_punct = |s: &str| !s.is_empty() && s.chars().all(|c| punctuation.contains(c));
        let mut ranked: Vec<TokenId> = (0..vocab.len() as TokenId)
            .filter(|&id| !Vocabulary::is_reserved(id) && vocab.source_freq(id) > 0)
            .collect();
        let punct: Vec<TokenId> = ranked.iter().copied().filter(|&id| is_punct(vocab.token(id))).collect();
        ranked.retain(|&id| !is_punct(vocab.token(id)));
        ranked.sort_by(|&a, &b| vocab.source_freq(b).cmp(&vocab.source_freq(a)).then(a.cmp(&b)));
        if class_size == 0 || ranked.len() < 2 * class_size + 1 {
            return Err(Error::InsertionClass {
                class: InsertClass::MidFrequency.name(),
                size: ranked.len().saturating_sub(2 * class_size),
                need: 1,
            });
        }
        if punct.is_empty() {
            return Err(Error::InsertionClass {
                class: InsertClass::Punctuation.name(),
                size: 0,
                need: 1,
            });
        }
        let most = ranked[..class_size].to_vec();
        let least = ranked[ranked.len() - class_size..].to_vec();
        let mut rest = ranked[class_size..ranked.len() - class_size].to_vec();
        let mut rng = seed::rng(seed::derive(seed_value, "mid-frequency"));
        rest.shuffle(&mut rng);
        rest.truncate(class_size);
        rest.sort_unstable();
        Ok(InsertionClasses {
            most_frequent: most,
            least_frequent: least,
            mid_frequency: rest,
            punctuation: punct,
        })
    }

    pub fn members(&self, class: InsertClass) -> &[TokenId] {
        match class {
            InsertClass::MostFrequent => &self.most_frequent,
            InsertClass::LeastFrequent => &self.least_frequent,
            InsertClass::MidFrequency => &self.mid_frequency,
            InsertClass::Punctuation => &self.punctuation,
        }
    }
}

/// Prepend one token drawn uniformly from `class`.
pub fn insert_token(src: &[TokenId], class: InsertClass, classes: &InsertionClasses, rng: &mut Rng) -> Result<Vec<TokenId>> {
    let members = classes.members(class);
    if members.is_empty() {
        return Err(Error::InsertionClass {
            class: class.name(),
            size: 0,
            need: 1,
        });
    }
    let mut out = Vec::with_capacity(src.len() + 1);
    out.push(members[rng.gen_range(0..members.len())]);
    out.extend_from_slice(src);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Keep a seed only if `bleu(y, y′)` exceeds this.
    pub min_original_quality: f64,
    /// Hallucination requires `bleu(y′, ỹ)` below this.
    pub max_overlap: f64,
    /// Hallucination requires `bleu(x̃, ỹ)` below this (not a copy).
    pub max_copy: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            min_original_quality: 0.3,
            max_overlap: 0.03,
            max_copy: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairLabel {
    Hallucinated,
    KeptNegative,
    Discarded,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BleuEvidence {
    /// `bleu(y′, y)`: original translation against the reference.
    pub original_vs_reference: Option<f64>,
    /// `bleu(ỹ, y′)`: perturbed translation against the original one.
    pub perturbed_vs_original: Option<f64>,
    /// `bleu(ỹ, x̃)`: perturbed translation against the perturbed source.
    pub perturbed_vs_source: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labeling {
    pub label: PairLabel,
    pub bleu: BleuEvidence,
    pub discard_reason: Option<String>,
}

/// Apply the three BLEU predicates. Every BLEU value that can be computed
/// is recorded, also for discarded pairs.
pub fn label_pair<S: Ord>(perturbed_source: &[S], perturbed_out: &[S], reference: &[S], original_out: &[S], th: &Thresholds) -> Labeling {
    let bleu = |h: &[S], r: &[S]| metrics::sentence_bleu(h, r, 4).ok();
    let evidence = BleuEvidence {
        original_vs_reference: bleu(original_out, reference),
        perturbed_vs_original: bleu(perturbed_out, original_out),
        perturbed_vs_source: bleu(perturbed_out, perturbed_source),
    };
    let discard = |reason: &str| Labeling {
        label: PairLabel::Discarded,
        bleu: evidence,
        discard_reason: Some(reason.to_string()),
    };
    if reference.is_empty() || original_out.is_empty() {
        return discard("empty original translation or reference");
    }
    if perturbed_out.is_empty() || perturbed_source.is_empty() {
        return discard("empty perturbed translation or source");
    }
    let (Some(quality), Some(overlap), Some(copy)) = (
        evidence.original_vs_reference,
        evidence.perturbed_vs_original,
        evidence.perturbed_vs_source,
    ) else {
        return discard("bleu undefined");
    };
    if !(quality > th.min_original_quality) {
        return discard("original translation below quality threshold");
    }
    let label = if overlap < th.max_overlap && copy < th.max_copy {
        PairLabel::Hallucinated
    } else {
        PairLabel::KeptNegative
    };
    Labeling {
        label,
        bleu: evidence,
        discard_reason: None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub misspell_prob: f64,
    pub misspell_per_word: bool,
    pub titlecase_prob: f64,
    pub kinds: Vec<PerturbationKind>,
    pub insert_class_size: usize,
    pub punctuation: String,
    /// Seed filter on source length in words, inclusive.
    pub min_source_words: usize,
    pub max_source_words: usize,
    pub max_seeds: Option<usize>,
    pub thresholds: Thresholds,
    pub degeneration_k: usize,
    pub repetition: RepetitionConfig,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            misspell_prob: 0.1,
            misspell_per_word: false,
            titlecase_prob: 0.1,
            kinds: PerturbationKind::all(),
            insert_class_size: 100,
            punctuation: ".,;:!?，。".into(),
            min_source_words: 20,
            max_source_words: 60,
            max_seeds: None,
            thresholds: Thresholds::default(),
            degeneration_k: 3,
            repetition: RepetitionConfig::default(),
            train_size: 1000,
            val_size: 200,
            seed: 1,
        }
    }
}

impl GenConfig {
    /// Detector-data profile rescaled to toy sentence lengths.
    pub fn toy_detector() -> Self {
        GenConfig {
            insert_class_size: 20,
            min_source_words: 8,
            max_source_words: 24,
            ..GenConfig::default()
        }
    }

    /// Analysis profile: a fixed source length, as in the contrastive study.
    pub fn toy_analysis(source_words: usize) -> Self {
        GenConfig {
            min_source_words: source_words,
            max_source_words: source_words,
            ..GenConfig::toy_detector()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let th = &self.thresholds;
        for (name, v) in [
            ("misspell_prob", self.misspell_prob),
            ("titlecase_prob", self.titlecase_prob),
            ("min_original_quality", th.min_original_quality),
            ("max_overlap", th.max_overlap),
            ("max_copy", th.max_copy),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(alloc::format!("{name} must be in [0, 1]")));
            }
        }
        if self.train_size == 0 || self.val_size == 0 {
            return Err(Error::InvalidArgument("train_size and val_size must be at least 1".into()));
        }
        if self.min_source_words > self.max_source_words {
            return Err(Error::InvalidArgument("min_source_words exceeds max_source_words".into()));
        }
        Ok(())
    }
}

/// Translation backend used by dataset generation. Inputs are encoded
/// sources (ending with `</s>`); outputs are emitted tokens.
pub trait Translator {
    fn translate(&self, sources: &[Vec<TokenId>]) -> Result<Vec<Vec<TokenId>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Unassigned,
}

/// One perturbation of one seed pair, with both translations and the
/// labeling evidence. Field order is the serialized order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub id: u64,
    pub seed_id: u64,
    pub split: Split,
    pub kind: PerturbationKind,
    pub source: String,
    pub reference: String,
    pub original_translation: String,
    pub original_finished: bool,
    pub perturbed_source: String,
    pub perturbed_translation: String,
    pub perturbed_finished: bool,
    /// The perturbation changed the source text.
    pub perturbed: bool,
    pub bleu: BleuEvidence,
    pub label: PairLabel,
    pub discard_reason: Option<String>,
    pub degenerated: bool,
    pub repetition_excess: i64,
}

impl ContrastivePair {
    pub fn is_hallucinated(&self) -> bool {
        self.label == PairLabel::Hallucinated
    }
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Per-kind and per-label counts before balancing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub seeds: usize,
    pub pairs: usize,
    pub by_kind: Vec<KindCounts>,
    pub hallucinated: usize,
    pub kept_negative: usize,
    pub discarded: usize,
    pub degenerated: usize,
    pub train: SplitCounts,
    pub val: SplitCounts,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KindCounts {
    pub kind: String,
    pub hallucinated: usize,
    pub kept_negative: usize,
    pub discarded: usize,
    pub degenerated: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub hallucinated: usize,
    pub kept_negative: usize,
}

/// Seeds whose source word count lies in the configured bounds, keeping
/// their corpus index as seed id.
pub fn select_seeds<'a>(corpus: &'a [(String, String)], cfg: &GenConfig) -> Vec<(u64, &'a str, &'a str)> {
    let mut seeds: Vec<(u64, &str, &str)> = corpus
        .iter()
        .enumerate()
        .filter(|(_, (s, _))| {
            let n = s.split_whitespace().count();
            n >= cfg.min_source_words && n <= cfg.max_source_words
        })
        .map(|(i, (s, t))| (i as u64, s.as_str(), t.as_str()))
        .collect();
    if let Some(max) = cfg.max_seeds {
        if seeds.len() > max {
            let mut rng = seed::rng(seed::derive(cfg.seed, "seed-sample"));
            seeds.shuffle(&mut rng);
            seeds.truncate(max);
            seeds.sort_by_key(|s| s.0);
        }
    }
    seeds
}

/// Perturb every selected seed with every configured kind, translate
/// originals and perturbations, and label each pair.
pub fn build_pairs(
    translator: &dyn Translator,
    vocab: &Vocabulary,
    corpus: &[(String, String)],
    cfg: &GenConfig,
) -> Result<(Vec<ContrastivePair>, GenerationReport)> {
    cfg.validate()?;
    let seeds = select_seeds(corpus, cfg);
    if seeds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let needs_classes = cfg.kinds.iter().any(|k| matches!(k, PerturbationKind::Insert(_)));
    let classes = if needs_classes {
        Some(InsertionClasses::build(vocab, cfg.insert_class_size, &cfg.punctuation, cfg.seed)?)
    } else {
        None
    };
    let perturb_root = seed::derive(cfg.seed, "perturb");

    let mut perturbed_sources: Vec<String> = Vec::with_capacity(seeds.len() * cfg.kinds.len());
    for &(seed_id, src, _) in &seeds {
        let seed_root = seed::derive_index(perturb_root, seed_id);
        for (k, kind) in cfg.kinds.iter().enumerate() {
            let mut rng = seed::rng(seed::derive_index(seed_root, k as u64));
            let text = match kind {
                PerturbationKind::Misspell => misspell(src, cfg.misspell_prob, cfg.misspell_per_word, &mut rng),
                PerturbationKind::Titlecase => titlecase(src, cfg.titlecase_prob, &mut rng),
                PerturbationKind::Insert(class) => {
                    let classes = classes.as_ref().expect("classes built for insertion");
                    let ids = insert_token(&vocab.tokenize(src).tokens, *class, classes, &mut rng)?;
                    let mut t = String::from(vocab.token(ids[0]));
                    t.push(' ');
                    t.push_str(src);
                    t
                }
            };
            perturbed_sources.push(text);
        }
    }

    let originals: Vec<Vec<TokenId>> = seeds.iter().map(|(_, s, _)| vocab.encode_source(s)).collect();
    let original_out = translator.translate(&originals)?;
    let encoded: Vec<Vec<TokenId>> = perturbed_sources.iter().map(|s| vocab.encode_source(s)).collect();
    let perturbed_out = translator.translate(&encoded)?;

    let mut report = GenerationReport {
        seeds: seeds.len(),
        by_kind: cfg
            .kinds
            .iter()
            .map(|k| KindCounts {
                kind: k.to_string(),
                ..KindCounts::default()
            })
            .collect(),
        ..GenerationReport::default()
    };
    let mut pairs = Vec::with_capacity(perturbed_sources.len());
    for (s_idx, &(seed_id, src, reference)) in seeds.iter().enumerate() {
        let y_prime = &original_out[s_idx];
        let y_prime_text = vocab.detokenize(y_prime);
        for (k, kind) in cfg.kinds.iter().enumerate() {
            let p_idx = s_idx * cfg.kinds.len() + k;
            let x_tilde = &perturbed_sources[p_idx];
            let y_tilde = &perturbed_out[p_idx];
            let y_tilde_text = vocab.detokenize(y_tilde);
            let labeling = label_pair(
                &words(x_tilde),
                &words(&y_tilde_text),
                &words(reference),
                &words(&y_prime_text),
                &cfg.thresholds,
            );
            let excess = metrics::repetition_excess(&words(x_tilde), &words(&y_tilde_text), cfg.repetition);
            let degenerated = excess >= cfg.degeneration_k as i64;
            let counts = &mut report.by_kind[k];
            match labeling.label {
                PairLabel::Hallucinated => {
                    counts.hallucinated += 1;
                    report.hallucinated += 1;
                    if degenerated {
                        counts.degenerated += 1;
                        report.degenerated += 1;
                    }
                }
                PairLabel::KeptNegative => {
                    counts.kept_negative += 1;
                    report.kept_negative += 1;
                }
                PairLabel::Discarded => {
                    counts.discarded += 1;
                    report.discarded += 1;
                }
            }
            pairs.push(ContrastivePair {
                id: seed_id * cfg.kinds.len() as u64 + k as u64,
                seed_id,
                split: Split::Unassigned,
                kind: *kind,
                source: src.to_string(),
                reference: reference.to_string(),
                original_translation: y_prime_text.clone(),
                original_finished: y_prime.last() == Some(&crate::vocab::EOS),
                perturbed_source: x_tilde.clone(),
                perturbed_translation: y_tilde_text,
                perturbed_finished: y_tilde.last() == Some(&crate::vocab::EOS),
                perturbed: x_tilde.as_str() != src,
                bleu: labeling.bleu,
                label: labeling.label,
                discard_reason: labeling.discard_reason,
                degenerated,
                repetition_excess: excess,
            });
        }
    }
    report.pairs = pairs.len();
    Ok((pairs, report))
}

/// Train and validation pairs, each balanced between hallucinated and
/// kept-negative labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<ContrastivePair>,
    pub val: Vec<ContrastivePair>,
    pub report: GenerationReport,
}

/// Split seeds randomly into train/val (so the splits never share a seed),
/// then down-sample the majority label inside each split. Each split is
/// capped at its target size. Discarded pairs are dropped.
pub fn balance_split(pairs: Vec<ContrastivePair>, cfg: &GenConfig, mut report: GenerationReport) -> Result<Dataset> {
    let mut seed_ids: Vec<u64> = pairs.iter().map(|p| p.seed_id).collect();
    seed_ids.sort_unstable();
    seed_ids.dedup();
    let mut rng = seed::rng(seed::derive(cfg.seed, "split"));
    seed_ids.shuffle(&mut rng);
    let val_fraction = cfg.val_size as f64 / (cfg.train_size + cfg.val_size) as f64;
    let n_val = ((seed_ids.len() as f64 * val_fraction) as usize).clamp(1, seed_ids.len().saturating_sub(1).max(1));
    let mut val_seeds = seed_ids[..n_val].to_vec();
    val_seeds.sort_unstable();

    let mut train_pool = (Vec::new(), Vec::new());
    let mut val_pool = (Vec::new(), Vec::new());
    for mut p in pairs {
        let pool = if val_seeds.binary_search(&p.seed_id).is_ok() {
            p.split = Split::Val;
            &mut val_pool
        } else {
            p.split = Split::Train;
            &mut train_pool
        };
        match p.label {
            PairLabel::Hallucinated => pool.0.push(p),
            PairLabel::KeptNegative => pool.1.push(p),
            PairLabel::Discarded => {}
        }
    }
    let train_counts = SplitCounts {
        hallucinated: train_pool.0.len(),
        kept_negative: train_pool.1.len(),
    };
    let val_counts = SplitCounts {
        hallucinated: val_pool.0.len(),
        kept_negative: val_pool.1.len(),
    };
    let per_class = |pool: &(Vec<ContrastivePair>, Vec<ContrastivePair>), target: usize| {
        pool.0.len().min(pool.1.len()).min(target.div_ceil(2))
    };
    let m_train = per_class(&train_pool, cfg.train_size);
    let m_val = per_class(&val_pool, cfg.val_size);
    if m_train == 0 || m_val == 0 {
        return Err(Error::InsufficientPositives {
            train_pos: train_counts.hallucinated,
            train_neg: train_counts.kept_negative,
            val_pos: val_counts.hallucinated,
            val_neg: val_counts.kept_negative,
        });
    }
    let take = |pool: (Vec<ContrastivePair>, Vec<ContrastivePair>), m: usize, tag: &str| {
        let mut rng = seed::rng(seed::derive(cfg.seed, tag));
        let (mut pos, mut neg) = pool;
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        pos.truncate(m);
        neg.truncate(m);
        pos.append(&mut neg);
        pos.sort_by_key(|p| p.id);
        pos
    };
    let train = take(train_pool, m_train, "balance-train");
    let val = take(val_pool, m_val, "balance-val");
    report.train = SplitCounts {
        hallucinated: m_train,
        kept_negative: m_train,
    };
    report.val = SplitCounts {
        hallucinated: m_val,
        kept_negative: m_val,
    };
    Ok(Dataset { train, val, report })
}

/// [`build_pairs`] followed by [`balance_split`].
pub fn generate_dataset(
    translator: &dyn Translator,
    vocab: &Vocabulary,
    corpus: &[(String, String)],
    cfg: &GenConfig,
) -> Result<Dataset> {
    let (pairs, report) = build_pairs(translator, vocab, corpus, cfg)?;
    balance_split(pairs, cfg, report)
}

/// Partition the hallucinated pairs into (degenerated, non-degenerated).
pub fn split_degeneration(pairs: &[ContrastivePair]) -> (Vec<&ContrastivePair>, Vec<&ContrastivePair>) {
    pairs.iter().filter(|p| p.is_hallucinated()).partition(|p| p.degenerated)
}
