//! Synthetic parallel corpus for desk-scale training.
//!
//! The source language draws two-syllable words over one consonant set and
//! the target language over a disjoint one, so no word is shared between
//! the two sides. Translation is word substitution plus a few structural
//! rules:
//!
//! * determiners are dropped;
//! * adjective–noun becomes noun–adjective;
//! * every verb is followed by an aspect particle;
//! * prepositions become postpositions after their noun phrase;
//! * `.` / `,` map to `。` / `，`.
//!
//! Word choice is Zipf-distributed so the vocabulary has a meaningful
//! frequency ranking. A configurable fraction of pairs carries a
//! boilerplate target unrelated to its source, the kind of corpus noise
//! that makes trained models prone to detached output under perturbation.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::{self, Rng};

const SOURCE_CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const TARGET_CONSONANTS: &[u8] = b"chjqwxy";
const BOILERPLATE_END: &str = "！";
const VOWELS: &[u8] = b"aeiou";

const DETERMINERS: [&str; 2] = ["la", "el"];
const PREPOSITIONS: [(&str, &str); 2] = [("ko", "wa"), ("su", "qo")];
const PARTICLE: &str = "yi";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub pairs: usize,
    pub nouns: usize,
    pub adjectives: usize,
    pub verbs: usize,
    pub max_clauses: usize,
    /// Fraction of pairs whose target is replaced by a boilerplate sentence.
    pub noise_rate: f64,
    pub boilerplate: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 17,
            pairs: 20_000,
            nouns: 40,
            adjectives: 15,
            verbs: 20,
            max_clauses: 2,
            noise_rate: 0.03,
            boilerplate: 3,
        }
    }
}

#[derive(Clone, Debug)]
struct Entry {
    source: String,
    target: String,
}

/// A generated lexicon plus the rules above.
#[derive(Clone, Debug)]
pub struct ToyLanguage {
    nouns: Vec<Entry>,
    adjectives: Vec<Entry>,
    verbs: Vec<Entry>,
    boilerplate: Vec<String>,
    cfg: ToyConfig,
}

fn word(rng: &mut Rng, consonants: &[u8], syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(consonants[rng.gen_range(0..consonants.len())] as char);
        w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    w
}

/// Index in `0..n` with probability proportional to `1 / (i + 1)`.
fn zipf(rng: &mut Rng, n: usize) -> usize {
    let total: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
    let mut u = rng.gen::<f64>() * total;
    for i in 0..n {
        u -= 1.0 / (i + 1) as f64;
        if u <= 0.0 {
            return i;
        }
    }
    n - 1
}

impl ToyLanguage {
    pub fn new(cfg: &ToyConfig) -> Self {
        let mut rng = seed::rng(seed::derive(cfg.seed, "lexicon"));
        let mut used: BTreeSet<String> = BTreeSet::new();
        for w in DETERMINERS.iter().chain(PREPOSITIONS.iter().flat_map(|(s, t)| [s, t])).chain([&PARTICLE]) {
            used.insert((*w).into());
        }
        let mut fresh = |rng: &mut Rng, consonants: &[u8]| loop {
            let w = word(rng, consonants, 2);
            if used.insert(w.clone()) {
                return w;
            }
        };
        let mut entries = |rng: &mut Rng, n: usize| -> Vec<Entry> {
            (0..n)
                .map(|_| Entry {
                    source: fresh(rng, SOURCE_CONSONANTS),
                    target: fresh(rng, TARGET_CONSONANTS),
                })
                .collect()
        };
        let nouns = entries(&mut rng, cfg.nouns);
        let adjectives = entries(&mut rng, cfg.adjectives);
        let verbs = entries(&mut rng, cfg.verbs);
        // Boilerplate has its own words and end mark, so a detached output
        // shares nothing with a faithful translation.
        let mut boiler_rng = seed::rng(seed::derive(cfg.seed, "boilerplate"));
        let boilerplate = (0..cfg.boilerplate)
            .map(|_| {
                let len = boiler_rng.gen_range(7..11);
                let mut words: Vec<String> = (0..len).map(|_| fresh(&mut boiler_rng, TARGET_CONSONANTS)).collect();
                words.push(BOILERPLATE_END.into());
                words.join(" ")
            })
            .collect();
        ToyLanguage {
            nouns,
            adjectives,
            verbs,
            boilerplate,
            cfg: cfg.clone(),
        }
    }

    fn noun_phrase(&self, rng: &mut Rng, src: &mut Vec<String>, tgt: &mut Vec<String>) {
        if rng.gen_bool(0.5) {
            src.push(DETERMINERS[rng.gen_range(0..DETERMINERS.len())].into());
        }
        let adj = if rng.gen_bool(0.35) {
            Some(&self.adjectives[zipf(rng, self.adjectives.len())])
        } else {
            None
        };
        let noun = &self.nouns[zipf(rng, self.nouns.len())];
        if let Some(a) = adj {
            src.push(a.source.clone());
        }
        src.push(noun.source.clone());
        tgt.push(noun.target.clone());
        if let Some(a) = adj {
            tgt.push(a.target.clone());
        }
    }

    fn clause(&self, rng: &mut Rng, src: &mut Vec<String>, tgt: &mut Vec<String>) {
        self.noun_phrase(rng, src, tgt);
        let verb = &self.verbs[zipf(rng, self.verbs.len())];
        src.push(verb.source.clone());
        tgt.push(verb.target.clone());
        tgt.push(PARTICLE.into());
        self.noun_phrase(rng, src, tgt);
        if rng.gen_bool(0.4) {
            let (p_src, p_tgt) = PREPOSITIONS[rng.gen_range(0..PREPOSITIONS.len())];
            src.push(p_src.into());
            self.noun_phrase(rng, src, tgt);
            tgt.push(p_tgt.into());
        }
    }

    /// One clean (source, target) pair.
    pub fn sentence(&self, rng: &mut Rng) -> (String, String) {
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        let clauses = rng.gen_range(1..=self.cfg.max_clauses.max(1));
        for c in 0..clauses {
            if c > 0 {
                src.push(",".into());
                tgt.push("，".into());
            }
            self.clause(rng, &mut src, &mut tgt);
        }
        src.push(".".into());
        tgt.push("。".into());
        (src.join(" "), tgt.join(" "))
    }

    /// The full corpus: `cfg.pairs` pairs, a `noise_rate` fraction of which
    /// carry a boilerplate target.
    pub fn corpus(&self) -> Vec<(String, String)> {
        let mut rng = seed::rng(seed::derive(self.cfg.seed, "corpus"));
        (0..self.cfg.pairs)
            .map(|_| {
                let (s, t) = self.sentence(&mut rng);
                if !self.boilerplate.is_empty() && rng.gen_bool(self.cfg.noise_rate.clamp(0.0, 1.0)) {
                    let b = rng.gen_range(0..self.boilerplate.len());
                    (s, self.boilerplate[b].clone())
                } else {
                    (s, t)
                }
            })
            .collect()
    }

    /// Source → target word table for content words.
    pub fn lexicon(&self) -> impl Iterator<Item = (&str, &str)> {
        self.nouns
            .iter()
            .chain(&self.adjectives)
            .chain(&self.verbs)
            .map(|e| (e.source.as_str(), e.target.as_str()))
    }

    pub fn boilerplate(&self) -> &[String] {
        &self.boilerplate
    }
}
