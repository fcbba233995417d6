//! Word-level vocabulary shared by source and target sides.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token ids plus, optionally, the text they were read from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
    pub surface: Option<String>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    source_freq: Vec<u64>,
    target_freq: Vec<u64>,
    #[serde(skip)]
    index: BTreeMap<String, TokenId>,
}

impl Vocabulary {
    /// Build from parallel text. Words seen fewer than `min_count` times in
    /// total map to `<unk>`. Ids are ordered by descending frequency, then
    /// lexicographically.
    pub fn build<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>, min_count: u64) -> Self {
        let mut src: BTreeMap<&str, u64> = BTreeMap::new();
        let mut tgt: BTreeMap<&str, u64> = BTreeMap::new();
        for (s, t) in pairs {
            for w in s.split_whitespace() {
                *src.entry(w).or_insert(0) += 1;
            }
            for w in t.split_whitespace() {
                *tgt.entry(w).or_insert(0) += 1;
            }
        }
        let mut words: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
        for (w, c) in &src {
            words.entry(w).or_default().0 += c;
        }
        for (w, c) in &tgt {
            words.entry(w).or_default().1 += c;
        }
        let mut ranked: Vec<(&str, u64, u64)> = words
            .into_iter()
            .filter(|(w, (s, t))| s + t >= min_count && !RESERVED.contains(w))
            .map(|(w, (s, t))| (w, s, t))
            .collect();
        ranked.sort_by(|a, b| (b.1 + b.2).cmp(&(a.1 + a.2)).then(a.0.cmp(b.0)));

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut source_freq = alloc::vec![0; RESERVED.len()];
        let mut target_freq = alloc::vec![0; RESERVED.len()];
        for (w, s, t) in ranked {
            tokens.push(w.to_string());
            source_freq.push(s);
            target_freq.push(t);
        }
        Self::from_parts(tokens, source_freq, target_freq)
    }

    /// Panics if the parts disagree in length or the reserved prefix is missing.
    pub fn from_parts(tokens: Vec<String>, source_freq: Vec<u64>, target_freq: Vec<u64>) -> Self {
        assert_eq!(tokens.len(), source_freq.len());
        assert_eq!(tokens.len(), target_freq.len());
        assert!(tokens.iter().zip(RESERVED).all(|(a, b)| a == b), "reserved tokens missing");
        let mut v = Vocabulary {
            tokens,
            source_freq,
            target_freq,
            index: BTreeMap::new(),
        };
        v.rebuild_index();
        v
    }

    /// Restore the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or(RESERVED[UNK as usize], |s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn source_freq(&self, id: TokenId) -> u64 {
        self.source_freq[id as usize]
    }

    pub fn target_freq(&self, id: TokenId) -> u64 {
        self.target_freq[id as usize]
    }

    pub fn freq(&self, id: TokenId) -> u64 {
        self.source_freq(id) + self.target_freq(id)
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < RESERVED.len()
    }

    /// Whitespace split, then lookup with `<unk>` fallback.
    pub fn tokenize(&self, text: &str) -> TokenSeq {
        TokenSeq {
            tokens: text
                .split_whitespace()
                .map(|w| self.id(w).unwrap_or(UNK))
                .collect(),
            surface: Some(text.to_string()),
        }
    }

    /// Tokenize and append `</s>`, the form the encoder consumes.
    pub fn encode_source(&self, text: &str) -> Vec<TokenId> {
        let mut ids = self.tokenize(text).tokens;
        ids.push(EOS);
        ids
    }

    /// Join surfaces with single spaces, dropping `</s>` and padding.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids.iter().filter(|&&id| id != EOS && id != PAD && id != BOS) {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id));
        }
        out
    }

    /// Token surfaces without `</s>`, used for BLEU on text.
    pub fn surfaces<'a>(&'a self, ids: &[TokenId]) -> Vec<&'a str> {
        ids.iter()
            .filter(|&&id| id != EOS && id != PAD && id != BOS)
            .map(|&id| self.token(id))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build([("a b c", "x y"), ("a b", "x z")], 1)
    }

    #[test]
    fn ids_are_dense_and_frequency_ranked() {
        let v = vocab();
        assert_eq!(v.len(), 4 + 6);
        assert_eq!(v.token(4), "a");
        assert_eq!(v.source_freq(v.id("a").unwrap()), 2);
        assert_eq!(v.target_freq(v.id("x").unwrap()), 2);
        assert_eq!(v.freq(v.id("c").unwrap()), 1);
    }

    #[test]
    fn tokenize_with_unk_and_roundtrip() {
        let v = vocab();
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.tokenize("a q").tokens, [v.id("a").unwrap(), UNK]);
        let text = "a b c";
        assert_eq!(v.detokenize(&v.tokenize(text).tokens), text);
        assert_eq!(*v.encode_source("a").last().unwrap(), EOS);
    }
}
