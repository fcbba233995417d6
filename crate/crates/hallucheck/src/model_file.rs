//! Weight container: an 8-byte magic, a little-endian `u32` format version
//! and `u64` header length, a JSON header (model config and its SHA-256,
//! vocabulary, tensor names and shapes), then every tensor as raw
//! little-endian `f64` in header order.

use std::path::Path;

use hallucheck_core::model::{ModelConfig, TransformerWeights};
use hallucheck_core::vocab::Vocabulary;
use hallucheck_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HLCKWTS\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    config_hash: String,
    dtype: String,
    tensors: Vec<TensorEntry>,
    vocab: Vocabulary,
}

/// Weights plus the vocabulary they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub weights: TransformerWeights,
    pub vocab: Vocabulary,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    hex::encode(sha2::Sha256::digest(bytes))
}

/// SHA-256 of the config's JSON form.
pub fn config_hash(cfg: &ModelConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

pub fn to_bytes(weights: &TransformerWeights, vocab: &Vocabulary) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        config: weights.config().clone(),
        config_hash: config_hash(weights.config()),
        dtype: "f64-le".into(),
        tensors: weights
            .names()
            .iter()
            .zip(weights.tensors())
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
            })
            .collect(),
        vocab: vocab.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + weights.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in weights.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<ModelFile> {
    let bad = |reason: &str| Error::format(path, reason);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a weight file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < header_len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len]).map_err(|e| bad(&format!("header: {e}")))?;
    if header.dtype != "f64-le" {
        return Err(bad(&format!("unsupported dtype {}", header.dtype)));
    }
    if config_hash(&header.config) != header.config_hash {
        return Err(bad("config hash mismatch"));
    }
    let mut data = &body[header_len..];
    let mut named = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let [rows, cols] = entry.shape;
        let n = rows * cols;
        if data.len() < n * 8 {
            return Err(bad(&format!("truncated tensor data at {}", entry.name)));
        }
        let values = data[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[n * 8..];
        let m = Matrix::from_vec(rows, cols, values);
        if !m.is_finite() {
            return Err(bad(&format!("non-finite weights in {}", entry.name)));
        }
        named.push((entry.name, m));
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let weights = TransformerWeights::from_named(header.config, named).map_err(|e| bad(&e.to_string()))?;
    let mut vocab = header.vocab;
    vocab.rebuild_index();
    if vocab.len() != weights.config().vocab_size {
        return Err(bad("vocabulary size does not match the model"));
    }
    Ok(ModelFile { weights, vocab })
}

pub fn write(path: &Path, weights: &TransformerWeights, vocab: &Vocabulary) -> Result<()> {
    crate::io::write_bytes(path, &to_bytes(weights, vocab))
}

pub fn read(path: &Path) -> Result<ModelFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
