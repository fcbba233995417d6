use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng as _;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::math;
use crate::seed;
use crate::tensor::Matrix;

/// Index of a tensor inside [`TransformerWeights`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub query: LinearIds,
    pub key: LinearIds,
    pub value: LinearIds,
    pub output: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerIds {
    pub norm1: NormIds,
    pub self_attn: AttentionIds,
    pub norm2: NormIds,
    pub ff_in: LinearIds,
    pub ff_out: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerIds {
    pub norm1: NormIds,
    pub self_attn: AttentionIds,
    pub norm2: NormIds,
    pub cross_attn: AttentionIds,
    pub norm3: NormIds,
    pub ff_in: LinearIds,
    pub ff_out: LinearIds,
}

/// Where each named tensor lives. Derived from the config alone, so the
/// tensor order of a weight file is fixed by its config.
#[derive(Clone, Debug)]
pub struct Layout {
    pub source_embed: ParamId,
    pub target_embed: ParamId,
    pub encoder: Vec<EncoderLayerIds>,
    pub encoder_norm: NormIds,
    pub decoder: Vec<DecoderLayerIds>,
    pub decoder_norm: NormIds,
    pub output: LinearIds,
}

struct Registrar {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

impl Registrar {
    fn add(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.names.push(name);
        self.shapes.push((rows, cols));
        ParamId(self.names.len() - 1)
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) -> LinearIds {
        LinearIds {
            weight: self.add(format!("{prefix}.weight"), input, output),
            bias: self.add(format!("{prefix}.bias"), 1, output),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.add(format!("{prefix}.gain"), 1, d),
            bias: self.add(format!("{prefix}.bias"), 1, d),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttentionIds {
        AttentionIds {
            query: self.linear(&format!("{prefix}.query"), d, d),
            key: self.linear(&format!("{prefix}.key"), d, d),
            value: self.linear(&format!("{prefix}.value"), d, d),
            output: self.linear(&format!("{prefix}.output"), d, d),
        }
    }
}

fn layout_for(cfg: &ModelConfig) -> (Layout, Vec<String>, Vec<(usize, usize)>) {
    let (v, d, ff) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
    let mut r = Registrar {
        names: Vec::new(),
        shapes: Vec::new(),
    };
    let source_embed = r.add("source.embed".into(), v, d);
    let target_embed = r.add("target.embed".into(), v, d);
    let encoder = (0..cfg.encoder_layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            EncoderLayerIds {
                norm1: r.norm(&format!("{p}.norm1"), d),
                self_attn: r.attention(&format!("{p}.self_attn"), d),
                norm2: r.norm(&format!("{p}.norm2"), d),
                ff_in: r.linear(&format!("{p}.ff_in"), d, ff),
                ff_out: r.linear(&format!("{p}.ff_out"), ff, d),
            }
        })
        .collect();
    let encoder_norm = r.norm("encoder.norm", d);
    let decoder = (0..cfg.decoder_layers)
        .map(|l| {
            let p = format!("decoder.{l}");
            DecoderLayerIds {
                norm1: r.norm(&format!("{p}.norm1"), d),
                self_attn: r.attention(&format!("{p}.self_attn"), d),
                norm2: r.norm(&format!("{p}.norm2"), d),
                cross_attn: r.attention(&format!("{p}.cross_attn"), d),
                norm3: r.norm(&format!("{p}.norm3"), d),
                ff_in: r.linear(&format!("{p}.ff_in"), d, ff),
                ff_out: r.linear(&format!("{p}.ff_out"), ff, d),
            }
        })
        .collect();
    let decoder_norm = r.norm("decoder.norm", d);
    let output = r.linear("output", d, v);
    let layout = Layout {
        source_embed,
        target_embed,
        encoder,
        encoder_norm,
        decoder,
        decoder_norm,
        output,
    };
    (layout, r.names, r.shapes)
}

/// All model parameters as named 2-D tensors. Linear weights are stored
/// `(input, output)`, so a layer computes `x · W + b`.
#[derive(Clone, Debug)]
pub struct TransformerWeights {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Matrix>,
    layout: Layout,
}

impl PartialEq for TransformerWeights {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.tensors == other.tensors
    }
}

impl TransformerWeights {
    /// Seeded initialization: Xavier-uniform matrices and embeddings, zero
    /// biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let (layout, names, shapes) = layout_for(config);
        let mut rng = seed::rng(seed_value);
        let tensors = names
            .iter()
            .zip(&shapes)
            .map(|(name, &(rows, cols))| {
                if name.ends_with(".gain") {
                    let mut m = Matrix::zeros(rows, cols);
                    m.fill(1.0);
                    m
                } else if name.ends_with(".bias") {
                    Matrix::zeros(rows, cols)
                } else {
                    let bound = math::sqrt(6.0 / (rows + cols) as f64);
                    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
                    Matrix::from_vec(rows, cols, data)
                }
            })
            .collect();
        Ok(TransformerWeights {
            config: config.clone(),
            names,
            tensors,
            layout,
        })
    }

    /// Assemble from named tensors, checking names, order and shapes
    /// against the layout implied by `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Matrix)>) -> Result<Self> {
        config.validate()?;
        let (layout, names, shapes) = layout_for(&config);
        if named.len() != names.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, found {}",
                names.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, m), (want, &shape)) in named.into_iter().zip(names.iter().zip(&shapes)) {
            if &name != want {
                return Err(Error::InvalidArgument(format!("tensor `{name}` where `{want}` expected")));
            }
            if m.shape() != shape {
                return Err(Error::InvalidArgument(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    m.shape(),
                    shape
                )));
            }
            if !m.is_finite() {
                return Err(Error::InvalidArgument(format!("tensor `{name}` is not finite")));
            }
            tensors.push(m);
        }
        Ok(TransformerWeights {
            config,
            names,
            tensors,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.rows() * t.cols()).sum()
    }

    /// Zero tensors with this model's shapes, for gradient accumulation.
    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}
