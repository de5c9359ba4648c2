//! The transformer mask predictor and its parameter set.

use std::collections::BTreeMap;

use maskdiff_tensor::{Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::predictor::{MaskPredictor, Prediction, SpecialTokens};

/// Logit offset that removes the mask symbol from every predicted distribution.
const MASK_LOGIT_BIAS: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub attention: AttentionMode,
    pub init_std: f64,
    pub rms_eps: f64,
    pub mask_id: u32,
    pub eos_id: u32,
}

impl ModelConfig {
    /// The desk-scale default trunk for a given vocabulary.
    pub fn desk(vocab_size: usize, special: SpecialTokens) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            ffn_dim: 344,
            vocab_size,
            max_seq_len: 256,
            rope_base: 10000.0,
            attention: AttentionMode::Bidirectional,
            init_std: 0.02,
            rms_eps: 1e-5,
            mask_id: special.mask,
            eos_id: special.eos,
        }
    }

    pub fn with_attention(mut self, attention: AttentionMode) -> Self {
        self.attention = attention;
        self
    }

    pub fn special(&self) -> SpecialTokens {
        SpecialTokens { mask: self.mask_id, eos: self.eos_id }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return config("layer, width, head and ffn sizes must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return config(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return config(format!("head dimension {} must be even for rotary embeddings", self.head_dim()));
        }
        let v = self.vocab_size as u32;
        if self.mask_id >= v || self.eos_id >= v || self.mask_id == self.eos_id {
            return config("mask and eos ids must be distinct and inside the vocabulary");
        }
        if self.max_seq_len == 0 {
            return config("max_seq_len must be positive");
        }
        if !(self.init_std >= 0.0 && self.rms_eps >= 0.0 && self.rope_base > 0.0) {
            return config("init_std and rms_eps must be nonnegative, rope_base positive");
        }
        Ok(())
    }

    /// Every parameter name with its shape, in lexicographic order.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, f, v) = (self.d_model, self.ffn_dim, self.vocab_size);
        let mut shapes = BTreeMap::new();
        shapes.insert("embed".to_string(), vec![v, d]);
        shapes.insert("head".to_string(), vec![d, v]);
        shapes.insert("final_norm".to_string(), vec![d]);
        for i in 0..self.n_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            shapes.insert(p("attn_norm"), vec![d]);
            shapes.insert(p("ffn_norm"), vec![d]);
            for w in ["wq", "wk", "wv", "wo"] {
                shapes.insert(p(w), vec![d, d]);
            }
            shapes.insert(p("w_in"), vec![d, 2 * f]);
            shapes.insert(p("w_out"), vec![f, d]);
        }
        shapes
    }

    /// Closed-form count of weights outside the input embedding and output head.
    pub fn nonembedding_count(&self) -> usize {
        let (d, f) = (self.d_model, self.ffn_dim);
        self.n_layers * (4 * d * d + 3 * d * f + 2 * d) + d
    }
}

fn is_norm(name: &str) -> bool {
    name.ends_with("norm")
}

fn is_embedding(name: &str) -> bool {
    name == "embed" || name == "head"
}

/// All weights of one network, addressable by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        ParameterSet { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count_total(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Tallies by walking the map rather than by formula.
    pub fn count_nonembedding(&self) -> usize {
        self.iter().filter(|(n, _)| !is_embedding(n)).map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Checks that names and shapes match `config` exactly.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.parameter_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }
}

/// Draws every matrix from N(0, init_std²) and sets norm gains to one.
///
/// Parameters are filled in lexicographic name order from one seeded stream.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ParameterSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.parameter_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<T> = if is_norm(&name) {
            vec![T::one(); n]
        } else if config.init_std == 0.0 {
            vec![T::zero(); n]
        } else {
            (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok(ParameterSet { tensors })
}

/// Parameters loaded into a graph, keyed by name.
pub type BoundParams = BTreeMap<String, Var>;

/// Adds every parameter to `g`; tracked parameters receive gradients.
pub fn bind_params<T: Real>(g: &mut Graph<T>, params: &ParameterSet<T>, track: bool) -> BoundParams {
    params
        .iter()
        .map(|(name, t)| {
            let v = if track { g.param(t.clone()) } else { g.constant(t.clone()) };
            (name.to_string(), v)
        })
        .collect()
}

fn check_tokens(config: &ModelConfig, seqs: &[&[u32]]) -> Result<()> {
    for s in seqs {
        if s.len() > config.max_seq_len {
            return Err(Error::Length { len: s.len(), max: config.max_seq_len });
        }
        if let Some(&bad) = s.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::Precondition(format!("token id {bad} outside vocabulary of {}", config.vocab_size)));
        }
    }
    Ok(())
}

/// Builds the logits node for several sequences processed as isolated segments.
///
/// Rows of the result follow the concatenation of `seqs`. No time value enters.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    p: &BoundParams,
    seqs: &[&[u32]],
) -> Result<Var> {
    check_tokens(config, seqs)?;
    let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
    let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
    let segments: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    if ids.is_empty() {
        return Err(Error::Precondition("forward needs at least one token".into()));
    }
    let causal = config.attention == AttentionMode::Causal;
    let (heads, eps, base) = (config.n_heads, config.rms_eps, config.rope_base);
    let w = |name: &str| -> Result<Var> {
        p.get(name).copied().ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    };

    let mut h = g.embedding(w("embed")?, &ids)?;
    for i in 0..config.n_layers {
        let l = |s: &str| format!("layers.{i}.{s}");
        let a = g.rms_norm(h, w(&l("attn_norm"))?, eps)?;
        let q = g.matmul(a, w(&l("wq"))?)?;
        let k = g.matmul(a, w(&l("wk"))?)?;
        let v = g.matmul(a, w(&l("wv"))?)?;
        let q = g.rope(q, heads, &positions, base)?;
        let k = g.rope(k, heads, &positions, base)?;
        let o = g.attention(q, k, v, &segments, heads, causal)?;
        let o = g.matmul(o, w(&l("wo"))?)?;
        h = g.add(h, o)?;

        let f = g.rms_norm(h, w(&l("ffn_norm"))?, eps)?;
        let u = g.matmul(f, w(&l("w_in"))?)?;
        let s = g.swiglu(u)?;
        let s = g.matmul(s, w(&l("w_out"))?)?;
        h = g.add(h, s)?;
    }
    let h = g.rms_norm(h, w("final_norm")?, eps)?;
    let logits = g.matmul(h, w("head")?)?;

    let mut bias = vec![T::zero(); ids.len() * config.vocab_size];
    for row in bias.chunks_mut(config.vocab_size) {
        row[config.mask_id as usize] = T::of(MASK_LOGIT_BIAS);
    }
    let bias = g.constant(Tensor::new(vec![ids.len(), config.vocab_size], bias)?);
    Ok(g.add(logits, bias)?)
}

/// Logits `[L, V]` for one sequence.
pub fn forward<T: Real>(config: &ModelConfig, params: &ParameterSet<T>, tokens: &[u32]) -> Result<Tensor<T>> {
    forward_batch(config, params, &[tokens])
}

/// Logits for several sequences, stacked row-wise.
pub fn forward_batch<T: Real>(config: &ModelConfig, params: &ParameterSet<T>, seqs: &[&[u32]]) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let bound = bind_params(&mut g, params, false);
    let out = forward_graph(&mut g, config, &bound, seqs)?;
    Ok(g.into_value(out))
}

/// A configured network: the standard [`MaskPredictor`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParameterSet<T>,
}

/// Upper bound on rows per inference graph, to keep attention buffers small.
const ROWS_PER_PASS: usize = 4096;

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, params: ParameterSet<T>) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Model { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        forward(&self.config, &self.params, tokens)
    }
}

impl<T: Real> MaskPredictor for Model<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn special(&self) -> SpecialTokens {
        self.config.special()
    }

    fn is_causal(&self) -> bool {
        self.config.attention == AttentionMode::Causal
    }

    fn max_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn predict_batch(&self, seqs: &[Vec<u32>]) -> Result<Vec<Prediction>> {
        let v = self.config.vocab_size;
        let mut out: Vec<Prediction> = seqs.iter().map(|_| Prediction::new(v, Vec::new())).collect();
        let live: Vec<usize> = (0..seqs.len()).filter(|&i| !seqs[i].is_empty()).collect();
        let mut start = 0;
        while start < live.len() {
            let mut end = start;
            let mut rows = 0;
            while end < live.len() && (end == start || rows + seqs[live[end]].len() <= ROWS_PER_PASS) {
                rows += seqs[live[end]].len();
                end += 1;
            }
            let chunk: Vec<&[u32]> = live[start..end].iter().map(|&i| seqs[i].as_slice()).collect();
            let logits = forward_batch(&self.config, &self.params, &chunk)?;
            let logp = maskdiff_tensor::functional::log_softmax_rows_f64(&logits);
            let mut offset = 0;
            for &i in &live[start..end] {
                let n = seqs[i].len() * v;
                out[i] = Prediction::new(v, logp[offset..offset + n].to_vec());
                offset += n;
            }
            start = end;
        }
        Ok(out)
    }
}
