//! Toy predictors and small random models shared by the integration tests.
#![allow(dead_code)]

use maskdiff::model::{AttentionMode, Model, ModelConfig};
use maskdiff::{MaskPredictor, Prediction, Result, SpecialTokens};
use rand::Rng;

/// Equal probability for every id.
pub struct Uniform {
    pub vocab: usize,
    pub special: SpecialTokens,
}

impl MaskPredictor for Uniform {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn special(&self) -> SpecialTokens {
        self.special
    }
    fn predict_batch(&self, seqs: &[Vec<u32>]) -> Result<Vec<Prediction>> {
        let lp = -(self.vocab as f64).ln();
        Ok(seqs.iter().map(|s| Prediction::new(self.vocab, vec![lp; s.len() * self.vocab])).collect())
    }
}

/// Puts (almost) all mass on a fixed target sequence, aligned to the end of the input.
pub struct Perfect {
    pub vocab: usize,
    pub special: SpecialTokens,
    pub target: Vec<u32>,
}

impl MaskPredictor for Perfect {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn special(&self) -> SpecialTokens {
        self.special
    }
    fn predict_batch(&self, seqs: &[Vec<u32>]) -> Result<Vec<Prediction>> {
        Ok(seqs
            .iter()
            .map(|s| {
                let offset = s.len() - self.target.len().min(s.len());
                let mut lp = vec![-60.0; s.len() * self.vocab];
                for i in 0..s.len() {
                    let tok = if i >= offset { self.target[i - offset] } else { s[i] };
                    lp[i * self.vocab + tok as usize] = 0.0;
                }
                Prediction::new(self.vocab, lp)
            })
            .collect())
    }
}

/// The exact conditional of a known distribution over length-`len` sequences
/// of data ids `0..data_vocab`; the mask id is `data_vocab`.
pub struct ExactConditional {
    pub data_vocab: usize,
    pub len: usize,
    pub probs: Vec<f64>,
}

impl ExactConditional {
    pub fn random(data_vocab: usize, len: usize, rng: &mut impl Rng) -> Self {
        let n = data_vocab.pow(len as u32);
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
        let z: f64 = raw.iter().sum();
        ExactConditional { data_vocab, len, probs: raw.into_iter().map(|p| p / z).collect() }
    }

    pub fn decode_index(&self, mut idx: usize) -> Vec<u32> {
        let mut seq = vec![0u32; self.len];
        for slot in seq.iter_mut().rev() {
            *slot = (idx % self.data_vocab) as u32;
            idx /= self.data_vocab;
        }
        seq
    }

    pub fn index_of(&self, seq: &[u32]) -> usize {
        seq.iter().fold(0, |acc, &t| acc * self.data_vocab + t as usize)
    }

    pub fn mask(&self) -> u32 {
        self.data_vocab as u32
    }
}

impl MaskPredictor for ExactConditional {
    fn vocab_size(&self) -> usize {
        self.data_vocab + 1
    }
    fn special(&self) -> SpecialTokens {
        SpecialTokens { mask: self.mask(), eos: 0 }
    }
    fn predict_batch(&self, seqs: &[Vec<u32>]) -> Result<Vec<Prediction>> {
        let v = self.vocab_size();
        Ok(seqs
            .iter()
            .map(|s| {
                assert_eq!(s.len(), self.len);
                let mut mass = vec![0.0; self.len * v];
                for (idx, &p) in self.probs.iter().enumerate() {
                    let x = self.decode_index(idx);
                    let consistent = s.iter().zip(&x).all(|(&a, &b)| a == self.mask() || a == b);
                    if consistent {
                        for (i, &tok) in x.iter().enumerate() {
                            mass[i * v + tok as usize] += p;
                        }
                    }
                }
                let mut lp = vec![0.0; self.len * v];
                for i in 0..self.len {
                    let z: f64 = mass[i * v..(i + 1) * v].iter().sum();
                    for k in 0..v {
                        let m = mass[i * v + k];
                        lp[i * v + k] = if m > 0.0 { (m / z).ln() } else { -1e9 };
                    }
                }
                Prediction::new(v, lp)
            })
            .collect())
    }
}

/// Vocabulary size of the small random models: ids `0..4` are data, 4 is the mask.
pub const TINY_VOCAB: usize = 5;
pub const TINY_SPECIAL: SpecialTokens = SpecialTokens { mask: 4, eos: 0 };

pub fn tiny_config(attention: AttentionMode) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        ffn_dim: 12,
        vocab_size: TINY_VOCAB,
        max_seq_len: 32,
        rope_base: 10000.0,
        attention,
        init_std: 0.5,
        rms_eps: 1e-5,
        mask_id: TINY_SPECIAL.mask,
        eos_id: TINY_SPECIAL.eos,
    }
}

/// A random 2-layer bidirectional model in double precision with visibly non-uniform outputs.
pub fn random_model(seed: u64) -> Model<f64> {
    Model::init(tiny_config(AttentionMode::Bidirectional), seed).expect("valid config")
}

pub fn random_causal_model(seed: u64) -> Model<f64> {
    Model::init(tiny_config(AttentionMode::Causal), seed).expect("valid config")
}

/// A random clean sequence over the data ids `1..4` (no mask, no EOS).
pub fn random_x0(len: usize, rng: &mut impl Rng) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(1..4)).collect()
}

/// Weighted cross-entropy of `model` on `seqs`: weight `1 / n` on every listed
/// `(row, target)` pair, evaluated through the inference path in double precision.
pub fn reference_loss(model: &Model<f64>, seqs: &[Vec<u32>], targets: &[(usize, usize)]) -> f64 {
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let logits = maskdiff::model::forward_batch(&model.config, &model.params, &refs).unwrap();
    let v = model.config.vocab_size;
    let data = logits.data();
    let n = targets.len() as f64;
    targets
        .iter()
        .map(|&(row, tok)| {
            let r = &data[row * v..(row + 1) * v];
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            (lse - r[tok]) / n
        })
        .sum()
}

/// Largest relative error between back-propagated and central-difference
/// gradients, per parameter group, over `per_group` random entries of each.
pub fn gradient_check(model: &Model<f64>, seqs: &[Vec<u32>], per_group: usize, seed: u64) -> Vec<(String, f64)> {
    use maskdiff::model::{bind_params, forward_graph};
    use maskdiff_tensor::Graph;

    let mut rng = maskdiff::rng::seeded(seed);
    let rows: usize = seqs.iter().map(Vec::len).sum();
    let mut targets = Vec::new();
    for r in 0..rows {
        if rng.random::<f64>() < 0.6 {
            targets.push((r, rng.random_range(0..model.config.vocab_size - 1)));
        }
    }
    let mut dense_targets = vec![0usize; rows];
    let mut weights = vec![0.0; rows];
    for &(r, t) in &targets {
        dense_targets[r] = t;
        weights[r] = 1.0 / targets.len() as f64;
    }

    let mut g = Graph::<f64>::new();
    let bound = bind_params(&mut g, &model.params, true);
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let logits = forward_graph(&mut g, &model.config, &bound, &refs).unwrap();
    let loss = g.cross_entropy(logits, &dense_targets, &weights).unwrap();
    let analytic_loss = g.value(loss).data()[0];
    assert!((analytic_loss - reference_loss(model, seqs, &targets)).abs() < 1e-10);
    let grads = g.backward(loss).unwrap();

    let eps = 1e-5;
    let mut out = Vec::new();
    for (name, var) in &bound {
        let analytic = grads.get(*var).expect("every parameter receives a gradient").to_vec();
        let mut worst: f64 = 0.0;
        for _ in 0..per_group {
            let idx = rng.random_range(0..analytic.len());
            let mut plus = model.clone();
            plus.params.get_mut(name).unwrap().data_mut()[idx] += eps;
            let mut minus = model.clone();
            minus.params.get_mut(name).unwrap().data_mut()[idx] -= eps;
            let numeric = (reference_loss(&plus, seqs, &targets) - reference_loss(&minus, seqs, &targets)) / (2.0 * eps);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        out.push((name.clone(), worst));
    }
    out
}
