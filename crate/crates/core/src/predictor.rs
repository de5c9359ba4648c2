//! The mask-predictor abstraction shared by oracles, estimators and samplers.

use crate::error::Result;

/// Reserved token identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpecialTokens {
    pub mask: u32,
    pub eos: u32,
}

/// Per-position log-probabilities over the vocabulary for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    vocab: usize,
    logp: Vec<f64>,
}

impl Prediction {
    pub fn new(vocab: usize, logp: Vec<f64>) -> Self {
        assert!(vocab > 0 && logp.len() % vocab == 0, "log-prob buffer does not tile the vocabulary");
        Prediction { vocab, logp }
    }

    pub fn len(&self) -> usize {
        self.logp.len() / self.vocab
    }

    pub fn is_empty(&self) -> bool {
        self.logp.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn log_probs(&self, pos: usize) -> &[f64] {
        &self.logp[pos * self.vocab..(pos + 1) * self.vocab]
    }

    pub fn log_prob(&self, pos: usize, token: u32) -> f64 {
        self.log_probs(pos)[token as usize]
    }

    /// Most likely token at `pos`; ties go to the lowest id.
    pub fn argmax(&self, pos: usize) -> u32 {
        let row = self.log_probs(pos);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best as u32
    }
}

/// A network (or oracle) mapping a partially masked sequence to a
/// distribution over the vocabulary at every position.
///
/// There is deliberately no time argument: the prediction depends on the
/// sequence alone.
pub trait MaskPredictor {
    fn vocab_size(&self) -> usize;

    fn special(&self) -> SpecialTokens;

    /// Causal predictors are next-token models: row `i` predicts token `i + 1`.
    fn is_causal(&self) -> bool {
        false
    }

    fn max_len(&self) -> usize {
        usize::MAX
    }

    /// Predictions for several sequences; each result has its input's length.
    fn predict_batch(&self, seqs: &[Vec<u32>]) -> Result<Vec<Prediction>>;

    fn predict(&self, seq: &[u32]) -> Result<Prediction> {
        Ok(self.predict_batch(&[seq.to_vec()])?.pop().expect("one prediction per input"))
    }
}

impl<P: MaskPredictor + ?Sized> MaskPredictor for &P {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn special(&self) -> SpecialTokens {
        (**self).special()
    }
    fn is_causal(&self) -> bool {
        (**self).is_causal()
    }
    fn max_len(&self) -> usize {
        (**self).max_len()
    }
    fn predict_batch(&self, seqs: &[Vec<u32>]) -> Result<Vec<Prediction>> {
        (**self).predict_batch(seqs)
    }
}
