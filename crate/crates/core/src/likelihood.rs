//! Conditional likelihood-bound estimation and likelihood-based multiple choice.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::diffusion::{forward_mask, forward_mask_count, DiffusionTime};
use crate::error::{config, precondition, Error, Result};
use crate::predictor::MaskPredictor;
use crate::rng::substream;

pub const DEFAULT_N_MC: usize = 128;

/// A Monte Carlo estimate of the negative log-likelihood bound, in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodEstimate {
    pub mean: f64,
    pub draws: Vec<f64>,
    pub n_mc: usize,
    pub stderr: f64,
}

impl LikelihoodEstimate {
    pub fn from_draws(draws: Vec<f64>) -> Self {
        let n = draws.len();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 { (sample_variance(&draws) / n as f64).sqrt() } else { 0.0 };
        LikelihoodEstimate { mean, draws, n_mc: n, stderr }
    }

    pub fn variance(&self) -> f64 {
        sample_variance(&self.draws)
    }
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// How each Monte Carlo draw corrupts the response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorForm {
    /// Mask exactly `l ~ U{1..L}` tokens; weight `L / l`.
    Count,
    /// Mask each token with probability `t ~ U(0,1]`; weight `1 / t`.
    Time,
}

/// Per-draw bound values; draw `i` uses substream `i` of `key`.
pub fn bound_draws<P: MaskPredictor + ?Sized>(
    pred: &P,
    p0: &[u32],
    r0: &[u32],
    n_mc: usize,
    form: EstimatorForm,
    key: u64,
) -> Result<Vec<f64>> {
    if n_mc == 0 {
        return config("n_mc must be at least 1");
    }
    if r0.is_empty() {
        return precondition("response is empty");
    }
    let mask = pred.special().mask;
    if p0.contains(&mask) {
        return precondition("prompt contains the mask id");
    }
    let len = r0.len();
    let mut inputs = Vec::with_capacity(n_mc);
    let mut weights = Vec::with_capacity(n_mc);
    for i in 0..n_mc {
        let mut rng = substream(key, i as u64);
        let (corrupted, weight) = match form {
            EstimatorForm::Count => {
                let l = rng.random_range(1..=len);
                (forward_mask_count(r0, l, mask, &mut rng)?, len as f64 / l as f64)
            }
            EstimatorForm::Time => {
                let t = DiffusionTime::sample(&mut rng);
                (forward_mask(r0, t, mask, &mut rng)?, 1.0 / t.value())
            }
        };
        let mut seq = p0.to_vec();
        seq.extend_from_slice(corrupted.tokens());
        inputs.push(seq);
        weights.push(weight);
    }
    let live: Vec<usize> = (0..n_mc).filter(|&i| inputs[i][p0.len()..].contains(&mask)).collect();
    let batch: Vec<Vec<u32>> = live.iter().map(|&i| inputs[i].clone()).collect();
    let preds = pred.predict_batch(&batch)?;
    let mut out = vec![0.0; n_mc];
    for (&i, p) in live.iter().zip(&preds) {
        let ce: f64 = (0..len)
            .filter(|&j| inputs[i][p0.len() + j] == mask)
            .map(|j| -p.log_prob(p0.len() + j, r0[j]))
            .sum();
        out[i] = weights[i] * ce;
    }
    Ok(out)
}

/// Count-based estimate of `-log p(r0 | p0)`'s upper bound from `n_mc` draws.
pub fn estimate_cond_nll<P: MaskPredictor + ?Sized>(
    pred: &P,
    p0: &[u32],
    r0: &[u32],
    n_mc: usize,
    rng: &mut impl RngCore,
) -> Result<LikelihoodEstimate> {
    let key = rng.next_u64();
    Ok(LikelihoodEstimate::from_draws(bound_draws(pred, p0, r0, n_mc, EstimatorForm::Count, key)?))
}

/// Time-based estimate of the same bound, kept for variance comparisons.
pub fn estimate_cond_nll_time<P: MaskPredictor + ?Sized>(
    pred: &P,
    p0: &[u32],
    r0: &[u32],
    n_mc: usize,
    rng: &mut impl RngCore,
) -> Result<LikelihoodEstimate> {
    let key = rng.next_u64();
    Ok(LikelihoodEstimate::from_draws(bound_draws(pred, p0, r0, n_mc, EstimatorForm::Time, key)?))
}

/// Index of the smallest value; ties resolve to the lowest index.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub index: usize,
    pub estimates: Vec<f64>,
}

/// Picks the candidate with the lowest estimated negative log-likelihood.
///
/// Every candidate is scored with the same substream key.
pub fn multiple_choice<P: MaskPredictor + ?Sized>(
    pred: &P,
    p0: &[u32],
    candidates: &[Vec<u32>],
    n_mc: usize,
    rng: &mut impl RngCore,
) -> Result<Choice> {
    if candidates.len() < 2 {
        return config(format!("need at least two candidates, got {}", candidates.len()));
    }
    let key = rng.next_u64();
    let mut estimates = Vec::with_capacity(candidates.len());
    for c in candidates {
        let draws = bound_draws(pred, p0, c, n_mc, EstimatorForm::Count, key)?;
        estimates.push(draws.iter().sum::<f64>() / n_mc as f64);
    }
    let index = argmin(&estimates).expect("nonempty");
    Ok(Choice { index, estimates })
}

/// One multiple-choice item as stored in an evaluation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    #[serde(default = "default_task")]
    pub task: String,
    #[serde(default)]
    pub id: Option<String>,
    pub prompt: String,
    pub candidates: Vec<String>,
    pub answer: usize,
}

fn default_task() -> String {
    "eval".to_string()
}

/// Parses newline-delimited JSON items; blank lines are skipped.
pub fn parse_eval_items(text: &str) -> Result<Vec<EvalItem>> {
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: EvalItem =
            serde_json::from_str(line).map_err(|e| Error::Format { line: i + 1, msg: e.to_string() })?;
        if item.candidates.len() < 2 {
            return Err(Error::Format { line: i + 1, msg: "fewer than two candidates".into() });
        }
        if item.answer >= item.candidates.len() {
            return Err(Error::Format { line: i + 1, msg: format!("answer {} out of range", item.answer) });
        }
        items.push(item);
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub task: String,
    pub item_id: String,
    pub candidate_count: usize,
    pub n_mc: usize,
    pub chosen: usize,
    pub correct: bool,
}

pub const EVAL_HEADER: &str = "task\titem_id\tcandidate_count\tn_mc\tchosen\tcorrect";

impl EvalRow {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.task, self.item_id, self.candidate_count, self.n_mc, self.chosen, self.correct as u8
        )
    }
}

/// Scores every item; item `k` draws from substream `k` of `seed`.
pub fn evaluate_items<P: MaskPredictor + ?Sized>(
    pred: &P,
    vocab: &Vocab,
    items: &[EvalItem],
    n_mc: usize,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    if n_mc == 0 {
        return config("n_mc must be at least 1");
    }
    let mut rows = Vec::with_capacity(items.len());
    for (k, item) in items.iter().enumerate() {
        let prompt = vocab.encode(&item.prompt)?;
        let candidates = item.candidates.iter().map(|c| vocab.encode(c)).collect::<Result<Vec<_>>>()?;
        let mut rng = substream(seed, k as u64);
        let choice = multiple_choice(pred, &prompt, &candidates, n_mc, &mut rng)?;
        rows.push(EvalRow {
            task: item.task.clone(),
            item_id: item.id.clone().unwrap_or_else(|| k.to_string()),
            candidate_count: candidates.len(),
            n_mc,
            chosen: choice.index,
            correct: choice.index == item.answer,
        });
    }
    Ok(rows)
}
