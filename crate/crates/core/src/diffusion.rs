//! Forward masking, the reverse transition law, stochastic loss estimators and
//! exact enumeration oracles for the masked diffusion bound.

use rand::Rng;

use crate::error::{precondition, Error, Result};
use crate::predictor::MaskPredictor;

/// Longest response the subset-enumeration oracles accept.
pub const MAX_EXACT_BOUND_LEN: usize = 8;
/// Longest response the order-enumeration oracle accepts.
pub const MAX_AO_ARM_LEN: usize = 5;

/// A token sequence in which some positions may hold the mask id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSeq {
    tokens: Vec<u32>,
    mask_id: u32,
}

impl MaskedSeq {
    pub fn new(tokens: Vec<u32>, mask_id: u32) -> Self {
        MaskedSeq { tokens, mask_id }
    }

    pub fn fully_masked(len: usize, mask_id: u32) -> Self {
        MaskedSeq { tokens: vec![mask_id; len], mask_id }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<u32> {
        self.tokens
    }

    pub fn mask_id(&self) -> u32 {
        self.mask_id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.mask_id
    }

    /// Indices holding the mask id, ascending.
    pub fn mask_positions(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn num_masked(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.mask_id).count()
    }
}

/// A diffusion time in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DiffusionTime(f64);

impl DiffusionTime {
    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t <= 1.0 {
            Ok(DiffusionTime(t))
        } else {
            precondition(format!("diffusion time {t} outside (0, 1]"))
        }
    }

    /// Uniform on (0, 1], realised as `1 - u` with `u` uniform on [0, 1).
    pub fn sample(rng: &mut impl Rng) -> Self {
        DiffusionTime(1.0 - rng.random::<f64>())
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn check_clean(x0: &[u32], mask_id: u32, what: &str) -> Result<()> {
    if x0.contains(&mask_id) {
        return precondition(format!("{what} already contains the mask id"));
    }
    Ok(())
}

/// Masks each position independently with probability `t`.
pub fn forward_mask(x0: &[u32], t: DiffusionTime, mask_id: u32, rng: &mut impl Rng) -> Result<MaskedSeq> {
    check_clean(x0, mask_id, "x0")?;
    let tokens = x0.iter().map(|&tok| if rng.random::<f64>() < t.0 { mask_id } else { tok }).collect();
    Ok(MaskedSeq::new(tokens, mask_id))
}

/// Masks exactly `l` positions chosen uniformly among all size-`l` subsets.
pub fn forward_mask_count(x0: &[u32], l: usize, mask_id: u32, rng: &mut impl Rng) -> Result<MaskedSeq> {
    check_clean(x0, mask_id, "x0")?;
    if l == 0 || l > x0.len() {
        return precondition(format!("mask count {l} outside 1..={}", x0.len()));
    }
    let mut tokens = x0.to_vec();
    for i in rand::seq::index::sample(rng, x0.len(), l) {
        tokens[i] = mask_id;
    }
    Ok(MaskedSeq::new(tokens, mask_id))
}

/// Distribution of one position at time `s` given its value at time `t`.
///
/// The result is indexed by token id; the mask id's entry is the probability
/// of remaining masked.
pub fn reverse_transition(t: f64, s: f64, current: u32, mask_id: u32, predicted: &[f64]) -> Result<Vec<f64>> {
    if !(0.0 <= s && s < t && t <= 1.0) {
        return precondition(format!("need 0 <= s < t <= 1, got s={s}, t={t}"));
    }
    let total: f64 = predicted.iter().sum();
    if (total - 1.0).abs() > 1e-6 || predicted.iter().any(|&p| p < 0.0) {
        return precondition(format!("predicted distribution sums to {total}"));
    }
    if mask_id as usize >= predicted.len() || current as usize >= predicted.len() {
        return precondition("token id outside the predicted distribution");
    }
    let mut out = vec![0.0; predicted.len()];
    if current != mask_id {
        out[current as usize] = 1.0;
        return Ok(out);
    }
    let unmask = (t - s) / t;
    for (o, &p) in out.iter_mut().zip(predicted) {
        *o = unmask * p;
    }
    out[mask_id as usize] += s / t;
    Ok(out)
}

/// One realised corruption of a (prompt, response) pair for a loss estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDraw {
    /// Prompt followed by the corrupted response.
    pub input: Vec<u32>,
    /// Clean targets aligned with `input`.
    pub target: Vec<u32>,
    /// Absolute indices of masked positions.
    pub masked: Vec<usize>,
    /// Multiplier applied to the summed cross-entropy of masked positions.
    pub scale: f64,
    pub t: f64,
}

impl LossDraw {
    pub fn value_with(&self, pred: &crate::predictor::Prediction) -> f64 {
        if self.masked.is_empty() {
            return 0.0;
        }
        let ce: f64 = self.masked.iter().map(|&i| -pred.log_prob(i, self.target[i])).sum();
        self.scale * ce
    }
}

/// Shared `t`-draw used by both training objectives.
///
/// Only response positions are eligible; the scale is `1 / (t * |response|)`.
pub fn draw_time_masking(prompt: &[u32], response: &[u32], mask_id: u32, rng: &mut impl Rng) -> Result<LossDraw> {
    check_clean(prompt, mask_id, "prompt")?;
    if response.is_empty() {
        return precondition("response is empty");
    }
    let t = DiffusionTime::sample(rng);
    let corrupted = forward_mask(response, t, mask_id, rng)?;
    let offset = prompt.len();
    let masked = corrupted.mask_positions().into_iter().map(|i| i + offset).collect();
    let mut input = prompt.to_vec();
    input.extend_from_slice(corrupted.tokens());
    let mut target = prompt.to_vec();
    target.extend_from_slice(response);
    Ok(LossDraw { input, target, masked, scale: 1.0 / (t.0 * response.len() as f64), t: t.0 })
}

fn single_draw_loss<P: MaskPredictor + ?Sized>(pred: &P, draw: &LossDraw) -> Result<f64> {
    if draw.masked.is_empty() {
        return Ok(0.0);
    }
    let p = pred.predict(&draw.input)?;
    Ok(draw.value_with(&p))
}

/// One draw of the per-token pre-training loss `(1/(tL)) * sum of masked CE`.
pub fn mc_pretrain_loss<P: MaskPredictor + ?Sized>(pred: &P, x0: &[u32], rng: &mut impl Rng) -> Result<f64> {
    if x0.is_empty() {
        return precondition("x0 is empty");
    }
    let draw = draw_time_masking(&[], x0, pred.special().mask, rng)?;
    single_draw_loss(pred, &draw)
}

/// One draw of the fine-tuning loss: only response tokens are masked, and the
/// sum is normalised by `t * |r0|`.
pub fn mc_sft_loss<P: MaskPredictor + ?Sized>(pred: &P, p0: &[u32], r0: &[u32], rng: &mut impl Rng) -> Result<f64> {
    let draw = draw_time_masking(p0, r0, pred.special().mask, rng)?;
    single_draw_loss(pred, &draw)
}

fn check_exact<P: MaskPredictor + ?Sized>(pred: &P, prompt: &[u32], x0: &[u32], max: usize) -> Result<()> {
    let mask = pred.special().mask;
    check_clean(prompt, mask, "prompt")?;
    check_clean(x0, mask, "x0")?;
    if x0.is_empty() {
        return precondition("x0 is empty");
    }
    if x0.len() > max {
        return Err(Error::Refused(format!("length {} exceeds {max}", x0.len())));
    }
    Ok(())
}

/// Masked-position cross-entropy sums for each listed response subset.
fn subset_ce<P: MaskPredictor + ?Sized>(pred: &P, prompt: &[u32], x0: &[u32], subsets: &[Vec<usize>]) -> Result<Vec<f64>> {
    let mask = pred.special().mask;
    let inputs: Vec<Vec<u32>> = subsets
        .iter()
        .map(|s| {
            let mut seq = prompt.to_vec();
            seq.extend_from_slice(x0);
            for &i in s {
                seq[prompt.len() + i] = mask;
            }
            seq
        })
        .collect();
    let preds = pred.predict_batch(&inputs)?;
    Ok(subsets
        .iter()
        .zip(&preds)
        .map(|(s, p)| s.iter().map(|&i| -p.log_prob(prompt.len() + i, x0[i])).sum())
        .collect())
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Exact value of the time-integrated bound for `x0` given `prompt`.
///
/// Sums every nonempty mask subset `S` (enumerated by binary counting)
/// weighted by `(|S|-1)! (L-|S|)! / L!`.
pub fn exact_bound_t_cond<P: MaskPredictor + ?Sized>(pred: &P, prompt: &[u32], x0: &[u32]) -> Result<f64> {
    check_exact(pred, prompt, x0, MAX_EXACT_BOUND_LEN)?;
    let l = x0.len();
    let subsets: Vec<Vec<usize>> =
        (1u32..(1 << l)).map(|bits| (0..l).filter(|&i| bits >> i & 1 == 1).collect()).collect();
    let ce = subset_ce(pred, prompt, x0, &subsets)?;
    let ln_l = ln_factorial(l);
    Ok(subsets
        .iter()
        .zip(ce)
        .map(|(s, c)| (ln_factorial(s.len() - 1) + ln_factorial(l - s.len()) - ln_l).exp() * c)
        .sum())
}

pub fn exact_bound_t<P: MaskPredictor + ?Sized>(pred: &P, x0: &[u32]) -> Result<f64> {
    exact_bound_t_cond(pred, &[], x0)
}

/// Lexicographic size-`k` subsets of `0..n`.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        out.push(c.clone());
        let Some(i) = (0..k).rev().find(|&i| c[i] < n - k + i) else {
            return out;
        };
        c[i] += 1;
        for j in i + 1..k {
            c[j] = c[j - 1] + 1;
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact expectation of the count-based estimator: for each `l`, the mean over
/// size-`l` subsets of `(L/l) * masked CE`, averaged over `l` uniform in 1..=L.
pub fn exact_bound_l_cond<P: MaskPredictor + ?Sized>(pred: &P, prompt: &[u32], x0: &[u32]) -> Result<f64> {
    check_exact(pred, prompt, x0, MAX_EXACT_BOUND_LEN)?;
    let len = x0.len();
    let mut total = 0.0;
    for l in 1..=len {
        let subsets = combinations(len, l);
        let ce: f64 = subset_ce(pred, prompt, x0, &subsets)?.iter().sum();
        total += (len as f64 / l as f64) * ce / binomial(len, l);
    }
    Ok(total / len as f64)
}

pub fn exact_bound_l<P: MaskPredictor + ?Sized>(pred: &P, x0: &[u32]) -> Result<f64> {
    exact_bound_l_cond(pred, &[], x0)
}

/// Results of enumerating every generation order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AoArmNll {
    /// Mean over orders of each order's negative log-likelihood.
    pub expected_order_nll: f64,
    /// Negative log of the order-averaged sequence probability.
    pub exact_mixture_nll: f64,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut out = vec![p.clone()];
    loop {
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
        p.swap(i - 1, j);
        p[i..].reverse();
        out.push(p.clone());
    }
}

/// Enumerates all `L!` orders, revealing one token at a time with the rest masked.
pub fn ao_arm_exact<P: MaskPredictor + ?Sized>(pred: &P, x0: &[u32]) -> Result<AoArmNll> {
    check_exact(pred, &[], x0, MAX_AO_ARM_LEN)?;
    let mask = pred.special().mask;
    let len = x0.len();
    let orders = permutations(len);
    let mut inputs = Vec::with_capacity(orders.len() * len);
    for order in &orders {
        let mut seq = vec![mask; len];
        for &pos in order {
            inputs.push(seq.clone());
            seq[pos] = x0[pos];
        }
    }
    let preds = pred.predict_batch(&inputs)?;
    let mut per_order = Vec::with_capacity(orders.len());
    for (k, order) in orders.iter().enumerate() {
        let nll: f64 = order
            .iter()
            .enumerate()
            .map(|(step, &pos)| -preds[k * len + step].log_prob(pos, x0[pos]))
            .sum();
        per_order.push(nll);
    }
    let n = per_order.len() as f64;
    let expected_order_nll = per_order.iter().sum::<f64>() / n;
    let min = per_order.iter().cloned().fold(f64::INFINITY, f64::min);
    let lse = -min + per_order.iter().map(|v| (min - v).exp()).sum::<f64>().ln();
    let exact_mixture_nll = -(lse - n.ln());
    Ok(AoArmNll { expected_order_nll, exact_mixture_nll })
}
