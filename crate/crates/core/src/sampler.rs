//! Generation: pure diffusion, block diffusion, semi-autoregressive block
//! diffusion, autoregressive decoding and classifier-free guidance.

use rand::Rng;

use crate::error::{config, precondition, Error, Result};
use crate::predictor::{MaskPredictor, Prediction};

/// How predicted tokens are returned to the mask at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Each newly predicted token is remasked independently with probability `s/t`.
    Random,
    /// A uniformly random subset of the masked positions is finalised, sized so
    /// that exactly `floor(L * s)` positions remain masked.
    RandomCount,
    /// The highest-confidence predictions are kept, `floor(L * (1 - s))` in total.
    LowConfidence,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "random_count" => Ok(Strategy::RandomCount),
            "low_confidence" => Ok(Strategy::LowConfidence),
            other => config(format!("unknown remasking strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Diffusion,
    /// Blocks of the given length generated left to right until EOS or the block cap.
    Block { block_len: usize },
    /// A fixed total length decoded block by block.
    SemiAr { block_len: usize },
    Autoregressive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub gen_length: usize,
    pub steps: usize,
    pub strategy: Strategy,
    pub mode: Mode,
    pub cfg_scale: f64,
    pub eos_zeroing: bool,
    /// Zero means greedy argmax prediction.
    pub temperature: f64,
    pub max_blocks: usize,
}

pub const DEFAULT_MAX_BLOCKS: usize = 8;

impl SamplerConfig {
    /// Pure diffusion with low-confidence remasking and greedy prediction.
    pub fn diffusion(gen_length: usize, steps: usize) -> Self {
        SamplerConfig {
            gen_length,
            steps,
            strategy: Strategy::LowConfidence,
            mode: Mode::Diffusion,
            cfg_scale: 0.0,
            eos_zeroing: false,
            temperature: 0.0,
            max_blocks: DEFAULT_MAX_BLOCKS,
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.gen_length == 0 {
            return config("generation length must be at least 1");
        }
        if self.steps == 0 || self.steps > self.gen_length {
            return config(format!("steps {} outside 1..={}", self.steps, self.gen_length));
        }
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            return config(format!("cfg scale {} must be finite and nonnegative", self.cfg_scale));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return config(format!("temperature {} must be finite and nonnegative", self.temperature));
        }
        match self.mode {
            Mode::Block { block_len } => {
                if block_len == 0 {
                    return config("block length must be at least 1");
                }
                if self.max_blocks == 0 {
                    return config("max_blocks must be at least 1");
                }
            }
            Mode::SemiAr { block_len } => {
                if block_len == 0 || self.gen_length % block_len != 0 {
                    return config(format!("block length {block_len} must divide generation length {}", self.gen_length));
                }
                let blocks = self.gen_length / block_len;
                if self.steps % blocks != 0 {
                    return config(format!("steps {} must be a multiple of the block count {blocks}", self.steps));
                }
            }
            Mode::Diffusion | Mode::Autoregressive => {}
        }
        Ok(())
    }
}

/// One finalised token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub block: usize,
    /// Step within the block, starting at zero.
    pub step: usize,
    /// Offset from the start of the generated region.
    pub position: usize,
    pub token: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecodeTrace {
    pub records: Vec<TraceRecord>,
}

impl DecodeTrace {
    /// `step<TAB>position<TAB>token_id<TAB>token_text` lines.
    pub fn to_tsv(&self, token_text: impl Fn(u32) -> String) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.step, r.position, r.token, token_text(r.token)));
        }
        out
    }

    /// Positions finalised at each step of `block`.
    pub fn per_step_counts(&self, block: usize) -> Vec<usize> {
        let mut counts = Vec::new();
        for r in self.records.iter().filter(|r| r.block == block) {
            if counts.len() <= r.step {
                counts.resize(r.step + 1, 0);
            }
            counts[r.step] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated tokens with everything from the first EOS on removed.
    pub tokens: Vec<u32>,
    /// Every generated token, EOS included.
    pub raw: Vec<u32>,
    pub trace: DecodeTrace,
    /// Set when block decoding hit its cap (or autoregressive decoding its
    /// length limit) without producing EOS.
    pub truncated: bool,
    pub forward_passes: usize,
}

/// Removes the first EOS and everything after it.
pub fn postprocess_eos(tokens: &[u32], eos: u32) -> Vec<u32> {
    match tokens.iter().position(|&t| t == eos) {
        Some(i) => tokens[..i].to_vec(),
        None => tokens.to_vec(),
    }
}

/// Softmax of `(1 + w) * cond - w * uncond` for each row of width `vocab`.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], w: f64, vocab: usize) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() || vocab == 0 || cond.len() % vocab != 0 {
        return Err(maskdiff_tensor::TensorError::Dimension {
            op: "cfg_combine",
            detail: format!("cond {} vs uncond {} values, vocab {vocab}", cond.len(), uncond.len()),
        }
        .into());
    }
    if !(w >= 0.0) {
        return config(format!("cfg scale {w} must be nonnegative"));
    }
    let mut out = Vec::with_capacity(cond.len());
    for (c, u) in cond.chunks(vocab).zip(uncond.chunks(vocab)) {
        let row: Vec<f64> = c.iter().zip(u).map(|(&c, &u)| (1.0 + w) * c - w * u).collect();
        out.extend(softmax(&row));
    }
    Ok(out)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Zeroes the confidence of every position predicted as EOS when enabled.
pub fn eos_zeroing_hook(confidences: &mut [f64], predicted: &[u32], eos: u32, enabled: bool) {
    if !enabled {
        return;
    }
    for (c, &p) in confidences.iter_mut().zip(predicted) {
        if p == eos {
            *c = 0.0;
        }
    }
}

/// Ranks positions for keeping: previously unmasked first, then by confidence
/// (descending), then by index. Returns `true` for positions to remask.
fn remask_by_rank(confidences: &[f64], already_unmasked: &[bool], n_un: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| {
        already_unmasked[b]
            .cmp(&already_unmasked[a])
            .then(confidences[b].total_cmp(&confidences[a]))
            .then(a.cmp(&b))
    });
    let mut remask = vec![true; confidences.len()];
    for &i in order.iter().take(n_un) {
        remask[i] = false;
    }
    remask
}

/// Low-confidence remasking decision for one step ending at time `s`.
///
/// Keeps the `floor(L * (1 - s))` highest-confidence positions unmasked and
/// remasks the rest. Previously unmasked positions carry confidence one.
pub fn remask_low_confidence(confidences: &[f64], already_unmasked: &[bool], s: f64) -> Result<Vec<bool>> {
    if confidences.len() != already_unmasked.len() {
        return precondition("confidence and unmasked lists differ in length");
    }
    if !(0.0..=1.0).contains(&s) {
        return precondition(format!("time {s} outside [0, 1]"));
    }
    let l = confidences.len();
    let n_un = ((l as f64 * (1.0 - s)) + 1e-9).floor() as usize;
    let mut conf = confidences.to_vec();
    for (c, &u) in conf.iter_mut().zip(already_unmasked) {
        if u {
            *c = 1.0;
        }
    }
    Ok(remask_by_rank(&conf, already_unmasked, n_un.min(l)))
}

fn check_prompt<P: MaskPredictor + ?Sized>(pred: &P, prompt: &[u32]) -> Result<()> {
    if prompt.contains(&pred.special().mask) {
        return precondition("prompt contains the mask id");
    }
    Ok(())
}

fn check_len<P: MaskPredictor + ?Sized>(pred: &P, len: usize) -> Result<()> {
    if len > pred.max_len() {
        return Err(Error::Length { len, max: pred.max_len() });
    }
    Ok(())
}

struct Decoder<'a, P: ?Sized> {
    pred: &'a P,
    cfg: &'a SamplerConfig,
    /// Positions hidden in the unconditional pass.
    prompt_len: usize,
    passes: usize,
}

impl<P: MaskPredictor + ?Sized> Decoder<'_, P> {
    /// Probability rows (after guidance) for the listed positions of `seq`.
    fn probabilities(&mut self, seq: &[u32], positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        let v = self.pred.vocab_size();
        let cond = self.pred.predict(seq)?;
        self.passes += 1;
        let uncond: Option<Prediction> = if self.cfg.cfg_scale > 0.0 {
            let mask = self.pred.special().mask;
            let mut u = seq.to_vec();
            u[..self.prompt_len].fill(mask);
            self.passes += 1;
            Some(self.pred.predict(&u)?)
        } else {
            None
        };
        positions
            .iter()
            .map(|&i| match &uncond {
                Some(u) => cfg_combine(cond.log_probs(i), u.log_probs(i), self.cfg.cfg_scale, v),
                None => Ok(softmax(cond.log_probs(i))),
            })
            .collect()
    }

    /// Greedy argmax (lowest id on ties) or tempered sampling; returns the
    /// token and the probability it had under the untempered row.
    fn choose(&self, probs: &[f64], rng: &mut impl Rng) -> (u32, f64) {
        let token = if self.cfg.temperature == 0.0 {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        } else {
            let inv = 1.0 / self.cfg.temperature;
            let weights: Vec<f64> = probs.iter().map(|&p| p.powf(inv)).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
            for (i, &w) in weights.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        };
        (token as u32, probs[token])
    }

    /// Reverse process over `targets` (all masked on entry) in `steps` uniform steps.
    fn denoise(
        &mut self,
        seq: &mut [u32],
        targets: &[usize],
        steps: usize,
        block: usize,
        origin: usize,
        trace: &mut DecodeTrace,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let mask = self.pred.special().mask;
        let eos = self.pred.special().eos;
        let l = targets.len();
        for k in 0..steps {
            let masked: Vec<usize> = targets.iter().copied().filter(|&i| seq[i] == mask).collect();
            if masked.is_empty() {
                break;
            }
            let probs = self.probabilities(seq, &masked)?;
            let mut tokens = Vec::with_capacity(masked.len());
            let mut conf = Vec::with_capacity(masked.len());
            for row in &probs {
                let (tok, c) = self.choose(row, rng);
                tokens.push(tok);
                conf.push(c);
            }
            eos_zeroing_hook(&mut conf, &tokens, eos, self.cfg.eos_zeroing);

            // Times are t = (steps - k) / steps and s = (steps - k - 1) / steps.
            let remaining = steps - k - 1;
            let finalize: Vec<bool> = match self.cfg.strategy {
                Strategy::Random => {
                    let stay = remaining as f64 / (steps - k) as f64;
                    masked.iter().map(|_| remaining == 0 || rng.random::<f64>() >= stay).collect()
                }
                Strategy::RandomCount => {
                    let keep_masked = l * remaining / steps;
                    let n = masked.len().saturating_sub(keep_masked);
                    let mut f = vec![false; masked.len()];
                    for i in rand::seq::index::sample(rng, masked.len(), n) {
                        f[i] = true;
                    }
                    f
                }
                Strategy::LowConfidence => {
                    let n_un = l * (k + 1) / steps;
                    let already = l - masked.len();
                    let unmasked = vec![false; masked.len()];
                    let remask = remask_by_rank(&conf, &unmasked, n_un.saturating_sub(already));
                    remask.into_iter().map(|r| !r).collect()
                }
            };
            for (j, &pos) in masked.iter().enumerate() {
                if finalize[j] {
                    seq[pos] = tokens[j];
                    trace.records.push(TraceRecord { block, step: k, position: pos - origin, token: tokens[j] });
                }
            }
        }
        Ok(())
    }
}

fn require_bidirectional<P: MaskPredictor + ?Sized>(pred: &P) -> Result<()> {
    if pred.is_causal() {
        return config("diffusion sampling needs a bidirectional predictor");
    }
    Ok(())
}

/// Dispatches on `cfg.mode`.
pub fn generate<P: MaskPredictor + ?Sized>(pred: &P, prompt: &[u32], cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<Generation> {
    match cfg.mode {
        Mode::Diffusion => generate_diffusion(pred, prompt, cfg, rng),
        Mode::SemiAr { block_len } => generate_semi_ar(pred, prompt, cfg.gen_length, block_len, cfg, rng),
        Mode::Block { block_len } => generate_block_diffusion(pred, prompt, block_len, cfg, rng),
        Mode::Autoregressive => generate_autoregressive(pred, prompt, cfg.gen_length, cfg, rng),
    }
}

/// Reverse process from a fully masked response of `cfg.gen_length` tokens.
pub fn generate_diffusion<P: MaskPredictor + ?Sized>(pred: &P, prompt: &[u32], cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<Generation> {
    generate_semi_ar(pred, prompt, cfg.gen_length, cfg.gen_length, cfg, rng)
}

/// Fixed-length generation decoded in `block_len` blocks left to right; later
/// blocks stay masked in the input while earlier ones are decoded.
pub fn generate_semi_ar<P: MaskPredictor + ?Sized>(
    pred: &P,
    prompt: &[u32],
    total_len: usize,
    block_len: usize,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Generation> {
    let local = SamplerConfig { gen_length: total_len, mode: Mode::SemiAr { block_len }, ..cfg.clone() };
    local.validate()?;
    require_bidirectional(pred)?;
    check_prompt(pred, prompt)?;
    check_len(pred, prompt.len() + total_len)?;
    let special = pred.special();
    let blocks = total_len / block_len;
    let steps = cfg.steps / blocks;
    let mut seq = prompt.to_vec();
    seq.resize(prompt.len() + total_len, special.mask);
    let mut trace = DecodeTrace::default();
    let mut dec = Decoder { pred, cfg: &local, prompt_len: prompt.len(), passes: 0 };
    for b in 0..blocks {
        let start = prompt.len() + b * block_len;
        let targets: Vec<usize> = (start..start + block_len).collect();
        dec.denoise(&mut seq, &targets, steps, b, prompt.len(), &mut trace, rng)?;
    }
    let raw = seq[prompt.len()..].to_vec();
    Ok(Generation { tokens: postprocess_eos(&raw, special.eos), raw, trace, truncated: false, forward_passes: dec.passes })
}

/// Steps spent on each block in block mode: the pure-diffusion rate
/// `steps / gen_length` applied to `block_len`, rounded up and clamped.
pub fn block_steps(cfg: &SamplerConfig, block_len: usize) -> usize {
    (cfg.steps * block_len).div_ceil(cfg.gen_length).clamp(1, block_len)
}

/// Open-ended generation, one diffused block at a time, conditioned on the
/// prompt and all finished blocks. Stops after a block containing EOS.
pub fn generate_block_diffusion<P: MaskPredictor + ?Sized>(
    pred: &P,
    prompt: &[u32],
    block_len: usize,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Generation> {
    let local = SamplerConfig { mode: Mode::Block { block_len }, ..cfg.clone() };
    local.validate()?;
    require_bidirectional(pred)?;
    check_prompt(pred, prompt)?;
    let special = pred.special();
    let steps = block_steps(&local, block_len);
    let mut seq = prompt.to_vec();
    let mut trace = DecodeTrace::default();
    let mut dec = Decoder { pred, cfg: &local, prompt_len: prompt.len(), passes: 0 };
    let mut truncated = true;
    for b in 0..local.max_blocks {
        let start = seq.len();
        check_len(pred, start + block_len)?;
        seq.resize(start + block_len, special.mask);
        let targets: Vec<usize> = (start..start + block_len).collect();
        dec.denoise(&mut seq, &targets, steps, b, prompt.len(), &mut trace, rng)?;
        if seq[start..].contains(&special.eos) {
            truncated = false;
            break;
        }
    }
    let raw = seq[prompt.len()..].to_vec();
    Ok(Generation { tokens: postprocess_eos(&raw, special.eos), raw, trace, truncated, forward_passes: dec.passes })
}

/// Left-to-right decoding, one token per forward pass.
///
/// A bidirectional predictor sees the context followed by a single mask and
/// predicts that position; a causal predictor's last row is used instead, with
/// EOS standing in for an empty context.
pub fn generate_autoregressive<P: MaskPredictor + ?Sized>(
    pred: &P,
    prompt: &[u32],
    max_len: usize,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Generation> {
    check_prompt(pred, prompt)?;
    if cfg.cfg_scale > 0.0 && pred.is_causal() {
        return config("guidance needs a bidirectional predictor");
    }
    let special = pred.special();
    let local = SamplerConfig { gen_length: max_len.max(1), ..cfg.clone() };
    let mut dec = Decoder { pred, cfg: &local, prompt_len: prompt.len(), passes: 0 };
    let mut seq = prompt.to_vec();
    let mut trace = DecodeTrace::default();
    let mut truncated = true;
    for i in 0..max_len {
        let (input, row) = if pred.is_causal() {
            if seq.is_empty() {
                (vec![special.eos], 0)
            } else {
                (seq.clone(), seq.len() - 1)
            }
        } else {
            let mut input = seq.clone();
            input.push(special.mask);
            (input, seq.len())
        };
        check_len(pred, input.len())?;
        let probs = dec.probabilities(&input, &[row])?;
        let (token, _) = dec.choose(&probs[0], rng);
        seq.push(token);
        trace.records.push(TraceRecord { block: i, step: 0, position: i, token });
        if token == special.eos {
            truncated = false;
            break;
        }
    }
    let raw = seq[prompt.len()..].to_vec();
    Ok(Generation { tokens: postprocess_eos(&raw, special.eos), raw, trace, truncated, forward_passes: dec.passes })
}

/// Fills every masked position of `seq` by the reverse process, treating the
/// unmasked tokens as fixed context. Used for cue-on-the-right probes.
pub fn infill<P: MaskPredictor + ?Sized>(pred: &P, seq: &[u32], cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<Generation> {
    require_bidirectional(pred)?;
    check_len(pred, seq.len())?;
    let special = pred.special();
    let targets: Vec<usize> = (0..seq.len()).filter(|&i| seq[i] == special.mask).collect();
    if targets.is_empty() {
        return precondition("nothing to infill");
    }
    let local = SamplerConfig { gen_length: targets.len(), cfg_scale: 0.0, ..cfg.clone() };
    local.validate()?;
    let mut out = seq.to_vec();
    let mut trace = DecodeTrace::default();
    let mut dec = Decoder { pred, cfg: &local, prompt_len: 0, passes: 0 };
    dec.denoise(&mut out, &targets, local.steps, 0, 0, &mut trace, rng)?;
    let raw: Vec<u32> = targets.iter().map(|&i| out[i]).collect();
    Ok(Generation { tokens: raw.clone(), raw, trace, truncated: false, forward_passes: dec.passes })
}
