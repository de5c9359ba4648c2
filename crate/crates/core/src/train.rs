//! Optimisation loops for pre-training and fine-tuning, the warmup-stable-decay
//! schedule, decoupled-weight-decay Adam, checkpointing and FLOPs accounting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use maskdiff_tensor::{Graph, Tensor, TensorError};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointRecord, OPTIMIZER_MAGIC};
use crate::data::{apply_random_length, prepare_sft_batch_to, SftPair, Vocab};
use crate::diffusion::{draw_time_masking, exact_bound_l};
use crate::error::{config, precondition, Error, Result};
use crate::model::{bind_params, forward_graph, Model, ParameterSet};
use crate::predictor::MaskPredictor;
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub stable_lr: f64,
    /// Knots `(iteration, lr)` after warmup; the schedule interpolates linearly between them.
    pub decay_points: Vec<(usize, f64)>,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub random_length_fraction: f64,
}

impl TrainConfig {
    /// Warmup over 200 iterations to 3e-4, a drop to 1e-4 at 60% of the run,
    /// and a linear ramp to 1e-5 over the last 10%.
    pub fn desk(total_iters: usize, seed: u64) -> Self {
        let warmup = 200.min(total_iters / 5).max(1);
        let drop = (total_iters * 6 / 10).max(warmup + 1);
        let tail = (total_iters * 9 / 10).max(drop + 2);
        TrainConfig {
            total_iters,
            batch_size: 32,
            warmup_iters: warmup,
            stable_lr: 3e-4,
            decay_points: vec![(drop, 3e-4), (drop + 1, 1e-4), (tail, 1e-4)],
            final_lr: 1e-5,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            seed,
            random_length_fraction: 0.01,
        }
    }

    /// Flat learning rate after warmup; handy for short fine-tuning runs.
    pub fn constant(total_iters: usize, warmup_iters: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            warmup_iters: warmup_iters.max(1),
            stable_lr: lr,
            decay_points: Vec::new(),
            final_lr: lr,
            ..TrainConfig::desk(total_iters, seed)
        }
    }

    /// The same schedule shape with every rate multiplied so the stable rate becomes `peak`.
    pub fn with_peak_lr(mut self, peak: f64) -> Self {
        let factor = if self.stable_lr > 0.0 { peak / self.stable_lr } else { 0.0 };
        self.stable_lr = peak;
        self.final_lr *= factor;
        for point in &mut self.decay_points {
            point.1 *= factor;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters == 0 {
            return config("warmup_iters must be at least 1");
        }
        if self.batch_size == 0 {
            return config("batch_size must be at least 1");
        }
        let lrs = [self.stable_lr, self.final_lr].into_iter().chain(self.decay_points.iter().map(|p| p.1));
        if lrs.into_iter().any(|lr| !(lr >= 0.0) || !lr.is_finite()) {
            return config("learning rates must be finite and nonnegative");
        }
        let mut prev = self.warmup_iters;
        for &(it, _) in &self.decay_points {
            if it <= prev {
                return config(format!("decay point at iteration {it} does not follow {prev}"));
            }
            prev = it;
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return config("betas must lie in [0, 1) and adam_eps must be positive");
        }
        if !(self.grad_clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return config("grad_clip_norm must be positive and weight_decay nonnegative");
        }
        if !(0.0..=1.0).contains(&self.random_length_fraction) {
            return config("random_length_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    fn knots(&self) -> Vec<(f64, f64)> {
        let mut k = vec![(0.0, 0.0), (self.warmup_iters as f64, self.stable_lr)];
        k.extend(self.decay_points.iter().map(|&(i, lr)| (i as f64, lr)));
        let last = k.last().expect("nonempty").0;
        if (self.total_iters as f64) > last {
            if self.decay_points.is_empty() && self.final_lr != self.stable_lr {
                // Without declared decay points the rate holds until the last tenth.
                let hold = (self.total_iters as f64 * 0.9).max(last);
                if hold > last {
                    k.push((hold, self.stable_lr));
                }
            }
            if (self.total_iters as f64) > k.last().expect("nonempty").0 {
                k.push((self.total_iters as f64, self.final_lr));
            }
        }
        k
    }
}

/// Piecewise-linear learning rate: warmup from zero, then linear between the
/// declared knots, holding the last value afterwards.
pub fn wsd_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    let x = iter as f64;
    let knots = cfg.knots();
    for w in knots.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x <= x1 {
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        }
    }
    knots.last().expect("nonempty").1
}

/// First and second moments for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet<f32>) -> Self {
        let zeros: BTreeMap<String, Vec<f32>> = params.iter().map(|(n, t)| (n.to_string(), vec![0.0; t.numel()])).collect();
        OptimizerState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// Statistics of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One AdamW update with global-norm clipping and decoupled decay:
/// `p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn optimizer_step(
    params: &mut ParameterSet<f32>,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepInfo> {
    let mut sq = 0.0f64;
    for (name, g) in grads {
        let Some(p) = params.get(name) else {
            return precondition(format!("gradient for unknown parameter {name}"));
        };
        if p.numel() != g.len() {
            return precondition(format!("gradient for {name} has {} values, parameter {}", g.len(), p.numel()));
        }
        for &x in g {
            if !x.is_finite() {
                return Err(Error::NonFinite { what: format!("gradient of {name}"), iter: state.step as usize });
            }
            sq += (x as f64) * (x as f64);
        }
    }
    let norm = sq.sqrt();
    let clip = if norm > cfg.grad_clip_norm { cfg.grad_clip_norm / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let decay = 1.0 - lr * cfg.weight_decay;
    for (name, p) in params.iter_mut() {
        let m = state.m.get_mut(name).ok_or_else(|| Error::Precondition(format!("no optimizer state for {name}")))?;
        let v = state.v.get_mut(name).ok_or_else(|| Error::Precondition(format!("no optimizer state for {name}")))?;
        let g = grads.get(name);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i] as f64 * clip);
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
            *w = (*w as f64 * decay - lr * update) as f32;
        }
    }
    Ok(StepInfo { grad_norm: norm, clipped: clip < 1.0 })
}

/// Training FLOPs estimate `6 * N * D`.
pub fn flops(n_nonembed_params: f64, n_tokens: f64) -> f64 {
    6.0 * n_nonembed_params * n_tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Masked-token cross-entropy weighted by `1 / (t * L)`.
    MaskedDiffusion,
    /// Next-token cross-entropy averaged over predicted tokens.
    Autoregressive,
}

/// Training examples for one loop.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Pretrain(&'a [Vec<u32>]),
    /// Responses are EOS-padded to at least `pad_to` and to the batch maximum.
    Sft { pairs: &'a [SftPair], pad_to: usize },
}

impl TrainData<'_> {
    fn len(&self) -> usize {
        match self {
            TrainData::Pretrain(c) => c.len(),
            TrainData::Sft { pairs, .. } => pairs.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub probe_bound: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Probe value before the first update, when probing is enabled.
    pub initial_probe: Option<f64>,
}

impl TrainLog {
    pub const HEADER: &'static str = "iteration\tlr\tloss\tprobe_bound\twall_seconds";

    pub fn to_tsv(&self, with_time: bool) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.records {
            let probe = r.probe_bound.map_or_else(|| "-".to_string(), |p| format!("{p:.6}"));
            let wall = if with_time { format!("{:.3}", r.wall_seconds) } else { "-".to_string() };
            out.push_str(&format!("{}\t{:.6e}\t{:.6}\t{}\t{}\n", r.iteration, r.lr, r.loss, probe, wall));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub objective: Objective,
    /// Log every this many iterations (and at the end).
    pub log_every: usize,
    /// Sequences scored exactly at each log point (each at most 6 tokens).
    pub probe: Vec<Vec<u32>>,
    /// Directory receiving `model.ckpt`, `optimizer.state` and `train_log.tsv`.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub vocab: Option<Vocab>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            objective: Objective::MaskedDiffusion,
            log_every: 100,
            probe: Vec::new(),
            checkpoint_dir: None,
            checkpoint_every: 0,
            vocab: None,
        }
    }
}

/// Mean probe score: exact bound for masked predictors, exact chain-rule
/// NLL for causal ones.
pub fn probe_value<P: MaskPredictor + ?Sized>(pred: &P, probe: &[Vec<u32>]) -> Result<f64> {
    if probe.is_empty() {
        return precondition("empty probe set");
    }
    let mut total = 0.0;
    for x in probe {
        if x.len() > 6 {
            return Err(Error::Refused(format!("probe sequence of length {} exceeds 6", x.len())));
        }
        total += if pred.is_causal() { causal_nll(pred, x)? } else { exact_bound_l(pred, x)? };
    }
    Ok(total / probe.len() as f64)
}

/// `-log p(x)` under a next-token predictor, with EOS as the start token.
pub fn causal_nll<P: MaskPredictor + ?Sized>(pred: &P, x: &[u32]) -> Result<f64> {
    let mut input = vec![pred.special().eos];
    input.extend_from_slice(&x[..x.len().saturating_sub(1)]);
    let p = pred.predict(&input)?;
    Ok(x.iter().enumerate().map(|(i, &tok)| -p.log_prob(i, tok)).sum())
}

/// Model parameters plus optimizer state and the iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: Model<f32>,
    pub state: OptimizerState,
    pub iteration: usize,
}

/// Loss inputs for one batch: sequences with per-row targets and weights.
struct Batch {
    inputs: Vec<Vec<u32>>,
    targets: Vec<usize>,
    weights: Vec<f64>,
}

fn masked_batch(draws: Vec<crate::diffusion::LossDraw>) -> Batch {
    let n = draws.len() as f64;
    let mut batch = Batch { inputs: Vec::new(), targets: Vec::new(), weights: Vec::new() };
    for d in draws {
        let mut w = vec![0.0; d.input.len()];
        for &i in &d.masked {
            w[i] = d.scale / n;
        }
        batch.targets.extend(d.target.iter().map(|&t| t as usize));
        batch.weights.extend(w);
        batch.inputs.push(d.input);
    }
    batch
}

/// Next-token targets; only rows in `from..` of each sequence carry weight.
fn causal_batch(seqs: Vec<(Vec<u32>, usize)>) -> Batch {
    let live: Vec<_> = seqs.into_iter().filter(|(s, from)| s.len() > (*from).max(1)).collect();
    let n = live.len() as f64;
    let mut batch = Batch { inputs: Vec::new(), targets: Vec::new(), weights: Vec::new() };
    for (s, from) in live {
        let first = from.max(1);
        let count = (s.len() - first) as f64;
        for i in 0..s.len() {
            let predicts = i + 1;
            if predicts < s.len() {
                batch.targets.push(s[predicts] as usize);
                batch.weights.push(if predicts >= first { 1.0 / (count * n) } else { 0.0 });
            } else {
                batch.targets.push(0);
                batch.weights.push(0.0);
            }
        }
        batch.inputs.push(s);
    }
    batch
}

impl Trainer {
    pub fn new(model: Model<f32>) -> Self {
        let state = OptimizerState::new(&model.params);
        Trainer { model, state, iteration: 0 }
    }

    fn make_batch(&self, data: TrainData, cfg: &TrainConfig, objective: Objective, rng: &mut impl Rng) -> Result<Batch> {
        let mask = self.model.config.mask_id;
        let n = data.len();
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
        match data {
            TrainData::Pretrain(corpus) => {
                let mut seqs: Vec<Vec<u32>> = picks.iter().map(|&i| corpus[i].clone()).collect();
                let max_len = seqs.iter().map(Vec::len).max().unwrap_or(1);
                apply_random_length(&mut seqs, cfg.random_length_fraction, max_len, rng)?;
                match objective {
                    Objective::MaskedDiffusion => {
                        let draws = seqs.iter().map(|s| draw_time_masking(&[], s, mask, rng)).collect::<Result<Vec<_>>>()?;
                        Ok(masked_batch(draws))
                    }
                    Objective::Autoregressive => Ok(causal_batch(seqs.into_iter().map(|s| (s, 0)).collect())),
                }
            }
            TrainData::Sft { pairs, pad_to } => {
                let chosen: Vec<SftPair> = picks.iter().map(|&i| pairs[i].clone()).collect();
                let padded = prepare_sft_batch_to(&chosen, pad_to)?;
                match objective {
                    Objective::MaskedDiffusion => {
                        let draws = padded
                            .iter()
                            .map(|p| draw_time_masking(&p.prompt, &p.response, mask, rng))
                            .collect::<Result<Vec<_>>>()?;
                        Ok(masked_batch(draws))
                    }
                    Objective::Autoregressive => Ok(causal_batch(
                        padded
                            .into_iter()
                            .map(|p| {
                                let from = p.prompt.len();
                                let mut s = p.prompt;
                                s.extend(p.response);
                                (s, from)
                            })
                            .collect(),
                    )),
                }
            }
        }
    }

    /// Loss value and gradients of one batch.
    fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, BTreeMap<String, Vec<f32>>)> {
        let mut g = Graph::<f32>::new();
        let bound = bind_params(&mut g, &self.model.params, true);
        let seqs: Vec<&[u32]> = batch.inputs.iter().map(Vec::as_slice).collect();
        let logits = forward_graph(&mut g, &self.model.config, &bound, &seqs)?;
        let loss = g.cross_entropy(logits, &batch.targets, &batch.weights)?;
        let value = g.value(loss).data()[0] as f64;
        let mut grads = g.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, var) in bound {
            if let Some(gr) = grads.take(var) {
                out.insert(name, gr);
            }
        }
        Ok((value, out))
    }

    /// Runs iteration `self.iteration`, whose randomness comes from substream
    /// `iteration` of the configured seed. Returns the batch loss.
    pub fn step(&mut self, data: TrainData, cfg: &TrainConfig, objective: Objective) -> Result<f64> {
        let mut rng = substream(cfg.seed, self.iteration as u64);
        let batch = self.make_batch(data, cfg, objective, &mut rng)?;
        let loss = if batch.inputs.is_empty() {
            0.0
        } else {
            let (loss, grads) = self.loss_and_grads(&batch).map_err(|e| match e {
                Error::Tensor(TensorError::NonFinite { op }) => {
                    Error::NonFinite { what: format!("{op} in the training graph"), iter: self.iteration }
                }
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { what: "loss".into(), iter: self.iteration });
            }
            let lr = wsd_lr(self.iteration, cfg);
            optimizer_step(&mut self.model.params, &grads, &mut self.state, lr, cfg)
                .map_err(|e| match e {
                    Error::NonFinite { what, .. } => Error::NonFinite { what, iter: self.iteration },
                    other => other,
                })?;
            loss
        };
        self.iteration += 1;
        Ok(loss)
    }

    /// Trains until `cfg.total_iters` iterations have completed overall.
    pub fn run(&mut self, data: TrainData, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainLog> {
        cfg.validate()?;
        let mut log = TrainLog::default();
        if data.len() == 0 {
            return Ok(log);
        }
        if let Some(dir) = &opts.checkpoint_dir {
            fs::create_dir_all(dir)?;
            self.save(dir, opts.vocab.as_ref())?;
        }
        if !opts.probe.is_empty() {
            log.initial_probe = Some(probe_value(&self.model, &opts.probe)?);
        }
        let start = Instant::now();
        let (mut sum, mut count) = (0.0, 0usize);
        while self.iteration < cfg.total_iters {
            let lr = wsd_lr(self.iteration, cfg);
            sum += self.step(data, cfg, opts.objective)?;
            count += 1;
            let done = self.iteration;
            let at_log = opts.log_every > 0 && done % opts.log_every == 0;
            if at_log || done == cfg.total_iters {
                let probe_bound =
                    if opts.probe.is_empty() { None } else { Some(probe_value(&self.model, &opts.probe)?) };
                log.records.push(LogRecord {
                    iteration: done,
                    lr,
                    loss: sum / count as f64,
                    probe_bound,
                    wall_seconds: start.elapsed().as_secs_f64(),
                });
                sum = 0.0;
                count = 0;
            }
            if let Some(dir) = &opts.checkpoint_dir {
                if (opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0) || done == cfg.total_iters {
                    self.save(dir, opts.vocab.as_ref())?;
                    fs::write(dir.join("train_log.tsv"), log.to_tsv(true))?;
                }
            }
        }
        Ok(log)
    }

    pub fn record(&self, vocab: Option<&Vocab>) -> CheckpointRecord {
        CheckpointRecord {
            model: self.model.config.clone(),
            vocab: vocab.map(Vocab::stored),
            iteration: self.iteration as u64,
        }
    }

    /// Writes `model.ckpt` and `optimizer.state` under `dir`.
    pub fn save(&self, dir: &Path, vocab: Option<&Vocab>) -> Result<()> {
        checkpoint::save_checkpoint(&dir.join(MODEL_FILE), &self.record(vocab), &self.model.params)?;
        let mut tensors = BTreeMap::new();
        for (name, m) in &self.state.m {
            tensors.insert(format!("m.{name}"), Tensor::new(vec![m.len()], m.clone())?);
        }
        for (name, v) in &self.state.v {
            tensors.insert(format!("v.{name}"), Tensor::new(vec![v.len()], v.clone())?);
        }
        let mut bytes = Vec::new();
        checkpoint::write_container(&mut bytes, OPTIMIZER_MAGIC, &OptimizerRecord { step: self.state.step, iteration: self.iteration as u64 }, &tensors)?;
        checkpoint::write_atomic(&dir.join(OPTIMIZER_FILE), &bytes)
    }

    /// Restores a trainer saved by [`Trainer::save`].
    pub fn load(dir: &Path) -> Result<(Self, Option<Vocab>)> {
        let (record, model) = checkpoint::load_checkpoint(&dir.join(MODEL_FILE))?;
        let bytes = fs::read(dir.join(OPTIMIZER_FILE))?;
        let (opt, tensors): (OptimizerRecord, BTreeMap<String, Tensor<f32>>) =
            checkpoint::read_container(&mut &bytes[..], OPTIMIZER_MAGIC)?;
        let mut state = OptimizerState { step: opt.step, m: BTreeMap::new(), v: BTreeMap::new() };
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix("m.") {
                state.m.insert(rest.to_string(), t.into_data());
            } else if let Some(rest) = name.strip_prefix("v.") {
                state.v.insert(rest.to_string(), t.into_data());
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer entry {name}")));
            }
        }
        for (name, p) in model.params.iter() {
            let ok = |s: &BTreeMap<String, Vec<f32>>| s.get(name).is_some_and(|x| x.len() == p.numel());
            if !ok(&state.m) || !ok(&state.v) {
                return Err(Error::Checkpoint(format!("optimizer state does not match parameter {name}")));
            }
        }
        if opt.iteration != record.iteration {
            return Err(Error::Checkpoint("model and optimizer files are from different iterations".into()));
        }
        let vocab = record.vocab.as_deref().map(Vocab::from_stored).transpose()?;
        Ok((Trainer { model, state, iteration: record.iteration as usize }, vocab))
    }
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const OPTIMIZER_FILE: &str = "optimizer.state";

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerRecord {
    step: u64,
    iteration: u64,
}

/// Masked-diffusion pre-training from freshly supplied parameters.
pub fn pretrain(model: Model<f32>, corpus: &[Vec<u32>], cfg: &TrainConfig, opts: &TrainOptions) -> Result<(Model<f32>, TrainLog)> {
    let mut trainer = Trainer::new(model);
    let log = trainer.run(TrainData::Pretrain(corpus), cfg, opts)?;
    Ok((trainer.model, log))
}

/// Fine-tuning on prompt/response pairs; prompts are never masked.
pub fn sft(
    model: Model<f32>,
    pairs: &[SftPair],
    pad_to: usize,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<(Model<f32>, TrainLog)> {
    let mut trainer = Trainer::new(model);
    let log = trainer.run(TrainData::Sft { pairs, pad_to }, cfg, opts)?;
    Ok((trainer.model, log))
}
