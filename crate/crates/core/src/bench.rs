//! Miniature benchmark harnesses. Each produces a [`BenchReport`] whose rows are
//! a pure function of the models, data, configuration and seeds; wall-clock
//! measurements are kept in a separate timing section.

use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::CheckpointRecord;
use crate::data::{encode_documents, ReversalData, SftPair, TaskKind, TextPair, Vocab, PROMPT_SEPARATOR};
use crate::error::{config, Error, Result};
use crate::likelihood::sample_variance;
use crate::model::{Model, ModelConfig};
use crate::predictor::MaskPredictor;
use crate::rng::substream;
use crate::sampler::{generate, generate_autoregressive, infill, Mode, SamplerConfig, Strategy};
use crate::train::{flops, probe_value, Objective, TrainConfig, TrainData, TrainOptions, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub condition: String,
    pub metric: String,
    pub value: f64,
    pub stderr: Option<f64>,
}

impl BenchRow {
    pub fn new(condition: impl Into<String>, metric: impl Into<String>, value: f64) -> Self {
        BenchRow { condition: condition.into(), metric: metric.into(), value, stderr: None }
    }

    pub fn with_stderr(mut self, stderr: Option<f64>) -> Self {
        self.stderr = stderr;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub name: String,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub rows: Vec<BenchRow>,
    /// Wall-clock measurements; excluded from the reproducible rows.
    pub timings: Vec<BenchRow>,
}

pub const REPORT_HEADER: &str = "condition\tmetric\tvalue\tstderr";

fn fmt_value(v: f64) -> String {
    format!("{v:.6}")
}

fn rows_tsv(rows: &[BenchRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let se = r.stderr.map_or_else(|| "-".to_string(), fmt_value);
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.condition, r.metric, fmt_value(r.value), se));
    }
    out
}

impl BenchReport {
    pub fn new(name: &str, config: Value, seeds: Vec<u64>) -> Self {
        BenchReport { name: name.to_string(), config, seeds, rows: Vec::new(), timings: Vec::new() }
    }

    pub fn push(&mut self, row: BenchRow) {
        self.rows.push(row);
    }

    pub fn get(&self, condition: &str, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.condition == condition && r.metric == metric).map(|r| r.value)
    }

    pub fn timing(&self, condition: &str, metric: &str) -> Option<f64> {
        self.timings.iter().find(|r| r.condition == condition && r.metric == metric).map(|r| r.value)
    }

    /// Tab-separated rows with a one-line header.
    pub fn to_tsv(&self) -> String {
        rows_tsv(&self.rows)
    }

    pub fn timings_tsv(&self) -> String {
        rows_tsv(&self.timings)
    }

    /// Newline-delimited JSON: one metadata record, then one record per row.
    pub fn to_jsonl(&self) -> String {
        let meta = json!({ "bench": self.name, "config": self.config, "seeds": self.seeds });
        let mut out = meta.to_string();
        out.push('\n');
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("rows serialize"));
            out.push('\n');
        }
        out
    }
}

/// Mean and standard error (absent for a single value).
pub fn mean_stderr(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let se = (values.len() > 1).then(|| (sample_variance(values) / n).sqrt());
    (mean, se)
}

/// Fraction of items whose generated text equals the expected answer exactly.
/// Item `i` samples from substream `i` of `seed`.
pub fn exact_match<P: MaskPredictor + ?Sized>(
    pred: &P,
    vocab: &Vocab,
    items: &[TextPair],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (i, item) in items.iter().enumerate() {
        let prompt = vocab.encode(&item.prompt)?;
        let mut rng = substream(seed, i as u64);
        let out = generate(pred, &prompt, cfg, &mut rng)?;
        if vocab.decode(&out.tokens) == item.response {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

/// A model together with the record it was loaded from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub record: CheckpointRecord,
    pub model: Model<f32>,
}

impl TrainedModel {
    fn require_trained(&self, role: &str) -> Result<()> {
        if self.record.iteration == 0 {
            return Err(Error::Precondition(format!("{role} model has not been trained")));
        }
        Ok(())
    }
}

/// Forward and reversal exact match for a masked model and a causal baseline
/// trained on the same forward-only corpus.
///
/// The masked model answers a reversal probe by infilling `A` in
/// `[mask x |A|] > B <eos>`; the causal model can only be cued left to right and
/// is asked to continue `B >`.
pub fn bench_reversal(mdm: &TrainedModel, ar: &TrainedModel, data: &ReversalData, vocab: &Vocab) -> Result<BenchReport> {
    mdm.require_trained("masked")?;
    ar.require_trained("autoregressive")?;
    if mdm.model.is_causal() || !ar.model.is_causal() {
        return config("reversal bench needs a bidirectional and a causal model");
    }
    let mut report = BenchReport::new("reversal", json!({ "pairs": data.pairs.len() }), Vec::new());
    if data.pairs.is_empty() {
        return Ok(report);
    }
    let special = vocab.special();
    let n = data.pairs.len() as f64;
    let (mut mdm_fwd, mut mdm_rev, mut ar_fwd, mut ar_rev) = (0.0, 0.0, 0.0, 0.0);
    for (i, (probe_f, probe_r)) in data.forward.iter().zip(&data.reversal).enumerate() {
        let mut rng = substream(0, i as u64);
        let answer_len = probe_f.answer.chars().count() + 1;
        let cfg = SamplerConfig::diffusion(answer_len, answer_len);

        let prompt = vocab.encode(&probe_f.prompt)?;
        let out = generate(&mdm.model, &prompt, &cfg, &mut rng)?;
        mdm_fwd += (vocab.decode(&out.tokens) == probe_f.answer) as u8 as f64;

        let mut seq = vec![special.mask; probe_r.answer.chars().count()];
        seq.extend(vocab.encode(&format!("{PROMPT_SEPARATOR}{}", probe_r.prompt))?);
        seq.push(special.eos);
        let filled = infill(&mdm.model, &seq, &SamplerConfig::diffusion(probe_r.answer.chars().count(), probe_r.answer.chars().count()), &mut rng)?;
        mdm_rev += (vocab.decode(&filled.tokens) == probe_r.answer) as u8 as f64;

        let out = generate_autoregressive(&ar.model, &prompt, answer_len, &cfg, &mut rng)?;
        ar_fwd += (vocab.decode(&out.tokens) == probe_f.answer) as u8 as f64;

        let cue = vocab.encode(&format!("{}{PROMPT_SEPARATOR}", probe_r.prompt))?;
        let out = generate_autoregressive(&ar.model, &cue, answer_len, &cfg, &mut rng)?;
        ar_rev += (vocab.decode(&out.tokens) == probe_r.answer) as u8 as f64;
    }
    let (mf, mr, af, arv) = (mdm_fwd / n, mdm_rev / n, ar_fwd / n, ar_rev / n);
    report.push(BenchRow::new("mdm/forward", "exact_match", mf));
    report.push(BenchRow::new("mdm/reversal", "exact_match", mr));
    report.push(BenchRow::new("mdm", "abs_gap", (mf - mr).abs()));
    report.push(BenchRow::new("ar/forward", "exact_match", af));
    report.push(BenchRow::new("ar/reversal", "exact_match", arv));
    report.push(BenchRow::new("ar", "abs_gap", (af - arv).abs()));
    Ok(report)
}

/// A named set of evaluation items.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    pub kind: TaskKind,
    pub items: Vec<TextPair>,
}

fn per_seed<F: FnMut(u64) -> Result<f64>>(seeds: &[u64], mut f: F) -> Result<(f64, Option<f64>)> {
    let values = seeds.iter().map(|&s| f(s)).collect::<Result<Vec<_>>>()?;
    Ok(mean_stderr(&values))
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return config("at least one seed is required");
    }
    Ok(())
}

/// Random versus low-confidence remasking at identical length and steps.
pub fn bench_remasking(
    model: &Model<f32>,
    vocab: &Vocab,
    tasks: &[TaskSet],
    base: &SamplerConfig,
    seeds: &[u64],
) -> Result<BenchReport> {
    check_seeds(seeds)?;
    let cfg_echo = json!({ "gen_length": base.gen_length, "steps": base.steps });
    let mut report = BenchReport::new("remask", cfg_echo, seeds.to_vec());
    for task in tasks {
        for (label, strategy) in [("random", Strategy::Random), ("low_confidence", Strategy::LowConfidence)] {
            let cfg = SamplerConfig { strategy, mode: Mode::Diffusion, ..base.clone() };
            let (mean, se) = per_seed(seeds, |s| exact_match(model, vocab, &task.items, &cfg, s))?;
            report.push(BenchRow::new(format!("{}/{label}", task.kind.name()), "exact_match", mean).with_stderr(se));
        }
    }
    Ok(report)
}

/// Autoregressive, block, semi-autoregressive and pure diffusion sampling.
pub fn bench_sampling_modes(
    model: &Model<f32>,
    vocab: &Vocab,
    tasks: &[TaskSet],
    base: &SamplerConfig,
    block_lens: &[usize],
    seeds: &[u64],
) -> Result<BenchReport> {
    check_seeds(seeds)?;
    let l = base.gen_length;
    let mut modes = vec![("autoregressive".to_string(), Mode::Autoregressive)];
    for &b in block_lens {
        modes.push((format!("block_{b}"), Mode::Block { block_len: b }));
    }
    for &b in block_lens.iter().filter(|&&b| b < l && l % b == 0 && base.steps % (l / b) == 0) {
        modes.push((format!("semi_ar_{b}"), Mode::SemiAr { block_len: b }));
    }
    modes.push(("diffusion".to_string(), Mode::Diffusion));
    let echo = json!({ "gen_length": l, "steps": base.steps, "block_lens": block_lens });
    let mut report = BenchReport::new("modes", echo, seeds.to_vec());
    for task in tasks {
        for (label, mode) in &modes {
            let cfg = SamplerConfig { mode: *mode, ..base.clone() };
            let (mean, se) = per_seed(seeds, |s| exact_match(model, vocab, &task.items, &cfg, s))?;
            report.push(BenchRow::new(format!("{}/{label}", task.kind.name()), "exact_match", mean).with_stderr(se));
        }
    }
    Ok(report)
}

pub const CFG_GRID: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

/// Guidance sweep: the unguided baseline, every grid scale, and the best scale.
pub fn bench_cfg(
    model: &Model<f32>,
    vocab: &Vocab,
    tasks: &[TaskSet],
    base: &SamplerConfig,
    grid: &[f64],
    seeds: &[u64],
) -> Result<BenchReport> {
    check_seeds(seeds)?;
    let echo = json!({ "gen_length": base.gen_length, "steps": base.steps, "grid": grid });
    let mut report = BenchReport::new("cfg", echo, seeds.to_vec());
    for task in tasks {
        let mut best = (0.0, f64::NEG_INFINITY);
        for &w in std::iter::once(&0.0).chain(grid) {
            let cfg = SamplerConfig { cfg_scale: w, ..base.clone() };
            let (mean, se) = per_seed(seeds, |s| exact_match(model, vocab, &task.items, &cfg, s))?;
            report.push(BenchRow::new(format!("{}/w={w}", task.kind.name()), "exact_match", mean).with_stderr(se));
            if mean > best.1 {
                best = (w, mean);
            }
        }
        report.push(BenchRow::new(format!("{}/best", task.kind.name()), "best_w", best.0));
        report.push(BenchRow::new(format!("{}/best", task.kind.name()), "exact_match", best.1));
    }
    Ok(report)
}

/// Quality and tokens per second across step counts `L`, `L/2`, `L/4`, `L/8`.
pub fn bench_steps_throughput(
    model: &Model<f32>,
    vocab: &Vocab,
    task: &TaskSet,
    lengths: &[usize],
    base: &SamplerConfig,
    seed: u64,
) -> Result<BenchReport> {
    let echo = json!({ "lengths": lengths, "items": task.items.len() });
    let mut report = BenchReport::new("steps", echo, vec![seed]);
    for &l in lengths {
        for div in [1, 2, 4, 8] {
            if l % div != 0 {
                continue;
            }
            let n = l / div;
            let cfg = SamplerConfig { gen_length: l, steps: n, mode: Mode::Diffusion, ..base.clone() };
            let cond = format!("{}/L={l}/N={n}", task.kind.name());
            let mut hits = 0;
            let mut generated = 0usize;
            let mut passes = 0usize;
            let mut elapsed = 0.0;
            for (i, item) in task.items.iter().enumerate() {
                let prompt = vocab.encode(&item.prompt)?;
                let mut rng = substream(seed, i as u64);
                let start = Instant::now();
                let out = generate(model, &prompt, &cfg, &mut rng)?;
                elapsed += start.elapsed().as_secs_f64();
                generated += out.raw.len();
                passes += out.forward_passes;
                hits += (vocab.decode(&out.tokens) == item.response) as usize;
            }
            let items = task.items.len().max(1) as f64;
            report.push(BenchRow::new(&cond, "exact_match", hits as f64 / items));
            report.push(BenchRow::new(&cond, "tokens_per_step", generated as f64 / passes.max(1) as f64));
            report.push(BenchRow::new(&cond, "forward_passes", passes as f64 / items));
            report.timings.push(BenchRow::new(&cond, "tokens_per_sec", generated as f64 / elapsed.max(1e-12)));
            report.timings.push(BenchRow::new(&cond, "seconds", elapsed));
        }
    }
    Ok(report)
}

/// Metric per generation length with one token decoded per step.
pub fn bench_length_ablation(
    model: &Model<f32>,
    vocab: &Vocab,
    task: &TaskSet,
    lengths: &[usize],
    base: &SamplerConfig,
    seed: u64,
) -> Result<BenchReport> {
    if lengths.is_empty() {
        return config("at least one length is required");
    }
    let echo = json!({ "lengths": lengths, "items": task.items.len() });
    let mut report = BenchReport::new("length", echo, vec![seed]);
    let mut values = Vec::new();
    for &l in lengths {
        let cfg = SamplerConfig { gen_length: l, steps: l, mode: Mode::Diffusion, ..base.clone() };
        let em = exact_match(model, vocab, &task.items, &cfg, seed)?;
        report.push(BenchRow::new(format!("{}/L={l}/N={l}", task.kind.name()), "exact_match", em));
        values.push(em);
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = if max > 0.0 { (max - min) / max } else { 0.0 };
    report.push(BenchRow::new(task.kind.name(), "relative_spread", spread));
    Ok(report)
}

/// One entry of the scaling study.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingModel {
    pub label: String,
    pub config: ModelConfig,
}

/// Inputs shared by every model in the scaling study.
#[derive(Debug, Clone)]
pub struct ScalingSetup<'a> {
    pub vocab: &'a Vocab,
    pub corpus: &'a [Vec<u32>],
    pub sft_pairs: &'a [SftPair],
    pub pad_to: usize,
    pub eval: &'a TaskSet,
    pub probe: &'a [Vec<u32>],
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub sampler: SamplerConfig,
}

/// Trains every size in both paradigms on identical data and reports FLOPs,
/// probe negative log-likelihood and task exact match per model.
pub fn bench_scaling(models: &[ScalingModel], setup: &ScalingSetup) -> Result<BenchReport> {
    if models.len() < 2 {
        return config("the scaling study needs at least two sizes");
    }
    let echo = json!({
        "sizes": models.iter().map(|m| m.label.clone()).collect::<Vec<_>>(),
        "pretrain_iters": setup.pretrain.total_iters,
        "sft_iters": setup.finetune.total_iters,
    });
    let mut report = BenchReport::new("scaling", echo, vec![setup.pretrain.seed, setup.finetune.seed]);
    let tokens_per_iter = |corpus: &[Vec<u32>], batch: usize| {
        corpus.first().map_or(0, Vec::len) * batch
    };
    for (paradigm, attention, objective) in [
        ("Diffusion", crate::AttentionMode::Bidirectional, Objective::MaskedDiffusion),
        ("AR", crate::AttentionMode::Causal, Objective::Autoregressive),
    ] {
        for m in models {
            let config = m.config.clone().with_attention(attention);
            let model = Model::init(config, setup.pretrain.seed)?;
            let mut trainer = Trainer::new(model);
            let opts = TrainOptions { objective, log_every: 0, ..TrainOptions::default() };
            trainer.run(TrainData::Pretrain(setup.corpus), &setup.pretrain, &opts)?;
            let mut tuner = Trainer::new(trainer.model);
            tuner.run(TrainData::Sft { pairs: setup.sft_pairs, pad_to: setup.pad_to }, &setup.finetune, &opts)?;
            let model = tuner.model;
            let n = model.params.count_nonembedding() as f64;
            let d = (tokens_per_iter(setup.corpus, setup.pretrain.batch_size) * setup.pretrain.total_iters) as f64;
            let probe = probe_value(&model, setup.probe)?;
            let sampler = if model.is_causal() {
                SamplerConfig { mode: Mode::Autoregressive, ..setup.sampler.clone() }
            } else {
                setup.sampler.clone()
            };
            let em = exact_match(&model, setup.vocab, &setup.eval.items, &sampler, setup.pretrain.seed)?;
            let cond = format!("{paradigm}/{}", m.label);
            report.push(BenchRow::new(&cond, "nonembedding_params", n));
            report.push(BenchRow::new(&cond, "train_tokens", d));
            report.push(BenchRow::new(&cond, "flops", flops(n, d)));
            report.push(BenchRow::new(&cond, "probe_nll", probe));
            report.push(BenchRow::new(&cond, "exact_match", em));
        }
    }
    Ok(report)
}

/// Documents (`prompt` followed by `response`) for pre-training on a task.
pub fn task_documents(pairs: &[TextPair]) -> Vec<String> {
    pairs.iter().map(|p| format!("{}{}", p.prompt, p.response)).collect()
}

/// The reversal corpus encoded one EOS-terminated document per pair.
pub fn reversal_training_set(data: &ReversalData, vocab: &Vocab) -> Result<Vec<Vec<u32>>> {
    encode_documents(&data.corpus, vocab)
}
