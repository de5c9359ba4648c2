use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use maskdiff::bench::*;
use maskdiff::checkpoint::{load_checkpoint, CheckpointRecord};
use maskdiff::data::*;
use maskdiff::likelihood::{evaluate_items, parse_eval_items, EvalItem, DEFAULT_N_MC, EVAL_HEADER};
use maskdiff::recipes::task_splits;
use maskdiff::rng::{seeded, substream};
use maskdiff::sampler::{generate, Mode, SamplerConfig, Strategy};
use maskdiff::train::{Objective, TrainConfig, TrainData, TrainOptions, Trainer, MODEL_FILE};
use maskdiff::{AttentionMode, MaskPredictor, Model, ModelConfig};

use crate::settings::{flag, Settings};
use crate::{BenchCommand, BenchFlags, Common, ModelFlags, SampleFlags, TrainFlags};

type Flags<'a> = Vec<(&'a str, Option<String>)>;

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn settings(common: &Common, extra: Flags) -> Result<Settings> {
    let mut flags = vec![
        ("seed", flag(&common.seed)),
        ("out", path_flag(&common.out)),
        ("checkpoint", path_flag(&common.checkpoint)),
    ];
    flags.extend(extra);
    Settings::load(common.config.as_deref(), flags)
}

fn model_flags(m: &ModelFlags) -> Flags<'static> {
    vec![
        ("n_layers", flag(&m.n_layers)),
        ("d_model", flag(&m.d_model)),
        ("n_heads", flag(&m.n_heads)),
        ("ffn_dim", flag(&m.ffn_dim)),
        ("max_seq_len", flag(&m.max_seq_len)),
    ]
}

fn train_flags(t: &TrainFlags) -> Flags<'static> {
    vec![
        ("iters", flag(&t.iters)),
        ("batch_size", flag(&t.batch_size)),
        ("lr", flag(&t.lr)),
        ("warmup", flag(&t.warmup)),
        ("weight_decay", flag(&t.weight_decay)),
        ("log_every", flag(&t.log_every)),
        ("checkpoint_every", flag(&t.checkpoint_every)),
    ]
}

fn sample_flags(s: &SampleFlags) -> Flags<'static> {
    vec![
        ("mode", s.mode.clone()),
        ("strategy", s.strategy.clone()),
        ("steps", flag(&s.steps)),
        ("len", flag(&s.len)),
        ("block", flag(&s.block)),
        ("cfg_scale", flag(&s.cfg_scale)),
        ("eos_zeroing", flag(&s.eos_zeroing)),
        ("temperature", flag(&s.temperature)),
        ("max_blocks", flag(&s.max_blocks)),
    ]
}

fn model_config(s: &Settings, vocab: &Vocab, attention: AttentionMode) -> Result<ModelConfig> {
    let base = ModelConfig::desk(vocab.size(), vocab.special());
    let cfg = ModelConfig {
        n_layers: s.get("n_layers", base.n_layers)?,
        d_model: s.get("d_model", base.d_model)?,
        n_heads: s.get("n_heads", base.n_heads)?,
        ffn_dim: s.get("ffn_dim", base.ffn_dim)?,
        max_seq_len: s.get("max_seq_len", base.max_seq_len)?,
        init_std: s.get("init_std", base.init_std)?,
        ..base
    }
    .with_attention(attention);
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(s: &Settings, default_iters: usize, seed: u64) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::desk(s.get("iters", default_iters)?, seed);
    if let Some(lr) = s.opt::<f64>("lr")? {
        cfg = cfg.with_peak_lr(lr);
    }
    if let Some(w) = s.opt::<usize>("warmup")? {
        cfg.warmup_iters = w;
    }
    cfg.batch_size = s.get("batch_size", cfg.batch_size)?;
    cfg.weight_decay = s.get("weight_decay", cfg.weight_decay)?;
    cfg.random_length_fraction = s.get("random_length", cfg.random_length_fraction)?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_mode(s: &Settings, default: &str) -> Result<Mode> {
    let name = s.get("mode", default.to_string())?;
    let block = s.opt::<usize>("block")?;
    let mode = match name.as_str() {
        "diffusion" => Mode::Diffusion,
        "ar" | "autoregressive" => Mode::Autoregressive,
        "block" => Mode::Block { block_len: block.context("--mode block needs --block")? },
        "semi_ar" => Mode::SemiAr { block_len: block.context("--mode semi_ar needs --block")? },
        other => bail!("unknown mode {other:?}; expected diffusion, block, semi_ar or ar"),
    };
    if block.is_some() && matches!(mode, Mode::Diffusion | Mode::Autoregressive) {
        bail!("--block only applies to the block and semi_ar modes");
    }
    Ok(mode)
}

fn sampler_config(s: &Settings, default_len: usize, default_mode: &str) -> Result<SamplerConfig> {
    let len = s.get("len", default_len)?;
    let mut cfg = SamplerConfig::diffusion(len, s.get("steps", len)?);
    cfg.mode = parse_mode(s, default_mode)?;
    cfg.strategy = s.get("strategy", Strategy::LowConfidence)?;
    cfg.cfg_scale = s.get("cfg_scale", 0.0)?;
    cfg.eos_zeroing = s.get("eos_zeroing", false)?;
    cfg.temperature = s.get("temperature", 0.0)?;
    cfg.max_blocks = s.get("max_blocks", cfg.max_blocks)?;
    cfg.validate()?;
    if let Mode::SemiAr { block_len } = cfg.mode {
        if block_len == 0 || len % block_len != 0 {
            bail!("semi_ar block length {block_len} does not divide generation length {len}");
        }
    }
    Ok(cfg)
}

/// A checkpoint directory or model file, its record, model and vocabulary.
fn load_model(path: &Path) -> Result<(CheckpointRecord, Model<f32>, Vocab)> {
    let file = if path.is_dir() { path.join(MODEL_FILE) } else { path.to_path_buf() };
    let (record, model) = load_checkpoint(&file).with_context(|| format!("loading {}", file.display()))?;
    let vocab = record
        .vocab
        .as_deref()
        .map(Vocab::from_stored)
        .transpose()?
        .with_context(|| format!("{} carries no vocabulary", file.display()))?;
    Ok((record, model, vocab))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn check_lengths<'a>(lens: impl IntoIterator<Item = usize>, max: usize, what: &str) -> Result<()> {
    if let Some(l) = lens.into_iter().find(|&l| l > max) {
        bail!("a {what} of {l} tokens exceeds the model's maximum sequence length {max}");
    }
    Ok(())
}

fn stopped(out: &Path) -> impl Fn(maskdiff::Error) -> anyhow::Error + '_ {
    move |e| match e {
        maskdiff::Error::NonFinite { .. } => {
            anyhow::anyhow!("training stopped: {e}; the last checkpoint is kept in {}", out.display())
        }
        other => other.into(),
    }
}

pub fn train(
    common: &Common,
    corpus: Option<PathBuf>,
    seq_len: Option<usize>,
    per_line: Option<bool>,
    objective: Option<String>,
    model: &ModelFlags,
    train: &TrainFlags,
) -> Result<()> {
    let mut flags = vec![
        ("corpus", path_flag(&corpus)),
        ("seq_len", flag(&seq_len)),
        ("per_line", flag(&per_line)),
        ("objective", objective),
    ];
    flags.extend(model_flags(model));
    flags.extend(train_flags(train));
    let s = settings(common, flags)?;

    let corpus_path = s.existing_path("corpus")?;
    let out: PathBuf = s.get("out", PathBuf::from("out"))?;
    let seed = s.get("seed", 0u64)?;
    let objective = match s.get("objective", "diffusion".to_string())?.as_str() {
        "diffusion" => Objective::MaskedDiffusion,
        "ar" | "autoregressive" => Objective::Autoregressive,
        other => bail!("unknown objective {other:?}; expected diffusion or ar"),
    };
    let attention = match objective {
        Objective::MaskedDiffusion => AttentionMode::Bidirectional,
        Objective::Autoregressive => AttentionMode::Causal,
    };
    let cfg = train_config(&s, 1000, seed)?;
    let text = read(&corpus_path)?;
    let docs: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if docs.is_empty() {
        bail!("corpus {} has no documents", corpus_path.display());
    }

    let (mut trainer, vocab) = match s.opt::<PathBuf>("checkpoint")? {
        Some(ckpt) => {
            let dir = if ckpt.is_dir() { ckpt } else { ckpt.parent().map(Path::to_path_buf).unwrap_or_default() };
            let (trainer, vocab) = Trainer::load(&dir).with_context(|| format!("resuming from {}", dir.display()))?;
            let vocab = vocab.context("checkpoint carries no vocabulary")?;
            if trainer.model.config.attention != attention {
                bail!("checkpoint attention does not match the {objective:?} objective");
            }
            (trainer, vocab)
        }
        None => {
            let vocab = Vocab::from_texts(docs.iter().copied());
            let model = Model::init(model_config(&s, &vocab, attention)?, seed)?;
            (Trainer::new(model), vocab)
        }
    };
    let max_len = trainer.model.config.max_seq_len;
    let data = if s.get("per_line", false)? {
        encode_documents(&docs, &vocab)?
    } else {
        pack_pretrain(&docs, &vocab, s.get("seq_len", 64.min(max_len))?)?
    };
    check_lengths(data.iter().map(Vec::len), max_len, "training sequence")?;

    let opts = TrainOptions {
        objective,
        log_every: s.get("log_every", 100)?,
        probe: Vec::new(),
        checkpoint_dir: Some(out.clone()),
        checkpoint_every: s.get("checkpoint_every", 0)?,
        vocab: Some(vocab),
    };
    let log = trainer.run(TrainData::Pretrain(&data), &cfg, &opts).map_err(stopped(&out))?;
    print!("{}", log.to_tsv(true));
    eprintln!("trained to iteration {}; checkpoint in {}", trainer.iteration, out.display());
    Ok(())
}

pub fn sft(common: &Common, pairs: Option<PathBuf>, pad_to: Option<usize>, train: &TrainFlags) -> Result<()> {
    let mut flags = vec![("pairs", path_flag(&pairs)), ("pad_to", flag(&pad_to))];
    flags.extend(train_flags(train));
    let s = settings(common, flags)?;

    let ckpt = s.existing_path("checkpoint")?;
    let pairs_path = s.existing_path("pairs")?;
    let out: PathBuf = s.get("out", PathBuf::from("out"))?;
    let seed = s.get("seed", 0u64)?;
    let cfg = train_config(&s, 1000, seed)?;
    let pad_to = s.get("pad_to", 0usize)?;
    let (_, model, vocab) = load_model(&ckpt)?;
    let records = parse_sft_records(&read(&pairs_path)?)?;
    if records.is_empty() {
        bail!("{} has no records", pairs_path.display());
    }
    let encoded = records
        .iter()
        .map(|p| p.encode(&vocab))
        .collect::<maskdiff::Result<Vec<SftPair>>>()
        .context("records use characters outside the checkpoint vocabulary")?;
    check_lengths(
        encoded.iter().map(|p| p.prompt.len() + p.response.len().max(pad_to)),
        model.config.max_seq_len,
        "prompt and response",
    )?;
    let objective = if model.is_causal() { Objective::Autoregressive } else { Objective::MaskedDiffusion };
    let opts = TrainOptions {
        objective,
        log_every: s.get("log_every", 100)?,
        probe: Vec::new(),
        checkpoint_dir: Some(out.clone()),
        checkpoint_every: s.get("checkpoint_every", 0)?,
        vocab: Some(vocab),
    };
    let mut trainer = Trainer::new(model);
    let log = trainer.run(TrainData::Sft { pairs: &encoded, pad_to }, &cfg, &opts).map_err(stopped(&out))?;
    print!("{}", log.to_tsv(true));
    eprintln!("fine-tuned for {} iterations; checkpoint in {}", trainer.iteration, out.display());
    Ok(())
}

pub fn sample(common: &Common, prompt: Option<String>, trace: Option<PathBuf>, sampler: &SampleFlags) -> Result<()> {
    let mut flags = vec![("prompt", prompt), ("trace", path_flag(&trace))];
    flags.extend(sample_flags(sampler));
    let s = settings(common, flags)?;

    let ckpt = s.existing_path("checkpoint")?;
    let (_, model, vocab) = load_model(&ckpt)?;
    let default_mode = if model.is_causal() { "ar" } else { "diffusion" };
    let cfg = sampler_config(&s, 32, default_mode)?;
    let prompt = vocab.encode(&s.get("prompt", String::new())?)?;
    let out = generate(&model, &prompt, &cfg, &mut seeded(s.get("seed", 0u64)?))?;
    if let Some(path) = s.opt::<PathBuf>("trace")? {
        let body = out.trace.to_tsv(|t| vocab.token_text(t));
        fs::write(&path, format!("step\tposition\ttoken_id\ttoken\n{body}"))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{}", vocab.decode(&out.tokens));
    eprintln!("{} tokens generated in {} forward passes", out.raw.len(), out.forward_passes);
    Ok(())
}

pub fn eval(common: &Common, items: Option<PathBuf>, nmc: Option<usize>) -> Result<()> {
    let s = settings(common, vec![("items", path_flag(&items)), ("nmc", flag(&nmc))])?;
    let nmc = s.get("nmc", DEFAULT_N_MC)?;
    if nmc == 0 {
        bail!("--nmc must be at least 1");
    }
    let ckpt = s.existing_path("checkpoint")?;
    let items_path = s.existing_path("items")?;
    let items = parse_eval_items(&read(&items_path)?)?;
    let (_, model, vocab) = load_model(&ckpt)?;
    let rows = evaluate_items(&model, &vocab, &items, nmc, s.get("seed", 0u64)?)?;
    let mut tsv = format!("{EVAL_HEADER}\n");
    for r in &rows {
        tsv.push_str(&r.to_tsv());
        tsv.push('\n');
    }
    if let Some(out) = s.opt::<PathBuf>("out")? {
        fs::create_dir_all(&out)?;
        fs::write(out.join("eval.tsv"), &tsv)?;
    }
    print!("{tsv}");
    let correct = rows.iter().filter(|r| r.correct).count();
    eprintln!("accuracy {correct}/{}", rows.len());
    Ok(())
}

fn write_report(s: &Settings, name: &str, report: &BenchReport) -> Result<()> {
    let out: PathBuf = s.get("out", PathBuf::from("bench"))?;
    fs::create_dir_all(&out)?;
    fs::write(out.join(format!("{name}.tsv")), report.to_tsv())?;
    fs::write(out.join(format!("{name}.jsonl")), report.to_jsonl())?;
    print!("{}", report.to_tsv());
    if !report.timings.is_empty() {
        fs::write(out.join(format!("{name}.timings.tsv")), report.timings_tsv())?;
        print!("{}", report.timings_tsv());
    }
    eprintln!("wrote {}", out.join(format!("{name}.tsv")).display());
    Ok(())
}

/// Model, vocabulary, task items and seeds for the sampling benchmarks.
struct BenchInputs {
    settings: Settings,
    model: Model<f32>,
    vocab: Vocab,
    task: TaskSet,
    seeds: Vec<u64>,
}

fn bench_settings(flags: &BenchFlags, extra: Flags) -> Result<Settings> {
    let mut all = vec![
        ("task", flags.task.clone()),
        ("items", path_flag(&flags.items)),
        ("n_items", flag(&flags.n_items)),
        ("seeds", flags.seeds.clone()),
    ];
    all.extend(sample_flags(&flags.sampler));
    all.extend(extra);
    settings(&flags.common, all)
}

fn task_items(s: &Settings, kind: TaskKind) -> Result<Vec<TextPair>> {
    match s.opt::<PathBuf>("items")? {
        Some(path) => {
            if !path.exists() {
                bail!("items file does not exist: {}", path.display());
            }
            Ok(parse_sft_records(&read(&path)?)?)
        }
        None => {
            let seed = s.get("seed", 0u64)?;
            Ok(gen_task_corpora(kind, s.get("n_items", 100)?, &mut substream(seed, u64::MAX)))
        }
    }
}

fn bench_inputs(flags: &BenchFlags, extra: Flags) -> Result<BenchInputs> {
    let settings = bench_settings(flags, extra)?;
    let kind: TaskKind = settings.get("task", TaskKind::Copy)?;
    let seeds = settings.list("seeds", &[settings.get("seed", 0u64)?])?;
    let items = task_items(&settings, kind)?;
    let ckpt = settings.existing_path("checkpoint")?;
    let (_, model, vocab) = load_model(&ckpt)?;
    Ok(BenchInputs { settings, model, vocab, task: TaskSet { kind, items }, seeds })
}

fn default_len(kind: TaskKind) -> usize {
    kind.max_response_len() + 4
}

pub fn bench(which: BenchCommand) -> Result<()> {
    match which {
        BenchCommand::Reversal { common, mdm, ar, data } => {
            let s = settings(&common, vec![("mdm", path_flag(&mdm)), ("ar", path_flag(&ar)), ("data", path_flag(&data))])?;
            let mdm_path = s.existing_path("mdm").context("bench reversal needs --mdm and --ar checkpoints")?;
            let ar_path = s.existing_path("ar").context("bench reversal needs --mdm and --ar checkpoints")?;
            let data = ReversalData::parse_corpus(&read(&s.existing_path("data")?)?)?;
            let (mdm_record, mdm_model, vocab) = load_model(&mdm_path)?;
            let (ar_record, ar_model, _) = load_model(&ar_path)?;
            let report = bench_reversal(
                &TrainedModel { record: mdm_record, model: mdm_model },
                &TrainedModel { record: ar_record, model: ar_model },
                &data,
                &vocab,
            )?;
            write_report(&s, "reversal", &report)
        }
        BenchCommand::Remask { flags } => {
            let b = bench_inputs(&flags, vec![])?;
            let base = sampler_config(&b.settings, default_len(b.task.kind), "diffusion")?;
            let report = bench_remasking(&b.model, &b.vocab, &[b.task], &base, &b.seeds)?;
            write_report(&b.settings, "remask", &report)
        }
        BenchCommand::Modes { flags, block_lens } => {
            let b = bench_inputs(&flags, vec![("block_lens", block_lens)])?;
            let base = sampler_config(&b.settings, default_len(b.task.kind), "diffusion")?;
            let blocks = b.settings.list("block_lens", &[2usize, 4])?;
            let report = bench_sampling_modes(&b.model, &b.vocab, &[b.task], &base, &blocks, &b.seeds)?;
            write_report(&b.settings, "modes", &report)
        }
        BenchCommand::Cfg { flags, grid } => {
            let b = bench_inputs(&flags, vec![("grid", grid)])?;
            let base = sampler_config(&b.settings, default_len(b.task.kind), "diffusion")?;
            let grid = b.settings.list("grid", &CFG_GRID)?;
            let report = bench_cfg(&b.model, &b.vocab, &[b.task], &base, &grid, &b.seeds)?;
            write_report(&b.settings, "cfg", &report)
        }
        BenchCommand::Steps { flags, lengths } => {
            let b = bench_inputs(&flags, vec![("lengths", lengths)])?;
            let lengths = b.settings.list("lengths", &[128usize])?;
            let longest_prompt = b.task.items.iter().map(|i| i.prompt.chars().count()).max().unwrap_or(0);
            check_lengths(lengths.iter().map(|l| l + longest_prompt), b.model.config.max_seq_len, "prompt and generation")?;
            let base = sampler_config(&b.settings, default_len(b.task.kind), "diffusion")?;
            let report = bench_steps_throughput(&b.model, &b.vocab, &b.task, &lengths, &base, b.seeds[0])?;
            write_report(&b.settings, "steps", &report)
        }
        BenchCommand::Length { flags, lengths } => {
            let b = bench_inputs(&flags, vec![("lengths", lengths)])?;
            let lengths = b.settings.list("lengths", &[48usize, 96, 192])?;
            let longest_prompt = b.task.items.iter().map(|i| i.prompt.chars().count()).max().unwrap_or(0);
            check_lengths(lengths.iter().map(|l| l + longest_prompt), b.model.config.max_seq_len, "prompt and generation")?;
            let base = sampler_config(&b.settings, default_len(b.task.kind), "diffusion")?;
            let report = bench_length_ablation(&b.model, &b.vocab, &b.task, &lengths, &base, b.seeds[0])?;
            write_report(&b.settings, "length", &report)
        }
        BenchCommand::Scaling { flags, iters, sft_iters } => scaling(&flags, iters, sft_iters),
    }
}

fn scaling(flags: &BenchFlags, iters: Option<usize>, sft_iters: Option<usize>) -> Result<()> {
    let s = bench_settings(flags, vec![("iters", flag(&iters)), ("sft_iters", flag(&sft_iters))])?;
    let kind: TaskKind = s.get("task", TaskKind::Copy)?;
    let seed = s.get("seed", 0u64)?;
    let vocab = kind.vocab();
    let splits = task_splits(kind, 2000, 2000, s.get("n_items", 100)?, seed);
    let eval = TaskSet { kind, items: task_items(&s, kind).map(|items| if s.raw("items").is_some() { items } else { splits.heldout.clone() })? };
    let corpus = pack_pretrain(&task_documents(&splits.pretrain), &vocab, 32)?;
    let pairs = splits.sft.iter().map(|p| p.encode(&vocab)).collect::<maskdiff::Result<Vec<_>>>()?;
    let probe = eval
        .items
        .iter()
        .take(4)
        .map(|i| vocab.encode(&format!("{}{}", i.prompt, i.response)).map(|mut t| {
            t.truncate(6);
            t
        }))
        .collect::<maskdiff::Result<Vec<_>>>()?;
    let desk = ModelConfig::desk(vocab.size(), vocab.special());
    let models: Vec<ScalingModel> = [(1, 32, 2, 86), (2, 64, 4, 172)]
        .into_iter()
        .map(|(n_layers, d_model, n_heads, ffn_dim)| ScalingModel {
            label: format!("{n_layers}x{d_model}"),
            config: ModelConfig { n_layers, d_model, n_heads, ffn_dim, ..desk.clone() },
        })
        .collect();
    let pad_to = default_len(kind);
    let setup = ScalingSetup {
        vocab: &vocab,
        corpus: &corpus,
        sft_pairs: &pairs,
        pad_to,
        eval: &eval,
        probe: &probe,
        pretrain: TrainConfig::desk(s.get("iters", 200)?, seed),
        finetune: TrainConfig::desk(s.get("sft_iters", 200)?, seed + 1),
        sampler: sampler_config(&s, pad_to, "diffusion")?,
    };
    let report = bench_scaling(&models, &setup)?;
    write_report(&s, "scaling", &report)
}

fn write_lines<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Multiple-choice items whose distractors are other items' answers.
fn choice_items(kind: TaskKind, heldout: &[TextPair]) -> Vec<EvalItem> {
    heldout
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let mut candidates = vec![item.response.clone()];
            for k in 1..heldout.len() {
                let other = &heldout[(i + k) % heldout.len()].response;
                if candidates.len() == 4 {
                    break;
                }
                if !candidates.contains(other) {
                    candidates.push(other.clone());
                }
            }
            let answer = i % candidates.len();
            candidates.swap(0, answer);
            EvalItem { task: kind.name().to_string(), id: Some(i.to_string()), prompt: item.prompt.clone(), candidates, answer }
        })
        .filter(|item| item.candidates.len() >= 2)
        .collect()
}

pub fn gen_data(kind: &str, common: &Common, n: Option<usize>, holdout: Option<usize>) -> Result<()> {
    let s = settings(common, vec![("n", flag(&n)), ("holdout", flag(&holdout))])?;
    let out: PathBuf = s.get("out", PathBuf::from("."))?;
    let seed = s.get("seed", 0u64)?;
    let written = if kind == "reversal" {
        let data = gen_reversal_pairs(s.get("n", 100)?, &mut seeded(seed));
        fs::create_dir_all(&out)?;
        let path = out.join("reversal.txt");
        fs::write(&path, data.corpus.join("\n") + "\n")?;
        vec![path]
    } else {
        let task: TaskKind = kind.parse().map_err(|e| anyhow::anyhow!("{e}; expected copy, sort, arithmetic or reversal"))?;
        let n = s.get("n", 4000)?;
        let splits = task_splits(task, n, n, s.get("holdout", 100)?, seed);
        fs::create_dir_all(&out)?;
        let corpus = out.join(format!("{kind}.corpus.txt"));
        fs::write(&corpus, task_documents(&splits.pretrain).join("\n") + "\n")?;
        let sft = out.join(format!("{kind}.sft.jsonl"));
        write_lines(&sft, &splits.sft)?;
        let test = out.join(format!("{kind}.test.jsonl"));
        write_lines(&test, &splits.heldout)?;
        let choice = out.join(format!("{kind}.eval.jsonl"));
        write_lines(&choice, &choice_items(task, &splits.heldout))?;
        vec![corpus, sft, test, choice]
    };
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
