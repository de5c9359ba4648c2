//! `maskdiff`: data generation, training, sampling, evaluation and benchmarks.

mod commands;
mod settings;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "maskdiff", version, about = "Masked diffusion language modeling at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key = value` file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory (or model file) to start from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Model shape overrides for freshly initialised models.
#[derive(Args, Debug, Clone)]
pub struct ModelFlags {
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
}

/// Optimisation settings.
#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    /// Total training iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate of the warmup-stable-decay schedule.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

/// Sampler settings.
#[derive(Args, Debug, Clone)]
pub struct SampleFlags {
    /// diffusion, block, semi_ar or ar.
    #[arg(long)]
    pub mode: Option<String>,
    /// random, random_count or low_confidence.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Generation length.
    #[arg(long)]
    pub len: Option<usize>,
    /// Block length for block and semi_ar modes.
    #[arg(long)]
    pub block: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub eos_zeroing: Option<bool>,
    /// Zero means greedy prediction.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_blocks: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked-diffusion (or autoregressive) pre-training on a text corpus.
    Train {
        #[command(flatten)]
        common: Common,
        /// UTF-8 text, one document per line.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Window length when packing documents.
        #[arg(long)]
        seq_len: Option<usize>,
        /// Train on each line as its own EOS-terminated sequence instead of packing.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        per_line: Option<bool>,
        /// diffusion or ar.
        #[arg(long)]
        objective: Option<String>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Fine-tuning on prompt/response records.
    Sft {
        #[command(flatten)]
        common: Common,
        /// Newline-delimited JSON with prompt/response or turns.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Pad responses with EOS to at least this length.
        #[arg(long)]
        pad_to: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Generates a continuation of a prompt.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: Option<String>,
        /// Write the decoding trace (one line per generated position) here.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        sampler: SampleFlags,
    },
    /// Likelihood-based multiple choice.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Newline-delimited JSON items with prompt, candidates and answer.
        #[arg(long)]
        items: Option<PathBuf>,
        /// Monte Carlo draws per candidate.
        #[arg(long)]
        nmc: Option<usize>,
    },
    /// Benchmark harnesses.
    Bench {
        #[command(subcommand)]
        which: BenchCommand,
    },
    /// Writes synthetic corpora: copy, sort, arithmetic or reversal.
    GenData {
        kind: String,
        #[command(flatten)]
        common: Common,
        /// Number of training examples (or pairs, for reversal).
        #[arg(long)]
        n: Option<usize>,
        /// Held-out test items for the task kinds.
        #[arg(long)]
        holdout: Option<usize>,
    },
}

/// Evaluation items and seeds shared by the sampling benchmarks.
#[derive(Args, Debug, Clone)]
pub struct BenchFlags {
    #[command(flatten)]
    pub common: Common,
    /// copy, sort or arithmetic.
    #[arg(long)]
    pub task: Option<String>,
    /// Prompt/response records to score; generated from --seed when absent.
    #[arg(long)]
    pub items: Option<PathBuf>,
    #[arg(long)]
    pub n_items: Option<usize>,
    /// Comma-separated sampling seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    #[command(flatten)]
    pub sampler: SampleFlags,
}

#[derive(Subcommand, Debug)]
pub enum BenchCommand {
    /// Forward versus reversed recall for a masked model and a causal baseline.
    Reversal {
        #[command(flatten)]
        common: Common,
        /// Checkpoint of the masked model.
        #[arg(long)]
        mdm: Option<PathBuf>,
        /// Checkpoint of the causal baseline.
        #[arg(long)]
        ar: Option<PathBuf>,
        /// The pair corpus both were trained on.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Random versus low-confidence remasking.
    Remask {
        #[command(flatten)]
        flags: BenchFlags,
    },
    /// Autoregressive, block, semi-autoregressive and diffusion sampling.
    Modes {
        #[command(flatten)]
        flags: BenchFlags,
        #[arg(long)]
        block_lens: Option<String>,
    },
    /// Classifier-free guidance sweep.
    Cfg {
        #[command(flatten)]
        flags: BenchFlags,
        /// Comma-separated guidance scales.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Quality and tokens/sec at N = L, L/2, L/4, L/8.
    Steps {
        #[command(flatten)]
        flags: BenchFlags,
        #[arg(long)]
        lengths: Option<String>,
    },
    /// Diffusion versus autoregressive models at two or more sizes.
    Scaling {
        #[command(flatten)]
        flags: BenchFlags,
        /// Pre-training iterations per model.
        #[arg(long)]
        iters: Option<usize>,
        /// Fine-tuning iterations per model.
        #[arg(long)]
        sft_iters: Option<usize>,
    },
    /// Exact match across generation lengths with one token per step.
    Length {
        #[command(flatten)]
        flags: BenchFlags,
        #[arg(long)]
        lengths: Option<String>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { common, corpus, seq_len, per_line, objective, model, train } => {
            commands::train(&common, corpus, seq_len, per_line, objective, &model, &train)
        }
        Command::Sft { common, pairs, pad_to, train } => commands::sft(&common, pairs, pad_to, &train),
        Command::Sample { common, prompt, trace, sampler } => commands::sample(&common, prompt, trace, &sampler),
        Command::Eval { common, items, nmc } => commands::eval(&common, items, nmc),
        Command::Bench { which } => commands::bench(which),
        Command::GenData { kind, common, n, holdout } => commands::gen_data(&kind, &common, n, holdout),
    }
}
