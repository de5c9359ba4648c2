//! End-to-end training pipelines on the synthetic tasks.

use std::collections::HashSet;

use crate::bench::{task_documents, TrainedModel};
use crate::checkpoint::{checkpoint_bytes, CheckpointRecord};
use crate::data::{
    encode_documents, gen_reversal_pairs, gen_task_corpora, pack_pretrain, ReversalData, SftPair, TaskKind, TextPair, Vocab,
};
use crate::error::Result;
use crate::model::{AttentionMode, Model, ModelConfig};
use crate::rng::seeded;
use crate::sampler::SamplerConfig;
use crate::train::{pretrain, sft, Objective, TrainConfig, TrainLog, TrainOptions};

/// Pre-training on packed task documents followed by fine-tuning on pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecipe {
    pub kind: TaskKind,
    pub model: ModelConfig,
    pub pretrain_examples: usize,
    pub sft_examples: usize,
    /// Evaluation prompts that never occur in either training set.
    pub heldout: usize,
    pub seq_len: usize,
    pub pretrain_iters: usize,
    pub sft_iters: usize,
    /// Peak learning rate of the fine-tuning schedule.
    pub sft_peak_lr: f64,
    /// Responses are EOS-padded to this length, which is also the evaluation length.
    pub pad_to: usize,
}

impl TaskRecipe {
    /// The desk model on `kind` with the default data sizes.
    pub fn desk(kind: TaskKind, pretrain_iters: usize, sft_iters: usize) -> Self {
        let vocab = kind.vocab();
        TaskRecipe {
            kind,
            model: ModelConfig::desk(vocab.size(), vocab.special()),
            pretrain_examples: 4000,
            sft_examples: 4000,
            heldout: 100,
            seq_len: 32,
            pretrain_iters,
            sft_iters,
            sft_peak_lr: 5e-4,
            pad_to: kind.max_response_len() + 4,
        }
    }

    /// Greedy low-confidence diffusion with one step per generated token.
    pub fn eval_sampler(&self) -> SamplerConfig {
        SamplerConfig::diffusion(self.pad_to, self.pad_to)
    }
}

#[derive(Debug, Clone)]
pub struct TaskRun {
    pub vocab: Vocab,
    pub model: Model<f32>,
    pub record: CheckpointRecord,
    pub heldout: Vec<TextPair>,
    pub pretrain_log: TrainLog,
    pub sft_log: TrainLog,
}

impl TaskRun {
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        checkpoint_bytes(&self.record, &self.model.params)
    }

    pub fn trained(&self) -> TrainedModel {
        TrainedModel { record: self.record.clone(), model: self.model.clone() }
    }
}

/// Pre-training examples, fine-tuning examples and held-out items of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplits {
    pub pretrain: Vec<TextPair>,
    pub sft: Vec<TextPair>,
    /// Distinct prompts that occur in neither training set.
    pub heldout: Vec<TextPair>,
}

/// Draws all three splits from one seeded stream.
pub fn task_splits(kind: TaskKind, n_pretrain: usize, n_sft: usize, n_heldout: usize, seed: u64) -> TaskSplits {
    let mut rng = seeded(seed);
    let pretrain = gen_task_corpora(kind, n_pretrain, &mut rng);
    let sft = gen_task_corpora(kind, n_sft, &mut rng);
    let seen: HashSet<&str> = pretrain.iter().chain(&sft).map(|p| p.prompt.as_str()).collect();
    let mut heldout = Vec::with_capacity(n_heldout);
    let mut fresh_prompts = HashSet::new();
    while heldout.len() < n_heldout {
        let item = gen_task_corpora(kind, 1, &mut rng).remove(0);
        if !seen.contains(item.prompt.as_str()) && fresh_prompts.insert(item.prompt.clone()) {
            heldout.push(item);
        }
    }
    TaskSplits { pretrain, sft, heldout }
}

/// Generates the data, trains the model and returns it with its held-out items.
///
/// Initialisation and pre-training use `seed`, fine-tuning uses `seed + 1`.
pub fn train_task(recipe: &TaskRecipe, seed: u64) -> Result<TaskRun> {
    let vocab = recipe.kind.vocab();
    let TaskSplits { pretrain: pre, sft: tune, heldout } =
        task_splits(recipe.kind, recipe.pretrain_examples, recipe.sft_examples, recipe.heldout, seed);
    let corpus = pack_pretrain(&task_documents(&pre), &vocab, recipe.seq_len)?;
    let pairs = tune.iter().map(|p| p.encode(&vocab)).collect::<Result<Vec<SftPair>>>()?;
    let model = Model::init(recipe.model.clone(), seed)?;
    let opts = TrainOptions::default();
    let (model, pretrain_log) = pretrain(model, &corpus, &TrainConfig::desk(recipe.pretrain_iters, seed), &opts)?;
    let (model, sft_log) = sft(model, &pairs, recipe.pad_to, &TrainConfig::desk(recipe.sft_iters, seed + 1).with_peak_lr(recipe.sft_peak_lr), &opts)?;
    let record = CheckpointRecord {
        model: model.config.clone(),
        vocab: Some(vocab.stored()),
        iteration: (recipe.pretrain_iters + recipe.sft_iters) as u64,
    };
    Ok(TaskRun { vocab, model, record, heldout, pretrain_log, sft_log })
}

/// A masked model and a causal baseline trained on the same forward-only pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReversalRecipe {
    pub n_pairs: usize,
    pub model: ModelConfig,
    pub mdm_iters: usize,
    pub ar_iters: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl ReversalRecipe {
    pub fn desk(n_pairs: usize, mdm_iters: usize, ar_iters: usize) -> Self {
        let vocab = reversal_vocab();
        ReversalRecipe {
            n_pairs,
            model: ModelConfig::desk(vocab.size(), vocab.special()),
            mdm_iters,
            ar_iters,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

/// Letters of the pair alphabet plus the separator.
pub fn reversal_vocab() -> Vocab {
    Vocab::from_chars(crate::data::REVERSAL_ALPHABET.chars().chain([crate::data::PROMPT_SEPARATOR]))
}

#[derive(Debug, Clone)]
pub struct ReversalRun {
    pub vocab: Vocab,
    pub data: ReversalData,
    pub mdm: TrainedModel,
    pub ar: TrainedModel,
}

/// Trains both models on one `A>B<eos>` document per pair.
pub fn train_reversal(recipe: &ReversalRecipe, seed: u64) -> Result<ReversalRun> {
    let vocab = reversal_vocab();
    let data = gen_reversal_pairs(recipe.n_pairs, &mut seeded(seed));
    let corpus = encode_documents(&data.corpus, &vocab)?;
    let schedule = |iters: usize, s: u64| TrainConfig {
        batch_size: recipe.batch_size,
        random_length_fraction: 0.0,
        ..TrainConfig::desk(iters, s).with_peak_lr(recipe.lr)
    };
    let mut out = Vec::new();
    for (attention, objective, iters, s) in [
        (AttentionMode::Bidirectional, Objective::MaskedDiffusion, recipe.mdm_iters, seed),
        (AttentionMode::Causal, Objective::Autoregressive, recipe.ar_iters, seed + 1),
    ] {
        let model = Model::init(recipe.model.clone().with_attention(attention), s)?;
        let opts = TrainOptions { objective, ..Default::default() };
        let (model, _) = pretrain(model, &corpus, &schedule(iters, s), &opts)?;
        let record = CheckpointRecord { model: model.config.clone(), vocab: Some(vocab.stored()), iteration: iters as u64 };
        out.push(TrainedModel { record, model });
    }
    let ar = out.pop().expect("two models");
    let mdm = out.pop().expect("two models");
    Ok(ReversalRun { vocab, data, mdm, ar })
}
