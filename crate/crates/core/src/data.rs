//! Character-level tokenizer, corpus packing, fine-tuning pairs and synthetic
//! task generators.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, precondition, Error, Result};
use crate::predictor::SpecialTokens;

pub const EOS_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
const FIRST_CHAR_ID: u32 = 2;

/// Bijection between characters and ids; ids 0 and 1 are reserved for EOS and MASK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Vocab {
    /// Vocabulary of the distinct characters in `chars`, in sorted order.
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().collect();
        Self::ordered(set.into_iter().collect())
    }

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_chars(texts.into_iter().flat_map(str::chars))
    }

    /// Rebuilds a vocabulary from its stored character string (id order).
    pub fn from_stored(stored: &str) -> Result<Self> {
        let chars: Vec<char> = stored.chars().collect();
        let distinct: HashSet<char> = chars.iter().copied().collect();
        if distinct.len() != chars.len() {
            return Err(Error::Checkpoint("stored vocabulary repeats a character".into()));
        }
        Ok(Self::ordered(chars))
    }

    fn ordered(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i as u32 + FIRST_CHAR_ID)).collect();
        Vocab { chars, index }
    }

    /// Characters in id order, suitable for [`Vocab::from_stored`].
    pub fn stored(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn size(&self) -> usize {
        self.chars.len() + FIRST_CHAR_ID as usize
    }

    pub fn special(&self) -> SpecialTokens {
        SpecialTokens { mask: MASK_ID, eos: EOS_ID }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| self.index.get(&c).copied().ok_or_else(|| Error::Precondition(format!("character {c:?} not in vocabulary"))))
            .collect()
    }

    /// Display form of one id; reserved ids render as `<eos>` and `<mask>`.
    pub fn token_text(&self, id: u32) -> String {
        match id {
            EOS_ID => "<eos>".to_string(),
            MASK_ID => "<mask>".to_string(),
            _ => self.chars.get((id - FIRST_CHAR_ID) as usize).map_or_else(|| format!("<{id}>"), |c| c.to_string()),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.token_text(id)).collect()
    }
}

/// Joins documents with one EOS between neighbours and cuts the stream into
/// `seq_len` windows, dropping the final partial window.
pub fn pack_pretrain<S: AsRef<str>>(docs: &[S], vocab: &Vocab, seq_len: usize) -> Result<Vec<Vec<u32>>> {
    if seq_len == 0 {
        return config("seq_len must be at least 1");
    }
    let mut stream = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            stream.push(EOS_ID);
        }
        stream.extend(vocab.encode(d.as_ref())?);
    }
    Ok(stream.chunks_exact(seq_len).map(<[u32]>::to_vec).collect())
}

/// Encodes each document as its own sequence terminated by EOS.
pub fn encode_documents<S: AsRef<str>>(docs: &[S], vocab: &Vocab) -> Result<Vec<Vec<u32>>> {
    docs.iter()
        .map(|d| {
            let mut ids = vocab.encode(d.as_ref())?;
            ids.push(EOS_ID);
            Ok(ids)
        })
        .collect()
}

/// Truncates each sequence, with probability `fraction`, to a length drawn
/// uniformly from `1..=max_len` (never longer than the sequence itself).
pub fn apply_random_length(batch: &mut [Vec<u32>], fraction: f64, max_len: usize, rng: &mut impl Rng) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return config(format!("random-length fraction {fraction} outside [0, 1]"));
    }
    if fraction == 0.0 {
        return Ok(());
    }
    for seq in batch.iter_mut() {
        if rng.random::<f64>() < fraction && max_len >= 1 {
            let len = rng.random_range(1..=max_len);
            seq.truncate(len);
        }
    }
    Ok(())
}

/// A prompt/response pair in text form.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextPair {
    pub prompt: String,
    pub response: String,
}

/// An encoded prompt/response pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftPair {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
}

impl TextPair {
    pub fn encode(&self, vocab: &Vocab) -> Result<SftPair> {
        Ok(SftPair { prompt: vocab.encode(&self.prompt)?, response: vocab.encode(&self.response)? })
    }
}

/// Pads every response with EOS to the longest response in the batch.
pub fn prepare_sft_batch(pairs: &[SftPair]) -> Result<Vec<SftPair>> {
    prepare_sft_batch_to(pairs, 0)
}

/// Pads every response with EOS to at least `min_len` and to the batch maximum.
pub fn prepare_sft_batch_to(pairs: &[SftPair], min_len: usize) -> Result<Vec<SftPair>> {
    if pairs.is_empty() {
        return precondition("fine-tuning batch is empty");
    }
    for p in pairs {
        if p.prompt.contains(&MASK_ID) || p.response.contains(&MASK_ID) {
            return precondition("fine-tuning pair contains the mask id");
        }
    }
    let target = pairs.iter().map(|p| p.response.len()).max().unwrap_or(0).max(min_len);
    Ok(pairs
        .iter()
        .map(|p| {
            let mut response = p.response.clone();
            response.resize(target, EOS_ID);
            SftPair { prompt: p.prompt.clone(), response }
        })
        .collect())
}

/// Turns an alternating prompt/response dialogue into one pair per turn; pair
/// `k` is prompted with every earlier utterance plus the `k`-th prompt.
pub fn split_multiturn<S: AsRef<str>>(turns: &[S]) -> Result<Vec<TextPair>> {
    if turns.is_empty() || turns.len() % 2 != 0 {
        return Err(Error::Malformed(format!(
            "dialogue needs alternating prompt/response turns, got {} utterances",
            turns.len()
        )));
    }
    let mut history = String::new();
    let mut pairs = Vec::with_capacity(turns.len() / 2);
    for chunk in turns.chunks_exact(2) {
        history.push_str(chunk[0].as_ref());
        pairs.push(TextPair { prompt: history.clone(), response: chunk[1].as_ref().to_string() });
        history.push_str(chunk[1].as_ref());
    }
    Ok(pairs)
}

#[derive(Deserialize)]
struct SftRecord {
    prompt: Option<String>,
    response: Option<String>,
    turns: Option<Vec<String>>,
}

/// Parses newline-delimited records with either `prompt`/`response` string
/// fields or a `turns` array; blank lines are skipped.
pub fn parse_sft_records(text: &str) -> Result<Vec<TextPair>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Format { line: i + 1, msg };
        let rec: SftRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        match (rec.prompt, rec.response, rec.turns) {
            (Some(prompt), Some(response), None) => pairs.push(TextPair { prompt, response }),
            (None, None, Some(turns)) => pairs.extend(split_multiturn(&turns).map_err(|e| err(e.to_string()))?),
            _ => return Err(err("expected either prompt/response or turns".into())),
        }
    }
    Ok(pairs)
}

/// Separator between the question and the answer in generated prompts.
pub const PROMPT_SEPARATOR: char = '>';

/// Synthetic task families with exact-match answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Copy,
    Sort,
    Arithmetic,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "sort" => Ok(TaskKind::Sort),
            "arithmetic" => Ok(TaskKind::Arithmetic),
            other => config(format!("unknown task kind {other:?}")),
        }
    }
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Sort => "sort",
            TaskKind::Arithmetic => "arithmetic",
        }
    }

    /// Every character the task can emit.
    pub fn alphabet(self) -> String {
        match self {
            TaskKind::Copy | TaskKind::Sort => ('a'..='z').chain([PROMPT_SEPARATOR]).collect(),
            TaskKind::Arithmetic => ('0'..='9').chain(['+', '=']).collect(),
        }
    }

    /// Longest response the generator produces.
    pub fn max_response_len(self) -> usize {
        match self {
            TaskKind::Copy | TaskKind::Sort => TASK_MAX_LEN,
            TaskKind::Arithmetic => 3,
        }
    }

    pub fn vocab(self) -> Vocab {
        Vocab::from_chars(self.alphabet().chars())
    }
}

const TASK_MIN_LEN: usize = 3;
const TASK_MAX_LEN: usize = 8;

fn random_letters(rng: &mut impl Rng, len: usize, letters: &[char]) -> String {
    (0..len).map(|_| letters[rng.random_range(0..letters.len())]).collect()
}

/// Reference answer for a task prompt (as produced by [`gen_task_corpora`]).
pub fn task_answer(kind: TaskKind, prompt: &str) -> Option<String> {
    match kind {
        TaskKind::Copy => prompt.strip_suffix(PROMPT_SEPARATOR).map(str::to_string),
        TaskKind::Sort => prompt.strip_suffix(PROMPT_SEPARATOR).map(|s| {
            let mut c: Vec<char> = s.chars().collect();
            c.sort_unstable();
            c.into_iter().collect()
        }),
        TaskKind::Arithmetic => {
            let (a, b) = prompt.strip_suffix('=')?.split_once('+')?;
            Some((a.parse::<u32>().ok()? + b.parse::<u32>().ok()?).to_string())
        }
    }
}

/// `size` random instances of a task.
///
/// Copy and sort prompts are 3 to 8 lowercase letters followed by `>`;
/// arithmetic prompts are two zero-padded two-digit operands, e.g. `12+07=`.
pub fn gen_task_corpora(kind: TaskKind, size: usize, rng: &mut impl Rng) -> Vec<TextPair> {
    let letters: Vec<char> = ('a'..='z').collect();
    (0..size)
        .map(|_| {
            let prompt = match kind {
                TaskKind::Copy | TaskKind::Sort => {
                    let len = rng.random_range(TASK_MIN_LEN..=TASK_MAX_LEN);
                    let mut s = random_letters(rng, len, &letters);
                    s.push(PROMPT_SEPARATOR);
                    s
                }
                TaskKind::Arithmetic => {
                    format!("{:02}+{:02}=", rng.random_range(0..100u32), rng.random_range(0..100u32))
                }
            };
            let response = task_answer(kind, &prompt).expect("generated prompts are well formed");
            TextPair { prompt, response }
        })
        .collect()
}

/// One probe: a prompt and its exact expected answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Probe {
    pub prompt: String,
    pub answer: String,
}

/// Training text and probes for the reversal study.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReversalData {
    pub pairs: Vec<(String, String)>,
    /// One document `A>B` per pair; this is the only direction ever trained.
    pub corpus: Vec<String>,
    /// `A>` must be continued with `B`.
    pub forward: Vec<Probe>,
    /// Recover `A` from `B`; how the cue is presented depends on the model.
    pub reversal: Vec<Probe>,
}

pub const REVERSAL_STRING_LEN: usize = 4;
pub const REVERSAL_ALPHABET: &str = "abcdefghijklmnop";

/// `n_pairs` couples of distinct random strings, unique across all pairs.
pub fn gen_reversal_pairs(n_pairs: usize, rng: &mut impl Rng) -> ReversalData {
    let letters: Vec<char> = REVERSAL_ALPHABET.chars().collect();
    let mut seen = HashSet::new();
    let mut fresh = |rng: &mut _| loop {
        let s = random_letters(rng, REVERSAL_STRING_LEN, &letters);
        if seen.insert(s.clone()) {
            return s;
        }
    };
    let pairs: Vec<(String, String)> = (0..n_pairs).map(|_| (fresh(rng), fresh(rng))).collect();
    ReversalData::from_pairs(pairs)
}

impl ReversalData {
    /// Training documents and probes for the given `(A, B)` couples.
    pub fn from_pairs(pairs: Vec<(String, String)>) -> Self {
        let corpus = pairs.iter().map(|(a, b)| format!("{a}{PROMPT_SEPARATOR}{b}")).collect();
        let forward = pairs.iter().map(|(a, b)| Probe { prompt: format!("{a}{PROMPT_SEPARATOR}"), answer: b.clone() }).collect();
        let reversal = pairs.iter().map(|(a, b)| Probe { prompt: b.clone(), answer: a.clone() }).collect();
        ReversalData { pairs, corpus, forward, reversal }
    }

    /// Reads back a corpus of `A>B` lines; blank lines are skipped.
    pub fn parse_corpus(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let Some((a, b)) = line.split_once(PROMPT_SEPARATOR) else {
                return Err(Error::Format { line: i + 1, msg: format!("expected A{PROMPT_SEPARATOR}B") });
            };
            if a.is_empty() || b.is_empty() {
                return Err(Error::Format { line: i + 1, msg: "empty side of a pair".into() });
            }
            pairs.push((a.to_string(), b.to_string()));
        }
        Ok(ReversalData::from_pairs(pairs))
    }
}

/// Splits off the last `holdout` items after a seeded shuffle.
pub fn shuffle_split<T>(mut items: Vec<T>, holdout: usize, rng: &mut impl Rng) -> (Vec<T>, Vec<T>) {
    items.shuffle(rng);
    let cut = items.len().saturating_sub(holdout);
    let test = items.split_off(cut);
    (items, test)
}
