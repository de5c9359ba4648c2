//! Flag and config-file merging.
//!
//! A config file holds `key = value` lines (`#` starts a comment). Every
//! command-line flag has a key of the same name with dashes replaced by
//! underscores, and a flag given on the command line wins over the file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

/// Keys accepted in a config file.
pub const KNOWN_KEYS: &[&str] = &[
    "seed", "out", "checkpoint",
    // model
    "n_layers", "d_model", "n_heads", "ffn_dim", "max_seq_len", "init_std",
    // training
    "corpus", "pairs", "iters", "batch_size", "lr", "warmup", "weight_decay", "seq_len", "per_line",
    "objective", "log_every", "checkpoint_every", "pad_to", "random_length",
    // sampling
    "prompt", "mode", "strategy", "steps", "len", "block", "cfg_scale", "eos_zeroing", "temperature", "max_blocks", "trace",
    // evaluation and benchmarks
    "items", "nmc", "task", "n_items", "seeds", "lengths", "block_lens", "grid", "mdm", "ar", "data",
    "sft_iters", "n", "holdout",
];

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Reads `path` (if any) and lays `flags` over it.
    pub fn load(path: Option<&Path>, flags: Vec<(&str, Option<String>)>) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    bail!("{}:{}: expected key = value", path.display(), i + 1);
                };
                let key = k.trim().replace('-', "_");
                if !KNOWN_KEYS.contains(&key.as_str()) {
                    bail!("{}:{}: unknown key {key:?}", path.display(), i + 1);
                }
                values.insert(key, v.trim().to_string());
            }
        }
        for (key, value) in flags {
            if let Some(v) = value {
                values.insert(key.to_string(), v);
            }
        }
        Ok(Settings { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(s) => s.parse::<T>().map(Some).map_err(|e| anyhow::anyhow!("invalid value {s:?} for {key}: {e}")),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.opt(key)?.with_context(|| format!("missing required setting --{}", key.replace('_', "-")))
    }

    /// A path that must already exist.
    pub fn existing_path(&self, key: &str) -> Result<PathBuf> {
        let path: PathBuf = self.require(key)?;
        if !path.exists() {
            bail!("{} does not exist: {}", key.replace('_', " "), path.display());
        }
        Ok(path)
    }

    /// A comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T::Err: Display,
        T: Clone,
    {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(s) => s
                .split(',')
                .map(|part| {
                    let part = part.trim();
                    part.parse::<T>().map_err(|e| anyhow::anyhow!("invalid entry {part:?} in {key}: {e}"))
                })
                .collect(),
        }
    }
}

/// Renders an optional flag value for [`Settings::load`].
pub fn flag<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}
