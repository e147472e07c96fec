//! Run configuration: one TOML file covering corpus, model and training.
//!
//! Every key is optional. Missing keys take the defaults below; unknown
//! keys are rejected. Two keys are derived and may only be written with
//! their derived value (so an echoed configuration reads back unchanged):
//! `model.vocab_size` (from the alphabet and task list) and `train.seed`
//! (from the top-level `seed`).

use std::path::Path;

use neko_core::corpus::{
    derive_seed, ChannelKind, NoiseChannel, PoolSource, SentencePool, TaskSource, Tokenizer, DEFAULT_ALPHABET,
};
use neko_core::model::ModelConfig;
use neko_core::tasks::TaskRegistry;
use neko_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// One task of the mixture and the channel that corrupts its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub channel: ChannelKind,
    /// Per-character corruption probability.
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// `generated` (template grammar) or `bundled` (shipped sentence list).
    pub pool: PoolSource,
    /// Number of distinct sentences when `pool = "generated"`.
    pub pool_size: usize,
    /// Share of the pool held out for the eval split.
    pub holdout_fraction: f64,
    pub samples_per_task: usize,
    pub eval_samples_per_task: usize,
    pub alphabet: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            pool: PoolSource::Generated,
            pool_size: 2000,
            holdout_fraction: 0.1,
            samples_per_task: 1000,
            eval_samples_per_task: 100,
            alphabet: DEFAULT_ALPHABET.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed: data, initialization, expert map and batch order.
    pub seed: u64,
    pub precision: Precision,
    /// Single worker thread regardless of `NEKO_THREADS`.
    pub deterministic: bool,
    /// Hypotheses per sample.
    pub n_best: usize,
    /// Decoding cap for `eval` and `correct`.
    pub max_new_tokens: usize,
    /// Write an intermediate checkpoint every this many steps (0: never).
    pub checkpoint_every: usize,
    pub tasks: Vec<TaskSpec>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tasks = [("asr", ChannelKind::Asr), ("ocr", ChannelKind::Ocr), ("typo", ChannelKind::Typo)]
            .into_iter()
            .map(|(name, channel)| TaskSpec {
                name: name.to_string(),
                channel,
                intensity: 0.15,
            })
            .collect();
        let mut c = RunConfig {
            seed: 0,
            precision: Precision::F32,
            deterministic: false,
            n_best: 5,
            max_new_tokens: 64,
            checkpoint_every: 0,
            tasks,
            corpus: CorpusConfig::default(),
            model: ModelConfig {
                max_seq_len: 384,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
        };
        c.resolve_derived();
        c
    }
}

/// Purpose tags separating the seed streams derived from the master seed.
#[derive(Debug, Clone, Copy)]
pub enum SeedUse {
    Pool = 1,
    Holdout = 2,
    TrainData = 3,
    EvalData = 4,
    Init = 5,
    ExpertMap = 6,
    BatchOrder = 7,
}

impl RunConfig {
    /// Reads `path`, or the defaults when `None`, then applies overrides.
    pub fn load(path: Option<&Path>, seed: Option<u64>, precision: Option<Precision>, deterministic: bool) -> Result<Self, CliError> {
        let (mut c, raw) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                let raw: toml::Table = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                let c: RunConfig = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                (c, Some(raw))
            }
            None => (RunConfig::default(), None),
        };
        let declared = |section: &str, key: &str| -> Option<toml::Value> {
            raw.as_ref()?.get(section)?.as_table()?.get(key).cloned()
        };
        let vocab_given = declared("model", "vocab_size");
        let seed_given = declared("train", "seed");
        if let Some(s) = seed {
            c.seed = s;
        }
        if let Some(p) = precision {
            c.precision = p;
        }
        c.deterministic |= deterministic;
        c.resolve_derived();
        if let Some(v) = vocab_given {
            if v.as_integer() != Some(c.model.vocab_size as i64) {
                return Err(CliError::Usage(format!(
                    "model.vocab_size is derived from the alphabet and tasks ({}); remove the key",
                    c.model.vocab_size
                )));
            }
        }
        if let Some(v) = seed_given {
            if v.as_integer().map(|i| i as u64) != Some(c.train.seed) {
                return Err(CliError::Usage(
                    "train.seed is derived from the top-level seed; remove the key".to_string(),
                ));
            }
        }
        c.validate()?;
        Ok(c)
    }

    fn resolve_derived(&mut self) {
        let names: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        if let Ok(tok) = Tokenizer::new(&self.corpus.alphabet, &names) {
            self.model.vocab_size = tok.vocab_size();
        }
        self.train.seed = self.derived_seed(SeedUse::BatchOrder);
    }

    /// Seed of one stream; 63 bits so it stays a TOML integer when echoed.
    pub fn derived_seed(&self, purpose: SeedUse) -> u64 {
        derive_seed(&[self.seed, purpose as u64]) & i64::MAX as u64
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: neko_core::NekoError| CliError::Usage(e.to_string());
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Usage(format!("seed must be at most {}", i64::MAX)));
        }
        if self.tasks.is_empty() {
            return Err(CliError::Usage("at least one task is required".into()));
        }
        self.registry()?;
        self.tokenizer()?;
        self.sources()?;
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        if self.n_best == 0 || self.max_new_tokens == 0 {
            return Err(CliError::Usage("n_best and max_new_tokens must be positive".into()));
        }
        if self.model.n_experts < 2 {
            return Err(CliError::Usage("task routing needs model.n_experts >= 2".into()));
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<TaskRegistry, CliError> {
        let names: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        TaskRegistry::new(&names).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn tokenizer(&self) -> Result<Tokenizer, CliError> {
        let names: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        Tokenizer::new(&self.corpus.alphabet, &names).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn sources(&self) -> Result<Vec<TaskSource>, CliError> {
        let reg = self.registry()?;
        self.tasks
            .iter()
            .zip(reg.tasks())
            .map(|(spec, id)| {
                Ok(TaskSource {
                    task: id.clone(),
                    channel: NoiseChannel::new(spec.channel, spec.intensity).map_err(|e| CliError::Usage(e.to_string()))?,
                })
            })
            .collect()
    }

    /// The train and held-out source pools.
    pub fn pools(&self) -> Result<(SentencePool, SentencePool), CliError> {
        let c = &self.corpus;
        let pool = SentencePool::from_source(c.pool, c.pool_size, self.derived_seed(SeedUse::Pool))?;
        Ok(pool.split_holdout(c.holdout_fraction, self.derived_seed(SeedUse::Holdout))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_echo() {
        let c = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, c.to_toml()).unwrap();
        assert_eq!(RunConfig::load(Some(&p), None, None, false).unwrap(), c);
    }

    #[test]
    fn unknown_and_derived_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        for bad in ["bogus = 1", "[model]\nvocab_size = 12", "[train]\nseed = 4", "[train]\nlearning_rate = -1.0"] {
            std::fs::write(&p, bad).unwrap();
            assert!(matches!(RunConfig::load(Some(&p), None, None, false), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn partial_file_keeps_defaults_and_overrides_apply() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "n_best = 3\n[model]\nd_model = 32\n").unwrap();
        let c = RunConfig::load(Some(&p), Some(9), Some(Precision::F64), true).unwrap();
        assert_eq!((c.n_best, c.model.d_model, c.seed), (3, 32, 9));
        assert_eq!(c.precision, Precision::F64);
        assert!(c.deterministic);
        assert_eq!(c.model.n_layers, ModelConfig::default().n_layers);
        assert_eq!(c.train.seed, derive_seed(&[9, SeedUse::BatchOrder as u64]) & i64::MAX as u64);
        assert!(RunConfig::load(None, Some(u64::MAX), None, false).is_err());
    }
}
