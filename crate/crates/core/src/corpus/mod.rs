//! Synthetic multi-task correction data: tokenizer, noise channels, source
//! sentences and the task mixture.

pub mod mixture;
pub mod noise;
pub mod sentences;
pub mod tokenizer;

pub use mixture::{build_mixture, sample_seed, worker_threads, CorrectionSample, MixtureDataset, TaskSource};
pub use noise::{derive_seed, gen_nbest, ChannelKind, ConfusionTable, NoiseChannel};
pub use sentences::{PoolSource, SentencePool};
pub use tokenizer::{Tokenizer, DEFAULT_ALPHABET};
