//! Multi-task training: masked NLL under task-forced routing, AdamW with
//! warmup plus cosine decay, global-norm clipping and resumable checkpoints.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod optim;
pub mod schedule;

pub use batch::{encode_dataset, encode_sample, plan_batches, EncodedSample};
pub use checkpoint::{checkpoint_dtype, fnv1a, Checkpoint, CheckpointHeader, RngState};
pub use config::TrainConfig;
pub use loss::{batch_gradients, nll_loss, BatchStats, LossOptions};
pub use optim::{adamw_step, AdamState};
pub use schedule::{lr_at, warmup_steps};

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::corpus::{MixtureDataset, Tokenizer};
use crate::error::{invalid, NekoError, Result};
use crate::model::TransformerParams;
use crate::tasks::{build_expert_map, ExpertMap, TaskRegistry};
use crate::tensor::{clip_global_norm, zero_grads, Scalar};

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    /// 1-based index of the update just applied.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub tokens: usize,
    /// Fraction of expert selections per expert.
    pub expert_load: Vec<f64>,
    /// Fraction of routings that included the task expert.
    pub forced_fraction: f64,
}

pub fn metrics_csv_header(n_experts: usize) -> String {
    let mut s = String::from("step,loss,lr,grad_norm,tokens");
    for e in 0..n_experts {
        let _ = write!(s, ",expert_load_{e}");
    }
    s
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{},{},{},{}", self.step, self.loss, self.lr, self.grad_norm, self.tokens);
        for l in &self.expert_load {
            let _ = write!(s, ",{l}");
        }
        s
    }
}

/// Mutable training state; what a checkpoint stores.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<S: Scalar> {
    pub params: TransformerParams<S>,
    pub opt: AdamState<S>,
    pub tasks: TaskRegistry,
    pub map: ExpertMap,
    pub train: TrainConfig,
    pub alphabet: String,
    pub n_best: usize,
    pub step: usize,
    pub total_steps: usize,
    pub data_fingerprint: u64,
}

impl<S: Scalar> TrainState<S> {
    /// Fresh state: parameters from `init_seed`, expert map from `map_seed`.
    pub fn fresh(
        params: TransformerParams<S>,
        tasks: TaskRegistry,
        map_seed: u64,
        train: TrainConfig,
        alphabet: &str,
        n_best: usize,
    ) -> Result<Self> {
        train.validate()?;
        let map = build_expert_map(tasks.tasks(), params.config.n_experts, map_seed)?;
        Ok(TrainState {
            opt: AdamState::new(&params.tensors),
            params,
            tasks,
            map,
            train,
            alphabet: alphabet.to_string(),
            n_best,
            step: 0,
            total_steps: 0,
            data_fingerprint: 0,
        })
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::new(&self.alphabet, &self.tasks.names())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            header: CheckpointHeader {
                model: self.params.config.clone(),
                train: self.train.clone(),
                tasks: self.tasks.clone(),
                expert_map: self.map.clone(),
                alphabet: self.alphabet.clone(),
                n_best: self.n_best,
                step: self.step as u64,
                total_steps: self.total_steps as u64,
                rng: RngState {
                    seed: self.train.seed,
                    position: self.step as u64,
                },
                data_fingerprint: self.data_fingerprint,
                optimizer_steps: self.opt.t,
            },
            params: self.params.clone(),
            opt: self.opt.clone(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint<S>) -> Self {
        let h = c.header;
        TrainState {
            params: c.params,
            opt: c.opt,
            tasks: h.tasks,
            map: h.expert_map,
            train: h.train,
            alphabet: h.alphabet,
            n_best: h.n_best,
            step: h.step as usize,
            total_steps: h.total_steps as usize,
            data_fingerprint: h.data_fingerprint,
        }
    }
}

/// Outcome of a [`Trainer::run`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub final_step: usize,
    pub total_steps: usize,
    pub last_loss: Option<f64>,
    pub skipped_samples: usize,
}

/// Drives training over a fixed, fully planned batch sequence.
pub struct Trainer<S: Scalar> {
    pub state: TrainState<S>,
    data: MixtureDataset,
    samples: Vec<EncodedSample>,
    batches: Vec<Vec<usize>>,
    skipped: usize,
    decay: Vec<bool>,
    threads: usize,
    dump_dir: Option<PathBuf>,
}

impl<S: Scalar> Trainer<S> {
    /// Encodes `data` and plans all epochs. A fresh state (step 0) adopts
    /// the data fingerprint and step count; a resumed state must match them.
    pub fn new(mut state: TrainState<S>, data: MixtureDataset, threads: usize) -> Result<Self> {
        state.train.validate()?;
        let tok = state.tokenizer()?;
        let config = &state.params.config;
        if tok.vocab_size() != config.vocab_size {
            return Err(invalid(format!(
                "tokenizer has {} symbols but the model vocabulary is {}",
                tok.vocab_size(),
                config.vocab_size
            )));
        }
        let fingerprint = fnv1a(data.to_jsonl()?.as_bytes());
        let (samples, skipped) = encode_dataset(&tok, &state.tasks, &data, state.n_best, config.max_seq_len)?;
        let lengths: Vec<usize> = samples.iter().map(EncodedSample::input_len).collect();
        let batches = plan_batches(&lengths, state.train.batch_size_tokens, state.train.epochs, state.train.seed)?;
        if state.step == 0 && state.opt.t == 0 {
            state.total_steps = batches.len();
            state.data_fingerprint = fingerprint;
        } else if state.total_steps != batches.len() || state.data_fingerprint != fingerprint {
            return Err(invalid("resumed run does not match the checkpoint's training data or settings"));
        }
        let decay = (0..state.params.tensors.len())
            .map(|i| !state.params.layout.is_norm(crate::tensor::ParamId(i)))
            .collect();
        Ok(Trainer {
            state,
            data,
            samples,
            batches,
            skipped,
            decay,
            threads: threads.max(1),
            dump_dir: None,
        })
    }

    /// Directory receiving the offending batch when a step goes non-finite.
    pub fn set_dump_dir(&mut self, dir: PathBuf) {
        self.dump_dir = Some(dir);
    }

    pub fn skipped_samples(&self) -> usize {
        self.skipped
    }

    pub fn samples(&self) -> &[EncodedSample] {
        &self.samples
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    /// One update on `batch` (indices into [`samples`](Self::samples)) at
    /// learning rate `lr`.
    pub fn step(&mut self, batch: &[usize], lr: f64) -> Result<StepMetrics> {
        let refs: Vec<&EncodedSample> = batch.iter().map(|&i| &self.samples[i]).collect();
        zero_grads(&mut self.state.params.tensors);
        let stats = batch_gradients(
            &mut self.state.params,
            &refs,
            &self.state.map,
            LossOptions {
                aux_coeff: self.state.train.aux_loss_coeff,
                task_routing: self.state.train.task_routing,
            },
            self.threads,
        )?;
        let norm = clip_global_norm(&mut self.state.params.tensors, S::c(self.state.train.grad_clip))?;
        let norm = norm.to_f64().unwrap();
        if !stats.nll.is_finite() || !norm.is_finite() {
            return Err(self.numerical_failure(batch, stats.nll, norm));
        }
        adamw_step(&mut self.state.params.tensors, &mut self.state.opt, lr, &self.state.train, &self.decay)?;
        self.state.step += 1;
        let total: u64 = stats.expert_counts.iter().sum();
        Ok(StepMetrics {
            step: self.state.step,
            loss: stats.nll,
            lr,
            grad_norm: norm,
            tokens: stats.input_tokens,
            expert_load: stats.expert_counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect(),
            forced_fraction: stats.forced as f64 / stats.routings.max(1) as f64,
        })
    }

    fn numerical_failure(&self, batch: &[usize], loss: f64, norm: f64) -> NekoError {
        let picked: Vec<_> = batch.iter().map(|&i| self.data.samples[self.samples[i].index].clone()).collect();
        let mut msg = format!(
            "non-finite value at step {} (loss {loss}, grad norm {norm}); batch seeds {:?}",
            self.state.step + 1,
            picked.iter().map(|s| s.seed).collect::<Vec<_>>()
        );
        if let Some(dir) = &self.dump_dir {
            let path = dir.join(format!("nan_batch_step{}.jsonl", self.state.step + 1));
            let dump = MixtureDataset { samples: picked };
            match dump.write(&path) {
                Ok(()) => {
                    let _ = write!(msg, "; batch written to {}", path.display());
                }
                Err(e) => {
                    let _ = write!(msg, "; could not write batch dump: {e}");
                }
            }
        }
        NekoError::Numerical(msg)
    }

    /// Runs planned steps from the current position until the plan ends,
    /// `max_steps` more updates have run, or `on_step` returns false.
    pub fn run(&mut self, max_steps: Option<usize>, mut on_step: impl FnMut(&StepMetrics) -> bool) -> Result<TrainSummary> {
        let total = self.state.total_steps;
        let mut steps_run = 0;
        let mut last_loss = None;
        while self.state.step < total && max_steps.map_or(true, |m| steps_run < m) {
            let batch = self.batches[self.state.step].clone();
            let lr = lr_at(self.state.step + 1, total, &self.state.train);
            let m = self.step(&batch, lr)?;
            steps_run += 1;
            last_loss = Some(m.loss);
            if !on_step(&m) {
                break;
            }
        }
        Ok(TrainSummary {
            steps_run,
            final_step: self.state.step,
            total_steps: total,
            last_loss,
            skipped_samples: self.skipped,
        })
    }
}
