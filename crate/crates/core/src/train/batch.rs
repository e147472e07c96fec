use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{derive_seed, CorrectionSample, MixtureDataset, Tokenizer};
use crate::error::{invalid, Result};
use crate::tasks::{format_prompt, TaskId, TaskRegistry};

/// A dataset sample turned into model input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    /// Position in the source dataset.
    pub index: usize,
    pub task: TaskId,
    pub tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl EncodedSample {
    /// Input positions fed to the model: all tokens but the last.
    pub fn input_len(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Number of predicted tokens that carry loss.
    pub fn n_target(&self) -> usize {
        self.loss_mask[1..].iter().filter(|&&m| m).count()
    }
}

/// Formats every sample; sequences longer than `max_seq_len` are dropped
/// and counted.
pub fn encode_dataset(
    tok: &Tokenizer,
    tasks: &TaskRegistry,
    data: &MixtureDataset,
    n_best: usize,
    max_seq_len: usize,
) -> Result<(Vec<EncodedSample>, usize)> {
    let mut out = Vec::with_capacity(data.len());
    let mut skipped = 0;
    for (index, s) in data.samples.iter().enumerate() {
        let e = encode_sample(tok, tasks, s, n_best, index)?;
        if e.tokens.len() > max_seq_len {
            skipped += 1;
        } else {
            out.push(e);
        }
    }
    Ok((out, skipped))
}

pub fn encode_sample(
    tok: &Tokenizer,
    tasks: &TaskRegistry,
    s: &CorrectionSample,
    n_best: usize,
    index: usize,
) -> Result<EncodedSample> {
    let task = tasks.get(&s.task)?.clone();
    let p = format_prompt(tok, &task, &s.hypotheses, Some(&s.target), n_best)?;
    Ok(EncodedSample {
        index,
        task,
        tokens: p.tokens,
        loss_mask: p.loss_mask,
    })
}

/// Batches for every epoch, in training order. Each epoch visits all
/// samples once in a seeded order, grouped greedily so a batch's summed
/// lengths stay within `budget` (a single longer sample forms its own batch).
pub fn plan_batches(lengths: &[usize], budget: usize, epochs: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if lengths.is_empty() {
        return Err(invalid("no trainable samples"));
    }
    let mut batches = Vec::new();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64])));
        let mut cur = Vec::new();
        let mut used = 0;
        for i in order {
            if !cur.is_empty() && used + lengths[i] > budget {
                batches.push(std::mem::take(&mut cur));
                used = 0;
            }
            cur.push(i);
            used += lengths[i];
        }
        if !cur.is_empty() {
            batches.push(cur);
        }
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_epoch_covers_all_samples_within_budget() {
        let lengths: Vec<usize> = (0..50).map(|i| 10 + i % 7).collect();
        let plan = plan_batches(&lengths, 64, 3, 1).unwrap();
        let mut seen = vec![0; 50];
        for b in &plan {
            assert!(!b.is_empty());
            assert!(b.len() == 1 || b.iter().map(|&i| lengths[i]).sum::<usize>() <= 64);
            for &i in b {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 3));
        assert_eq!(plan, plan_batches(&lengths, 64, 3, 1).unwrap());
        assert_ne!(plan, plan_batches(&lengths, 64, 3, 2).unwrap());
    }

    #[test]
    fn oversized_sample_gets_own_batch() {
        let plan = plan_batches(&[5, 100, 5], 10, 1, 0).unwrap();
        assert!(plan.iter().any(|b| b == &vec![1]));
        assert!(plan_batches(&[], 10, 1, 0).is_err());
    }
}
