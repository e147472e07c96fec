use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::noise::{derive_seed, gen_nbest, NoiseChannel};
use super::sentences::SentencePool;
use super::tokenizer::Tokenizer;
use crate::error::{invalid, NekoError, Result};
use crate::tasks::TaskId;

/// One training or evaluation example: n-best corrupted hypotheses of a
/// clean target. Serialized field order: task, hypotheses, target, seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionSample {
    pub task: String,
    pub hypotheses: Vec<String>,
    pub target: String,
    pub seed: u64,
}

impl CorrectionSample {
    pub fn validate(&self) -> Result<()> {
        if self.hypotheses.is_empty() {
            return Err(invalid("sample has no hypotheses"));
        }
        if self.target.is_empty() {
            return Err(invalid("sample has an empty target"));
        }
        Ok(())
    }

    /// Every character of the sample is in the tokenizer's alphabet.
    pub fn check_alphabet(&self, tok: &Tokenizer) -> Result<()> {
        for text in self.hypotheses.iter().chain(std::iter::once(&self.target)) {
            if let Some(c) = text.chars().find(|&c| !tok.contains(c)) {
                return Err(NekoError::UnknownChar(c));
            }
        }
        Ok(())
    }
}

/// A task together with the noise channel that produces its inputs.
#[derive(Debug, Clone)]
pub struct TaskSource {
    pub task: TaskId,
    pub channel: NoiseChannel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixtureDataset {
    pub samples: Vec<CorrectionSample>,
}

/// Seed of sample `index` of task `task_id`; reproducible in isolation.
pub fn sample_seed(master_seed: u64, task_id: usize, index: usize) -> u64 {
    derive_seed(&[master_seed, task_id as u64, index as u64])
}

fn make_sample(src: &TaskSource, pool: &SentencePool, n_best: usize, seed: u64) -> Result<CorrectionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = pool.sentences()[rng.gen_range(0..pool.len())].clone();
    let hypotheses = gen_nbest(&src.channel, &target, n_best, derive_seed(&[seed, 1]))?;
    Ok(CorrectionSample {
        task: src.task.name.clone(),
        hypotheses,
        target,
        seed,
    })
}

/// Worker count from `NEKO_THREADS`, default 1.
pub fn worker_threads() -> usize {
    std::env::var("NEKO_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// `samples_per_task` samples for every task, in a seeded shuffled order.
/// Content depends only on the arguments, not on `threads`.
pub fn build_mixture(
    sources: &[TaskSource],
    pool: &SentencePool,
    samples_per_task: usize,
    n_best: usize,
    master_seed: u64,
    threads: usize,
) -> Result<MixtureDataset> {
    if sources.is_empty() {
        return Err(invalid("mixture needs at least one task"));
    }
    if pool.is_empty() {
        return Err(invalid("source text pool is empty"));
    }
    let jobs: Vec<(usize, usize)> = (0..sources.len())
        .flat_map(|s| (0..samples_per_task).map(move |i| (s, i)))
        .collect();
    let run = |chunk: &[(usize, usize)]| -> Result<Vec<CorrectionSample>> {
        chunk
            .iter()
            .map(|&(s, i)| {
                let src = &sources[s];
                make_sample(src, pool, n_best, sample_seed(master_seed, src.task.id, i))
            })
            .collect()
    };
    let threads = threads.max(1);
    let mut samples = if threads == 1 || jobs.len() < 2 {
        run(&jobs)?
    } else {
        let chunk = jobs.len().div_ceil(threads);
        let parts: Vec<Result<Vec<CorrectionSample>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = jobs.chunks(chunk).map(|c| scope.spawn(move || run(c))).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(jobs.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[master_seed, 0x5348_5546])));
    Ok(MixtureDataset { samples })
}

impl MixtureDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_task(&self, task: &str) -> usize {
        self.samples.iter().filter(|s| s.task == task).count()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses the line-delimited format; errors carry 1-based line numbers.
    pub fn parse(text: &str) -> Result<Self> {
        Self::read_lines(BufReader::new(text.as_bytes()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::read_lines(BufReader::new(File::open(path)?))
    }

    fn read_lines<R: BufRead>(r: R) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| NekoError::Parse { line: i + 1, message };
            let s: CorrectionSample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            s.validate().map_err(|e| parse_err(e.to_string()))?;
            samples.push(s);
        }
        if samples.is_empty() {
            return Err(invalid("dataset contains no samples"));
        }
        Ok(MixtureDataset { samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::noise::ChannelKind;

    fn sources(intensity: f64) -> Vec<TaskSource> {
        [ChannelKind::Asr, ChannelKind::Ocr, ChannelKind::Typo]
            .iter()
            .enumerate()
            .map(|(i, &k)| TaskSource {
                task: TaskId {
                    name: format!("{k:?}").to_lowercase(),
                    id: i,
                },
                channel: NoiseChannel::new(k, intensity).unwrap(),
            })
            .collect()
    }

    #[test]
    fn counts_per_task() {
        let pool = SentencePool::bundled();
        let d = build_mixture(&sources(0.2), &pool, 100, 5, 7, 1).unwrap();
        assert_eq!(d.len(), 300);
        for t in ["asr", "ocr", "typo"] {
            assert_eq!(d.count_task(t), 100);
        }
        assert!(d.samples.iter().all(|s| s.hypotheses.len() == 5));
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let pool = SentencePool::bundled();
        let a = build_mixture(&sources(0.2), &pool, 40, 5, 7, 1).unwrap();
        let b = build_mixture(&sources(0.2), &pool, 40, 5, 7, 3).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        let c = build_mixture(&sources(0.2), &pool, 40, 5, 8, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_reproducible_in_isolation() {
        let pool = SentencePool::bundled();
        let src = sources(0.3);
        let d = build_mixture(&src, &pool, 20, 5, 99, 1).unwrap();
        let s = d.samples.iter().find(|s| s.task == "ocr").unwrap();
        let again = make_sample(&src[1], &pool, 5, s.seed).unwrap();
        assert_eq!(&again, s);
    }

    #[test]
    fn outputs_stay_in_alphabet() {
        let tok = Tokenizer::new(super::super::tokenizer::DEFAULT_ALPHABET, &["asr", "ocr", "typo"]).unwrap();
        let pool = SentencePool::bundled();
        let d = build_mixture(&sources(0.5), &pool, 200, 5, 1, 1).unwrap();
        for s in &d.samples {
            s.check_alphabet(&tok).unwrap();
            assert!(s.hypotheses.iter().all(|h| !h.contains('<')));
        }
    }

    #[test]
    fn targets_uniform_over_pool_chi_square() {
        let pool = SentencePool::new((0..20).map(|i| format!("sentence {i}")).collect()).unwrap();
        let d = build_mixture(&sources(0.1)[..1], &pool, 10_000, 1, 5, 1).unwrap();
        let mut counts = vec![0f64; 20];
        for s in &d.samples {
            let i = pool.sentences().iter().position(|p| *p == s.target).unwrap();
            counts[i] += 1.0;
        }
        let expected = 10_000.0 / 20.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // χ²(19) critical value at α = 0.01
        assert!(chi2 < 36.191, "{chi2}");
    }

    #[test]
    fn jsonl_round_trip_and_field_order() {
        let pool = SentencePool::bundled();
        let d = build_mixture(&sources(0.2), &pool, 3, 2, 1, 1).unwrap();
        let text = d.to_jsonl().unwrap();
        let first = text.lines().next().unwrap();
        let (t, h, g, s) = (
            first.find("\"task\"").unwrap(),
            first.find("\"hypotheses\"").unwrap(),
            first.find("\"target\"").unwrap(),
            first.find("\"seed\"").unwrap(),
        );
        assert!(t < h && h < g && g < s);
        assert_eq!(MixtureDataset::parse(&text).unwrap(), d);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = r#"{"task":"asr","hypotheses":["a"],"target":"a","seed":1}"#;
        let text = format!("{good}\n{{not json\n");
        match MixtureDataset::parse(&text) {
            Err(NekoError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let empty_hyps = r#"{"task":"asr","hypotheses":[],"target":"a","seed":1}"#;
        assert!(matches!(MixtureDataset::parse(empty_hyps), Err(NekoError::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_pool_or_tasks_error() {
        let pool = SentencePool::bundled();
        assert!(build_mixture(&[], &pool, 3, 2, 1, 1).is_err());
    }
}
