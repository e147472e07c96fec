//! Word error rate, corpus BLEU and corpus-level evaluation of a corrector
//! against the uncorrected first hypothesis.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use crate::corpus::{MixtureDataset, Tokenizer};
use crate::error::{invalid, Result};
use crate::model::{forward_logits, generate_greedy, ExpertLookup, Mode, TransformerParams};
use crate::moe::{RouteStatsCollector, UtilizationReport};
use crate::tasks::{format_prompt, parse_output, TaskId, TaskRegistry};
use crate::tensor::Scalar;

/// Lowercases, removes ASCII punctuation and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(String::from).collect()
}

/// Edit operation counts of one alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Errors per reference word; 0 for an empty reference.
    pub fn wer(&self) -> f64 {
        if self.ref_words == 0 {
            0.0
        } else {
            self.errors() as f64 / self.ref_words as f64
        }
    }
}

impl Add for WerBreakdown {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        WerBreakdown {
            substitutions: self.substitutions + o.substitutions,
            deletions: self.deletions + o.deletions,
            insertions: self.insertions + o.insertions,
            ref_words: self.ref_words + o.ref_words,
        }
    }
}

impl AddAssign for WerBreakdown {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Unit-cost Levenshtein alignment of two token sequences. Among the
/// minimum-cost alignments the one with the fewest insertions plus
/// deletions is taken, which makes the breakdown unique; the backtrace
/// prefers substitution (or match), then deletion, then insertion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> WerBreakdown {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    // (edits, indels), compared lexicographically
    let mut d = vec![(0usize, 0usize); (n + 1) * w];
    for i in 0..=n {
        d[i * w] = (i, i);
    }
    for j in 0..=m {
        d[j] = (j, j);
    }
    let step = |c: (usize, usize), e: usize, g: usize| (c.0 + e, c.1 + g);
    for i in 1..=n {
        for j in 1..=m {
            let sub = step(d[(i - 1) * w + j - 1], usize::from(reference[i - 1] != hypothesis[j - 1]), 0);
            let del = step(d[(i - 1) * w + j], 1, 1);
            let ins = step(d[i * w + j - 1], 1, 1);
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut out = WerBreakdown {
        ref_words: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let diff = reference[i - 1] != hypothesis[j - 1];
            if step(d[(i - 1) * w + j - 1], usize::from(diff), 0) == here {
                out.substitutions += usize::from(diff);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && step(d[(i - 1) * w + j], 1, 1) == here {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    out
}

/// Word-level error breakdown of `hypothesis` against `reference`, after
/// normalization.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let r = normalize_words(reference);
    if r.is_empty() {
        return Err(invalid("reference has no words"));
    }
    Ok(align(&r, &normalize_words(hypothesis)))
}

fn ngram_counts<'a>(words: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU on a 0..100 scale over whitespace tokens: clipped n-gram
/// precisions for n = 1..=max_n, geometric mean, brevity penalty. A zero
/// match count for n ≥ 2 is smoothed to 1 / (total + 1).
pub fn bleu<R: AsRef<str>, H: AsRef<str>>(references: &[R], hypotheses: &[H], max_n: usize) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(invalid(format!(
            "{} references but {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    if references.is_empty() || max_n == 0 {
        return Err(invalid("bleu needs at least one sentence pair and max_n ≥ 1"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut ref_len, mut hyp_len) = (0usize, 0usize);
    for (r, h) in references.iter().zip(hypotheses) {
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        ref_len += r.len();
        hyp_len += h.len();
        for n in 1..=max_n {
            let rc = ngram_counts(&r, n);
            for (g, c) in ngram_counts(&h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if matches[n] == 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok((100.0 * bp * (log_sum / max_n as f64).exp()).clamp(0.0, 100.0))
}

/// Anything that maps a task and its n-best list to one corrected text.
pub trait Corrector: Sync {
    fn correct(&self, task: &TaskId, hypotheses: &[String]) -> Result<String>;
}

/// Greedy decoding with a trained model. Routing is top-K from the gate;
/// the task only selects the prompt tag.
pub struct ModelCorrector<'a, S: Scalar> {
    pub params: &'a TransformerParams<S>,
    pub tokenizer: &'a Tokenizer,
    pub n_best: usize,
    pub max_new_tokens: usize,
}

impl<S: Scalar> Corrector for ModelCorrector<'_, S> {
    fn correct(&self, task: &TaskId, hypotheses: &[String]) -> Result<String> {
        let tok = self.tokenizer;
        let prompt = format_prompt(tok, task, hypotheses, None, self.n_best)?;
        let room = self.params.config.max_seq_len.saturating_sub(prompt.len());
        if room == 0 {
            return Err(crate::error::NekoError::SequenceTooLong {
                len: prompt.len() + 1,
                max: self.params.config.max_seq_len,
            });
        }
        let out = generate_greedy(self.params, &prompt.tokens, tok.eos(), self.max_new_tokens.min(room))?;
        Ok(parse_output(tok, &out))
    }
}

/// Emits the first hypothesis unchanged.
pub struct IdentityCorrector;

impl Corrector for IdentityCorrector {
    fn correct(&self, _task: &TaskId, hypotheses: &[String]) -> Result<String> {
        Ok(hypotheses.first().cloned().unwrap_or_default())
    }
}

/// Scores of one task, or of all tasks together.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub task: String,
    pub n_samples: usize,
    pub baseline: WerBreakdown,
    pub corrected: WerBreakdown,
    pub baseline_bleu: f64,
    pub corrected_bleu: f64,
}

impl EvalRow {
    /// `(baseline − corrected) / baseline` in percent; 0 when the baseline is 0.
    pub fn relative_reduction_pct(&self) -> f64 {
        let b = self.baseline.wer();
        if b > 0.0 {
            100.0 * (b - self.corrected.wer()) / b
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tasks: Vec<EvalRow>,
    pub overall: EvalRow,
    /// Per-sample outputs, in dataset order.
    pub outputs: Vec<String>,
}

impl EvalReport {
    pub fn task(&self, name: &str) -> Option<&EvalRow> {
        self.tasks.iter().find(|r| r.task == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "task,n_samples,baseline_wer,corrected_wer,relative_reduction_pct,baseline_bleu,corrected_bleu\n",
        );
        for r in self.tasks.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.task,
                r.n_samples,
                r.baseline.wer(),
                r.corrected.wer(),
                r.relative_reduction_pct(),
                r.baseline_bleu,
                r.corrected_bleu
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<8} {:>7} {:>9} {:>9} {:>8} {:>9} {:>9}\n",
            "task", "samples", "base WER", "corr WER", "rel %", "base BLEU", "corr BLEU"
        );
        for r in self.tasks.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(
                s,
                "{:<8} {:>7} {:>9.4} {:>9.4} {:>8.2} {:>9.2} {:>9.2}",
                r.task,
                r.n_samples,
                r.baseline.wer(),
                r.corrected.wer(),
                r.relative_reduction_pct(),
                r.baseline_bleu,
                r.corrected_bleu
            );
        }
        s
    }
}

fn row(task: &str, idx: &[usize], data: &MixtureDataset, outputs: &[String], per: &[(WerBreakdown, WerBreakdown)]) -> Result<EvalRow> {
    let mut base = WerBreakdown::default();
    let mut corr = WerBreakdown::default();
    for &i in idx {
        base += per[i].0;
        corr += per[i].1;
    }
    let refs: Vec<&str> = idx.iter().map(|&i| data.samples[i].target.as_str()).collect();
    let firsts: Vec<&str> = idx.iter().map(|&i| data.samples[i].hypotheses[0].as_str()).collect();
    let outs: Vec<&str> = idx.iter().map(|&i| outputs[i].as_str()).collect();
    Ok(EvalRow {
        task: task.to_string(),
        n_samples: idx.len(),
        baseline: base,
        corrected: corr,
        baseline_bleu: bleu(&refs, &firsts, 4)?,
        corrected_bleu: bleu(&refs, &outs, 4)?,
    })
}

/// Runs `corrector` on every sample and compares against the first
/// hypothesis. WER aggregates by summing error and reference counts.
/// Samples are spread over `threads` workers; results do not depend on it.
pub fn evaluate(corrector: &dyn Corrector, tasks: &TaskRegistry, data: &MixtureDataset, threads: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let ids: Vec<TaskId> = data
        .samples
        .iter()
        .map(|s| tasks.get(&s.task).cloned())
        .collect::<Result<_>>()?;
    let work = |range: std::ops::Range<usize>| -> Result<Vec<String>> {
        range.map(|i| corrector.correct(&ids[i], &data.samples[i].hypotheses)).collect()
    };
    let n = data.len();
    let threads = threads.clamp(1, n);
    let outputs: Vec<String> = if threads == 1 {
        work(0..n)?
    } else {
        let chunk = n.div_ceil(threads);
        let parts: Vec<Result<Vec<String>>> = std::thread::scope(|scope| {
            let hs: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|start| {
                    let work = &work;
                    scope.spawn(move || work(start..(start + chunk).min(n)))
                })
                .collect();
            hs.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(n);
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let per: Vec<(WerBreakdown, WerBreakdown)> = data
        .samples
        .iter()
        .zip(&outputs)
        .map(|(s, o)| Ok((wer(&s.target, &s.hypotheses[0])?, wer(&s.target, o)?)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for t in tasks.tasks() {
        let idx: Vec<usize> = (0..n).filter(|&i| data.samples[i].task == t.name).collect();
        if !idx.is_empty() {
            rows.push(row(&t.name, &idx, data, &outputs, &per)?);
        }
    }
    let all: Vec<usize> = (0..n).collect();
    let overall = row("overall", &all, data, &outputs, &per)?;
    Ok(EvalReport {
        tasks: rows,
        overall,
        outputs,
    })
}

struct NoMap;

impl ExpertLookup for NoMap {
    fn expert_for(&self, task: &TaskId) -> Result<usize> {
        Err(invalid(format!("inference routing consulted the expert map for {}", task.name)))
    }
}

/// Inference-mode (top-K) routing statistics per task, over every layer and
/// position of each sample's teacher-forced sequence: the prompt followed
/// by the reference correction.
pub fn route_statistics<S: Scalar>(
    params: &TransformerParams<S>,
    tokenizer: &Tokenizer,
    tasks: &TaskRegistry,
    data: &MixtureDataset,
    n_best: usize,
) -> Result<UtilizationReport> {
    let mut stats = RouteStatsCollector::new(params.config.n_experts);
    for s in &data.samples {
        let task = tasks.get(&s.task)?;
        let prompt = format_prompt(tokenizer, task, &s.hypotheses, Some(&s.target), n_best)?;
        let input = &prompt.tokens[..prompt.len() - 1];
        if input.len() > params.config.max_seq_len {
            continue;
        }
        let (_, routing) = forward_logits(params, input, Some(task), &NoMap, Mode::Infer)?;
        for d in routing.iter().flatten() {
            stats.record(&s.task, d);
        }
    }
    stats.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_examples() {
        assert_eq!(wer("a b c", "a b c").unwrap().wer(), 0.0);
        let w = wer("a b c", "a x c").unwrap();
        assert_eq!((w.substitutions, w.deletions, w.insertions), (1, 0, 0));
        assert!((w.wer() - 1.0 / 3.0).abs() < 1e-15);
        assert!(wer("  ...  ", "a").is_err());
        assert_eq!(wer("Hello, World!", "hello world").unwrap().errors(), 0);
        let w = wer("a", "x y z").unwrap();
        assert!(w.wer() > 1.0);
    }

    #[test]
    fn tie_break_prefers_substitution_then_deletion() {
        let w = align(&["a", "b"], &["c"]);
        assert_eq!((w.substitutions, w.deletions, w.insertions), (1, 1, 0));
        let w = align(&["a"], &["b", "c"]);
        assert_eq!((w.substitutions, w.deletions, w.insertions), (1, 0, 1));
    }

    #[test]
    fn bleu_edge_cases() {
        let refs = ["the cat sat on the mat", "a dog ran"];
        assert!((bleu(&refs, &refs, 4).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(bleu(&refs, &["x y z", "q"], 4).unwrap(), 0.0);
        assert!(bleu(&refs, &["x"], 4).is_err());
    }

    #[test]
    fn evaluate_identity_and_oracle() {
        struct Oracle(Vec<(Vec<String>, String)>);
        impl Corrector for Oracle {
            fn correct(&self, _t: &TaskId, h: &[String]) -> Result<String> {
                Ok(self.0.iter().find(|(hs, _)| hs == h).unwrap().1.clone())
            }
        }
        let tasks = TaskRegistry::new(&["asr", "ocr"]).unwrap();
        let text = r#"{"task":"asr","hypotheses":["the cat sat","x"],"target":"the cat sat down","seed":1}
{"task":"ocr","hypotheses":["a dgo ran"],"target":"a dog ran","seed":2}
{"task":"asr","hypotheses":["one two three"],"target":"one too three","seed":3}"#;
        let data = MixtureDataset::parse(text).unwrap();
        let id = evaluate(&IdentityCorrector, &tasks, &data, 1).unwrap();
        assert_eq!(id.overall.corrected, id.overall.baseline);
        assert_eq!(id.overall.relative_reduction_pct(), 0.0);
        assert_eq!(id.overall.baseline.errors(), 3);
        assert_eq!(id.overall.baseline.ref_words, 10);
        let oracle = Oracle(data.samples.iter().map(|s| (s.hypotheses.clone(), s.target.clone())).collect());
        let r = evaluate(&oracle, &tasks, &data, 2).unwrap();
        assert_eq!(r.overall.corrected.wer(), 0.0);
        assert!((r.overall.relative_reduction_pct() - 100.0).abs() < 1e-12);
        assert_eq!(r.task("asr").unwrap().n_samples, 2);
        let csv = r.to_csv();
        assert!(csv.starts_with("task,n_samples,baseline_wer,corrected_wer,relative_reduction_pct,baseline_bleu,corrected_bleu\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
