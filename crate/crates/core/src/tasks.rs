//! Task set, task-to-expert mapping and prompt construction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::tokenizer::{Tokenizer, HYP, OUT};
use crate::error::{invalid, NekoError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskId {
    pub name: String,
    pub id: usize,
}

/// Ordered task set with ids `0..m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TaskRegistry {
    tasks: Vec<TaskId>,
}

impl TaskRegistry {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(invalid("at least one task is required"));
        }
        let mut tasks: Vec<TaskId> = Vec::with_capacity(names.len());
        for (id, n) in names.iter().enumerate() {
            let name = n.as_ref();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(invalid(format!("invalid task name {name:?}")));
            }
            if tasks.iter().any(|t| t.name == name) {
                return Err(invalid(format!("duplicate task {name}")));
            }
            tasks.push(TaskId {
                name: name.to_string(),
                id,
            });
        }
        Ok(TaskRegistry { tasks })
    }

    pub fn get(&self, name: &str) -> Result<&TaskId> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| NekoError::UnknownTask(name.to_string()))
    }

    pub fn by_id(&self, id: usize) -> Result<&TaskId> {
        self.tasks.get(id).ok_or_else(|| NekoError::UnknownTask(format!("#{id}")))
    }

    pub fn tasks(&self) -> &[TaskId] {
        &self.tasks
    }

    pub fn names(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

impl TryFrom<Vec<String>> for TaskRegistry {
    type Error = NekoError;

    fn try_from(v: Vec<String>) -> Result<Self> {
        TaskRegistry::new(&v)
    }
}

impl From<TaskRegistry> for Vec<String> {
    fn from(r: TaskRegistry) -> Self {
        r.tasks.into_iter().map(|t| t.name).collect()
    }
}

/// Fixed task-to-expert assignment. Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertMap {
    seed: u64,
    n_experts: usize,
    experts: Vec<usize>,
}

impl ExpertMap {
    /// Rebuilds a stored map after checking its ranges.
    pub fn from_parts(seed: u64, n_experts: usize, experts: Vec<usize>) -> Result<Self> {
        if n_experts < 2 {
            return Err(invalid("an expert map needs at least 2 experts"));
        }
        if let Some(&e) = experts.iter().find(|&&e| e >= n_experts) {
            return Err(invalid(format!("expert index {e} out of range for {n_experts} experts")));
        }
        Ok(ExpertMap {
            seed,
            n_experts,
            experts,
        })
    }

    pub fn expert(&self, task: &TaskId) -> Result<usize> {
        self.experts
            .get(task.id)
            .copied()
            .ok_or_else(|| NekoError::UnknownTask(task.name.clone()))
    }

    pub fn experts(&self) -> &[usize] {
        &self.experts
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn is_injective(&self) -> bool {
        let mut seen = vec![false; self.n_experts];
        self.experts.iter().all(|&e| !std::mem::replace(&mut seen[e], true))
    }
}

/// Task `i` gets position `i mod n` of a seeded permutation of the experts:
/// injective when `m ≤ n`, round-robin sharing otherwise.
pub fn build_expert_map(tasks: &[TaskId], n_experts: usize, seed: u64) -> Result<ExpertMap> {
    if n_experts < 2 {
        return Err(invalid(format!("n_experts must be at least 2, got {n_experts}")));
    }
    let mut perm: Vec<usize> = (0..n_experts).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut experts = vec![0; tasks.len()];
    for t in tasks {
        if t.id >= tasks.len() {
            return Err(invalid(format!("task ids must be contiguous, found {}", t.id)));
        }
        experts[t.id] = perm[t.id % n_experts];
    }
    ExpertMap::from_parts(seed, n_experts, experts)
}

/// Prompt pieces for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub task_tag: String,
    pub instruction: String,
    pub hyp_sep: String,
    pub target_sep: String,
}

pub const INSTRUCTION: &str = "correct:";

impl PromptTemplate {
    pub fn for_task(task: &TaskId) -> Self {
        PromptTemplate {
            task_tag: format!("<{}>", task.name),
            instruction: INSTRUCTION.to_string(),
            hyp_sep: HYP.to_string(),
            target_sep: OUT.to_string(),
        }
    }

    /// All special tokens are present in `tok` and the instruction encodes.
    pub fn check(&self, tok: &Tokenizer) -> Result<()> {
        for s in [&self.task_tag, &self.hyp_sep, &self.target_sep] {
            if tok.special_id(s).is_none() {
                return Err(invalid(format!("token {s} is not in the vocabulary")));
            }
        }
        tok.encode(&self.instruction)?;
        Ok(())
    }

    /// Prompt as text, with specials spelled out.
    pub fn render(&self, hypotheses: &[&str], target: Option<&str>) -> String {
        let mut s = format!("{}{}", self.task_tag, self.instruction);
        for h in hypotheses {
            s.push_str(&self.hyp_sep);
            s.push_str(h);
        }
        s.push_str(&self.target_sep);
        if let Some(t) = target {
            s.push_str(t);
            s.push_str(crate::corpus::tokenizer::EOS);
        }
        s
    }
}

/// Token ids with a per-token flag marking the positions that carry loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of positions that carry loss.
    pub fn n_target(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// `[tag] correct: [hyp] h1 [hyp] h2 ... [out] target [eos]`. Without a
/// target the sequence stops after `[out]` and the mask is all false.
pub fn format_prompt<S: AsRef<str>>(
    tok: &Tokenizer,
    task: &TaskId,
    hypotheses: &[S],
    target: Option<&str>,
    max_hypotheses: usize,
) -> Result<Prompt> {
    if hypotheses.is_empty() {
        return Err(invalid("at least one hypothesis is required"));
    }
    if hypotheses.len() > max_hypotheses {
        return Err(invalid(format!(
            "{} hypotheses exceed the configured n-best of {max_hypotheses}",
            hypotheses.len()
        )));
    }
    let tag = tok
        .task_tag(&task.name)
        .ok_or_else(|| NekoError::UnknownTask(task.name.clone()))?;
    let mut tokens = vec![tag];
    tokens.extend(tok.encode(INSTRUCTION)?);
    for h in hypotheses {
        tokens.push(tok.hyp_sep());
        tokens.extend(tok.encode(h.as_ref())?);
    }
    tokens.push(tok.out_sep());
    let mut loss_mask = vec![false; tokens.len()];
    if let Some(t) = target {
        let ids = tok.encode(t)?;
        loss_mask.resize(tokens.len() + ids.len() + 1, true);
        tokens.extend(ids);
        tokens.push(tok.eos());
    }
    Ok(Prompt { tokens, loss_mask })
}

/// Text of the generated ids up to the first end-of-sequence token, with
/// special tokens removed.
pub fn parse_output(tok: &Tokenizer, generated: &[usize]) -> String {
    let end = generated.iter().position(|&t| t == tok.eos()).unwrap_or(generated.len());
    tok.decode_plain(&generated[..end])
}
