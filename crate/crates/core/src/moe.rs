//! Mixture-of-experts feed-forward layer: top-K gating, weighted expert
//! mixing and the task-forced training route.
//!
//! Inference routes each token to the K experts with the largest gate
//! logits and mixes their outputs with a softmax restricted to those K
//! logits. Training routes each token of a task to the task's mapped
//! expert plus the best remaining expert by gate logit; the pair is mixed
//! with a softmax restricted to the pair (see [`TaskWeighting`]).
//!
//! Ties between equal logits always go to the lower expert index.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{kernels, Graph, ParamId, Scalar, Tensor, Var};

/// How the two weights of the task-forced route are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskWeighting {
    /// Softmax over exactly the two selected logits; weights sum to one.
    #[default]
    Renormalized,
    /// Entries of the softmax over all expert logits, not renormalized.
    FullSoftmax,
}

/// Routing mode of one MoE layer invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// Gate-only top-K routing.
    TopK(usize),
    /// Mapped task expert plus the best other expert.
    Task { expert: usize, weighting: TaskWeighting },
}

/// Experts chosen for one token and their mixing weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    /// The task-mapped expert, when the task route was applied.
    pub task_forced: Option<usize>,
}

impl RoutingDecision {
    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Expert indices ordered by descending logit, ties to the lower index.
fn ranked<S: Scalar>(logits: &[S]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// The expert set a route selects for a row of gate logits.
pub fn select_experts<S: Scalar>(logits: &[S], route: Route) -> Result<Vec<usize>> {
    let n = logits.len();
    match route {
        Route::TopK(k) => {
            if k == 0 || k > n {
                return Err(invalid(format!("top_k {k} out of range 1..={n}")));
            }
            let mut order = ranked(logits);
            order.truncate(k);
            Ok(order)
        }
        Route::Task { expert, .. } => {
            if n < 2 {
                return Err(invalid("task routing needs at least two experts"));
            }
            if expert >= n {
                return Err(invalid(format!("task expert {expert} >= n_experts {n}")));
            }
            let companion = ranked(logits)
                .into_iter()
                .find(|&j| j != expert)
                .expect("n >= 2");
            Ok(vec![expert, companion])
        }
    }
}

/// Routing decision for one row of gate logits, weights computed in `f64`.
pub fn route_logits<S: Scalar>(logits: &[S], route: Route) -> Result<RoutingDecision> {
    let indices = select_experts(logits, route)?;
    let l: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap()).collect();
    let mut probs = l.clone();
    let (weights, task_forced) = match route {
        Route::TopK(_) => {
            let mask = selection_mask(l.len(), &indices);
            kernels::softmax_row(&mut probs, Some(&mask));
            (indices.iter().map(|&i| probs[i]).collect(), None)
        }
        Route::Task { expert, weighting } => {
            match weighting {
                TaskWeighting::Renormalized => {
                    let mask = selection_mask(l.len(), &indices);
                    kernels::softmax_row(&mut probs, Some(&mask));
                }
                TaskWeighting::FullSoftmax => {
                    kernels::softmax_row(&mut probs, None);
                }
            }
            (indices.iter().map(|&i| probs[i]).collect(), Some(expert))
        }
    };
    Ok(RoutingDecision {
        indices,
        weights,
        task_forced,
    })
}

fn selection_mask(n: usize, indices: &[usize]) -> Vec<bool> {
    let mut m = vec![false; n];
    for &i in indices {
        m[i] = true;
    }
    m
}

/// Top-K gating of a single token representation `x[d_model]` through
/// the gate matrix `gate[d_model × n_experts]`.
pub fn gate_topk<S: Scalar>(x: &[S], gate: &Tensor<S>, k: usize) -> Result<RoutingDecision> {
    let logits = gate_logits(x, gate)?;
    route_logits(&logits, Route::TopK(k))
}

fn gate_logits<S: Scalar>(x: &[S], gate: &Tensor<S>) -> Result<Vec<S>> {
    let shape = gate.shape();
    if shape.len() != 2 || shape[0] != x.len() {
        return Err(crate::NekoError::Shape {
            op: "gate",
            lhs: vec![x.len()],
            rhs: shape.to_vec(),
        });
    }
    let n = shape[1];
    let mut logits = vec![S::zero(); n];
    kernels::gemm_nn(x, gate.data(), &mut logits, 1, x.len(), n);
    Ok(logits)
}

/// Weights of one SwiGLU expert: `down(silu(x·gate_proj) ⊙ (x·up))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams<S: Scalar> {
    pub gate_proj: Tensor<S>,
    pub up: Tensor<S>,
    pub down: Tensor<S>,
}

/// Gate matrix plus the expert networks of one MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayerParams<S: Scalar> {
    pub gate: Tensor<S>,
    pub experts: Vec<ExpertParams<S>>,
}

impl<S: Scalar> MoeLayerParams<S> {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Records the layer's tensors as trainable leaves with consecutive ids
    /// starting at `first_id`, in the order gate, then per expert
    /// gate_proj, up, down.
    pub fn bind(&self, g: &mut Graph<S>, first_id: usize) -> MoeVars {
        let mut id = first_id;
        let mut next = |g: &mut Graph<S>, t: &Tensor<S>| {
            let v = g.param(ParamId(id), t);
            id += 1;
            v
        };
        let gate = next(g, &self.gate);
        let experts = self
            .experts
            .iter()
            .map(|e| ExpertVars {
                gate_proj: next(g, &e.gate_proj),
                up: next(g, &e.up),
                down: next(g, &e.down),
            })
            .collect();
        MoeVars { gate, experts }
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.gate];
        for e in &self.experts {
            out.extend([&e.gate_proj, &e.up, &e.down]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub gate_proj: Var,
    pub up: Var,
    pub down: Var,
}

/// Graph handles of an MoE layer's parameters.
#[derive(Debug, Clone)]
pub struct MoeVars {
    pub gate: Var,
    pub experts: Vec<ExpertVars>,
}

pub struct MoeOutput {
    pub y: Var,
    pub decisions: Vec<RoutingDecision>,
    /// Switch-style balance term `n · Σ_e f_e · P_e`, when requested.
    pub aux_loss: Option<Var>,
}

/// SwiGLU feed-forward network on the rows of `x`.
pub fn swiglu<S: Scalar>(g: &mut Graph<S>, x: Var, e: &ExpertVars) -> Result<Var> {
    let a = g.matmul(x, e.gate_proj)?;
    let a = g.silu(a);
    let b = g.matmul(x, e.up)?;
    let h = g.mul(a, b)?;
    g.matmul(h, e.down)
}

/// Runs an MoE layer over the rows of `x[T × d_model]`. Only selected
/// experts are evaluated, each on the rows routed to it.
pub fn moe_layer<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    p: &MoeVars,
    route: Route,
    with_aux: bool,
) -> Result<MoeOutput> {
    let n = p.experts.len();
    let logits = g.matmul(x, p.gate)?;
    let t = g.shape(x)[0];
    let mut selections = Vec::with_capacity(t);
    let mut mask = vec![false; t * n];
    {
        let lv = g.value(logits);
        for r in 0..t {
            let sel = select_experts(&lv[r * n..(r + 1) * n], route)?;
            for &i in &sel {
                mask[r * n + i] = true;
            }
            selections.push(sel);
        }
    }
    let weights = match route {
        Route::Task {
            weighting: TaskWeighting::FullSoftmax,
            ..
        } => g.softmax(logits, None)?,
        _ => g.softmax(logits, Some(&mask))?,
    };
    let task_forced = match route {
        Route::Task { expert, .. } => Some(expert),
        Route::TopK(_) => None,
    };
    let decisions = {
        let wv = g.value(weights);
        selections
            .iter()
            .enumerate()
            .map(|(r, sel)| RoutingDecision {
                indices: sel.clone(),
                weights: sel.iter().map(|&i| wv[r * n + i].to_f64().unwrap()).collect(),
                task_forced,
            })
            .collect::<Vec<_>>()
    };

    let mut y: Option<Var> = None;
    for (e, ev) in p.experts.iter().enumerate() {
        let rows: Vec<usize> = (0..t).filter(|&r| mask[r * n + e]).collect();
        if rows.is_empty() {
            continue;
        }
        let xe = g.gather_rows(x, &rows)?;
        let he = swiglu(g, xe, ev)?;
        let we = g.gather_col(weights, &rows, e)?;
        let ye = g.row_scale(he, we)?;
        let contrib = g.scatter_rows(ye, &rows, t)?;
        y = Some(match y {
            None => contrib,
            Some(acc) => g.add(acc, contrib)?,
        });
    }
    let y = y.expect("every token selects at least one expert");

    let aux_loss = if with_aux {
        let k_total: usize = selections.iter().map(Vec::len).sum();
        let mut frac = vec![S::zero(); n];
        for sel in &selections {
            for &i in sel {
                frac[i] = frac[i] + S::one();
            }
        }
        for f in &mut frac {
            *f = *f / S::from_usize(k_total).unwrap();
        }
        let probs = g.softmax(logits, None)?;
        let mean_row = g.input(vec![1, t], vec![S::one() / S::from_usize(t).unwrap(); t])?;
        let p_mean = g.matmul(mean_row, probs)?;
        let f = g.input(vec![1, n], frac)?;
        let prod = g.mul(p_mean, f)?;
        let s = g.sum(prod);
        Some(g.scale(s, S::from_usize(n).unwrap()))
    } else {
        None
    };

    Ok(MoeOutput {
        y,
        decisions,
        aux_loss,
    })
}

fn single_token<S: Scalar>(
    x: &Tensor<S>,
    params: &MoeLayerParams<S>,
    route: Route,
) -> Result<(Tensor<S>, RoutingDecision)> {
    let d = x.len();
    let mut g = Graph::new();
    let xv = g.input(vec![1, d], x.data().to_vec())?;
    let vars = params.bind(&mut g, 0);
    let out = moe_layer(&mut g, xv, &vars, route, false)?;
    let y = Tensor::new(vec![d], g.value(out.y).to_vec())?;
    Ok((y, out.decisions.into_iter().next().expect("one token")))
}

/// Inference-mode mixture for one token: top-`k` gate selection.
pub fn moe_forward_infer<S: Scalar>(
    x: &Tensor<S>,
    params: &MoeLayerParams<S>,
    k: usize,
) -> Result<(Tensor<S>, RoutingDecision)> {
    single_token(x, params, Route::TopK(k))
}

/// Training-mode mixture for one token: the task expert plus the best
/// remaining expert.
pub fn moe_forward_task<S: Scalar>(
    x: &Tensor<S>,
    params: &MoeLayerParams<S>,
    task_expert: usize,
) -> Result<(Tensor<S>, RoutingDecision)> {
    single_token(
        x,
        params,
        Route::Task {
            expert: task_expert,
            weighting: TaskWeighting::Renormalized,
        },
    )
}

#[derive(Debug, Clone, Default)]
struct TaskCounts {
    name: String,
    routings: u64,
    selections: Vec<u64>,
    weight_sums: Vec<f64>,
}

/// Accumulates routing decisions per task.
#[derive(Debug, Clone)]
pub struct RouteStatsCollector {
    n_experts: usize,
    tasks: Vec<TaskCounts>,
}

impl RouteStatsCollector {
    pub fn new(n_experts: usize) -> Self {
        RouteStatsCollector {
            n_experts,
            tasks: Vec::new(),
        }
    }

    pub fn record(&mut self, task: &str, decision: &RoutingDecision) {
        let n = self.n_experts;
        let pos = match self.tasks.iter().position(|t| t.name == task) {
            Some(p) => p,
            None => {
                self.tasks.push(TaskCounts {
                    name: task.to_string(),
                    routings: 0,
                    selections: vec![0; n],
                    weight_sums: vec![0.0; n],
                });
                self.tasks.len() - 1
            }
        };
        let t = &mut self.tasks[pos];
        t.routings += 1;
        for (&i, &w) in decision.indices.iter().zip(&decision.weights) {
            t.selections[i] += 1;
            t.weight_sums[i] += w;
        }
    }

    pub fn finish(self) -> Result<UtilizationReport> {
        if self.tasks.is_empty() {
            return Err(invalid("no routing decisions recorded"));
        }
        let n = self.n_experts;
        let mut total = vec![0u64; n];
        let tasks = self
            .tasks
            .into_iter()
            .map(|t| {
                for (acc, &c) in total.iter_mut().zip(&t.selections) {
                    *acc += c;
                }
                let fraction = t
                    .selections
                    .iter()
                    .map(|&c| c as f64 / t.routings as f64)
                    .collect();
                let mean_weight = t
                    .selections
                    .iter()
                    .zip(&t.weight_sums)
                    .map(|(&c, &w)| if c == 0 { 0.0 } else { w / c as f64 })
                    .collect();
                let sel_total: u64 = t.selections.iter().sum();
                let entropy = t
                    .selections
                    .iter()
                    .filter(|&&c| c > 0)
                    .map(|&c| {
                        let q = c as f64 / sel_total as f64;
                        -q * q.ln()
                    })
                    .sum();
                TaskUtilization {
                    task: t.name,
                    routings: t.routings,
                    fraction,
                    mean_weight,
                    entropy,
                }
            })
            .collect();
        let grand: u64 = total.iter().sum();
        Ok(UtilizationReport {
            n_experts: n,
            tasks,
            expert_load: total.iter().map(|&c| c as f64 / grand as f64).collect(),
        })
    }
}

/// Aggregate routing statistics for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskUtilization {
    pub task: String,
    /// Number of token routings observed (one per token per layer).
    pub routings: u64,
    /// Per expert: fraction of routings that selected it. Sums to K.
    pub fraction: Vec<f64>,
    /// Per expert: mean mixing weight over the routings that selected it.
    pub mean_weight: Vec<f64>,
    /// Entropy (nats) of the normalized selection distribution.
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub n_experts: usize,
    pub tasks: Vec<TaskUtilization>,
    /// Share of all selections that went to each expert.
    pub expert_load: Vec<f64>,
}

impl UtilizationReport {
    pub fn task(&self, name: &str) -> Option<&TaskUtilization> {
        self.tasks.iter().find(|t| t.task == name)
    }

    /// `task,expert,fraction,mean_weight` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,expert,fraction,mean_weight\n");
        for t in &self.tasks {
            for e in 0..self.n_experts {
                let _ = writeln!(out, "{},{},{:.6},{:.6}", t.task, e, t.fraction[e], t.mean_weight[e]);
            }
        }
        out
    }
}

/// Convenience over a finite stream of `(task, decision)` pairs.
pub fn collect_route_stats<'a, I>(n_experts: usize, decisions: I) -> Result<UtilizationReport>
where
    I: IntoIterator<Item = (&'a str, &'a RoutingDecision)>,
{
    let mut c = RouteStatsCollector::new(n_experts);
    for (task, d) in decisions {
        c.record(task, d);
    }
    c.finish()
}
