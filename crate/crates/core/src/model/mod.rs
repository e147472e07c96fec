//! Decoder-only transformer whose feed-forward blocks are MoE layers.

pub mod config;
pub mod forward;
pub mod infer;
pub mod params;

pub use config::ModelConfig;
pub use forward::{causal_attention, forward_graph, rope_table, AttentionOutput, ForwardOutput};
pub use infer::{argmax, generate_greedy, Decoder, StepOutput};
pub use params::{BoundParams, Layout, TransformerParams};

use crate::error::{invalid, Result};
use crate::moe::{Route, RoutingDecision};
use crate::tasks::{ExpertMap, TaskId};
use crate::tensor::{Graph, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Task-forced routing; a task is required.
    Train,
    /// Gate-only top-K routing; the task is ignored.
    Infer,
}

/// Source of the task-to-expert assignment used by train-mode routing.
pub trait ExpertLookup {
    fn expert_for(&self, task: &TaskId) -> Result<usize>;
}

impl ExpertLookup for ExpertMap {
    fn expert_for(&self, task: &TaskId) -> Result<usize> {
        self.expert(task)
    }
}

/// Routing every MoE layer uses for this call. Only train mode consults
/// `map`.
pub fn route_for(
    config: &ModelConfig,
    task: Option<&TaskId>,
    map: &dyn ExpertLookup,
    mode: Mode,
) -> Result<Route> {
    match mode {
        Mode::Infer => Ok(Route::TopK(config.top_k)),
        Mode::Train => {
            let task = task.ok_or_else(|| invalid("train mode needs a task"))?;
            Ok(Route::Task {
                expert: map.expert_for(task)?,
                weighting: config.task_weighting,
            })
        }
    }
}

/// Graph forward pass with mode-dependent routing.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    params: &TransformerParams<S>,
    bound: &BoundParams,
    tokens: &[usize],
    task: Option<&TaskId>,
    map: &dyn ExpertLookup,
    mode: Mode,
) -> Result<ForwardOutput> {
    let route = route_for(&params.config, task, map, mode)?;
    forward_graph(g, params, bound, tokens, route, false)
}

/// Logits `[T × vocab]` and per-layer routing, evaluated on a fresh graph.
pub fn forward_logits<S: Scalar>(
    params: &TransformerParams<S>,
    tokens: &[usize],
    task: Option<&TaskId>,
    map: &dyn ExpertLookup,
    mode: Mode,
) -> Result<(Tensor<S>, Vec<Vec<RoutingDecision>>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = forward(&mut g, params, &bound, tokens, task, map, mode)?;
    Ok((g.to_tensor(out.logits), out.routing))
}
