use crate::error::{invalid, Result};
use crate::model::{forward_graph, ExpertLookup, TransformerParams};
use crate::moe::{Route, RoutingDecision};
use crate::tensor::{Graph, Scalar, Tensor};

use super::batch::EncodedSample;

/// Loss value and bookkeeping of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    /// Mean negative log-likelihood over all target tokens of the batch.
    pub nll: f64,
    /// Load-balancing term averaged over samples (0 when disabled).
    pub aux: f64,
    pub target_tokens: usize,
    pub input_tokens: usize,
    /// Selections per expert over all layers and input positions.
    pub expert_counts: Vec<u64>,
    /// Routings whose task expert was forced, and all routings.
    pub forced: u64,
    pub routings: u64,
}

struct SampleGraph {
    loss: crate::tensor::Var,
    nll: f64,
    aux: f64,
    routing: Vec<Vec<RoutingDecision>>,
}

/// Loss settings shared by every sample of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    /// Weight of the load-balancing term; 0 disables it.
    pub aux_coeff: f64,
    /// Task-forced routing; plain top-K when false.
    pub task_routing: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            aux_coeff: 0.0,
            task_routing: true,
        }
    }
}

/// Adds one sample's weighted training loss to `g`: `weight · CE` plus
/// `aux_coeff · weight_aux · balance` when the coefficient is positive.
#[allow(clippy::too_many_arguments)]
fn sample_loss<S: Scalar>(
    g: &mut Graph<S>,
    params: &TransformerParams<S>,
    bound: &crate::model::BoundParams,
    sample: &EncodedSample,
    map: &dyn ExpertLookup,
    weight: f64,
    aux: (f64, f64),
    task_routing: bool,
) -> Result<SampleGraph> {
    let route = if task_routing {
        Route::Task {
            expert: map.expert_for(&sample.task)?,
            weighting: params.config.task_weighting,
        }
    } else {
        Route::TopK(params.config.top_k)
    };
    let t = sample.input_len();
    let out = forward_graph(g, params, bound, &sample.tokens[..t], route, aux.0 > 0.0)?;
    let ce = g.cross_entropy(out.logits, &sample.tokens[1..], &sample.loss_mask[1..])?;
    let nll = g.value(ce)[0].to_f64().unwrap();
    let mut loss = g.scale(ce, S::c(weight));
    let mut aux_value = 0.0;
    if let Some(a) = out.aux_loss {
        aux_value = g.value(a)[0].to_f64().unwrap();
        let a = g.scale(a, S::c(aux.0 * aux.1));
        loss = g.add(loss, a)?;
    }
    Ok(SampleGraph {
        loss,
        nll,
        aux: aux_value,
        routing: out.routing,
    })
}

fn check_batch(samples: &[&EncodedSample]) -> Result<usize> {
    let n: usize = samples.iter().map(|s| s.n_target()).sum();
    if samples.is_empty() || n == 0 {
        return Err(invalid("batch has no target tokens"));
    }
    Ok(n)
}

/// Mean negative log-likelihood over the target tokens of `samples`, with
/// every sample routed to its task's expert. Evaluated on one graph.
pub fn nll_loss<S: Scalar>(
    params: &TransformerParams<S>,
    samples: &[&EncodedSample],
    map: &dyn ExpertLookup,
) -> Result<Tensor<S>> {
    let n = check_batch(samples)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let mut total = None;
    for s in samples {
        let w = s.n_target() as f64 / n as f64;
        let l = sample_loss(&mut g, params, &bound, s, map, w, (0.0, 0.0), true)?.loss;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    Ok(g.to_tensor(total.expect("nonempty batch")))
}

fn tally(stats: &mut BatchStats, routing: &[Vec<RoutingDecision>]) {
    for d in routing.iter().flatten() {
        stats.routings += 1;
        if d.task_forced.is_some_and(|e| d.indices.contains(&e)) {
            stats.forced += 1;
        }
        for &i in &d.indices {
            stats.expert_counts[i] += 1;
        }
    }
}

fn run_chunk<S: Scalar>(
    params: &TransformerParams<S>,
    samples: &[&EncodedSample],
    map: &(dyn ExpertLookup + Sync),
    n_target: usize,
    opts: LossOptions,
    n_batch: usize,
    sink: &mut [Tensor<S>],
) -> Result<BatchStats> {
    let mut stats = BatchStats {
        nll: 0.0,
        aux: 0.0,
        target_tokens: 0,
        input_tokens: 0,
        expert_counts: vec![0; params.config.n_experts],
        forced: 0,
        routings: 0,
    };
    for s in samples {
        let w = s.n_target() as f64 / n_target as f64;
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let out = sample_loss(
            &mut g,
            params,
            &bound,
            s,
            map,
            w,
            (opts.aux_coeff, 1.0 / n_batch as f64),
            opts.task_routing,
        )?;
        g.backward(out.loss)?;
        g.accumulate_param_grads(sink);
        stats.nll += w * out.nll;
        stats.aux += out.aux / n_batch as f64;
        stats.target_tokens += s.n_target();
        stats.input_tokens += s.input_len();
        tally(&mut stats, &out.routing);
    }
    Ok(stats)
}

/// Forward and backward over a batch, adding the gradient of the batch
/// loss into the parameters' gradient buffers. Samples are split into
/// `threads` contiguous chunks whose gradients are summed in chunk order,
/// so results depend on the thread count but not on scheduling.
pub fn batch_gradients<S: Scalar>(
    params: &mut TransformerParams<S>,
    samples: &[&EncodedSample],
    map: &(dyn ExpertLookup + Sync),
    opts: LossOptions,
    threads: usize,
) -> Result<BatchStats> {
    let n = check_batch(samples)?;
    let threads = threads.clamp(1, samples.len());
    let chunk = samples.len().div_ceil(threads);
    let shared: &TransformerParams<S> = params;
    let results: Vec<Result<(BatchStats, Vec<Tensor<S>>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|c| {
                scope.spawn(move || {
                    let mut sink: Vec<Tensor<S>> = shared.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
                    let st = run_chunk(shared, c, map, n, opts, samples.len(), &mut sink)?;
                    Ok((st, sink))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut total: Option<BatchStats> = None;
    for r in results {
        let (st, sink) = r?;
        for (p, s) in params.tensors.iter_mut().zip(&sink) {
            if let Some(g) = s.grad() {
                p.accumulate_grad(g);
            }
        }
        total = Some(match total {
            None => st,
            Some(mut acc) => {
                acc.nll += st.nll;
                acc.aux += st.aux;
                acc.target_tokens += st.target_tokens;
                acc.input_tokens += st.input_tokens;
                acc.forced += st.forced;
                acc.routings += st.routings;
                for (a, b) in acc.expert_counts.iter_mut().zip(&st.expert_counts) {
                    *a += b;
                }
                acc
            }
        });
    }
    Ok(total.expect("at least one chunk"))
}
