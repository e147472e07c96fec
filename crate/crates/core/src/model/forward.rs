use std::sync::Arc;

use super::params::{BoundParams, LayerIds};
use super::{ModelConfig, TransformerParams};
use crate::error::{NekoError, Result};
use crate::moe::{moe_layer, RoutingDecision, Route};
use crate::tensor::kernels::RopeTable;
use crate::tensor::{Graph, Scalar, Var};

pub struct AttentionOutput {
    pub out: Var,
    /// Per head attention probabilities `[T × T]`.
    pub probs: Vec<Var>,
}

/// Multi-head causal self-attention with rotary position encoding on the
/// (already normalized) rows of `x`.
pub fn causal_attention<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    bound: &BoundParams,
    layer: &LayerIds,
    config: &ModelConfig,
    positions: &[usize],
    rope: &Arc<RopeTable>,
) -> Result<AttentionOutput> {
    let t = g.shape(x)[0];
    if t > config.max_seq_len {
        return Err(NekoError::SequenceTooLong {
            len: t,
            max: config.max_seq_len,
        });
    }
    let hd = config.head_dim();
    let q = g.matmul(x, bound.get(layer.wq))?;
    let q = g.rope(q, positions, rope.clone())?;
    let k = g.matmul(x, bound.get(layer.wk))?;
    let k = g.rope(k, positions, rope.clone())?;
    let v = g.matmul(x, bound.get(layer.wv))?;
    let mut mask = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            mask[i * t + j] = true;
        }
    }
    let scale = S::c(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(config.n_heads);
    let mut probs = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let qh = g.slice_cols(q, h * hd, hd)?;
        let kh = g.slice_cols(k, h * hd, hd)?;
        let vh = g.slice_cols(v, h * hd, hd)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let p = g.softmax(scores, Some(&mask))?;
        heads.push(g.matmul(p, vh)?);
        probs.push(p);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let out = g.matmul(cat, bound.get(layer.wo))?;
    Ok(AttentionOutput { out, probs })
}

pub struct ForwardOutput {
    /// Next-token logits `[T × vocab]`.
    pub logits: Var,
    /// One entry per layer, each with one decision per token.
    pub routing: Vec<Vec<RoutingDecision>>,
    /// Sum of the per-layer balance terms, when requested.
    pub aux_loss: Option<Var>,
    /// Per layer, per head attention probabilities.
    pub attention: Vec<Vec<Var>>,
}

/// Rotary table covering every position the model accepts.
pub fn rope_table(config: &ModelConfig) -> Arc<RopeTable> {
    Arc::new(RopeTable::new(config.head_dim(), config.rope_base, config.max_seq_len))
}

/// Pre-norm decoder stack over `tokens`, with every MoE layer using `route`.
pub fn forward_graph<S: Scalar>(
    g: &mut Graph<S>,
    params: &TransformerParams<S>,
    bound: &BoundParams,
    tokens: &[usize],
    route: Route,
    with_aux: bool,
) -> Result<ForwardOutput> {
    let config = &params.config;
    let t = tokens.len();
    if t == 0 {
        return Err(crate::error::invalid("empty token sequence"));
    }
    if t > config.max_seq_len {
        return Err(NekoError::SequenceTooLong {
            len: t,
            max: config.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&id| id >= config.vocab_size) {
        return Err(NekoError::UnknownToken(bad));
    }
    let rope = rope_table(config);
    let positions: Vec<usize> = (0..t).collect();
    let eps = S::c(config.rms_eps);
    let embed = bound.get(params.layout.embed);
    let mut h = g.gather_rows(embed, tokens)?;
    let mut routing = Vec::with_capacity(config.n_layers);
    let mut attention = Vec::with_capacity(config.n_layers);
    let mut aux: Option<Var> = None;
    for layer in &params.layout.layers {
        let a = g.rms_norm(h, bound.get(layer.attn_norm), eps)?;
        let att = causal_attention(g, a, bound, layer, config, &positions, &rope)?;
        h = g.add(h, att.out)?;
        attention.push(att.probs);
        let m = g.rms_norm(h, bound.get(layer.ffn_norm), eps)?;
        let moe = moe_layer(g, m, &bound.moe(layer), route, with_aux)?;
        h = g.add(h, moe.y)?;
        routing.push(moe.decisions);
        if let Some(l) = moe.aux_loss {
            aux = Some(match aux {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
    }
    let h = g.rms_norm(h, bound.get(params.layout.final_norm), eps)?;
    let logits = g.matmul_nt(h, embed)?;
    Ok(ForwardOutput {
        logits,
        routing,
        aux_loss: aux,
        attention,
    })
}
