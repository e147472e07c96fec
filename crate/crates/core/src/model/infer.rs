//! Graph-free incremental decoding with a key/value cache.
//!
//! Uses the same kernels, in the same order, as the differentiable forward
//! pass, so per-position logits agree with `forward_graph` in infer mode.

use super::forward::rope_table;
use super::TransformerParams;
use crate::error::{NekoError, Result};
use crate::moe::{select_experts, RoutingDecision, Route};
use crate::tensor::kernels::{self, gemm_nn, gemm_nt};
use crate::tensor::Scalar;

pub struct Decoder<'a, S: Scalar> {
    params: &'a TransformerParams<S>,
    rope: std::sync::Arc<kernels::RopeTable>,
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    len: usize,
}

/// Output of one decoding step.
pub struct StepOutput<S> {
    pub logits: Vec<S>,
    /// One decision per layer.
    pub routing: Vec<RoutingDecision>,
}

fn vec_mat<S: Scalar>(x: &[S], w: &[S], n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n];
    gemm_nn(x, w, &mut out, 1, x.len(), n);
    out
}

impl<'a, S: Scalar> Decoder<'a, S> {
    pub fn new(params: &'a TransformerParams<S>) -> Self {
        let n = params.config.n_layers;
        Decoder {
            params,
            rope: rope_table(&params.config),
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.len
    }

    /// Feeds one token at the next position; top-K routing throughout.
    pub fn step(&mut self, token: usize) -> Result<StepOutput<S>> {
        let p = self.params;
        let c = &p.config;
        if self.len >= c.max_seq_len {
            return Err(NekoError::SequenceTooLong {
                len: self.len + 1,
                max: c.max_seq_len,
            });
        }
        if token >= c.vocab_size {
            return Err(NekoError::UnknownToken(token));
        }
        let d = c.d_model;
        let hd = c.head_dim();
        let pos = self.len;
        let eps = S::c(c.rms_eps);
        let scale = S::c(1.0 / (hd as f64).sqrt());
        let embed = p.get(p.layout.embed).data();
        let mut h = embed[token * d..(token + 1) * d].to_vec();
        let mut routing = Vec::with_capacity(c.n_layers);
        let mut normed = vec![S::zero(); d];

        for (l, layer) in p.layout.layers.iter().enumerate() {
            kernels::rms_norm_row(&h, p.get(layer.attn_norm).data(), eps, &mut normed);
            let mut q = vec_mat(&normed, p.get(layer.wq).data(), d);
            let mut k = vec_mat(&normed, p.get(layer.wk).data(), d);
            let v = vec_mat(&normed, p.get(layer.wv).data(), d);
            kernels::rope_row(&mut q, &self.rope, pos, false);
            kernels::rope_row(&mut k, &self.rope, pos, false);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let n_ctx = pos + 1;
            let mut cat = vec![S::zero(); d];
            let mut scores = vec![S::zero(); n_ctx];
            for head in 0..c.n_heads {
                let off = head * hd;
                let qh = &q[off..off + hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &self.keys[l][j * d + off..j * d + off + hd];
                    *s = kernels::dot_seq(qh, kj) * scale;
                }
                kernels::softmax_row(&mut scores, None);
                let out = &mut cat[off..off + hd];
                for (j, &w) in scores.iter().enumerate() {
                    kernels::axpy(w, &self.values[l][j * d + off..j * d + off + hd], out);
                }
            }
            let att = vec_mat(&cat, p.get(layer.wo).data(), d);
            for (hi, a) in h.iter_mut().zip(&att) {
                *hi = *hi + *a;
            }

            kernels::rms_norm_row(&h, p.get(layer.ffn_norm).data(), eps, &mut normed);
            let n = c.n_experts;
            let mut gate = vec_mat(&normed, p.get(layer.gate).data(), n);
            let selected = select_experts(&gate, Route::TopK(c.top_k))?;
            let mut mask = vec![false; n];
            for &i in &selected {
                mask[i] = true;
            }
            kernels::softmax_row(&mut gate, Some(&mask));
            let mut y = vec![S::zero(); d];
            for e in 0..n {
                if !mask[e] {
                    continue;
                }
                let ex = &layer.experts[e];
                let mut a = vec_mat(&normed, p.get(ex.gate_proj).data(), c.d_ff);
                let b = vec_mat(&normed, p.get(ex.up).data(), c.d_ff);
                for (ai, &bi) in a.iter_mut().zip(&b) {
                    *ai = kernels::silu(*ai) * bi;
                }
                let o = vec_mat(&a, p.get(ex.down).data(), d);
                for (yi, &oi) in y.iter_mut().zip(&o) {
                    *yi = *yi + oi * gate[e];
                }
            }
            for (hi, yi) in h.iter_mut().zip(&y) {
                *hi = *hi + *yi;
            }
            routing.push(RoutingDecision {
                weights: selected.iter().map(|&i| gate[i].to_f64().unwrap()).collect(),
                indices: selected,
                task_forced: None,
            });
        }
        kernels::rms_norm_row(&h, p.get(p.layout.final_norm).data(), eps, &mut normed);
        let mut logits = vec![S::zero(); c.vocab_size];
        gemm_nt(&normed, embed, &mut logits, 1, d, c.vocab_size);
        self.len += 1;
        Ok(StepOutput { logits, routing })
    }
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt` until `eos`, `max_new` tokens, or the
/// context limit. The returned tokens exclude the prompt and include the
/// final `eos` when one was produced.
pub fn generate_greedy<S: Scalar>(
    params: &TransformerParams<S>,
    prompt: &[usize],
    eos: usize,
    max_new: usize,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(crate::error::invalid("empty prompt"));
    }
    let mut dec = Decoder::new(params);
    let mut last = None;
    for &tok in prompt {
        last = Some(dec.step(tok)?);
    }
    let mut out = Vec::new();
    let mut logits = last.expect("nonempty prompt").logits;
    while out.len() < max_new {
        let next = argmax(&logits);
        out.push(next);
        if next == eos || dec.position() >= params.config.max_seq_len {
            break;
        }
        logits = dec.step(next)?.logits;
    }
    Ok(out)
}
