use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ModelConfig;
use crate::error::{NekoError, Result};
use crate::moe::{ExpertParams, MoeLayerParams, MoeVars, ExpertVars};
use crate::tensor::{Graph, ParamId, Scalar, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertIds {
    pub gate_proj: ParamId,
    pub up: ParamId,
    pub down: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIds {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub gate: ParamId,
    pub experts: Vec<ExpertIds>,
}

/// Position of every named parameter in the flat parameter list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embed: ParamId,
    pub layers: Vec<LayerIds>,
    pub final_norm: ParamId,
    entries: Vec<(String, Vec<usize>, bool)>,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut entries: Vec<(String, Vec<usize>, bool)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, is_norm: bool| {
            entries.push((name, shape, is_norm));
            ParamId(entries.len() - 1)
        };
        let d = c.d_model;
        let embed = add("embed".into(), vec![c.vocab_size, d], false);
        let layers = (0..c.n_layers)
            .map(|l| {
                let p = format!("layers.{l}");
                LayerIds {
                    attn_norm: add(format!("{p}.attn_norm"), vec![d], true),
                    wq: add(format!("{p}.attn.wq"), vec![d, d], false),
                    wk: add(format!("{p}.attn.wk"), vec![d, d], false),
                    wv: add(format!("{p}.attn.wv"), vec![d, d], false),
                    wo: add(format!("{p}.attn.wo"), vec![d, d], false),
                    ffn_norm: add(format!("{p}.ffn_norm"), vec![d], true),
                    gate: add(format!("{p}.moe.gate"), vec![d, c.n_experts], false),
                    experts: (0..c.n_experts)
                        .map(|e| ExpertIds {
                            gate_proj: add(format!("{p}.moe.experts.{e}.gate_proj"), vec![d, c.d_ff], false),
                            up: add(format!("{p}.moe.experts.{e}.up"), vec![d, c.d_ff], false),
                            down: add(format!("{p}.moe.experts.{e}.down"), vec![c.d_ff, d], false),
                        })
                        .collect(),
                }
            })
            .collect();
        let final_norm = add("final_norm".into(), vec![d], true);
        Layout {
            embed,
            layers,
            final_norm,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].1
    }

    pub fn is_norm(&self, id: ParamId) -> bool {
        self.entries[id.0].2
    }
}

/// All trainable tensors of the model, in [`Layout`] order. The output
/// projection is tied to the token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams<S: Scalar> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub tensors: Vec<Tensor<S>>,
}

/// Parameters recorded as leaves of one graph.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn moe(&self, l: &LayerIds) -> MoeVars {
        MoeVars {
            gate: self.get(l.gate),
            experts: l
                .experts
                .iter()
                .map(|e| ExpertVars {
                    gate_proj: self.get(e.gate_proj),
                    up: self.get(e.up),
                    down: self.get(e.down),
                })
                .collect(),
        }
    }
}

/// Normal(0, 0.02²) truncated at ±3σ by rejection.
fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 3.0 {
            return z * INIT_STD;
        }
    }
}

impl<S: Scalar> TransformerParams<S> {
    /// Fresh parameters: matrices from a truncated Normal(0, 0.02²),
    /// normalization weights set to one. Deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .entries
            .iter()
            .map(|(_, shape, is_norm)| {
                if *is_norm {
                    Tensor::filled(shape.clone(), S::one())
                } else {
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| S::c(truncated_normal(&mut rng))).collect();
                    Tensor::new(shape.clone(), data).expect("layout shape")
                }
            })
            .collect();
        Ok(TransformerParams {
            config: config.clone(),
            layout,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<S>)>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if named.len() != layout.len() {
            return Err(NekoError::Format(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for (i, (name, t)) in named.into_iter().enumerate() {
            let id = ParamId(i);
            if name != layout.name(id) || t.shape() != layout.shape(id) {
                return Err(NekoError::Format(format!(
                    "tensor {i}: expected {} {:?}, found {name} {:?}",
                    layout.name(id),
                    layout.shape(id),
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(TransformerParams {
            config: config.clone(),
            layout,
            tensors,
        })
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        (0..self.tensors.len()).map(move |i| (self.layout.name(ParamId(i)), &self.tensors[i]))
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn bind(&self, g: &mut Graph<S>) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .enumerate()
                .map(|(i, t)| g.param(ParamId(i), t))
                .collect(),
        }
    }

    /// Copy of one layer's MoE parameters as a standalone struct.
    pub fn moe_layer(&self, layer: usize) -> MoeLayerParams<S> {
        let l = &self.layout.layers[layer];
        MoeLayerParams {
            gate: self.get(l.gate).clone(),
            experts: l
                .experts
                .iter()
                .map(|e| ExpertParams {
                    gate_proj: self.get(e.gate_proj).clone(),
                    up: self.get(e.up).clone(),
                    down: self.get(e.down).clone(),
                })
                .collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> TransformerParams<T> {
        TransformerParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
