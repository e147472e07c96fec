//! Dense tensors and a tape-based reverse-mode differentiation graph.

mod graph;
pub mod kernels;

pub use graph::{Graph, ParamId, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{NekoError, Result};

/// Storage precision of tensor elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Element type of a tensor: `f32` for training speed, `f64` for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// A dense row-major tensor with an optional accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(crate::error::invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(NekoError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); n],
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [S]> {
        self.grad.as_deref_mut()
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[S]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of rows when viewed as a matrix over the last dimension.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::c(v.to_f64().unwrap())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| T::c(v.to_f64().unwrap())).collect()),
        }
    }
}

/// Global L2 norm over every populated gradient.
pub fn global_grad_norm<S: Scalar>(params: &[Tensor<S>]) -> S {
    let mut sq = 0.0f64;
    for p in params {
        if let Some(g) = p.grad() {
            sq += g.iter().map(|v| {
                let v = v.to_f64().unwrap();
                v * v
            }).sum::<f64>();
        }
    }
    S::c(sq.sqrt())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_global_norm<S: Scalar>(params: &mut [Tensor<S>], max_norm: S) -> Result<S> {
    if !(max_norm > S::zero()) {
        return Err(crate::error::invalid("max_norm must be positive"));
    }
    let norm = global_grad_norm(params);
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                for v in g.iter_mut() {
                    *v = *v * scale;
                }
            }
        }
    }
    Ok(norm)
}

pub fn zero_grads<S: Scalar>(params: &mut [Tensor<S>]) {
    for p in params {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(g: Vec<f64>) -> Tensor<f64> {
        let mut t = Tensor::zeros(vec![g.len()]);
        t.accumulate_grad(&g);
        t
    }

    #[test]
    fn clip_below_threshold_is_noop() {
        let mut ps = vec![with_grad(vec![0.3, 0.4])];
        let n = clip_global_norm(&mut ps, 1.0).unwrap();
        assert!((n - 0.5).abs() < 1e-15);
        assert_eq!(ps[0].grad().unwrap(), &[0.3, 0.4]);
    }

    #[test]
    fn clip_three_four_five() {
        let mut ps = vec![with_grad(vec![3.0, 4.0])];
        let n = clip_global_norm(&mut ps, 1.0).unwrap();
        assert_eq!(n, 5.0);
        let g = ps[0].grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_multi_tensor_post_norm() {
        let mut ps = vec![
            with_grad(vec![1.0, -2.0, 0.5]),
            with_grad(vec![3.0]),
            with_grad(vec![-0.25, 2.5, 1.0, 1.5]),
        ];
        let pre = clip_global_norm(&mut ps, 2.0).unwrap();
        let post = global_grad_norm(&ps);
        assert!((post - pre.min(2.0)).abs() < 1e-9);
        let mut ps2 = vec![with_grad(vec![0.1]), with_grad(vec![0.2])];
        let pre2 = clip_global_norm(&mut ps2, 2.0).unwrap();
        assert!((global_grad_norm(&ps2) - pre2.min(2.0)).abs() < 1e-9);
    }

    #[test]
    fn clip_rejects_nonpositive_threshold() {
        let mut ps = vec![with_grad(vec![1.0])];
        assert!(clip_global_norm(&mut ps, 0.0).is_err());
    }

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    #[test]
    fn grad_accumulates_until_reset() {
        let mut t = Tensor::<f64>::zeros(vec![2]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}
