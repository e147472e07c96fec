use super::TrainConfig;
use crate::error::{invalid, NekoError, Result};
use crate::tensor::{Scalar, Tensor};

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[Tensor<S>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![S::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![S::zero(); p.len()]).collect(),
            t: 0,
        }
    }
}

/// One AdamW update. Weight decay is decoupled: each parameter is first
/// shrunk by `lr·wd·p`, then moved by the bias-corrected Adam step.
/// Tensors with `decay[i] == false` are not decayed. Tensors without a
/// gradient are treated as having a zero gradient.
pub fn adamw_step<S: Scalar>(
    params: &mut [Tensor<S>],
    state: &mut AdamState<S>,
    lr: f64,
    config: &TrainConfig,
    decay: &[bool],
) -> Result<()> {
    if state.m.len() != params.len() || decay.len() != params.len() {
        return Err(invalid(format!(
            "optimizer state covers {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.len() || state.v[i].len() != p.len() {
            return Err(NekoError::Shape {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: vec![state.m[i].len()],
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let step = S::c(lr / bc1);
    let inv_bc2 = S::c(1.0 / bc2);
    let eps = S::c(config.adam_eps);
    let (b1s, b2s) = (S::c(b1), S::c(b2));
    let (c1, c2) = (S::c(1.0 - b1), S::c(1.0 - b2));
    for (i, p) in params.iter_mut().enumerate() {
        let shrink = S::c(1.0 - lr * if decay[i] { config.weight_decay } else { 0.0 });
        let grad = p.grad().map(<[S]>::to_vec);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(S::zero(), |g| g[j]);
            m[j] = b1s * m[j] + c1 * g;
            v[j] = b2s * v[j] + c2 * g * g;
            *w = *w * shrink - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_with_grad(p: f64, g: Option<f64>) -> Vec<Tensor<f64>> {
        let mut t = Tensor::new(vec![1], vec![p]).unwrap();
        if let Some(g) = g {
            t.accumulate_grad(&[g]);
        }
        vec![t]
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = scalar_with_grad(0.7, Some(0.0));
        let mut s = AdamState::new(&p);
        let c = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        for _ in 0..5 {
            adamw_step(&mut p, &mut s, 1e-2, &c, &[true]).unwrap();
        }
        assert_eq!(p[0].data()[0], 0.7);
    }

    #[test]
    fn first_step_matches_scalar_oracle() {
        let c = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        for g in [0.3, -2.0, 1e-3] {
            let mut p = scalar_with_grad(1.0, Some(g));
            let mut s = AdamState::new(&p);
            adamw_step(&mut p, &mut s, 1e-3, &c, &[true]).unwrap();
            // m̂ = g, v̂ = g² after one step
            let m_hat = (0.1 * g) / (1.0 - 0.9);
            let v_hat = (0.001 * g * g) / (1.0 - 0.999);
            let expect = 1.0 - 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((p[0].data()[0] - expect).abs() < 1e-12);
            assert!((p[0].data()[0] - (1.0 - 1e-3 * g.signum())).abs() < 1e-7);
        }
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let c = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut p = scalar_with_grad(2.0, None);
        let mut s = AdamState::new(&p);
        for _ in 0..3 {
            adamw_step(&mut p, &mut s, 0.5, &c, &[true]).unwrap();
        }
        assert!((p[0].data()[0] - 2.0 * 0.95f64.powi(3)).abs() < 1e-12);
        let mut q = scalar_with_grad(2.0, None);
        let mut s = AdamState::new(&q);
        adamw_step(&mut q, &mut s, 0.5, &c, &[false]).unwrap();
        assert_eq!(q[0].data()[0], 2.0);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = scalar_with_grad(1.0, Some(1.0));
        let mut s = AdamState::<f64> { m: vec![vec![0.0; 2]], v: vec![vec![0.0; 2]], t: 0 };
        assert!(adamw_step(&mut p, &mut s, 1e-3, &TrainConfig::default(), &[true]).is_err());
    }
}
