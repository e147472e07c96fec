use std::sync::Arc;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn, RopeTable};
use super::{Scalar, Tensor};
use crate::error::{invalid, NekoError, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a parameter tensor in an externally owned parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Silu(Var),
    RmsNorm { x: Var, w: Var, inv: Vec<S> },
    Softmax(Var),
    Rope { x: Var, positions: Vec<usize>, table: Arc<RopeTable> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    GatherCol { x: Var, rows: Vec<usize>, col: usize },
    RowScale { x: Var, w: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<S>, count: usize },
    Sum(Var),
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// A recording of tensor operations, in creation order.
///
/// Nodes can only reference earlier nodes, so creation order is a
/// topological order and `backward` is a single reverse sweep. Gradients
/// for parameter leaves are added into the caller's tensors with
/// [`Graph::accumulate_param_grads`]; repeated backward passes therefore
/// accumulate until the caller zeroes them.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (n / cols.max(1), cols)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            grad: None,
        }
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    /// A trainable leaf whose gradient is reported back to parameter `id`.
    pub fn param(&mut self, id: ParamId, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), true)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(NekoError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> NekoError {
        NekoError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// a[m×k] · b[k×n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// a[m×k] · b[n×k]ᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::silu(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Silu(a), ng)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) * weight` over the last dimension.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: S) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        if self.shape(w) != [d] {
            return Err(self.shape_err("rms_norm", x, w));
        }
        if !(eps > S::zero()) {
            return Err(invalid("rms_norm eps must be positive"));
        }
        let mut out = vec![S::zero(); rows * d];
        let mut inv = Vec::with_capacity(rows);
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for r in 0..rows {
                inv.push(kernels::rms_norm_row(
                    &xv[r * d..(r + 1) * d],
                    wv,
                    eps,
                    &mut out[r * d..(r + 1) * d],
                ));
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(self.shape(x).to_vec(), out, Op::RmsNorm { x, w, inv }, ng))
    }

    /// Softmax over the last dimension. Masked-out (`false`) positions act as
    /// −∞ and are exactly zero in the output.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (rows, n) = rows_cols(self.shape(x));
        if let Some(m) = mask {
            if m.len() != rows * n {
                return Err(NekoError::Shape {
                    op: "softmax mask",
                    lhs: self.shape(x).to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            let rm = mask.map(|m| &m[r * n..(r + 1) * n]);
            if !kernels::softmax_row(&mut out[r * n..(r + 1) * n], rm) {
                return Err(invalid(format!("softmax row {r} is fully masked")));
            }
        }
        let ng = self.ng(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), ng))
    }

    /// Rotary position encoding applied independently to each `head_dim`
    /// segment of every row; row `r` is rotated for `positions[r]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], table: Arc<RopeTable>) -> Result<Var> {
        let (rows, d) = self.matrix(x, "rope")?;
        let head_dim = table.head_dim();
        if positions.len() != rows || head_dim % 2 != 0 || head_dim == 0 || d % head_dim != 0 {
            return Err(invalid(format!(
                "rope: {rows} rows, {} positions, width {d}, head_dim {head_dim}",
                positions.len()
            )));
        }
        let mut out = self.value(x).to_vec();
        for (r, &p) in positions.iter().enumerate() {
            kernels::rope_row(&mut out[r * d..(r + 1) * d], &table, p, false);
        }
        let ng = self.ng(x);
        Ok(self.push(
            vec![rows, d],
            out,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                table,
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, d) = self.matrix(x, "slice_cols")?;
        if len == 0 || start + len > d {
            return Err(invalid(format!("slice_cols {start}+{len} out of width {d}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_cols needs at least one input"));
        }
        let (rows, _) = self.matrix(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_cols")?;
            if r != rows {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Selects rows `idx` of a matrix (embedding lookup, expert dispatch).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(invalid("gather_rows with no indices"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(invalid(format!("gather_rows index {i} >= {rows}")));
            }
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![idx.len(), d], out, Op::GatherRows { x, idx: idx.to_vec() }, ng))
    }

    /// Adds row `r` of `x` into row `idx[r]` of a zero `[n_rows × d]` matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let (rows, d) = self.matrix(x, "scatter_rows")?;
        if idx.len() != rows || idx.iter().any(|&i| i >= n_rows) {
            return Err(invalid("scatter_rows index mismatch"));
        }
        let xv = self.value(x);
        let mut out = vec![S::zero(); n_rows * d];
        for (r, &i) in idx.iter().enumerate() {
            for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                *o = *o + v;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![n_rows, d], out, Op::ScatterRows { x, idx: idx.to_vec() }, ng))
    }

    /// Column `col` of the selected `rows`, as an `[rows.len() × 1]` matrix.
    pub fn gather_col(&mut self, x: Var, rows: &[usize], col: usize) -> Result<Var> {
        let (n, d) = self.matrix(x, "gather_col")?;
        if col >= d || rows.iter().any(|&r| r >= n) || rows.is_empty() {
            return Err(invalid("gather_col index out of range"));
        }
        let xv = self.value(x);
        let out = rows.iter().map(|&r| xv[r * d + col]).collect();
        let ng = self.ng(x);
        Ok(self.push(
            vec![rows.len(), 1],
            out,
            Op::GatherCol {
                x,
                rows: rows.to_vec(),
                col,
            },
            ng,
        ))
    }

    /// Scales row `r` of `x[r×c]` by `w[r×1]`.
    pub fn row_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (rows, d) = self.matrix(x, "row_scale")?;
        if self.shape(w) != [rows, 1] {
            return Err(self.shape_err("row_scale", x, w));
        }
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            out.extend(xv[r * d..(r + 1) * d].iter().map(|&v| v * wv[r]));
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(vec![rows, d], out, Op::RowScale { x, w }, ng))
    }

    /// Mean of `−log softmax(logits[t])[targets[t]]` over positions with
    /// `mask[t] == true`. Targets at masked-out positions are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(NekoError::Shape {
                op: "cross_entropy",
                lhs: vec![t, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(invalid("cross_entropy: every position is masked"));
        }
        let lv = self.value(logits);
        let mut probs = vec![S::zero(); t * v];
        let mut total = S::zero();
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            if targets[r] >= v {
                return Err(invalid(format!("target id {} >= vocab {v}", targets[r])));
            }
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let sum: S = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total = total + (lse - row[targets[r]]);
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / S::from_usize(count).unwrap();
        let ng = self.ng(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![], vec![s], Op::Sum(x), ng)
    }

    /// Reverse sweep from a scalar `loss`. Gradients are stored per node and
    /// replace those of any previous sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NekoError::Shape {
                op: "backward (loss must be scalar)",
                lhs: self.nodes[loss.0].shape.clone(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of all parameter leaves into `params[id]`.
    pub fn accumulate_param_grads(&self, params: &mut [Tensor<S>]) {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                params[id.0].accumulate_grad(g);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm_nt(g, &nodes[b.0].value, ga, m, n, k);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm_tn(&nodes[a.0].value, g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm_nn(g, &nodes[b.0].value, ga, m, n, k);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm_tn(g, &nodes[a.0].value, gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(nodes, grads, v) {
                        kernels::axpy(S::one(), g, gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(&nodes[b.0].value) {
                        *o = *o + gi * bi;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        *o = *o + gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    kernels::axpy(*c, g, ga);
                }
            }
            Op::Silu(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        let s = kernels::sigmoid(x);
                        *o = *o + gi * s * (S::one() + x * (S::one() - s));
                    }
                }
            }
            Op::RmsNorm { x, w, inv } => {
                let d = nodes[w.0].value.len();
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                if let Some(gw) = slot(nodes, grads, *w) {
                    for (r, &ir) in inv.iter().enumerate() {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        for j in 0..d {
                            gw[j] = gw[j] + gr[j] * xr[j] * ir;
                        }
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let dn = S::from_usize(d).unwrap();
                    for (r, &ir) in inv.iter().enumerate() {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut proj = S::zero();
                        for j in 0..d {
                            proj = proj + gr[j] * wv[j] * xr[j];
                        }
                        let coef = ir * ir * ir * proj / dn;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = out[j] + ir * gr[j] * wv[j] - coef * xr[j];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let n = node.shape.last().copied().unwrap_or(1);
                    let y = &node.value;
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let inner = kernels::dot(yr, gr);
                        for j in 0..n {
                            gx[r * n + j] = gx[r * n + j] + yr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::Rope { x, positions, table } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let d = node.shape[1];
                    let mut tmp = g.to_vec();
                    for (r, &p) in positions.iter().enumerate() {
                        kernels::rope_row(&mut tmp[r * d..(r + 1) * d], table, p, true);
                    }
                    kernels::axpy(S::one(), &tmp, gx);
                }
            }
            Op::SliceCols { x, start } => {
                let d = nodes[x.0].shape[1];
                let len = node.shape[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..node.shape[0] {
                        kernels::axpy(
                            S::one(),
                            &g[r * len..(r + 1) * len],
                            &mut gx[r * d + start..r * d + start + len],
                        );
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    if let Some(gp) = slot(nodes, grads, p) {
                        for r in 0..node.shape[0] {
                            kernels::axpy(
                                S::one(),
                                &g[r * total + offset..r * total + offset + w],
                                &mut gp[r * w..(r + 1) * w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let d = node.shape[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        kernels::axpy(S::one(), &g[r * d..(r + 1) * d], &mut gx[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::ScatterRows { x, idx } => {
                let d = node.shape[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        kernels::axpy(S::one(), &g[i * d..(i + 1) * d], &mut gx[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::GatherCol { x, rows, col } => {
                let d = nodes[x.0].shape[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (k, &r) in rows.iter().enumerate() {
                        gx[r * d + col] = gx[r * d + col] + g[k];
                    }
                }
            }
            Op::RowScale { x, w } => {
                let d = node.shape[1];
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..node.shape[0] {
                        kernels::axpy(wv[r], &g[r * d..(r + 1) * d], &mut gx[r * d..(r + 1) * d]);
                    }
                }
                if let Some(gw) = slot(nodes, grads, *w) {
                    for r in 0..node.shape[0] {
                        gw[r] = gw[r] + kernels::dot(&g[r * d..(r + 1) * d], &xv[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = nodes[logits.0].shape[1];
                if let Some(gl) = slot(nodes, grads, *logits) {
                    let scale = g[0] / S::from_usize(*count).unwrap();
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let out = &mut gl[r * v..(r + 1) * v];
                        kernels::axpy(scale, &probs[r * v..(r + 1) * v], out);
                        out[t] = out[t] - scale;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in gx.iter_mut() {
                        *o = *o + g[0];
                    }
                }
            }
        }
    }
}

fn slot<'a, S: Scalar>(nodes: &[Node<S>], grads: &'a mut [Option<Vec<S>>], v: Var) -> Option<&'a mut Vec<S>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut g = Graph::<f64>::new();
        let i2 = g.input(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = g.input(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let sel = g.input(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = g.input(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let q = g.matmul(sel, b).unwrap();
        assert_eq!(g.value(q), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 2]);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(&a), g.constant(&b));
        let c = g.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                assert!((g.value(c)[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.input(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(vec![4], vec![0.0; 4]).unwrap();
        let y = g.softmax(x, None).unwrap();
        assert_eq!(g.value(y), &[0.25; 4]);

        let x = g.input(vec![2], vec![1000.0, 0.0]).unwrap();
        let y = g.softmax(x, None).unwrap();
        assert_eq!(g.value(y)[0], 1.0);
        assert!(g.value(y)[1] < 1e-300 && g.value(y).iter().all(|v| v.is_finite()));

        let x = g.input(vec![3], vec![2.0, 1.0, 0.0]).unwrap();
        let y = g.softmax(x, Some(&[true, true, false])).unwrap();
        // e / (e + 1) and 1 / (e + 1)
        let e = 1f64.exp();
        assert!((g.value(y)[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((g.value(y)[0] - 0.7311).abs() < 1e-4);
        assert!((g.value(y)[1] - 0.2689).abs() < 1e-4);
        assert_eq!(g.value(y)[2], 0.0);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.input(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(g.softmax(x, Some(&[true, false, false, false])).is_err());
    }

    #[test]
    fn rms_norm_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(vec![1, 4], vec![1.0; 4]).unwrap();
        let w = g.input(vec![4], vec![1.0; 4]).unwrap();
        let y = g.rms_norm(x, w, 1e-300).unwrap();
        assert!(g.value(y).iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let z = g.input(vec![1, 4], vec![0.0; 4]).unwrap();
        let y = g.rms_norm(z, w, 1e-6).unwrap();
        assert_eq!(g.value(y), &[0.0; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = rand_tensor(&mut rng, vec![1, 7]);
        let wt = rand_tensor(&mut rng, vec![7]);
        let (x, w) = (g.constant(&xt), g.constant(&wt));
        let y = g.rms_norm(x, w, 1e-5).unwrap();
        let mut ms = 0.0;
        for v in xt.data() {
            ms += v * v;
        }
        ms /= 7.0;
        for j in 0..7 {
            let want = xt.data()[j] / (ms + 1e-5).sqrt() * wt.data()[j];
            assert!((g.value(y)[j] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let mut l = vec![0.0; 8];
        l[3] = 1e4;
        let x = g.input(vec![1, 8], l).unwrap();
        let ce = g.cross_entropy(x, &[3], &[true]).unwrap();
        assert!(g.value(ce)[0].abs() < 1e-12);

        let u = g.input(vec![2, 8], vec![0.5; 16]).unwrap();
        let ce = g.cross_entropy(u, &[1, 6], &[true, true]).unwrap();
        assert!((g.value(ce)[0] - 8f64.ln()).abs() < 1e-12);
        assert!((g.value(ce)[0] - 2.0794).abs() < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lt = rand_tensor(&mut rng, vec![3, 5]);
        let x = g.constant(&lt);
        let targets = [4, 0, 2];
        let mask = [true, false, true];
        let ce = g.cross_entropy(x, &targets, &mask).unwrap();
        let mut want = 0.0;
        for r in [0, 2] {
            let row = &lt.data()[r * 5..r * 5 + 5];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[targets[r]];
        }
        assert!((g.value(ce)[0] - want / 2.0).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.input(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(g.cross_entropy(x, &[0, 1], &[false, false]).is_err());
        assert!(g.cross_entropy(x, &[0, 3], &[true, true]).is_err());
        // out-of-range ids at masked positions are ignored
        assert!(g.cross_entropy(x, &[0, 99], &[true, false]).is_ok());
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap()];
        let mut g = Graph::<f64>::new();
        let x = g.param(ParamId(0), &params[0]);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut params);
        assert_eq!(params[0].grad().unwrap(), &[2.0, -4.0, 6.0]);
        // a second sweep accumulates
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut params);
        assert_eq!(params[0].grad().unwrap(), &[4.0, -8.0, 12.0]);
    }

    #[test]
    fn backward_constant_loss_gives_zero_grad() {
        let mut params = vec![Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        let mut g = Graph::<f64>::new();
        let _x = g.param(ParamId(0), &params[0]);
        let c = g.input(vec![], vec![5.0]).unwrap();
        let loss = g.scale(c, 2.0);
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut params);
        assert!(params[0].grad().map_or(true, |gr| gr.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.input(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(g.backward(x).is_err());
    }
}
