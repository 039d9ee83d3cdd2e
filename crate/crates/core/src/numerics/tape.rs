//! Eager reverse-mode autodiff over [`Tensor`] values.
//!
//! Every operation computes its value immediately and appends a node; the
//! node index order is a topological order, so `backward` is a single reverse
//! sweep. Only leaves keep gradients after a sweep. Calling `backward` twice
//! without [`Tape::zero_grad`] adds the second gradient onto the first.

use std::sync::Arc;

use super::tensor::{
    check_same_shape, dot, matmul_at_acc, matmul_bt_kernel, matmul_kernel, Tensor,
};
use crate::error::{contract_err, shape_err, Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which key positions each query position may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionMask {
    /// Every query sees every key.
    Bidirectional,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Row-major `queries × keys` table, `true` = allowed.
    Pairs(Vec<bool>),
}

impl AttentionMask {
    fn table(&self, lq: usize, lk: usize) -> Result<Option<Arc<Vec<bool>>>> {
        match self {
            AttentionMask::Bidirectional => Ok(None),
            AttentionMask::Causal => Ok(Some(Arc::new(
                (0..lq)
                    .flat_map(|i| (0..lk).map(move |j| j <= i))
                    .collect(),
            ))),
            AttentionMask::Pairs(t) => {
                if t.len() != lq * lk {
                    return Err(shape_err!(
                        "attention mask has {} entries, expected {lq}x{lk}",
                        t.len()
                    ));
                }
                Ok(Some(Arc::new(t.clone())))
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Exp(Var),
    Square(Var),
    SmoothL1(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
    grad: Option<Tensor>,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Leaf that shares storage with the caller (no copy).
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant copy of `v`'s value with no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.leaf_shared(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any sweep reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if let Some(i) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{name} produced {} at element {i}",
                value.data()[i]
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v).require_2d(what)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(shape_err!("matmul: inner dimensions {k} vs {k2}"));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt lhs")?;
        let (n, k2) = self.dims2(b, "matmul_bt rhs")?;
        if k != k2 {
            return Err(shape_err!("matmul_bt: inner dimensions {k} vs {k2}"));
        }
        let out = matmul_bt_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulBt(a, b),
            &[a, b],
            "matmul_bt",
        )
    }

    fn zip_op(&mut self, a: Var, b: Var, op: Op, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        check_same_shape(self.value(a), self.value(b), name)?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row_bias")?;
        if self.value(bias).numel() != n {
            return Err(shape_err!(
                "add_row_bias: bias has {} entries, rows have {n}",
                self.value(bias).numel()
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::AddRowBias(a, bias),
            &[a, bias],
            "add_row_bias",
        )
    }

    fn map_op(&mut self, a: Var, op: Op, name: &str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op, &[a], name)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map_op(a, Op::Scale(a, s), "scale", |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map_op(a, Op::AddScalar(a), "add_scalar", |x| x + s)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map_op(a, Op::Gelu(a), "gelu", |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map_op(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map_op(a, Op::Square(a), "square", |x| x * x)
    }

    /// Elementwise Huber with unit threshold.
    pub fn smooth_l1(&mut self, a: Var) -> Result<Var> {
        self.map_op(a, Op::SmoothL1(a), "smooth_l1", |x| {
            if x.abs() < 1.0 {
                0.5 * x * x
            } else {
                x.abs() - 0.5
            }
        })
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        self.softmax_masked(a, None)
    }

    fn softmax_masked(&mut self, a: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.rows_cols();
        if av.ndim() == 0 || cols == 0 {
            return Err(shape_err!("softmax: empty last dimension"));
        }
        let mut out = vec![0.0; av.numel()];
        for r in 0..rows {
            let x = &av.data()[r * cols..(r + 1) * cols];
            let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[r * cols + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in x.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                // fully masked row: all weights zero
                continue;
            }
            let y = &mut out[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for j in 0..cols {
                if allowed(j) {
                    y[j] = (x[j] - max).exp();
                    z += y[j];
                }
            }
            for v in y.iter_mut() {
                *v /= z;
            }
        }
        let shape = av.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax(a),
            &[a],
            "softmax",
        )
    }

    /// Per-row layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.rows_cols();
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(shape_err!(
                "layer_norm: gain/bias must have {cols} entries, got {}/{}",
                self.value(gain).numel(),
                self.value(bias).numel()
            ));
        }
        if eps < 0.0 {
            return Err(contract_err!("layer_norm: eps must be >= 0"));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; xv.numel()];
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let denom = var + eps;
            if denom <= 0.0 {
                return Err(Error::NonFinite(format!(
                    "layer_norm: division by zero on constant row {r} with eps = {eps}"
                )));
            }
            let is = 1.0 / denom.sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(shape_err!("slice_cols {start}..{} of {n}", start + len));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        self.push(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols(a, start),
            &[a],
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err!("concat_cols of nothing"));
        }
        let m = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(shape_err!("concat_cols: row counts {m} vs {pm}"));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
            "concat_cols",
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(shape_err!("slice_rows {start}..{} of {m}", start + len));
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        self.push(
            Tensor::from_parts(vec![len, n], out),
            Op::SliceRows(a, start),
            &[a],
            "slice_rows",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err!("concat_rows of nothing"));
        }
        let n = self.dims2(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_rows")?;
            if pn != n {
                return Err(shape_err!("concat_rows: widths {n} vs {pn}"));
            }
            rows += pm;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(
            Tensor::from_parts(vec![rows, n], out),
            Op::ConcatRows(parts.to_vec()),
            parts,
            "concat_rows",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        self.push(t, Op::Reshape(a), &[a], "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.sum() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a], "mean")
    }

    /// `softmax(q·kᵀ/√d, mask) · v` for one head.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var, mask: &AttentionMask) -> Result<Var> {
        let (lq, dq) = self.dims2(q, "attention q")?;
        let (lk, dk) = self.dims2(k, "attention k")?;
        let (lv, _) = self.dims2(v, "attention v")?;
        if dq != dk {
            return Err(shape_err!("attention head dimension q {dq} vs k {dk}"));
        }
        if lv != lk {
            return Err(shape_err!("attention: {lk} keys but {lv} values"));
        }
        let table = mask.table(lq, lk)?;
        let scores = self.matmul_bt(q, k)?;
        let scores = self.scale(scores, 1.0 / (dq as f64).sqrt())?;
        let weights = self.softmax_masked(scores, table)?;
        self.matmul(weights, v)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => acc.add_assign(&g)?,
                        None => node.grad = Some(g),
                    }
                }
                op => {
                    let op = op.clone();
                    self.propagate(i, &op, g, &mut grads)?;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, op: &Op, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[i].value;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).rows_cols();
                let n = val(*b).rows_cols().1;
                if wants(*a) {
                    let da = matmul_bt_kernel(g.data(), val(*b).data(), m, n, k);
                    acc(grads, *a, Tensor::from_parts(vec![m, k], da))?;
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_acc(val(*a).data(), g.data(), m, k, n, &mut db);
                    acc(grads, *b, Tensor::from_parts(vec![k, n], db))?;
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = val(*a).rows_cols();
                let n = val(*b).rows_cols().0;
                if wants(*a) {
                    let da = matmul_kernel(g.data(), val(*b).data(), m, n, k);
                    acc(grads, *a, Tensor::from_parts(vec![m, k], da))?;
                }
                if wants(*b) {
                    let mut db = vec![0.0; n * k];
                    matmul_at_acc(g.data(), val(*a).data(), m, n, k, &mut db);
                    acc(grads, *b, Tensor::from_parts(vec![n, k], db))?;
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(grads, *a, g.clone())?;
                }
                if wants(*b) {
                    acc(grads, *b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(grads, *a, g.clone())?;
                }
                if wants(*b) {
                    let mut nb = g;
                    nb.scale_in_place(-1.0);
                    acc(grads, *b, nb)?;
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(grads, *a, elementwise(&g, val(*b), |gv, bv| gv * bv))?;
                }
                if wants(*b) {
                    acc(grads, *b, elementwise(&g, val(*a), |gv, av| gv * av))?;
                }
            }
            Op::AddRowBias(a, bias) => {
                if wants(*bias) {
                    let (m, n) = g.rows_cols();
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for (d, gv) in db.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *d += gv;
                        }
                    }
                    let shape = val(*bias).shape().to_vec();
                    acc(grads, *bias, Tensor::from_parts(shape, db))?;
                }
                if wants(*a) {
                    acc(grads, *a, g)?;
                }
            }
            Op::Scale(a, s) => {
                let mut ga = g;
                ga.scale_in_place(*s);
                acc(grads, *a, ga)?;
            }
            Op::AddScalar(a) => acc(grads, *a, g)?,
            Op::Gelu(a) => {
                let da = elementwise(&g, val(*a), |gv, x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
                acc(grads, *a, da)?;
            }
            Op::Exp(a) => acc(grads, *a, elementwise(&g, out, |gv, y| gv * y))?,
            Op::Square(a) => acc(grads, *a, elementwise(&g, val(*a), |gv, x| 2.0 * gv * x))?,
            Op::SmoothL1(a) => {
                let da = elementwise(&g, val(*a), |gv, x| {
                    if x.abs() < 1.0 {
                        gv * x
                    } else {
                        gv * x.signum()
                    }
                });
                acc(grads, *a, da)?;
            }
            Op::Softmax(a) => {
                let (rows, cols) = out.rows_cols();
                let mut da = vec![0.0; out.numel()];
                for r in 0..rows {
                    let y = &out.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let inner = dot(y, gr);
                    for j in 0..cols {
                        da[r * cols + j] = y[j] * (gr[j] - inner);
                    }
                }
                acc(grads, *a, Tensor::from_parts(out.shape().to_vec(), da))?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = out.rows_cols();
                let gv = val(*gain).data();
                if wants(*gain) {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            dg[j] += g.data()[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                    let shape = val(*gain).shape().to_vec();
                    acc(grads, *gain, Tensor::from_parts(shape, dg))?;
                }
                if wants(*bias) {
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            db[j] += g.data()[r * cols + j];
                        }
                    }
                    let shape = val(*bias).shape().to_vec();
                    acc(grads, *bias, Tensor::from_parts(shape, db))?;
                }
                if wants(*x) {
                    let mut dx = vec![0.0; out.numel()];
                    let nf = cols as f64;
                    for r in 0..rows {
                        let base = r * cols;
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..cols {
                            let d = g.data()[base + j] * gv[j];
                            mean_d += d;
                            mean_dh += d * xhat[base + j];
                        }
                        mean_d /= nf;
                        mean_dh /= nf;
                        for j in 0..cols {
                            let d = g.data()[base + j] * gv[j];
                            dx[base + j] = inv_std[r] * (d - mean_d - xhat[base + j] * mean_dh);
                        }
                    }
                    acc(grads, *x, Tensor::from_parts(out.shape().to_vec(), dx))?;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = val(*a).rows_cols();
                let len = out.rows_cols().1;
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    da[r * n + start..r * n + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                acc(grads, *a, Tensor::from_parts(vec![m, n], da))?;
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.rows_cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).rows_cols().1;
                    if wants(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        acc(grads, p, Tensor::from_parts(vec![m, w], dp))?;
                    }
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let (m, n) = val(*a).rows_cols();
                let mut da = vec![0.0; m * n];
                da[start * n..start * n + g.numel()].copy_from_slice(g.data());
                acc(grads, *a, Tensor::from_parts(vec![m, n], da))?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if wants(p) {
                        let dp = g.data()[offset..offset + len].to_vec();
                        acc(grads, p, Tensor::from_parts(val(p).shape().to_vec(), dp))?;
                    }
                    offset += len;
                }
            }
            Op::Reshape(a) => {
                let ga = g.reshape(val(*a).shape().to_vec())?;
                acc(grads, *a, ga)?;
            }
            Op::Sum(a) => acc(grads, *a, Tensor::full(val(*a).shape(), g.item()))?,
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc(grads, *a, Tensor::full(val(*a).shape(), g.item() / n))?;
            }
        }
        Ok(())
    }
}

fn elementwise(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_parts(g.shape().to_vec(), data)
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
