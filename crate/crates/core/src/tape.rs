//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse, propagating adjoints, and
//! accumulates the results into the gradient buffers of bound parameters.
//! Nodes are append-only, so node order is a valid topological order.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, transpose_kernel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    ParamRows(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Rotary {
        x: Var,
        roles: Vec<usize>,
        theta_base: f64,
    },
    Sum(Var),
    Bce {
        probs: Var,
        labels: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints for every node reached from a loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().map_err(|_| Error::Shape {
        op,
        left: t.shape().to_vec(),
        right: vec![],
    })
}

/// Angle `m·θ_j` for rotary pair `j` with `θ_j = base^(-2j/d)`.
pub fn rotary_angle(m: usize, pair: usize, width: usize, theta_base: f64) -> f64 {
    m as f64 * theta_base.powf(-2.0 * pair as f64 / width as f64)
}

fn rotate_rows(data: &[f64], cols: usize, roles: &[usize], theta_base: f64, sign: f64) -> Vec<f64> {
    let mut out = data.to_vec();
    for (i, &m) in roles.iter().enumerate() {
        if m == 0 {
            continue;
        }
        let row = &mut out[i * cols..(i + 1) * cols];
        for j in 0..cols / 2 {
            let (s, c) = (sign * rotary_angle(m, j, cols, theta_base)).sin_cos();
            let (x, y) = (row[2 * j], row[2 * j + 1]);
            row[2 * j] = x * c - y * s;
            row[2 * j + 1] = x * s + y * c;
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn t(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Binds a whole parameter tensor.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mut value = store.get(id).clone();
        value.grad = None;
        self.push(value, Op::Param(id))
    }

    /// Binds selected rows of a rank-2 parameter (embedding lookup).
    pub fn param_rows(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = store.get(id);
        let (n, cols) = dims("param_rows", table)?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::UnknownId { kind: "row", id: r });
            }
            data.extend_from_slice(table.row(r));
        }
        let value = Tensor::new(vec![rows.len(), cols], data)?;
        Ok(self.push(value, Op::ParamRows(id, rows.to_vec())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.t(a), self.t(b));
        let (m, k) = dims("matmul", ta)?;
        let (k2, n) = dims("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let data = matmul_kernel(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.t(a), self.t(b));
        let (m, k) = dims("matmul_nt", ta)?;
        let (n, k2) = dims("matmul_nt", tb)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let data = matmul_nt_kernel(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMulNT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.t(a).transpose()?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.t(a), self.t(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.t(x), self.t(bias));
        let (_, n) = dims("add_row", tx)?;
        if tb.len() != n {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.t(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(x, c))
    }

    /// Elementwise product with a constant buffer (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let tx = self.t(x);
        if mask.len() != tx.len() {
            return Err(Error::Length {
                op: "mul_const",
                left: tx.len(),
                right: mask.len(),
            });
        }
        let data = tx.data().iter().zip(&mask).map(|(a, b)| a * b).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulConst(x, mask)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.t(x);
        let data = tx.data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let tx = self.t(x);
        let data = tx.data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Tanh(x))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_rows_masked(x, None)
    }

    /// Row-wise softmax of `x + mask`, where mask entries are `0` or `-inf`.
    ///
    /// Masked entries come out exactly zero. A row with no finite entry is an
    /// error.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let tx = self.t(x);
        let (_, n) = dims("softmax_rows", tx)?;
        if let Some(m) = mask {
            if m.shape() != tx.shape() {
                return Err(shape_err("softmax_rows", tx, m));
            }
        }
        let data = softmax_kernel(tx.data(), n, mask.map(Tensor::data))?;
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.t(x), self.t(gain), self.t(bias));
        let (m, d) = dims("layer_norm", tx)?;
        if tg.len() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.len() != d {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &tx.data()[i * d..(i + 1) * d];
            let (mean, var) = row_moments(row);
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(vec![m, d], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.t(*parts.first().ok_or(Error::Length {
            op: "concat_cols",
            left: 0,
            right: 1,
        })?);
        let (m, _) = dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.t(p);
            let (r, c) = dims("concat_cols", tp)?;
            if r != m {
                return Err(shape_err("concat_cols", first, tp));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.t(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.t(*parts.first().ok_or(Error::Length {
            op: "concat_rows",
            left: 0,
            right: 1,
        })?);
        let (_, n) = dims("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.t(p);
            let (r, c) = dims("concat_rows", tp)?;
            if c != n {
                return Err(shape_err("concat_rows", first, tp));
            }
            rows += r;
            data.extend_from_slice(tp.data());
        }
        let t = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.t(x);
        let (n, c) = dims("gather_rows", tx)?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::UnknownId { kind: "row", id: r });
            }
            data.extend_from_slice(tx.row(r));
        }
        let t = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(t, Op::GatherRows(x, rows.to_vec())))
    }

    /// Rotates the dimension pairs of row `i` by angle `roles[i]·θ_j`.
    pub fn rotary(&mut self, x: Var, roles: &[usize], theta_base: f64) -> Result<Var> {
        let tx = self.t(x);
        let (m, c) = dims("rotary", tx)?;
        if c % 2 != 0 {
            return Err(Error::Config(format!("rotary width {c} is odd")));
        }
        if roles.len() != m {
            return Err(Error::Length {
                op: "rotary",
                left: m,
                right: roles.len(),
            });
        }
        let data = rotate_rows(tx.data(), c, roles, theta_base, 1.0);
        let t = Tensor::new(vec![m, c], data)?;
        Ok(self.push(
            t,
            Op::Rotary {
                x,
                roles: roles.to_vec(),
                theta_base,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.t(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Summed binary cross-entropy over rows `[p0, p1]` of `probs`, with
    /// labels in `{0, 1}` selecting the column whose log-probability counts.
    pub fn bce(&mut self, probs: Var, labels: &[f64]) -> Result<Var> {
        let tp = self.t(probs);
        let (m, c) = dims("bce", tp)?;
        if c != 2 {
            return Err(Error::Shape {
                op: "bce",
                left: tp.shape().to_vec(),
                right: vec![m, 2],
            });
        }
        if labels.len() != m {
            return Err(Error::Length {
                op: "bce",
                left: m,
                right: labels.len(),
            });
        }
        let mut loss = 0.0;
        for (row, &y) in tp.rows().zip(labels) {
            let p0 = row[0].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let p1 = row[1].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss -= (1.0 - y) * p0.ln() + y * p1.ln();
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Computes adjoints of every node with respect to the scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lt = self.t(loss);
        if !lt.is_scalar() {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
            match &mut grads[v.0] {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(&delta) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Leaf | Op::Param(_) | Op::ParamRows(..) => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.t(*a), self.t(*b));
                    let (m, k) = ta.dims2()?;
                    let (_, n) = tb.dims2()?;
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    let da = matmul_nt_kernel(&g, tb.data(), m, n, k);
                    let db = matmul_tn_kernel(ta.data(), &g, m, k, n);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let (ta, tb) = (self.t(*a), self.t(*b));
                    let (m, k) = ta.dims2()?;
                    let (n, _) = tb.dims2()?;
                    // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                    let da = matmul_kernel(&g, tb.data(), m, n, k);
                    let db = matmul_tn_kernel(&g, ta.data(), m, n, k);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Transpose(a) => {
                    let (r, c) = out.dims2()?;
                    acc(&mut grads, *a, transpose_kernel(&g, r, c));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(x, bias) => {
                    let n = self.t(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *x, g);
                    acc(&mut grads, *bias, db);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.t(*a), self.t(*b));
                    let da = g.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    let db = g.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(x, c) => {
                    acc(&mut grads, *x, g.iter().map(|v| v * c).collect());
                }
                Op::MulConst(x, mask) => {
                    acc(&mut grads, *x, g.iter().zip(mask).map(|(a, b)| a * b).collect());
                }
                Op::Relu(x) => {
                    let tx = self.t(*x);
                    let d = g
                        .iter()
                        .zip(tx.data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    acc(&mut grads, *x, d);
                }
                Op::Tanh(x) => {
                    let d = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                    acc(&mut grads, *x, d);
                }
                Op::Softmax(x) => {
                    let (_, n) = out.dims2()?;
                    let mut d = vec![0.0; g.len()];
                    for ((drow, grow), arow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(arow).map(|(a, b)| a * b).sum();
                        for ((dv, gv), av) in drow.iter_mut().zip(grow).zip(arow) {
                            *dv = av * (gv - dot);
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let tg = self.t(*gain);
                    let d = tg.len();
                    let mut dx = vec![0.0; g.len()];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for (i, r) in rstd.iter().enumerate() {
                        let grow = &g[i * d..(i + 1) * d];
                        let hrow = &xhat[i * d..(i + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = grow[j] * tg.data()[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                            dgain[j] += grow[j] * hrow[j];
                            dbias[j] += grow[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = grow[j] * tg.data()[j];
                            dx[i * d + j] = r * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *bias, dbias);
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = out.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, w) = self.t(p).dims2()?;
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        acc(&mut grads, p, d);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.t(p).len();
                        acc(&mut grads, p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::GatherRows(x, rows) => {
                    let tx = self.t(*x);
                    let (_, c) = tx.dims2()?;
                    let mut d = vec![0.0; tx.len()];
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            d[r * c + j] += g[k * c + j];
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Rotary { x, roles, theta_base } => {
                    let (_, c) = out.dims2()?;
                    acc(&mut grads, *x, rotate_rows(&g, c, roles, *theta_base, -1.0));
                }
                Op::Sum(x) => {
                    let n = self.t(*x).len();
                    acc(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Bce { probs, labels } => {
                    let tp = self.t(*probs);
                    let mut d = vec![0.0; tp.len()];
                    for (i, (row, &y)) in tp.rows().zip(labels).enumerate() {
                        for (col, weight) in [(0, 1.0 - y), (1, y)] {
                            let p = row[col];
                            if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                                d[i * 2 + col] = -g[0] * weight / p;
                            }
                        }
                    }
                    acc(&mut grads, *probs, d);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Backpropagates from `loss` and accumulates into the parameter gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            match &self.nodes[i].op {
                Op::Param(id) => store.accumulate(*id, g),
                Op::ParamRows(id, rows) => store.accumulate_rows(*id, rows, g),
                _ => {}
            }
        }
        Ok(())
    }
}

pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, var)
}

pub(crate) fn softmax_kernel(x: &[f64], n: usize, mask: Option<&[f64]>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    for (r, orow) in out.chunks_mut(n).enumerate() {
        let xrow = &x[r * n..(r + 1) * n];
        let shifted: Vec<f64> = match mask {
            Some(m) => xrow.iter().zip(&m[r * n..(r + 1) * n]).map(|(a, b)| a + b).collect(),
            None => xrow.to_vec(),
        };
        let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMasked { row: r });
        }
        let mut total = 0.0;
        for (o, &s) in orow.iter_mut().zip(&shifted) {
            *o = if s == f64::NEG_INFINITY { 0.0 } else { (s - max).exp() };
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Ok(out)
}

/// Untracked row-wise softmax.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    Tensor::new(x.shape().to_vec(), softmax_kernel(x.data(), n, None)?)
}

/// Untracked layer normalization.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, gv, bv) = (
        tape.constant(x.clone()),
        tape.constant(gain.clone()),
        tape.constant(bias.clone()),
    );
    let y = tape.layer_norm(xv, gv, bv, eps)?;
    Ok(tape.value(y).clone())
}
