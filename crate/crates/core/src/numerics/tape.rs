//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value. Gradients are
//! accumulated in `f64` during the backward sweep and rounded to `f32` only
//! when written into a [`ParamStore`].

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulTn(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated.
///
/// A tape is single-use: build the forward pass, call [`Tape::backward`],
/// then drop it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Per-node gradients produced by [`Tape::gradients`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `var`, or `None` when it does not require one.
    pub fn wrt(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(
            Tensor::new(
                self.shapes[var.0].clone(),
                g.iter().map(|&v| v as f32).collect(),
            )
            .expect("gradient shape"),
        )
    }

    /// Full-precision gradient with respect to `var`.
    pub fn wrt_f64(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0)?.as_deref()
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient (inputs under test, probes).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&var) = self.params.get(name) {
            return Ok(var);
        }
        let value = store.get(name)?.clone();
        let var = self.push(value, Op::Param, store.is_trainable(name));
        self.params.insert(name.to_string(), var);
        Ok(var)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    /// `a^T * b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_tn(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMulTn(a, b), rg))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err(name, a, b));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x as f64, y as f64) as f32)
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        v: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (tx, tv) = (self.value(x), self.value(v));
        let cols = tx.cols();
        if tx.rank() != 2 || tv.numel() != cols || tv.rank() > 2 || tv.rows() != 1 {
            return Err(self.shape_err(name, x, v));
        }
        let vd = tv.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &val)| f(val as f64, vd[i % cols] as f64) as f32)
            .collect();
        Tensor::new(tx.shape().to_vec(), data)
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.row_broadcast("add_row", x, bias, |a, b| a + b)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    /// Multiplies column `j` of an `m x n` matrix by `gain[j]`.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let value = self.row_broadcast("mul_row", x, gain, |a, b| a * b)?;
        let rg = self.any_grad(&[x, gain]);
        Ok(self.push(value, Op::MulRow(x, gain), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| (v as f64 * c) as f32).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu(v as f64) as f32).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tx.rank() != 2 || tg.numel() != n || tb.numel() != n {
            return Err(self.shape_err("layer_norm", x, gamma));
        }
        let mut xhat = vec![0.0f64; m * n];
        let mut rstd = vec![0.0f64; m];
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] as f64 - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = (h * tg.data()[j] as f64 + tb.data()[j] as f64) as f32;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(self.shape_err("softmax_rows", x, x));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(softmax(t.row(i)).into_iter().map(|v| v as f32));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != cols {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(self.shape_err("concat_cols", first, p));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start >= end || end > t.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let cols = t.cols();
        let value = Tensor::new(
            vec![end - start, cols],
            t.data()[start * cols..end * cols].to_vec(),
        )?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceRows(x, start), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start >= end || end > t.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let value = Tensor::new(vec![rows, end - start], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceCols(x, start), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s as f32), Op::Mean(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s as f32), Op::SumSquares(x), rg)
    }

    /// Mean squared error between `pred` and `target` (same shape).
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let n = self.value(diff).numel();
        let ss = self.sum_squares(diff);
        Ok(self.scale(ss, 1.0 / n as f64))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`. Identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.value(x).shape().to_vec();
        let keep = 1.0 / (1.0 - rate);
        let n: usize = shape.iter().product();
        let mask: Vec<f32> = (0..n)
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let mask = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, mask)
    }

    /// Gradients of a scalar `loss` with respect to every node that
    /// requires one.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    /// Runs the backward sweep and writes a gradient for every parameter of
    /// `store`: `d loss / d param` for trainable parameters used on this
    /// tape, zero for frozen or unused ones.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        self.store_gradients(&grads, store)
    }

    /// Writes already computed gradients into `store`, with the same rules
    /// as [`Tape::backward`]. Lets one sweep serve several stores.
    pub fn store_gradients(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let shape = store.get(&name)?.shape().to_vec();
            let grad = match self.params.get(name.as_str()) {
                Some(&var) if store.is_trainable(&name) => grads
                    .wrt(var)
                    .unwrap_or_else(|| Tensor::zeros(&shape)),
                _ => Tensor::zeros(&shape),
            };
            store.set_grad(&name, grad)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contrib: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn f64_data(&self, var: Var) -> Vec<f64> {
        self.value(var).data().iter().map(|&v| v as f64).collect()
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if rg(*a) {
                    let bd = self.f64_data(*b);
                    self.accumulate(grads, *a, mm_nt(g, &bd, m, n, k));
                }
                if rg(*b) {
                    let ad = self.f64_data(*a);
                    self.accumulate(grads, *b, mm_tn(&ad, g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if rg(*a) {
                    let bd = self.f64_data(*b);
                    self.accumulate(grads, *a, mm_nn(g, &bd, m, n, k));
                }
                if rg(*b) {
                    let ad = self.f64_data(*a);
                    self.accumulate(grads, *b, mm_tn(g, &ad, m, n, k));
                }
            }
            Op::MatMulTn(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, m, n) = (ta.rows(), ta.cols(), tb.cols());
                if rg(*a) {
                    let bd = self.f64_data(*b);
                    self.accumulate(grads, *a, mm_nt(&bd, g, k, n, m));
                }
                if rg(*b) {
                    let ad = self.f64_data(*a);
                    self.accumulate(grads, *b, mm_nn(&ad, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let bd = self.value(*b).data();
                    self.accumulate(grads, *a, g.iter().zip(bd).map(|(x, &y)| x * y as f64).collect());
                }
                if rg(*b) {
                    let ad = self.value(*a).data();
                    self.accumulate(grads, *b, g.iter().zip(ad).map(|(x, &y)| x * y as f64).collect());
                }
            }
            Op::AddRow(x, bias) => {
                let cols = self.value(*x).cols();
                self.accumulate(grads, *x, g.to_vec());
                if rg(*bias) {
                    let mut db = vec![0.0; cols];
                    for (i, v) in g.iter().enumerate() {
                        db[i % cols] += v;
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::MulRow(x, gain) => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let gd = self.value(*gain).data();
                if rg(*x) {
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * gd[i % cols] as f64)
                        .collect();
                    self.accumulate(grads, *x, dx);
                }
                if rg(*gain) {
                    let mut dg = vec![0.0; cols];
                    for (i, (v, &xv)) in g.iter().zip(tx.data()).enumerate() {
                        dg[i % cols] += v * xv as f64;
                    }
                    self.accumulate(grads, *gain, dg);
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(v, &xv)| if xv > 0.0 { *v } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(v, &xv)| v * gelu_grad(xv as f64))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*x).cols();
                let m = rstd.len();
                let gd = self.value(*gamma).data();
                if rg(*gamma) || rg(*beta) {
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dgamma[j] += g[i * n + j] * xhat[i * n + j];
                            dbeta[j] += g[i * n + j];
                        }
                    }
                    self.accumulate(grads, *gamma, dgamma);
                    self.accumulate(grads, *beta, dbeta);
                }
                if rg(*x) {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = g[i * n + j] * gd[j] as f64;
                            mean_d += d;
                            mean_dx += d * xhat[i * n + j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let d = g[i * n + j] * gd[j] as f64;
                            dx[i * n + j] = rstd[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SoftmaxRows(x) => {
                let tx = self.value(*x);
                let (m, n) = (tx.rows(), tx.cols());
                let mut dx = Vec::with_capacity(m * n);
                for i in 0..m {
                    let y = softmax(tx.row(i));
                    let gi = &g[i * n..(i + 1) * n];
                    let s: f64 = gi.iter().zip(&y).map(|(a, b)| a * b).sum();
                    dx.extend(gi.iter().zip(&y).map(|(a, b)| b * (a - s)));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    self.accumulate(grads, *p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[idx].value.cols();
                let rows = self.nodes[idx].value.rows();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if rg(*p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        self.accumulate(grads, *p, d);
                    }
                    offset += c;
                }
            }
            Op::SliceRows(x, start) => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let mut d = vec![0.0; tx.numel()];
                d[start * cols..start * cols + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, d);
            }
            Op::SliceCols(x, start) => {
                let tx = self.value(*x);
                let (rows, cols) = (tx.rows(), tx.cols());
                let width = g.len() / rows;
                let mut d = vec![0.0; tx.numel()];
                for i in 0..rows {
                    d[i * cols + start..i * cols + start + width]
                        .copy_from_slice(&g[i * width..(i + 1) * width]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::SumSquares(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, xd.iter().map(|&v| 2.0 * v as f64 * g[0]).collect());
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

// f64 kernels for the backward sweep.

fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bpj;
            }
        }
    }
    out
}

fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = arow.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            for (o, &bpj) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += api * bpj;
            }
        }
    }
    out
}
