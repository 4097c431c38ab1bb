//! Minimal reverse-mode differentiation over dense rank-2 tensors.
//!
//! A `Tape` records primitive operations as they execute; `backward` walks
//! the record in strict reverse order and accumulates exact gradients into
//! every leaf created with a gradient slot. The primitive set is just what
//! the graph network and the residual loss need: matrix multiply, bias add,
//! SiLU, layer normalization, gather/scatter-add over rows, elementwise
//! arithmetic, and the two reductions. Everything is double precision and
//! summation order is fixed, so identical inputs give bitwise-identical
//! forward and backward results.

use crate::error::{Error, Result};
use ndarray::{Array2, Axis};
use std::rc::Rc;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf { requires_grad: bool },
    Matmul(Var, Var),
    Add(Var, Var),
    /// (n, d) + (1, d), the bias-row broadcast.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Elementwise product with an unlearnable tensor; (n, 1) constants
    /// broadcast across columns.
    MulConst(Var, Rc<Array2<f64>>),
    AddConst(Var),
    Scale(Var, f64),
    Silu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterAddRows { src: Var, idx: Rc<Vec<usize>> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Mean(Var),
    SumSquares(Var),
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (parameter or marked unknown).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf { requires_grad: true }, value)
    }

    /// Unlearnable input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf { requires_grad: false }, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, an) = self.nodes[a.0].value.dim();
        let (bm, bn) = self.nodes[b.0].value.dim();
        if an != bm {
            return Err(Error::Shape(format!("matmul {am}x{an} by {bm}x{bn}")));
        }
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        Ok(self.push(Op::Matmul(a, b), v))
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let da = self.nodes[a.0].value.dim();
        let db = self.nodes[b.0].value.dim();
        if da != db {
            return Err(Error::Shape(format!("{what}: {da:?} vs {db:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(Op::Add(a, b), v))
    }

    /// x + row-vector bias, broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.nodes[x.0].value.dim();
        let (bm, bn) = self.nodes[bias.0].value.dim();
        if bm != 1 || bn != d {
            return Err(Error::Shape(format!("add_row bias {bm}x{bn} for width {d}")));
        }
        let v = &self.nodes[x.0].value + &self.nodes[bias.0].value;
        Ok(self.push(Op::AddRow(x, bias), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Elementwise product with a constant of the same shape, or with an
    /// (n, 1) column broadcast across the columns of x.
    pub fn mul_const(&mut self, x: Var, c: Rc<Array2<f64>>) -> Result<Var> {
        let dx = self.nodes[x.0].value.dim();
        let dc = c.dim();
        let v = if dc == dx {
            &self.nodes[x.0].value * &*c
        } else if dc == (dx.0, 1) {
            &self.nodes[x.0].value * &c.broadcast(dx).unwrap()
        } else {
            return Err(Error::Shape(format!("mul_const {dx:?} by {dc:?}")));
        };
        Ok(self.push(Op::MulConst(x, c), v))
    }

    pub fn add_const(&mut self, x: Var, c: Rc<Array2<f64>>) -> Result<Var> {
        let dx = self.nodes[x.0].value.dim();
        if c.dim() != dx {
            return Err(Error::Shape(format!("add_const {dx:?} by {:?}", c.dim())));
        }
        let v = &self.nodes[x.0].value + &*c;
        Ok(self.push(Op::AddConst(x), v))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = &self.nodes[x.0].value * s;
        self.push(Op::Scale(x, s), v)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|t| t * sigmoid(t));
        self.push(Op::Silu(x), v)
    }

    /// Normalize each row over the feature axis, then apply learned
    /// scale/shift row vectors.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.nodes[x.0].value.dim();
        for (g, what) in [(gamma, "gamma"), (beta, "beta")] {
            let dg = self.nodes[g.0].value.dim();
            if dg != (1, d) {
                return Err(Error::Shape(format!("layernorm {what} {dg:?} for width {d}")));
            }
        }
        let xv = &self.nodes[x.0].value;
        let mut v = Array2::zeros((n, d));
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for c in 0..d {
                let xhat = (row[c] - mean) * inv;
                v[[r, c]] = self.nodes[gamma.0].value[[0, c]] * xhat + self.nodes[beta.0].value[[0, c]];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, v))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let (n, d) = self.nodes[x.0].value.dim();
        if let Some(&bad) = idx.iter().find(|&&k| k >= n) {
            return Err(Error::Shape(format!("gather_rows index {bad} >= {n}")));
        }
        let xv = &self.nodes[x.0].value;
        let mut v = Array2::zeros((idx.len(), d));
        for (r, &k) in idx.iter().enumerate() {
            v.row_mut(r).assign(&xv.row(k));
        }
        Ok(self.push(Op::GatherRows(x, idx), v))
    }

    /// out[idx[r]] += src[r]; `n_out` output rows. Adjoint of gather_rows.
    pub fn scatter_add_rows(&mut self, src: Var, idx: Rc<Vec<usize>>, n_out: usize) -> Result<Var> {
        let (n, d) = self.nodes[src.0].value.dim();
        if idx.len() != n {
            return Err(Error::Shape(format!(
                "scatter_add_rows: {} indices for {n} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&k| k >= n_out) {
            return Err(Error::Shape(format!("scatter_add_rows index {bad} >= {n_out}")));
        }
        let sv = &self.nodes[src.0].value;
        let mut v = Array2::zeros((n_out, d));
        for (r, &k) in idx.iter().enumerate() {
            let mut dst = v.row_mut(k);
            dst += &sv.row(r);
        }
        Ok(self.push(Op::ScatterAddRows { src, idx }, v))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of nothing".into()));
        }
        let n = self.nodes[parts[0].0].value.nrows();
        let mut width = 0;
        for &p in parts {
            let (pn, pd) = self.nodes[p.0].value.dim();
            if pn != n {
                return Err(Error::Shape(format!("concat_cols rows {pn} vs {n}")));
            }
            width += pd;
        }
        let mut v = Array2::zeros((n, width));
        let mut at = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            let pd = pv.ncols();
            v.slice_mut(ndarray::s![.., at..at + pd]).assign(pv);
            at += pd;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (_, d) = self.nodes[x.0].value.dim();
        if from >= to || to > d {
            return Err(Error::Shape(format!("slice_cols {from}..{to} of width {d}")));
        }
        let v = self.nodes[x.0].value.slice(ndarray::s![.., from..to]).to_owned();
        Ok(self.push(Op::SliceCols(x, from, to), v))
    }

    /// Mean over all entries, as a 1x1 tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let m = xv.sum() / xv.len() as f64;
        self.push(Op::Mean(x), Array2::from_elem((1, 1), m))
    }

    /// Sum of squared entries, as a 1x1 tensor.
    pub fn sum_of_squares(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().map(|&t| t * t).sum();
        self.push(Op::SumSquares(x), Array2::from_elem((1, 1), s))
    }

    /// Reverse pass from a scalar loss. Gradients from a previous backward
    /// are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.dim() != (1, 1) {
            return Err(Error::Shape("backward target must be a 1x1 scalar".into()));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for k in (0..=loss.0).rev() {
            let Some(g) = self.grads[k].take() else { continue };
            match &self.nodes[k].op {
                Op::Leaf { .. } => {
                    self.grads[k] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::AddRow(x, bias) => {
                    let (x, bias) = (*x, *bias);
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(x, g);
                    self.accumulate(bias, db);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, g.clone());
                    self.accumulate(b, -g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = &g * &self.nodes[b.0].value;
                    let db = &g * &self.nodes[a.0].value;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::MulConst(x, c) => {
                    let x = *x;
                    let dx = if c.dim() == g.dim() {
                        &g * &**c
                    } else {
                        &g * &c.broadcast(g.dim()).unwrap()
                    };
                    self.accumulate(x, dx);
                }
                Op::AddConst(x) => {
                    let x = *x;
                    self.accumulate(x, g);
                }
                Op::Scale(x, s) => {
                    let (x, s) = (*x, *s);
                    self.accumulate(x, g * s);
                }
                Op::Silu(x) => {
                    let x = *x;
                    let dx = ndarray::Zip::from(&g)
                        .and(&self.nodes[x.0].value)
                        .map_collect(|&gi, &t| {
                            let s = sigmoid(t);
                            gi * (s + t * s * (1.0 - s))
                        });
                    self.accumulate(x, dx);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gamma.0].value;
                    let (n, d) = xv.dim();
                    let mut dx = Array2::zeros((n, d));
                    let mut dgamma = Array2::zeros((1, d));
                    let mut dbeta = Array2::zeros((1, d));
                    for r in 0..n {
                        let row = xv.row(r);
                        let mean = row.sum() / d as f64;
                        let var =
                            row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                        // dL/dxhat = g * gamma; then the standard rowwise form
                        let mut sum_gy = 0.0;
                        let mut sum_gy_xhat = 0.0;
                        for c in 0..d {
                            let xhat = (row[c] - mean) * inv;
                            let gy = g[[r, c]] * gv[[0, c]];
                            sum_gy += gy;
                            sum_gy_xhat += gy * xhat;
                            dgamma[[0, c]] += g[[r, c]] * xhat;
                            dbeta[[0, c]] += g[[r, c]];
                        }
                        for c in 0..d {
                            let xhat = (row[c] - mean) * inv;
                            let gy = g[[r, c]] * gv[[0, c]];
                            dx[[r, c]] =
                                inv * (gy - sum_gy / d as f64 - xhat * sum_gy_xhat / d as f64);
                        }
                    }
                    self.accumulate(x, dx);
                    self.accumulate(gamma, dgamma);
                    self.accumulate(beta, dbeta);
                }
                Op::GatherRows(x, idx) => {
                    let x = *x;
                    let idx = Rc::clone(idx);
                    let n = self.nodes[x.0].value.nrows();
                    let mut dx = Array2::zeros((n, g.ncols()));
                    for (r, &k) in idx.iter().enumerate() {
                        let mut dst = dx.row_mut(k);
                        dst += &g.row(r);
                    }
                    self.accumulate(x, dx);
                }
                Op::ScatterAddRows { src, idx } => {
                    let src = *src;
                    let idx = Rc::clone(idx);
                    let mut ds = Array2::zeros((idx.len(), g.ncols()));
                    for (r, &k) in idx.iter().enumerate() {
                        ds.row_mut(r).assign(&g.row(k));
                    }
                    self.accumulate(src, ds);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let pd = self.nodes[p.0].value.ncols();
                        let dp = g.slice(ndarray::s![.., at..at + pd]).to_owned();
                        at += pd;
                        self.accumulate(p, dp);
                    }
                }
                Op::SliceCols(x, from, to) => {
                    let (x, from, to) = (*x, *from, *to);
                    let (n, d) = self.nodes[x.0].value.dim();
                    let mut dx = Array2::zeros((n, d));
                    dx.slice_mut(ndarray::s![.., from..to]).assign(&g);
                    self.accumulate(x, dx);
                }
                Op::Mean(x) => {
                    let x = *x;
                    let dim = self.nodes[x.0].value.dim();
                    let s = g[[0, 0]] / (dim.0 * dim.1) as f64;
                    self.accumulate(x, Array2::from_elem(dim, s));
                }
                Op::SumSquares(x) => {
                    let x = *x;
                    let dx = &self.nodes[x.0].value * (2.0 * g[[0, 0]]);
                    self.accumulate(x, dx);
                }
            }
        }
        // drop gradients of constants
        for k in 0..self.nodes.len() {
            if let Op::Leaf { requires_grad: false } = self.nodes[k].op {
                self.grads[k] = None;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Array2<f64>) {
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Compare reverse-mode gradients of `f` against central finite differences
/// at `points`; returns the max relative error over every coordinate of
/// every point.
pub fn grad_check<F>(f: F, points: &[Array2<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let grads: Vec<Array2<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Array2::zeros(tape.value(v).dim())))
        .collect();

    let eval = |pts: &[Array2<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = pts.iter().map(|p| t.leaf(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.scalar(l))
    };

    let mut max_rel: f64 = 0.0;
    let mut work: Vec<Array2<f64>> = points.to_vec();
    for (pi, p) in points.iter().enumerate() {
        let (n, d) = p.dim();
        for r in 0..n {
            for c in 0..d {
                let orig = work[pi][[r, c]];
                work[pi][[r, c]] = orig + step;
                let fp = eval(&work)?;
                work[pi][[r, c]] = orig - step;
                let fm = eval(&work)?;
                work[pi][[r, c]] = orig;
                let fd = (fp - fm) / (2.0 * step);
                let ad = grads[pi][[r, c]];
                // floor the denominator so finite-difference roundoff on
                // near-zero gradients does not dominate the report
                let denom = ad.abs().max(fd.abs()).max(1e-3);
                let rel = (ad - fd).abs() / denom;
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(max_rel)
}
