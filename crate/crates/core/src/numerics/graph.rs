//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape: every operation pushes one node whose
//! inputs are earlier nodes, so node order is a topological order and the
//! backward sweep is a single reverse pass over the tape.
//!
//! Leaves are either constants, free inputs (used by gradient checks) or
//! parameters bound from a [`ParamStore`]. Frozen parameters enter the tape
//! as constants and never receive gradient.

use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    ShiftDiag(Var),
    Relu(Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    RowSums(Var),
    DivCol(Var, Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Mse {
        x: Var,
        target: Tensor,
    },
    /// One hyperpower iteration `Z Q / 4` with `P = AZ` and
    /// `Q = 13I - 15P + 7P^2 - P^3`.
    PinvStep {
        a: Var,
        z: Var,
        p: Tensor,
        q: Tensor,
    },
    PinvInit {
        x: Var,
        scale: f64,
        col: usize,
        row: usize,
        col_norm: f64,
        row_norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients of the root with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free differentiable leaf not tied to any parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter, once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Multiplies `a` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.value(s).item();
        let out = self.value(a).scale(c);
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::ScaleBy(a, s), ng)
    }

    /// `a + c * I` for square `a`.
    pub fn shift_diag(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.rows(), out.cols(), "shift_diag expects a square matrix");
        for i in 0..out.rows() {
            let v = out.get(i, i);
            out.set(i, i, v + c);
        }
        let ng = self.ng(a);
        self.push(out, Op::ShiftDiag(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a), false);
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`.
    pub fn softmax_rows_causal(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a), true);
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Normalizes each row to zero mean and unit variance, then applies a
    /// `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gain), self.value(bias));
        assert_eq!(gv.shape(), [1, d], "layer_norm gain shape");
        assert_eq!(bv.shape(), [1, d], "layer_norm bias shape");
        let mut xhat = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd.push(s);
            for c in 0..d {
                let h = (row[c] - mean) * s;
                xhat.set(r, c, h);
                out.set(r, c, gv.data()[c] * h + bv.data()[c]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { x: a, start }, ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(out, Op::SliceRows { x: a, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out.append_rows(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Column means, as a `1 x m` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_rows();
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    /// Row sums, as an `n x 1` column.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let out = Tensor::from_parts(av.rows(), 1, data);
        let ng = self.ng(a);
        self.push(out, Op::RowSums(a), ng)
    }

    /// Divides row `i` of `a` by `col[i]`.
    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.shape(), [av.rows(), 1], "div_col expects an n x 1 column");
        let mut out = av.clone();
        for r in 0..out.rows() {
            let d = cv.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v /= d);
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(out, Op::DivCol(a, col), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        let probs = softmax_rows(lv, false);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < lv.cols(), "target id out of range");
            let row = lv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        let ng = self.ng(logits);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Mean squared difference between `x` and a fixed target.
    pub fn mse(&mut self, x: Var, target: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse shape mismatch");
        let n = xv.len() as f64;
        let s: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s / n), Op::Mse { x, target }, ng)
    }

    /// One pseudo-inverse iteration `Z (13I - AZ (15I - AZ (7I - AZ))) / 4`
    /// recorded as a single node.
    pub fn pinv_step(&mut self, a: Var, z: Var) -> Var {
        let p = self.value(a).matmul(self.value(z));
        let shifted = |m: Tensor, c: f64| {
            let mut out = m.scale(-1.0);
            for i in 0..out.rows() {
                let v = out.get(i, i);
                out.set(i, i, v + c);
            }
            out
        };
        let t = shifted(p.clone(), 7.0);
        let t = shifted(p.matmul(&t), 15.0);
        let q = shifted(p.matmul(&t), 13.0);
        let out = self.value(z).matmul(&q).scale(0.25);
        let ng = self.ng(a) || self.ng(z);
        self.push(out, Op::PinvStep { a, z, p, q }, ng)
    }

    /// `a^T / (|a|_1 * |a|_inf)`, the norm-scaled start of the pseudo-inverse
    /// iteration. Differentiable through both norms.
    pub fn pinv_init(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (col, col_norm) = argmax_abs_col(av);
        let (row, row_norm) = argmax_abs_row(av);
        let scale = 1.0 / (col_norm * row_norm);
        let out = av.transpose().scale(scale);
        let ng = self.ng(a);
        self.push(
            out,
            Op::PinvInit {
                x: a,
                scale,
                col,
                row,
                col_norm,
                row_norm,
            },
            ng,
        )
    }

    /// Runs the backward sweep from a scalar root and returns leaf gradients.
    pub fn gradients(&self, root: Var) -> Result<Gradients> {
        if self.value(root).shape() != [1, 1] {
            return contract(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if !self.ng(root) {
            return Ok(Gradients { leaves });
        }
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(Error::NonFinite { node: i });
            }
            self.propagate(i, g, &mut grads, &mut leaves);
        }
        Ok(Gradients { leaves })
    }

    /// Backward sweep that also accumulates parameter gradients into `store`.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(root)?;
        for (&id, &v) in &self.bound {
            if let Some(g) = grads.get(v) {
                store.accumulate(id, g);
            }
        }
        Ok(grads)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        i: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        leaves: &mut HashMap<usize, Tensor>,
    ) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {
                leaves.insert(i, g);
            }
            &Op::MatMul(a, b) => {
                if self.ng(a) {
                    self.acc(grads, a, g.matmul_nt(self.value(b)));
                }
                if self.ng(b) {
                    self.acc(grads, b, self.value(a).matmul_tn(&g));
                }
            }
            &Op::MatMulNT(a, b) => {
                if self.ng(a) {
                    self.acc(grads, a, g.matmul(self.value(b)));
                }
                if self.ng(b) {
                    self.acc(grads, b, g.matmul_tn(self.value(a)));
                }
            }
            &Op::Transpose(a) => self.acc(grads, a, g.transpose()),
            &Op::Add(a, b) => {
                self.acc(grads, b, g.clone());
                self.acc(grads, a, g);
            }
            &Op::Sub(a, b) => {
                self.acc(grads, b, g.scale(-1.0));
                self.acc(grads, a, g);
            }
            &Op::Mul(a, b) => {
                if self.ng(a) {
                    self.acc(grads, a, g.zip_with(self.value(b), |x, y| x * y));
                }
                if self.ng(b) {
                    self.acc(grads, b, g.zip_with(self.value(a), |x, y| x * y));
                }
            }
            &Op::AddRow(a, row) => {
                if self.ng(row) {
                    let n = g.rows() as f64;
                    self.acc(grads, row, g.mean_rows().scale(n));
                }
                self.acc(grads, a, g);
            }
            &Op::Scale(a, c) => self.acc(grads, a, g.scale(c)),
            &Op::ScaleBy(a, s) => {
                if self.ng(s) {
                    let d: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(x, y)| x * y)
                        .sum();
                    self.acc(grads, s, Tensor::scalar(d));
                }
                if self.ng(a) {
                    let c = self.value(s).item();
                    self.acc(grads, a, g.scale(c));
                }
            }
            &Op::ShiftDiag(a) => self.acc(grads, a, g),
            &Op::Relu(a) => {
                let gx = g.zip_with(self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.acc(grads, a, gx);
            }
            &Op::Exp(a) => {
                let gx = g.zip_with(&node.value, |gv, y| gv * y);
                self.acc(grads, a, gx);
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (p, q)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - dot);
                    }
                }
                self.acc(grads, a, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (n, d) = (xhat.rows(), xhat.cols());
                let gv = self.value(*gain);
                if self.ng(*gain) {
                    let mut gg = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            gg[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    self.acc(grads, *gain, Tensor::row_vector(gg));
                }
                if self.ng(*bias) {
                    self.acc(grads, *bias, g.mean_rows().scale(n as f64));
                }
                if self.ng(*x) {
                    let mut gx = Tensor::zeros(n, d);
                    for r in 0..n {
                        let dxhat: Vec<f64> =
                            (0..d).map(|c| g.get(r, c) * gv.data()[c]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat
                            .iter()
                            .enumerate()
                            .map(|(c, v)| v * xhat.get(r, c))
                            .sum();
                        for c in 0..d {
                            let v = rstd[r] / d as f64
                                * (d as f64 * dxhat[c] - s1 - xhat.get(r, c) * s2);
                            gx.set(r, c, v);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            &Op::SliceCols { x, start } => {
                let xv = self.value(x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                }
                self.acc(grads, x, gx);
            }
            &Op::SliceRows { x, start } => {
                let xv = self.value(x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                let w = xv.cols();
                gx.data_mut()[start * w..start * w + g.len()].copy_from_slice(g.data());
                self.acc(grads, x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        self.acc(grads, p, g.slice_cols(off, w));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.ng(p) {
                        self.acc(grads, p, g.slice_rows(off, h));
                    }
                    off += h;
                }
            }
            &Op::MeanRows(a) => {
                let av = self.value(a);
                let n = av.rows();
                let mut gx = Tensor::zeros(n, av.cols());
                for r in 0..n {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v / n as f64;
                    }
                }
                self.acc(grads, a, gx);
            }
            &Op::RowSums(a) => {
                let av = self.value(a);
                let mut gx = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let v = g.data()[r];
                    gx.row_mut(r).iter_mut().for_each(|o| *o = v);
                }
                self.acc(grads, a, gx);
            }
            &Op::DivCol(a, col) => {
                let (av, cv) = (self.value(a), self.value(col));
                if self.ng(col) {
                    let data = (0..av.rows())
                        .map(|r| {
                            let c = cv.data()[r];
                            -g.row(r)
                                .iter()
                                .zip(av.row(r))
                                .map(|(p, q)| p * q)
                                .sum::<f64>()
                                / (c * c)
                        })
                        .collect();
                    self.acc(grads, col, Tensor::from_parts(av.rows(), 1, data));
                }
                if self.ng(a) {
                    let mut gx = g.clone();
                    for r in 0..gx.rows() {
                        let c = cv.data()[r];
                        gx.row_mut(r).iter_mut().for_each(|v| *v /= c);
                    }
                    self.acc(grads, a, gx);
                }
            }
            &Op::Sum(a) => {
                let av = self.value(a);
                self.acc(grads, a, Tensor::filled(av.rows(), av.cols(), g.item()));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len() as f64;
                let up = g.item();
                let mut gx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let v = gx.get(r, t);
                    gx.set(r, t, v - 1.0);
                }
                self.acc(grads, *logits, gx.scale(up / n));
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let k = 2.0 * g.item() / xv.len() as f64;
                self.acc(grads, *x, xv.zip_with(target, |a, b| k * (a - b)));
            }
            Op::PinvStep { a, z, p, q } => {
                let (a, z) = (*a, *z);
                let zv = self.value(z);
                let h = zv.matmul_tn(&g).scale(0.25);
                let p2 = p.matmul(p);
                let hpt = h.matmul_nt(p);
                let pth = p.matmul_tn(&h);
                let gp = h
                    .scale(-15.0)
                    .add(&hpt.add(&pth).scale(7.0))
                    .sub(&h.matmul_nt(&p2))
                    .sub(&pth.matmul_nt(p))
                    .sub(&p2.matmul_tn(&h));
                if self.ng(a) {
                    self.acc(grads, a, gp.matmul_nt(zv));
                }
                if self.ng(z) {
                    let gz = g.matmul_nt(q).scale(0.25).add(&self.value(a).matmul_tn(&gp));
                    self.acc(grads, z, gz);
                }
            }
            &Op::PinvInit {
                x,
                scale,
                col,
                row,
                col_norm,
                row_norm,
            } => {
                let xv = self.value(x);
                let mut gx = g.transpose().scale(scale);
                // d(scale) contribution through both norms.
                let ds: f64 = (0..xv.rows())
                    .flat_map(|i| (0..xv.cols()).map(move |j| (i, j)))
                    .map(|(i, j)| g.get(j, i) * xv.get(i, j))
                    .sum();
                let dc = -ds * scale / col_norm;
                let dr = -ds * scale / row_norm;
                for i in 0..xv.rows() {
                    let v = gx.get(i, col);
                    gx.set(i, col, v + dc * xv.get(i, col).signum());
                }
                for j in 0..xv.cols() {
                    let v = gx.get(row, j);
                    gx.set(row, j, v + dr * xv.get(row, j).signum());
                }
                self.acc(grads, x, gx);
            }
        }
    }
}

fn argmax_abs_col(a: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..a.cols() {
        let s: f64 = (0..a.rows()).map(|r| a.get(r, c).abs()).sum();
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

fn argmax_abs_row(a: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for r in 0..a.rows() {
        let s: f64 = a.row(r).iter().map(|v| v.abs()).sum();
        if s > best.1 {
            best = (r, s);
        }
    }
    best
}

/// Row-wise softmax with max subtraction. With `causal`, row `i` is
/// restricted to columns `0..=i`; masked entries are exactly zero.
pub fn softmax_rows(a: &Tensor, causal: bool) -> Tensor {
    let mut out = Tensor::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let width = if causal { (r + 1).min(a.cols()) } else { a.cols() };
        let row = &a.row(r)[..width];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out.row_mut(r)[..width];
        let mut z = 0.0;
        for (o, v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        orow.iter_mut().for_each(|o| *o /= z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x);
        let f = g.sum(sq);
        let grads = g.gradients(f).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn identity_matmul_gradient_is_ones() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let x = g.input(Tensor::new(2, 2, vec![0.3, -1.2, 4.0, 7.5]).unwrap());
        let y = g.matmul(i, x);
        let f = g.sum(y);
        let grads = g.gradients(f).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(matches!(g.gradients(x), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_is_reported_with_node() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(vec![1.0, f64::NAN]));
        let sq = g.mul(x, x);
        let f = g.sum(sq);
        match g.gradients(f) {
            Err(Error::NonFinite { node }) => assert_eq!(node, x.id()),
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::row_vector(vec![0.0, 0.0]), false);
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::row_vector(vec![2f64.ln(), 0.0]), false);
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let a = Tensor::new(2, 2, vec![5.0, 9.0, 1.0, 1.0]).unwrap();
        let s = softmax_rows(&a, true);
        assert_eq!(s.data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0));
        let u = store.add("u", Tensor::scalar(2.0));
        store.set_frozen(u, true);
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let uv = g.param(&store, u);
        let p = g.mul(wv, uv);
        let f = g.sum(p);
        g.backward(f, &mut store).unwrap();
        g.backward(f, &mut store).unwrap();
        assert_eq!(store.grad(w).item(), 4.0);
        assert_eq!(store.grad(u).item(), 0.0);
    }
}
