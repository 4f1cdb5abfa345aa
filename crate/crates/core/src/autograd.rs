//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records one forward pass. Parameters live in a [`ParamStore`]
//! and are referenced by the tape without copying; [`Tape::backward`]
//! accumulates their gradients into a [`Grads`] buffer so several samples
//! can share one buffer before an optimizer step.
//!
//! Shape mismatches inside tape ops are programming errors and panic; the
//! public model functions validate user-facing shapes before recording.

use std::collections::BTreeMap;

use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable parameters in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics if the name is already taken.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.values {
            for x in v.as_mut_slice() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            slots: vec![None; params.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.slots[id.0].as_ref()
    }

    /// Gradient for `id`, or zeros if it never received any.
    pub fn dense(&self, params: &ParamStore, id: ParamId) -> Matrix {
        match &self.slots[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = params.get(id).shape();
                Matrix::zeros(r, c)
            }
        }
    }

    fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Matrix {
        self.slots[id.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: &Grads) {
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.scale_assign(k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(Matrix::is_finite)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow { a: Var, row: Var },
    Mul(Var, Var),
    MulCol { a: Var, col: Var },
    MulScalar { a: Var, s: Var },
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<f64>, rstd: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    GatherCols { a: Var, idx: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, probs: Matrix, targets: Vec<Option<usize>>, count: usize },
    Bce { p: Var, labels: Vec<f64> },
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Probability clamp used by binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            value: Some(m),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (am, an) = self.shape(a);
        let (bm, bn) = self.shape(b);
        let (m, k) = if ta { (an, am) } else { (am, an) };
        let (k2, n) = if tb { (bn, bm) } else { (bm, bn) };
        assert_eq!(k, k2, "matmul inner dims {am}x{an} {bm}x{bn}");
        let mut out = Matrix::zeros(m, n);
        gemm(1.0, self.value(a), ta, self.value(b), tb, 0.0, &mut out);
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shapes");
        let mut out = self.value(a).clone();
        let rv = self.value(row).as_slice().to_vec();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow { a, row }, &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let bv = self.value(b).as_slice();
        let av = self.value(a).as_slice();
        let data = av.iter().zip(bv).map(|(x, y)| x * y).collect();
        let (r, c) = self.shape(a);
        let out = Matrix::from_vec(r, c, data).expect("shape");
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `n x 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "mul_col shapes");
        let mut out = self.value(a).clone();
        let cv = self.value(col).as_slice().to_vec();
        for (i, k) in cv.iter().enumerate() {
            for o in out.row_mut(i) {
                *o *= k;
            }
        }
        self.push(out, Op::MulCol { a, col }, &[a, col])
    }

    /// Multiplies every entry of `a` by the `1 x 1` value `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar expects a 1x1 scale");
        let k = self.value(s).item();
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::MulScalar { a, s }, &[a, s])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v + k);
        self.push(out, Op::AddConst(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Row-wise layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c));
        assert_eq!(self.shape(bias), (1, c));
        let xv = self.value(x);
        let g = self.value(gain).as_slice();
        let b = self.value(bias).as_slice();
        let mut out = Matrix::zeros(r, c);
        let mut means = Vec::with_capacity(r);
        let mut rstds = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            &[x, gain, bias],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let total: usize = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, rows, "concat_cols rows");
                self.shape(p).1
            })
            .sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            let w = pv.cols();
            for i in 0..rows {
                out.row_mut(i)[off..off + w].copy_from_slice(pv.row(i));
            }
            off += w;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols out of range");
        let av = self.value(a);
        let mut out = Matrix::zeros(r, len);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&av.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols { a, start }, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(idx.len(), av.cols());
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(av.row(i));
        }
        self.push(
            out,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows(), idx.len());
        for r in 0..av.rows() {
            for (o, &j) in idx.iter().enumerate() {
                out.set(r, o, av.get(r, j));
            }
        }
        self.push(
            out,
            Op::GatherCols {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshape(rows, cols).expect("reshape");
        self.push(out, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean cross-entropy of row-wise softmax(`logits`) against `targets`;
    /// rows whose target is `None` are excluded. Panics if all are `None`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross_entropy rows");
        let mut probs = lv.clone();
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let lse = log_sum_exp(row);
            if let Some(t) = *t {
                total += lse - row[t];
                count += 1;
            }
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        assert!(count > 0, "cross_entropy over zero targets");
        let loss = total / count as f64;
        self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                count,
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`,
    /// with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Var {
        let pv = self.value(p).as_slice();
        assert_eq!(pv.len(), labels.len(), "bce length");
        assert!(!labels.is_empty(), "bce over zero entries");
        let loss = bce_value(pv, labels);
        self.push(
            Matrix::scalar(loss),
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            &[p],
        )
    }

    /// Accumulates d`loss`/d(param) into `grads`. `loss` must be `1 x 1`.
    pub fn backward(&self, loss: Var, grads: &mut Grads) {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        let mut adj: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    grads.slot(*id, g.shape()).add_assign(&g);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                    if self.needs(a) {
                        let av = self.value(a);
                        let dst = self.adj_slot(&mut adj, a);
                        // d op(a) = g * op(b)^T
                        if ta {
                            gemm(1.0, self.value(b), tb, &g, true, 1.0, dst);
                        } else {
                            gemm(1.0, &g, false, self.value(b), !tb, 1.0, dst);
                        }
                        debug_assert_eq!(dst.shape(), av.shape());
                    }
                    if self.needs(b) {
                        let dst = self.adj_slot(&mut adj, b);
                        // d op(b) = op(a)^T * g
                        if tb {
                            gemm(1.0, &g, true, self.value(a), ta, 1.0, dst);
                        } else {
                            gemm(1.0, self.value(a), !ta, &g, false, 1.0, dst);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.needs(v) {
                            self.adj_slot(&mut adj, v).add_assign(&g);
                        }
                    }
                }
                Op::AddRow { a, row } => {
                    if self.needs(*a) {
                        self.adj_slot(&mut adj, *a).add_assign(&g);
                    }
                    if self.needs(*row) {
                        let dst = self.adj_slot(&mut adj, *row);
                        for i in 0..g.rows() {
                            for (d, v) in dst.as_mut_slice().iter_mut().zip(g.row(i)) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    for (x, y) in [(a, b), (b, a)] {
                        if self.needs(x) {
                            let yv = self.value(y).as_slice();
                            let dst = self.adj_slot(&mut adj, x);
                            for ((d, gv), yv) in dst.as_mut_slice().iter_mut().zip(g.as_slice()).zip(yv) {
                                *d += gv * yv;
                            }
                        }
                    }
                }
                Op::MulCol { a, col } => {
                    let (a, col) = (*a, *col);
                    if self.needs(a) {
                        let cv = self.value(col).as_slice();
                        let dst = self.adj_slot(&mut adj, a);
                        for (i, k) in cv.iter().enumerate() {
                            for (d, gv) in dst.row_mut(i).iter_mut().zip(g.row(i)) {
                                *d += gv * k;
                            }
                        }
                    }
                    if self.needs(col) {
                        let av = self.value(a);
                        let dst = self.adj_slot(&mut adj, col);
                        for i in 0..av.rows() {
                            let s: f64 = av.row(i).iter().zip(g.row(i)).map(|(x, y)| x * y).sum();
                            dst.as_mut_slice()[i] += s;
                        }
                    }
                }
                Op::MulScalar { a, s } => {
                    let (a, s) = (*a, *s);
                    if self.needs(a) {
                        let k = self.value(s).item();
                        let dst = self.adj_slot(&mut adj, a);
                        for (d, gv) in dst.as_mut_slice().iter_mut().zip(g.as_slice()) {
                            *d += gv * k;
                        }
                    }
                    if self.needs(s) {
                        let dot: f64 = self
                            .value(a)
                            .as_slice()
                            .iter()
                            .zip(g.as_slice())
                            .map(|(x, y)| x * y)
                            .sum();
                        self.adj_slot(&mut adj, s).as_mut_slice()[0] += dot;
                    }
                }
                Op::Scale(a, k) => {
                    if self.needs(*a) {
                        let dst = self.adj_slot(&mut adj, *a);
                        for (d, gv) in dst.as_mut_slice().iter_mut().zip(g.as_slice()) {
                            *d += gv * k;
                        }
                    }
                }
                Op::AddConst(a) | Op::Reshape(a) => {
                    if self.needs(*a) {
                        let dst = self.adj_slot(&mut adj, *a);
                        for (d, gv) in dst.as_mut_slice().iter_mut().zip(g.as_slice()) {
                            *d += gv;
                        }
                    }
                }
                Op::Relu(a) => {
                    if self.needs(*a) {
                        let av = self.value(*a).as_slice();
                        let dst = self.adj_slot(&mut adj, *a);
                        for ((d, gv), x) in dst.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av) {
                            if *x > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs(*a) {
                        let yv = node.value.as_ref().unwrap().as_slice();
                        let dst = self.adj_slot(&mut adj, *a);
                        for ((d, gv), y) in dst.as_mut_slice().iter_mut().zip(g.as_slice()).zip(yv) {
                            *d += gv * y * (1.0 - y);
                        }
                    }
                }
                Op::Softmax(a) => {
                    if self.needs(*a) {
                        let y = node.value.as_ref().unwrap();
                        let dst = self.adj_slot(&mut adj, *a);
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = g.row(r);
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((d, yv), gv) in dst.row_mut(r).iter_mut().zip(yr).zip(gr) {
                                *d += yv * (gv - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    mean,
                    rstd,
                } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let xv = self.value(x);
                    let gv = self.value(gain).as_slice();
                    let c = xv.cols();
                    if self.needs(gain) || self.needs(bias) {
                        let mut dg = vec![0.0; c];
                        let mut db = vec![0.0; c];
                        for i in 0..xv.rows() {
                            for j in 0..c {
                                let xhat = (xv.get(i, j) - mean[i]) * rstd[i];
                                dg[j] += g.get(i, j) * xhat;
                                db[j] += g.get(i, j);
                            }
                        }
                        if self.needs(gain) {
                            let dst = self.adj_slot(&mut adj, gain);
                            for (d, v) in dst.as_mut_slice().iter_mut().zip(&dg) {
                                *d += v;
                            }
                        }
                        if self.needs(bias) {
                            let dst = self.adj_slot(&mut adj, bias);
                            for (d, v) in dst.as_mut_slice().iter_mut().zip(&db) {
                                *d += v;
                            }
                        }
                    }
                    if self.needs(x) {
                        let dst = self.adj_slot(&mut adj, x);
                        let n = c as f64;
                        for i in 0..xv.rows() {
                            let xhat: Vec<f64> =
                                xv.row(i).iter().map(|v| (v - mean[i]) * rstd[i]).collect();
                            let dxhat: Vec<f64> =
                                g.row(i).iter().zip(gv).map(|(a, b)| a * b).collect();
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                            for (j, d) in dst.row_mut(i).iter_mut().enumerate() {
                                *d += rstd[i] / n * (n * dxhat[j] - sum_d - xhat[j] * sum_dx);
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.needs(p) {
                            let dst = self.adj_slot(&mut adj, p);
                            for i in 0..g.rows() {
                                for (d, v) in dst.row_mut(i).iter_mut().zip(&g.row(i)[off..off + w]) {
                                    *d += v;
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::SliceCols { a, start } => {
                    if self.needs(*a) {
                        let w = g.cols();
                        let dst = self.adj_slot(&mut adj, *a);
                        for i in 0..g.rows() {
                            for (d, v) in dst.row_mut(i)[*start..*start + w].iter_mut().zip(g.row(i)) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::GatherRows { a, idx } => {
                    if self.needs(*a) {
                        let dst = self.adj_slot(&mut adj, *a);
                        for (o, &i) in idx.iter().enumerate() {
                            for (d, v) in dst.row_mut(i).iter_mut().zip(g.row(o)) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::GatherCols { a, idx } => {
                    if self.needs(*a) {
                        let dst = self.adj_slot(&mut adj, *a);
                        for r in 0..g.rows() {
                            for (o, &j) in idx.iter().enumerate() {
                                let cur = dst.get(r, j);
                                dst.set(r, j, cur + g.get(r, o));
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    if self.needs(*a) {
                        let gt = g.transpose();
                        self.adj_slot(&mut adj, *a).add_assign(&gt);
                    }
                }
                Op::Sum(a) => {
                    if self.needs(*a) {
                        let k = g.item();
                        for d in self.adj_slot(&mut adj, *a).as_mut_slice() {
                            *d += k;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                    count,
                } => {
                    if self.needs(*logits) {
                        let k = g.item() / *count as f64;
                        let dst = self.adj_slot(&mut adj, *logits);
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            for (j, (d, p)) in dst.row_mut(r).iter_mut().zip(probs.row(r)).enumerate() {
                                let y = if j == t { 1.0 } else { 0.0 };
                                *d += k * (p - y);
                            }
                        }
                    }
                }
                Op::Bce { p, labels } => {
                    if self.needs(*p) {
                        let k = g.item() / labels.len() as f64;
                        let pv = self.value(*p).as_slice();
                        let grads_p: Vec<f64> = pv
                            .iter()
                            .zip(labels)
                            .map(|(&p, &y)| {
                                if p < BCE_EPS || p > 1.0 - BCE_EPS {
                                    0.0
                                } else {
                                    k * (-(y / p) + (1.0 - y) / (1.0 - p))
                                }
                            })
                            .collect();
                        let dst = self.adj_slot(&mut adj, *p);
                        for (d, v) in dst.as_mut_slice().iter_mut().zip(&grads_p) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }

    #[inline]
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn adj_slot<'a>(&self, adj: &'a mut [Option<Matrix>], v: Var) -> &'a mut Matrix {
        let (r, c) = self.shape(v);
        adj[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean clamped binary cross-entropy.
pub fn bce_value(probs: &[f64], labels: &[f64]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks analytic vs numeric gradients of `f` with respect to every parameter.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Tape) -> Var) -> f64 {
        let mut grads = Grads::new(store);
        {
            let mut tape = Tape::new(store);
            let loss = f(&mut tape);
            tape.backward(loss, &mut grads);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        let mut worst: f64 = 0.0;
        for id in ids {
            let analytic = grads.dense(store, id);
            let numeric = central_difference(store, id, 1e-6, |s| {
                let mut tape = Tape::new(s);
                let loss = f(&mut tape);
                tape.value(loss).item()
            });
            worst = worst.max(relative_error(analytic.as_slice(), numeric.as_slice()));
        }
        worst
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, 3, 4));
        let b = store.add("b", random(&mut rng, 4, 5));
        let c = store.add("c", random(&mut rng, 3, 5));
        let row = store.add("row", random(&mut rng, 1, 5));
        let col = store.add("col", random(&mut rng, 3, 1));
        let s = store.add("s", random(&mut rng, 1, 1));
        let gain = store.add("gain", random(&mut rng, 1, 5));
        let bias = store.add("bias", random(&mut rng, 1, 5));
        let err = check(&mut store, |t| {
            let a = t.param(a);
            let b = t.param(b);
            let c = t.param(c);
            let ab = t.matmul(a, b);
            let x = t.add(ab, c);
            let (row, col, s) = (t.param(row), t.param(col), t.param(s));
            let (gain, bias) = (t.param(gain), t.param(bias));
            let x = t.add_row(x, row);
            let x = t.mul_col(x, col);
            let x = t.mul_scalar(x, s);
            let sig = t.sigmoid(x);
            let r = t.relu(x);
            let m = t.mul(sig, r);
            let ln = t.layer_norm(m, gain, bias, 1e-5);
            let sm = t.softmax(ln);
            let tr = t.transpose(sm);
            let back = t.matmul_t(tr, false, c, false);
            let sl = t.slice_cols(back, 1, 3);
            let ga = t.gather_rows(sl, &[2, 0, 2]);
            let gc = t.gather_cols(ga, &[1, 1, 0]);
            let cat = t.concat_cols(&[gc, ga]);
            let rs = t.reshape(cat, 2, 9);
            let sc = t.scale(rs, 0.7);
            let sc = t.add_const(sc, 0.1);
            let ce = t.cross_entropy(sc, &[Some(3), None]);
            let p = t.sigmoid(sc);
            let p = t.slice_cols(p, 0, 4);
            let bce = t.bce(p, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
            let total = t.add(ce, bce);
            let extra = t.sum(x);
            let extra = t.scale(extra, 0.01);
            t.add(total, extra)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn transposed_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, 4, 3));
        let b = store.add("b", random(&mut rng, 5, 4));
        for (ta, tb) in [(true, true), (true, false), (false, true), (false, false)] {
            let err = check(&mut store, |t| {
                let av = t.param(a);
                let bv = t.param(b);
                // shapes: op(a) is 3x4 or 4x3; pick b orientation to match
                let out = match (ta, tb) {
                    (true, true) => t.matmul_t(av, true, bv, true),
                    (true, false) => {
                        let bt = t.transpose(bv);
                        t.matmul_t(av, true, bt, false)
                    }
                    (false, true) => {
                        let at = t.transpose(av);
                        t.matmul_t(at, false, bv, true)
                    }
                    (false, false) => {
                        let at = t.transpose(av);
                        let bt = t.transpose(bv);
                        t.matmul(at, bt)
                    }
                };
                let sq = t.mul(out, out);
                t.sum(sq)
            });
            assert!(err < 1e-7, "{ta} {tb}: {err}");
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let l = t.constant(Matrix::zeros(2, 40));
        let ce = t.cross_entropy(l, &[Some(1), Some(7)]);
        assert!((t.value(ce).item() - 40f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_clamps() {
        assert!(bce_value(&[1.0, 0.0], &[1.0, 0.0]) < 1e-6);
        assert!((bce_value(&[0.5], &[1.0]) - 2f64.ln()).abs() < 1e-12);
    }
}
