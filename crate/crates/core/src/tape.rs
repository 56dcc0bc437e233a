//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation eagerly: values are computed when the
//! node is created and the op is kept for the backward sweep. Scalars are
//! `1x1` matrices. Shape errors inside the tape are programming errors and
//! panic; the public model functions validate user-facing shapes first.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::Result;
use crate::linalg;
use crate::sparse::SparseOperator;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Divide(Var, f64),
    ScaleBy(Var, Var),
    AddConst(Var),
    MatMul(Var, Var),
    MatMulTn(Var, Var),
    MatMulNt(Var, Var),
    SpMM(Arc<SparseOperator>, Var),
    GatherRows(Var, Arc<[usize]>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    RepeatRow(Var),
    AddRow(Var, Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    NormalizeRows(Var, Arc<[f64]>),
    RowSum(Var),
    Sum(Var),
    Diagonal(Var),
    WeightedGram(Var, Var),
    LogDetSpd(Var, Array2<f64>),
    Recip(Var),
    SquaredNorm(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// Gradients of a scalar with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, with zeros of the given shape when absent.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(var).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }

    pub fn take(&mut self, var: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Records a differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

fn logsumexp_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), 1));
    for (r, row) in x.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        out[[r, 0]] = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
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

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn unary(&mut self, a: Var, value: Array2<f64>, op: Op) -> Var {
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, value: Array2<f64>, op: Op) -> Var {
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, op, tracked)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Copies `a` into a constant, cutting the gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.dim(), (1, 1), "scalar_value on non-scalar node");
        value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.binary(a, b, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        self.binary(a, b, value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.binary(a, b, value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.unary(a, value, Op::Scale(a, factor))
    }

    pub fn divide(&mut self, a: Var, divisor: f64) -> Var {
        let value = self.value(a) / divisor;
        self.unary(a, value, Op::Divide(a, divisor))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Multiplies a matrix by a `1x1` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by expects a scalar factor");
        let value = self.value(a) * self.value(s)[[0, 0]];
        self.binary(a, s, value, Op::ScaleBy(a, s))
    }

    /// Adds a constant matrix of the same shape.
    pub fn add_const(&mut self, a: Var, constant: &Array2<f64>) -> Var {
        assert_eq!(self.shape(a), constant.dim(), "add_const shape mismatch");
        let value = self.value(a) + constant;
        self.unary(a, value, Op::AddConst(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.binary(a, b, value, Op::MatMul(a, b))
    }

    /// `aᵀ b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).t().dot(self.value(b));
        self.binary(a, b, value, Op::MatMulTn(a, b))
    }

    /// `a bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.binary(a, b, value, Op::MatMulNt(a, b))
    }

    /// Sparse-dense product with a fixed operator.
    pub fn spmm(&mut self, op: &Arc<SparseOperator>, x: Var) -> Var {
        let value = op
            .matrix()
            .matmul(self.value(x).view())
            .expect("spmm shape mismatch");
        self.unary(x, value, Op::SpMM(Arc::clone(op), x))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        self.unary(a, value, Op::GatherRows(a, rows.into()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), tracked)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.unary(a, value, Op::SliceCols(a, start, end))
    }

    /// Repeats a `1xc` row `n` times.
    pub fn repeat_row(&mut self, a: Var, n: usize) -> Var {
        let row = self.value(a);
        assert_eq!(row.nrows(), 1, "repeat_row expects a single row");
        let value = row.broadcast((n, row.ncols())).unwrap().to_owned();
        self.unary(a, value, Op::RepeatRow(a))
    }

    /// Adds a `1xc` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shape mismatch");
        let value = self.value(a) + &self.value(row).broadcast((n, c)).unwrap();
        self.binary(a, row, value, Op::AddRow(a, row))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.unary(a, value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.unary(a, value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.unary(a, value, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.unary(a, value, Op::Softplus(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.unary(a, value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let lse = logsumexp_rows(x);
        let value = x - &lse;
        self.unary(a, value, Op::LogSoftmaxRows(a))
    }

    /// `log Σ_j exp(a[r, j])` as an `nx1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let value = logsumexp_rows(self.value(a));
        self.unary(a, value, Op::LogSumExpRows(a))
    }

    /// Rows scaled to unit norm; norms below `floor` are clamped to `floor`.
    pub fn normalize_rows(&mut self, a: Var, floor: f64) -> Var {
        let x = self.value(a);
        let norms: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(floor))
            .collect();
        let mut value = x.clone();
        for (mut row, &n) in value.rows_mut().into_iter().zip(&norms) {
            row /= n;
        }
        self.unary(a, value, Op::NormalizeRows(a, norms.into()))
    }

    /// Row sums as an `nx1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(a, value, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.unary(a, value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let count = self.value(a).len() as f64;
        let total = self.sum(a);
        self.scale(total, 1.0 / count)
    }

    /// Diagonal of a square matrix as an `nx1` column.
    pub fn diagonal(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), x.ncols(), "diagonal of non-square matrix");
        let value = x.diag().to_owned().insert_axis(Axis(1));
        self.unary(a, value, Op::Diagonal(a))
    }

    /// `zᵀ diag(w) z` for `z: nxd`, `w: nx1`.
    pub fn weighted_gram(&mut self, z: Var, w: Var) -> Var {
        let (n, _) = self.shape(z);
        assert_eq!(self.shape(w), (n, 1), "weighted_gram weight shape");
        let zv = self.value(z);
        let weighted = zv * self.value(w);
        let value = zv.t().dot(&weighted);
        self.binary(z, w, value, Op::WeightedGram(z, w))
    }

    /// `log det a` for symmetric positive-definite `a`.
    pub fn logdet_spd(&mut self, a: Var) -> Result<Var> {
        let (logdet, inverse) = linalg::logdet_spd(self.value(a).view())?;
        let value = Array2::from_elem((1, 1), logdet);
        Ok(self.unary(a, value, Op::LogDetSpd(a, inverse)))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| 1.0 / v);
        self.unary(a, value, Op::Recip(a))
    }

    /// Sum of squared entries.
    pub fn squared_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Array2::from_elem((1, 1), x.iter().map(|v| v * v).sum());
        self.unary(a, value, Op::SquaredNorm(a))
    }

    /// Gradients of the scalar `output` with respect to every tracked node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        if !self.tracked(output) {
            return Gradients { grads };
        }
        grads[output.0] = Some(Array2::ones((1, 1)));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, factor) => self.accumulate(grads, *a, g * *factor),
            Op::Divide(a, divisor) => self.accumulate(grads, *a, g / *divisor),
            Op::ScaleBy(a, s) => {
                let factor = self.value(*s)[[0, 0]];
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g * factor);
                }
                if self.tracked(*s) {
                    let ds = (g * self.value(*a)).sum();
                    self.accumulate(grads, *s, Array2::from_elem((1, 1), ds));
                }
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulTn(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, self.value(*b).dot(&g.t()));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, self.value(*a).dot(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::SpMM(op, x) => {
                let delta = op.transposed().matmul(g.view()).expect("spmm backward shape");
                self.accumulate(grads, *x, delta);
            }
            Op::GatherRows(a, rows) => {
                let mut delta = Array2::zeros(self.shape(*a));
                for (r, &src) in rows.iter().enumerate() {
                    let mut dst = delta.row_mut(src);
                    dst += &g.row(r);
                }
                self.accumulate(grads, *a, delta);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let width = self.shape(p).1;
                    if self.tracked(p) {
                        self.accumulate(grads, p, g.slice(s![.., start..start + width]).to_owned());
                    }
                    start += width;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut delta = Array2::zeros(self.shape(*a));
                delta.slice_mut(s![.., *start..*end]).assign(g);
                self.accumulate(grads, *a, delta);
            }
            Op::RepeatRow(a) => {
                let delta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(grads, *a, delta);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Tanh(a) => {
                let delta = Zip::from(g).and(y).map_collect(|&g, &t| g * (1.0 - t * t));
                self.accumulate(grads, *a, delta);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g * y),
            Op::Log(a) => self.accumulate(grads, *a, g / self.value(*a)),
            Op::Softplus(a) => {
                let delta = Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| g * sigmoid(x));
                self.accumulate(grads, *a, delta);
            }
            Op::SoftmaxRows(a) => {
                let inner = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let delta = y * &(g - &inner);
                self.accumulate(grads, *a, delta);
            }
            Op::LogSoftmaxRows(a) => {
                let total = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let probs = y.mapv(f64::exp);
                let delta = g - &(probs * &total);
                self.accumulate(grads, *a, delta);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let probs = (x - y).mapv(f64::exp);
                self.accumulate(grads, *a, probs * g);
            }
            Op::NormalizeRows(a, norms) => {
                let x = self.value(*a);
                let mut delta = g.clone();
                for r in 0..x.nrows() {
                    let n = norms[r];
                    let raw = x.row(r).dot(&x.row(r)).sqrt();
                    let mut out = delta.row_mut(r);
                    if raw >= n {
                        let proj = y.row(r).dot(&g.row(r));
                        out.zip_mut_with(&y.row(r), |d, &yy| *d -= yy * proj);
                    }
                    out /= n;
                }
                self.accumulate(grads, *a, delta);
            }
            Op::RowSum(a) => {
                let delta = g.broadcast(self.shape(*a)).unwrap().to_owned();
                self.accumulate(grads, *a, delta);
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, Array2::from_elem(self.shape(*a), g[[0, 0]]));
            }
            Op::Diagonal(a) => {
                let mut delta = Array2::zeros(self.shape(*a));
                for i in 0..g.nrows() {
                    delta[[i, i]] = g[[i, 0]];
                }
                self.accumulate(grads, *a, delta);
            }
            Op::WeightedGram(z, w) => {
                let zv = self.value(*z);
                let wv = self.value(*w);
                let sym = g + &g.t();
                if self.tracked(*z) {
                    self.accumulate(grads, *z, zv.dot(&sym) * wv);
                }
                if self.tracked(*w) {
                    let zg = zv.dot(g);
                    let delta = (&zg * zv).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(grads, *w, delta);
                }
            }
            Op::LogDetSpd(a, inverse) => {
                self.accumulate(grads, *a, inverse * g[[0, 0]]);
            }
            Op::Recip(a) => {
                let delta = Zip::from(g).and(y).map_collect(|&g, &r| -g * r * r);
                self.accumulate(grads, *a, delta);
            }
            Op::SquaredNorm(a) => {
                self.accumulate(grads, *a, self.value(*a) * (2.0 * g[[0, 0]]));
            }
        }
    }
}
