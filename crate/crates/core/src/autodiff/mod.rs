//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass together with its
//! value. [`Tape::backward`] walks the record in reverse once and returns the
//! gradient of a scalar loss with respect to every node; gradients of a node
//! used more than once are summed. Values are `f64` throughout and every op
//! rejects non-finite results.
//!
//! ```
//! use confgen::autodiff::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::row_vector(vec![1.0, 2.0]));
//! let y = tape.add(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.of(x).data(), &[2.0, 2.0]);
//! ```

mod matrix;

pub use matrix::Matrix;
use matrix::gemm;
use rand::Rng;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be 1×1, got {rows}×{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("backward has already been run on this tape")]
    BackwardTwice,
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("{op}: index {index} out of range for {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("data of length {len} does not fit a {rows}×{cols} matrix")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Identifier of a trainable parameter, assigned by the caller.
pub type ParamId = usize;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchNormMode<'a> {
    /// Normalise with batch statistics.
    Train,
    /// Normalise with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics reported by a training-mode batch norm, for updating the
/// running estimates. `var` is the unbiased estimate; batches of fewer than
/// two rows report nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    SegmentSum(usize, Vec<usize>),
    SegmentSoftmax(usize, Vec<usize>, usize),
    RowMean(usize),
    Sum(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Exp(usize),
    RowNormDiff(usize, Vec<(usize, usize)>),
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Matrix, inv_std: Vec<f64>, train: bool },
    Dropout(usize, Vec<f64>),
    StopGradient,
    MinEigen4(usize, [f64; 4]),
}

struct Node {
    value: Matrix,
    op: Op,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Record of one forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    finished: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward pass.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not
    /// influence the loss.
    pub fn of(&self, var: Var) -> Matrix {
        assert_eq!(var.tape, self.tape, "variable from a different tape");
        self.grads[var.idx].clone().unwrap_or_else(|| {
            let (r, c) = self.shapes[var.idx];
            Matrix::zeros(r, c)
        })
    }

    /// Whether any gradient reached `var`.
    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.idx].is_some()
    }

    /// Gradients of every parameter leaf on the tape, summed per parameter id.
    pub fn params(&self) -> Vec<(ParamId, Matrix)> {
        let mut out: Vec<(ParamId, Matrix)> = Vec::new();
        for &(id, idx) in &self.params {
            let g = self.of(Var { tape: self.tape, idx });
            match out.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => acc.add_assign(&g),
                None => out.push((id, g)),
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn num_segments(seg: &[usize]) -> usize {
    seg.iter().max().map_or(0, |m| m + 1)
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), finished: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, op_name: &'static str, value: Matrix, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var { tape: self.id, idx: self.nodes.len() - 1 })
    }

    pub fn value(&self, v: Var) -> &Matrix {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// A constant input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        let id = self.id;
        self.nodes.push(Node { value, op: Op::Leaf { param: None } });
        Var { tape: id, idx: self.nodes.len() - 1 }
    }

    /// A trainable parameter; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Matrix) -> Var {
        let tape = self.id;
        self.nodes.push(Node { value, op: Op::Leaf { param: Some(id) } });
        Var { tape, idx: self.nodes.len() - 1 }
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (l, r) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if l != r {
            return Err(AutodiffError::ShapeMismatch { op, left: l, right: r });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", a, b)?;
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x + y);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("sub", a, b)?;
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", a, b)?;
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("div", a, b)?;
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x / y);
        self.push("div", v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.map(|x| x * s);
        self.push("scale", v, Op::Scale(a, s))
    }

    /// Adds a 1×c row to every row of an n×c matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (a, r) = (self.idx(a)?, self.idx(row)?);
        let (av, rv) = (&self.nodes[a].value, &self.nodes[r].value);
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(AutodiffError::ShapeMismatch { op: "add_row", left: av.shape(), right: rv.shape() });
        }
        let mut v = av.clone();
        let c = av.cols();
        for (k, x) in v.data_mut().iter_mut().enumerate() {
            *x += rv.data()[k % c];
        }
        self.push("add_row", v, Op::AddRow(a, r))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.cols() != bv.rows() {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", left: av.shape(), right: bv.shape() });
        }
        let v = gemm(av, false, bv, false);
        self.push("matmul", v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.transpose();
        self.push("transpose", v, Op::Transpose(a))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let a = self.idx(a)?;
        let v = Matrix::new(rows, cols, self.nodes[a].value.data().to_vec())?;
        self.push("reshape", v, Op::Reshape(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let rows = idx.first().map_or(0, |&i| self.nodes[i].value.rows());
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.0 != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[idx[0]].value.shape(),
                    right: s,
                });
            }
        }
        let cols: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let v = Matrix::new(rows, cols, data)?;
        self.push("concat_cols", v, Op::ConcatCols(idx))
    }

    /// `out[k] = a[index[k]]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let a = self.idx(a)?;
        let av = &self.nodes[a].value;
        let mut data = Vec::with_capacity(index.len() * av.cols());
        for &i in index {
            if i >= av.rows() {
                return Err(AutodiffError::IndexOutOfRange { op: "gather_rows", index: i, len: av.rows() });
            }
            data.extend_from_slice(av.row(i));
        }
        let v = Matrix::new(index.len(), av.cols(), data)?;
        self.push("gather_rows", v, Op::GatherRows(a, index.to_vec()))
    }

    /// Sums rows into `num_segments` buckets given by `segment[row]`.
    pub fn segment_sum(&mut self, a: Var, segment: &[usize], num_segments: usize) -> Result<Var> {
        let a = self.idx(a)?;
        let av = &self.nodes[a].value;
        if segment.len() != av.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "segment_sum",
                left: av.shape(),
                right: (segment.len(), 1),
            });
        }
        let mut v = Matrix::zeros(num_segments, av.cols());
        for (r, &s) in segment.iter().enumerate() {
            if s >= num_segments {
                return Err(AutodiffError::IndexOutOfRange { op: "segment_sum", index: s, len: num_segments });
            }
            for (o, x) in v.row_mut(s).iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        self.push("segment_sum", v, Op::SegmentSum(a, segment.to_vec()))
    }

    /// Column-wise softmax within each segment of rows.
    pub fn segment_softmax(&mut self, a: Var, segment: &[usize]) -> Result<Var> {
        let a = self.idx(a)?;
        let av = &self.nodes[a].value;
        if segment.len() != av.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "segment_softmax",
                left: av.shape(),
                right: (segment.len(), 1),
            });
        }
        let ns = num_segments(segment);
        let cols = av.cols();
        let mut max = Matrix::filled(ns, cols, f64::NEG_INFINITY);
        for (r, &s) in segment.iter().enumerate() {
            for c in 0..cols {
                max.set(s, c, max.get(s, c).max(av.get(r, c)));
            }
        }
        let mut v = Matrix::zeros(av.rows(), cols);
        let mut denom = Matrix::zeros(ns, cols);
        for (r, &s) in segment.iter().enumerate() {
            for c in 0..cols {
                let e = (av.get(r, c) - max.get(s, c)).exp();
                v.set(r, c, e);
                denom.set(s, c, denom.get(s, c) + e);
            }
        }
        for (r, &s) in segment.iter().enumerate() {
            for c in 0..cols {
                v.set(r, c, v.get(r, c) / denom.get(s, c));
            }
        }
        self.push("segment_softmax", v, Op::SegmentSoftmax(a, segment.to_vec(), ns))
    }

    /// Mean over rows, giving a 1×c row.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let av = &self.nodes[a].value;
        let n = av.rows().max(1) as f64;
        let mut v = Matrix::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, x) in v.data_mut().iter_mut().zip(av.row(r)) {
                *o += x / n;
            }
        }
        self.push("row_mean", v, Op::RowMean(a))
    }

    /// Sum of all entries, as a 1×1 matrix.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = Matrix::scalar(self.nodes[a].value.sum());
        self.push("sum", v, Op::Sum(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.map(|x| if x > 0.0 { x } else { slope * x });
        self.push("leaky_relu", v, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.map(f64::exp);
        self.push("exp", v, Op::Exp(a))
    }

    /// Euclidean distance between row pairs, one row per pair (p×1).
    pub fn row_norm_diff(&mut self, a: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let a = self.idx(a)?;
        let av = &self.nodes[a].value;
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs {
            for k in [i, j] {
                if k >= av.rows() {
                    return Err(AutodiffError::IndexOutOfRange { op: "row_norm_diff", index: k, len: av.rows() });
                }
            }
            let d: f64 = av.row(i).iter().zip(av.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            out.push(d.sqrt());
        }
        self.push("row_norm_diff", Matrix::column(out), Op::RowNormDiff(a, pairs.to_vec()))
    }

    /// Per-column batch normalisation followed by the affine map
    /// `gamma ⊙ x̂ + beta` (both 1×c). Training mode also returns the batch
    /// statistics for the running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xv = &self.nodes[xi].value;
        let (n, c) = xv.shape();
        for p in [gi, bi] {
            let s = self.nodes[p].value.shape();
            if s != (1, c) {
                return Err(AutodiffError::ShapeMismatch { op: "batch_norm", left: (n, c), right: s });
            }
        }
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                if n > 0 {
                    for r in 0..n {
                        for (m, x) in mean.iter_mut().zip(xv.row(r)) {
                            *m += x;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= n as f64);
                    for r in 0..n {
                        for ((v, x), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                            *v += (x - m) * (x - m);
                        }
                    }
                }
                let unbiased: Vec<f64> =
                    var.iter().map(|v| if n > 1 { v / (n - 1) as f64 } else { 0.0 }).collect();
                var.iter_mut().for_each(|v| *v /= n.max(1) as f64);
                let stats = (n > 1).then(|| BatchStats { mean: mean.clone(), var: unbiased });
                (mean, var, stats)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "batch_norm",
                        left: (n, c),
                        right: (1, mean.len()),
                    });
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut xhat = xv.clone();
        for r in 0..n {
            for (k, x) in xhat.row_mut(r).iter_mut().enumerate() {
                *x = (*x - mean[k]) * inv_std[k];
            }
        }
        let (g, b) = (&self.nodes[gi].value, &self.nodes[bi].value);
        let mut y = xhat.clone();
        for r in 0..n {
            for (k, x) in y.row_mut(r).iter_mut().enumerate() {
                *x = *x * g.data()[k] + b.data()[k];
            }
        }
        let train = matches!(mode, BatchNormMode::Train);
        let var = self.push("batch_norm", y, Op::BatchNorm { x: xi, gamma: gi, beta: bi, xhat, inv_std, train })?;
        Ok((var, stats))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales the
    /// survivors by `1/(1 − rate)`. Identity when `train` is false.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidRate(rate));
        }
        let ai = self.idx(a)?;
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[ai].value.data().len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        self.dropout_with_mask(a, mask)
    }

    /// Dropout with an explicit multiplicative mask.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let a = self.idx(a)?;
        let av = &self.nodes[a].value;
        if mask.len() != av.data().len() {
            return Err(AutodiffError::ShapeMismatch { op: "dropout", left: av.shape(), right: (mask.len(), 1) });
        }
        let mut v = av.clone();
        for (x, m) in v.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        self.push("dropout", v, Op::Dropout(a, mask))
    }

    /// Forwards the value; passes no gradient to `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.clone();
        self.push("stop_gradient", v, Op::StopGradient)
    }

    /// Smallest eigenvalue of a symmetric 4×4 matrix, as 1×1. The gradient
    /// with respect to the matrix is `q qᵀ` for the matching unit eigenvector.
    pub fn min_eigenvalue4(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let av = &self.nodes[ai].value;
        if av.shape() != (4, 4) {
            return Err(AutodiffError::ShapeMismatch { op: "min_eigenvalue4", left: av.shape(), right: (4, 4) });
        }
        let m: [[f64; 4]; 4] = std::array::from_fn(|i| std::array::from_fn(|j| 0.5 * (av.get(i, j) + av.get(j, i))));
        let (values, vectors) = crate::geomalign::symmetric_eigen4(&m);
        let k = (0..4).min_by(|&x, &y| values[x].total_cmp(&values[y])).expect("4 values");
        let norm = vectors[k].iter().map(|x| x * x).sum::<f64>().sqrt();
        let q = vectors[k].map(|x| x / norm);
        self.push("min_eigenvalue4", Matrix::scalar(values[k]), Op::MinEigen4(ai, q))
    }

    /// Gradients of the 1×1 node `loss` with respect to every node. A tape
    /// supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.finished {
            return Err(AutodiffError::BackwardTwice);
        }
        let (r, c) = self.nodes[li].value.shape();
        if (r, c) != (1, 1) {
            return Err(AutodiffError::NotScalar { rows: r, cols: c });
        }
        self.finished = true;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[li] = Some(Matrix::scalar(1.0));

        fn accumulate(grads: &mut [Option<Matrix>], i: usize, g: Matrix) {
            match &mut grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |k: usize| &self.nodes[k].value;
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, g.zip_map(val(*b), |x, y| x * y));
                    accumulate(&mut grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    accumulate(&mut grads, *a, g.zip_map(bv, |x, y| x / y));
                    let ga = g.zip_map(&node.value, |x, q| x * q);
                    accumulate(&mut grads, *b, ga.zip_map(bv, |x, y| -x / y));
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.map(|x| x * s)),
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, gr);
                }
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, gemm(&g, false, val(*b), true));
                    accumulate(&mut grads, *b, gemm(val(*a), true, &g, false));
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, Matrix::new(r, c, g.data().to_vec())?);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = val(p).shape();
                        let mut gp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::GatherRows(a, index) => {
                    let (rows, cols) = val(*a).shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    for (k, &src) in index.iter().enumerate() {
                        for (o, x) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SegmentSum(a, segment) => {
                    let (rows, cols) = val(*a).shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    for (r, &s) in segment.iter().enumerate() {
                        ga.row_mut(r).copy_from_slice(g.row(s));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SegmentSoftmax(a, segment, ns) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut dot = Matrix::zeros(*ns, cols);
                    for (r, &s) in segment.iter().enumerate() {
                        for c in 0..cols {
                            dot.set(s, c, dot.get(s, c) + y.get(r, c) * g.get(r, c));
                        }
                    }
                    let mut ga = Matrix::zeros(y.rows(), cols);
                    for (r, &s) in segment.iter().enumerate() {
                        for c in 0..cols {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot.get(s, c)));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowMean(a) => {
                    let (rows, cols) = val(*a).shape();
                    let n = rows.max(1) as f64;
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        for (o, x) in ga.row_mut(r).iter_mut().zip(g.data()) {
                            *o = x / n;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (rows, cols) = val(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(rows, cols, g.data()[0]));
                }
                Op::Relu(a) => {
                    accumulate(&mut grads, *a, g.zip_map(val(*a), |x, v| if v > 0.0 { x } else { 0.0 }));
                }
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    accumulate(&mut grads, *a, g.zip_map(val(*a), |x, v| if v > 0.0 { x } else { s * x }));
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g.zip_map(&node.value, |x, e| x * e)),
                Op::RowNormDiff(a, pairs) => {
                    let av = val(*a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        let d = node.value.get(p, 0);
                        if d == 0.0 {
                            continue;
                        }
                        let w = g.get(p, 0) / d;
                        for c in 0..av.cols() {
                            let delta = w * (av.get(i, c) - av.get(j, c));
                            ga.set(i, c, ga.get(i, c) + delta);
                            ga.set(j, c, ga.get(j, c) - delta);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let (n, c) = xhat.shape();
                    let gv = val(*gamma);
                    let mut dgamma = Matrix::zeros(1, c);
                    let mut dbeta = Matrix::zeros(1, c);
                    for r in 0..n {
                        for k in 0..c {
                            dgamma.data_mut()[k] += g.get(r, k) * xhat.get(r, k);
                            dbeta.data_mut()[k] += g.get(r, k);
                        }
                    }
                    let mut dx = Matrix::zeros(n, c);
                    for k in 0..c {
                        let gk = gv.data()[k];
                        if *train {
                            let nf = n as f64;
                            let (sum_dxhat, sum_dxhat_xhat) = (gk * dbeta.data()[k], gk * dgamma.data()[k]);
                            for r in 0..n {
                                let dxhat = g.get(r, k) * gk;
                                dx.set(r, k, inv_std[k] / nf * (nf * dxhat - sum_dxhat - xhat.get(r, k) * sum_dxhat_xhat));
                            }
                        } else {
                            for r in 0..n {
                                dx.set(r, k, g.get(r, k) * gk * inv_std[k]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Dropout(a, mask) => {
                    let mut ga = g.clone();
                    for (x, m) in ga.data_mut().iter_mut().zip(mask) {
                        *x *= m;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::StopGradient => {}
                Op::MinEigen4(a, q) => {
                    let s = g.data()[0];
                    let ga = Matrix::new(4, 4, (0..16).map(|k| s * q[k / 4] * q[k % 4]).collect())?;
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[i] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(id) } => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            params,
        })
    }
}
