//! Reverse-mode differentiation on a dynamic tape of dense row-major matrices.
//!
//! Every node holds a `rows x cols` block; batches run along rows. The
//! backward sweep records its adjoint computations as new tape nodes, so a
//! gradient is itself a differentiable expression. This is what lets POTEB
//! differentiate through an unrolled ascent loop.
//!
//! Subgradients at kinks: `relu'(0) = 0`, `max`/`min` ties go to the first
//! argument, `clamp` has zero slope on its boundary, `abs'(0) = 0`.

use std::cell::{Ref, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Mat { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape does not match data length");
        Mat { rows, cols, data }
    }

    pub fn row(data: &[f64]) -> Self {
        Mat { rows: 1, cols: data.len(), data: data.to_vec() }
    }

    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, o: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.shape(), o.shape(), "elementwise shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// C = op(A) op(B), where op transposes when the flag is set.
pub fn matmul(a: &Mat, b: &Mat, ta: bool, tb: bool) -> Mat {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    let mut c = Mat::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe the row-major buffers of `a`, `b` and `c`,
    // whose lengths match the dimensions checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
#[allow(dead_code)]
enum Op {
    Input,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var, f64),
    MatMul(Var, Var, bool, bool),
    AddRow(Var, Var),
    Relu(Var),
    Tanh(Var),
    Max(Var, Var),
    Min(Var, Var),
    Clamp(Var, f64, f64),
    Abs(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    Atan2(Var, Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastRows(Var, usize),
    BroadcastCols(Var, usize),
    ColSlice(Var, usize, usize),
    PadCols(Var, usize, usize),
    Concat(Vec<Var>),
    Slice(Var, usize, usize, usize),
    Embed(Var, usize, usize, usize),
    TanhRatio(Var, u8),
}

struct Node {
    op: Op,
    value: Mat,
    tracked: bool,
}

/// Series coefficients of tanh(r)/r in powers of s = r².
const TANH_RATIO_SERIES: [f64; 7] = [
    1.0,
    -1.0 / 3.0,
    2.0 / 15.0,
    -17.0 / 315.0,
    62.0 / 2835.0,
    -1382.0 / 155925.0,
    21844.0 / 6081075.0,
];

fn series_derivative(s: f64, order: usize) -> f64 {
    let mut acc = 0.0;
    for k in (order..TANH_RATIO_SERIES.len()).rev() {
        let mut c = TANH_RATIO_SERIES[k];
        for j in 0..order {
            c *= (k - j) as f64;
        }
        acc = acc * s + c;
    }
    acc
}

/// Derivatives of h(s) = tanh(√s)/√s with respect to s, for s ≥ 0.
pub fn tanh_ratio(s: f64, order: u8) -> f64 {
    let s = s.max(0.0);
    let r = s.sqrt();
    match order {
        0 => {
            if r < 1e-4 {
                1.0 - s / 3.0 + 2.0 * s * s / 15.0
            } else {
                r.tanh() / r
            }
        }
        1 => {
            if r < 0.05 {
                series_derivative(s, 1)
            } else {
                let t = r.tanh();
                (r * (1.0 - t * t) - t) / (2.0 * r * s)
            }
        }
        2 => {
            if r < 0.05 {
                series_derivative(s, 2)
            } else {
                let t = r.tanh();
                let q = 1.0 - t * t;
                (3.0 * t - 3.0 * r * q - 2.0 * s * t * q) / (4.0 * s * s * r)
            }
        }
        _ => panic!("derivatives of the unit-ball map beyond second order are not supported"),
    }
}

/// Recording surface for differentiable computations.
///
/// Operations take `&self`; the node list lives behind a `RefCell`, which
/// keeps a tape confined to one thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    branches: RefCell<Option<Vec<u8>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), branches: RefCell::new(None) }
    }

    /// A tape that logs which side of every kink each nonsmooth op took.
    pub fn with_branch_log() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), branches: RefCell::new(Some(Vec::new())) }
    }

    pub fn branch_log(&self) -> Option<Vec<u8>> {
        self.branches.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node recorded after the first `n`.
    pub fn truncate(&self, n: usize) {
        self.nodes.borrow_mut().truncate(n);
    }

    fn push(&self, op: Op, value: Mat, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value, tracked });
        Var(nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    fn log_branches(&self, codes: impl FnOnce() -> Vec<u8>) {
        if let Some(log) = self.branches.borrow_mut().as_mut() {
            log.extend(codes());
        }
    }

    pub fn input(&self, m: Mat) -> Var {
        self.push(Op::Input, m, true)
    }

    pub fn constant(&self, m: Mat) -> Var {
        self.push(Op::Constant, m, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Mat> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.data.len(), 1, "scalar() on a non-scalar node");
        m.data[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(&Mat) -> Mat) -> Var {
        let value = f(&self.value(a));
        let t = self.tracked(a);
        self.push(op, value, t)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl Fn(&Mat, &Mat) -> Mat) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let t = self.tracked(a) || self.tracked(b);
        self.push(op, value, t)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x.zip(y, |p, q| p + q))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x.zip(y, |p, q| p - q))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x.zip(y, |p, q| p * q))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x.zip(y, |p, q| p / q))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| x.map(|p| -p))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x.map(|p| c * p))
    }

    pub fn shift(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a, c), |x| x.map(|p| p + c))
    }

    pub fn matmul(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        self.binary(a, b, Op::MatMul(a, b, ta, tb), |x, y| matmul(x, y, ta, tb))
    }

    /// Adds a `1 x n` row to every row of an `m x n` block.
    pub fn add_row(&self, a: Var, r: Var) -> Var {
        self.binary(a, r, Op::AddRow(a, r), |x, y| {
            assert_eq!((1, x.cols), y.shape(), "add_row expects a 1 x cols row");
            let mut out = x.clone();
            for row in out.data.chunks_mut(x.cols) {
                for (o, b) in row.iter_mut().zip(&y.data) {
                    *o += b;
                }
            }
            out
        })
    }

    pub fn relu(&self, a: Var) -> Var {
        self.log_branches(|| self.value(a).data.iter().map(|&v| sign_code(v)).collect());
        self.unary(a, Op::Relu(a), |x| x.map(|p| if p > 0.0 { p } else { 0.0 }))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.map(f64::tanh))
    }

    pub fn max(&self, a: Var, b: Var) -> Var {
        self.log_pair(a, b);
        self.binary(a, b, Op::Max(a, b), |x, y| x.zip(y, |p, q| if p >= q { p } else { q }))
    }

    pub fn min(&self, a: Var, b: Var) -> Var {
        self.log_pair(a, b);
        self.binary(a, b, Op::Min(a, b), |x, y| x.zip(y, |p, q| if p <= q { p } else { q }))
    }

    fn log_pair(&self, a: Var, b: Var) {
        self.log_branches(|| {
            let (x, y) = (self.value(a), self.value(b));
            x.data.iter().zip(&y.data).map(|(&p, &q)| sign_code(p - q)).collect()
        });
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.log_branches(|| {
            self.value(a).data.iter().map(|&v| sign_code(v - lo) + 3 * sign_code(v - hi)).collect()
        });
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.map(|p| p.max(lo).min(hi)))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.log_branches(|| self.value(a).data.iter().map(|&v| sign_code(v)).collect());
        self.unary(a, Op::Abs(a), |x| x.map(f64::abs))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.map(f64::sqrt))
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), |x| x.map(f64::sin))
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), |x| x.map(f64::cos))
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&self, y: Var, x: Var) -> Var {
        self.binary(y, x, Op::Atan2(y, x), |p, q| p.zip(q, f64::atan2))
    }

    /// Column sums: `m x n -> 1 x n`.
    pub fn sum_rows(&self, a: Var) -> Var {
        self.unary(a, Op::SumRows(a), |x| {
            let mut out = Mat::zeros(1, x.cols);
            for row in x.data.chunks(x.cols.max(1)) {
                for (o, v) in out.data.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out
        })
    }

    /// Row sums: `m x n -> m x 1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        self.unary(a, Op::SumCols(a), |x| {
            let data = x.data.chunks(x.cols.max(1)).map(|r| r.iter().sum()).collect();
            Mat::from_vec(x.rows, 1, data)
        })
    }

    /// Repeats a `1 x n` row `m` times.
    pub fn broadcast_rows(&self, a: Var, m: usize) -> Var {
        self.unary(a, Op::BroadcastRows(a, m), |x| {
            assert_eq!(x.rows, 1, "broadcast_rows expects a single row");
            let mut data = Vec::with_capacity(m * x.cols);
            for _ in 0..m {
                data.extend_from_slice(&x.data);
            }
            Mat::from_vec(m, x.cols, data)
        })
    }

    /// Repeats an `m x 1` column `n` times.
    pub fn broadcast_cols(&self, a: Var, n: usize) -> Var {
        self.unary(a, Op::BroadcastCols(a, n), |x| {
            assert_eq!(x.cols, 1, "broadcast_cols expects a single column");
            let mut data = Vec::with_capacity(x.rows * n);
            for &v in &x.data {
                data.extend(std::iter::repeat_n(v, n));
            }
            Mat::from_vec(x.rows, n, data)
        })
    }

    pub fn col_slice(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(a, Op::ColSlice(a, start, len), |x| {
            assert!(start + len <= x.cols, "column slice out of range");
            let mut data = Vec::with_capacity(x.rows * len);
            for row in x.data.chunks(x.cols) {
                data.extend_from_slice(&row[start..start + len]);
            }
            Mat::from_vec(x.rows, len, data)
        })
    }

    pub fn col(&self, a: Var, j: usize) -> Var {
        self.col_slice(a, j, 1)
    }

    fn pad_cols(&self, a: Var, start: usize, total: usize) -> Var {
        self.unary(a, Op::PadCols(a, start, total), |x| {
            let mut out = Mat::zeros(x.rows, total);
            for (r, row) in x.data.chunks(x.cols.max(1)).enumerate() {
                out.data[r * total + start..r * total + start + x.cols].copy_from_slice(row);
            }
            out
        })
    }

    /// Side-by-side concatenation of blocks with equal row counts.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows;
            let cols: usize = parts.iter().map(|p| nodes[p.0].value.cols).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    let m = &nodes[p.0].value;
                    assert_eq!(m.rows, rows, "concat_cols row mismatch");
                    data.extend_from_slice(&m.data[r * m.cols..(r + 1) * m.cols]);
                }
            }
            Mat::from_vec(rows, cols, data)
        };
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(Op::Concat(parts.to_vec()), value, t)
    }

    /// Views `rows * cols` consecutive entries starting at `offset` as a block.
    pub fn slice(&self, a: Var, offset: usize, rows: usize, cols: usize) -> Var {
        self.unary(a, Op::Slice(a, offset, rows, cols), |x| {
            Mat::from_vec(rows, cols, x.data[offset..offset + rows * cols].to_vec())
        })
    }

    fn embed(&self, a: Var, offset: usize, rows: usize, cols: usize) -> Var {
        self.unary(a, Op::Embed(a, offset, rows, cols), |x| {
            let mut out = Mat::zeros(rows, cols);
            out.data[offset..offset + x.data.len()].copy_from_slice(&x.data);
            out
        })
    }

    fn tanh_ratio_order(&self, s: Var, order: u8) -> Var {
        self.unary(s, Op::TanhRatio(s, order), |x| x.map(|v| tanh_ratio(v, order)))
    }

    /// `tanh(√s)/√s` elementwise, smooth at `s = 0`.
    pub fn tanh_ratio(&self, s: Var) -> Var {
        self.tanh_ratio_order(s, 0)
    }

    /// Maps each row `x` to `x tanh(‖x‖)/‖x‖`, the open unit ball projection.
    pub fn unit_ball(&self, x: Var) -> Var {
        let n = self.shape(x).1;
        let sq = self.mul(x, x);
        let s = self.sum_cols(sq);
        let h = self.tanh_ratio(s);
        let hb = self.broadcast_cols(h, n);
        self.mul(x, hb)
    }

    pub fn sum(&self, a: Var) -> Var {
        let r = self.sum_cols(a);
        self.sum_rows(r)
    }

    pub fn mean(&self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// Row-wise Euclidean norms, `m x n -> m x 1`.
    pub fn norm2_rows(&self, a: Var) -> Var {
        let sq = self.mul(a, a);
        let s = self.sum_cols(sq);
        self.sqrt(s)
    }

    fn mask(&self, a: Var, f: impl Fn(f64) -> bool) -> Var {
        let m = self.value(a).map(|v| if f(v) { 1.0 } else { 0.0 });
        self.constant(m)
    }

    fn mask2(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> bool) -> Var {
        let m = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.zip(&nodes[b.0].value, |p, q| if f(p, q) { 1.0 } else { 0.0 })
        };
        self.constant(m)
    }

    /// Differentiable gradient of the scalar `y` with respect to `wrt`.
    ///
    /// The adjoint computations are recorded on the tape, so the returned
    /// variables can themselves be differentiated.
    pub fn grad(&self, y: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(y), (1, 1), "grad expects a scalar output");
        let seed = self.constant(Mat::scalar(1.0));
        self.grad_with_seed(y, seed, wrt)
    }

    pub fn grad_with_seed(&self, y: Var, seed: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(y), self.shape(seed), "seed shape must match the output");
        let n = y.0 + 1;
        let mut adj: Vec<Option<Var>> = vec![None; n];
        adj[y.0] = Some(seed);
        // Only nodes lying between `wrt` and `y` need adjoints.
        let mut wanted = vec![false; n];
        for w in wrt {
            if w.0 < n {
                wanted[w.0] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if !wanted[i] {
                    wanted[i] = parents(&nodes[i].op).iter().any(|p| wanted[p.0]);
                }
            }
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !wanted[i] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            for (p, contrib) in self.backprop(&op, Var(i), g) {
                if !wanted[p.0] {
                    continue;
                }
                adj[p.0] = Some(match adj[p.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib),
                });
            }
        }
        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(*w);
                    self.constant(Mat::zeros(r, c))
                }
            })
            .collect()
    }

    /// Numeric gradients of the scalar `y`; the tape is restored afterwards,
    /// so repeated calls return identical results.
    pub fn gradients(&self, y: Var, wrt: &[Var]) -> Vec<Mat> {
        let mark = self.len();
        let g = self.grad(y, wrt);
        let out = g.iter().map(|&v| self.value(v).clone()).collect();
        self.truncate(mark);
        out
    }

    fn backprop(&self, op: &Op, out: Var, g: Var) -> Vec<(Var, Var)> {
        match *op {
            Op::Input | Op::Constant => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => vec![(a, g), (b, self.neg(g))],
            Op::Mul(a, b) => vec![(a, self.mul(g, b)), (b, self.mul(g, a))],
            Op::Div(a, b) => {
                let ga = self.div(g, b);
                let t = self.mul(g, out);
                let t = self.div(t, b);
                vec![(a, ga), (b, self.neg(t))]
            }
            Op::Neg(a) => vec![(a, self.neg(g))],
            Op::Scale(a, c) => vec![(a, self.scale(g, c))],
            Op::Shift(a, _) => vec![(a, g)],
            Op::MatMul(a, b, ta, tb) => {
                let (ga, gb) = match (ta, tb) {
                    (false, false) => (self.matmul(g, b, false, true), self.matmul(a, g, true, false)),
                    (false, true) => (self.matmul(g, b, false, false), self.matmul(g, a, true, false)),
                    (true, false) => (self.matmul(b, g, false, true), self.matmul(a, g, false, false)),
                    (true, true) => (self.matmul(b, g, true, true), self.matmul(g, a, true, true)),
                };
                vec![(a, ga), (b, gb)]
            }
            Op::AddRow(a, r) => vec![(a, g), (r, self.sum_rows(g))],
            Op::Relu(a) => {
                let m = self.mask(a, |v| v > 0.0);
                vec![(a, self.mul(g, m))]
            }
            Op::Tanh(a) => {
                let y2 = self.mul(out, out);
                let d = self.neg(y2);
                let d = self.shift(d, 1.0);
                vec![(a, self.mul(g, d))]
            }
            Op::Max(a, b) => {
                let m = self.mask2(a, b, |p, q| p >= q);
                let k = self.mask2(a, b, |p, q| p < q);
                vec![(a, self.mul(g, m)), (b, self.mul(g, k))]
            }
            Op::Min(a, b) => {
                let m = self.mask2(a, b, |p, q| p <= q);
                let k = self.mask2(a, b, |p, q| p > q);
                vec![(a, self.mul(g, m)), (b, self.mul(g, k))]
            }
            Op::Clamp(a, lo, hi) => {
                let m = self.mask(a, |v| v > lo && v < hi);
                vec![(a, self.mul(g, m))]
            }
            Op::Abs(a) => {
                let s = self.value(a).map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
                let s = self.constant(s);
                vec![(a, self.mul(g, s))]
            }
            Op::Sqrt(a) => {
                let h = self.scale(g, 0.5);
                vec![(a, self.div(h, out))]
            }
            Op::Sin(a) => {
                let c = self.cos(a);
                vec![(a, self.mul(g, c))]
            }
            Op::Cos(a) => {
                let s = self.sin(a);
                let t = self.mul(g, s);
                vec![(a, self.neg(t))]
            }
            Op::Atan2(y, x) => {
                let yy = self.mul(y, y);
                let xx = self.mul(x, x);
                let r2 = self.add(yy, xx);
                let gy = self.mul(g, x);
                let gy = self.div(gy, r2);
                let gx = self.mul(g, y);
                let gx = self.div(gx, r2);
                vec![(y, gy), (x, self.neg(gx))]
            }
            Op::SumRows(a) => {
                let m = self.shape(a).0;
                vec![(a, self.broadcast_rows(g, m))]
            }
            Op::SumCols(a) => {
                let n = self.shape(a).1;
                vec![(a, self.broadcast_cols(g, n))]
            }
            Op::BroadcastRows(a, _) => vec![(a, self.sum_rows(g))],
            Op::BroadcastCols(a, _) => vec![(a, self.sum_cols(g))],
            Op::ColSlice(a, start, _) => {
                let total = self.shape(a).1;
                vec![(a, self.pad_cols(g, start, total))]
            }
            Op::PadCols(a, start, _) => {
                let len = self.shape(a).1;
                vec![(a, self.col_slice(g, start, len))]
            }
            Op::Concat(ref parts) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = self.shape(p).1;
                        let piece = self.col_slice(g, start, len);
                        start += len;
                        (p, piece)
                    })
                    .collect()
            }
            Op::Slice(a, offset, _, _) => {
                let (r, c) = self.shape(a);
                vec![(a, self.embed(g, offset, r, c))]
            }
            Op::Embed(a, offset, _, _) => {
                let (r, c) = self.shape(a);
                vec![(a, self.slice(g, offset, r, c))]
            }
            Op::TanhRatio(s, order) => {
                let d = self.tanh_ratio_order(s, order + 1);
                vec![(s, self.mul(g, d))]
            }
        }
    }
}

fn sign_code(v: f64) -> u8 {
    if v > 0.0 {
        0
    } else if v < 0.0 {
        1
    } else {
        2
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match *op {
        Op::Input | Op::Constant => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::MatMul(a, b, _, _)
        | Op::AddRow(a, b)
        | Op::Max(a, b)
        | Op::Min(a, b)
        | Op::Atan2(a, b) => vec![a, b],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::Shift(a, _)
        | Op::Relu(a)
        | Op::Tanh(a)
        | Op::Clamp(a, _, _)
        | Op::Abs(a)
        | Op::Sqrt(a)
        | Op::Sin(a)
        | Op::Cos(a)
        | Op::SumRows(a)
        | Op::SumCols(a)
        | Op::BroadcastRows(a, _)
        | Op::BroadcastCols(a, _)
        | Op::ColSlice(a, _, _)
        | Op::PadCols(a, _, _)
        | Op::Slice(a, _, _, _)
        | Op::Embed(a, _, _, _)
        | Op::TanhRatio(a, _) => vec![a],
        Op::Concat(ref ps) => ps.clone(),
    }
}

/// Arithmetic shared by plain `f64` evaluation and traced tape columns, so
/// dynamics and costs are written once and run in both settings.
pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    /// A constant with the shape of `self`.
    fn lift(self, c: f64) -> Self;
    fn add_c(self, c: f64) -> Self;
    fn mul_c(self, c: f64) -> Self;
    fn max(self, o: Self) -> Self;
    fn min(self, o: Self) -> Self;
    fn clamp(self, lo: f64, hi: f64) -> Self;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn atan2(self, x: Self) -> Self;
    fn max_c(self, c: f64) -> Self {
        self.max(self.lift(c))
    }
}

impl Scalar for f64 {
    fn lift(self, c: f64) -> Self {
        c
    }
    fn add_c(self, c: f64) -> Self {
        self + c
    }
    fn mul_c(self, c: f64) -> Self {
        self * c
    }
    fn max(self, o: Self) -> Self {
        if self >= o {
            self
        } else {
            o
        }
    }
    fn min(self, o: Self) -> Self {
        if self <= o {
            self
        } else {
            o
        }
    }
    fn clamp(self, lo: f64, hi: f64) -> Self {
        self.max(lo).min(hi)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
}

/// A tape variable bundled with its tape.
#[derive(Clone, Copy)]
pub struct Traced<'t> {
    pub tape: &'t Tape,
    pub var: Var,
}

impl<'t> Traced<'t> {
    pub fn new(tape: &'t Tape, var: Var) -> Self {
        Traced { tape, var }
    }

    fn with(self, var: Var) -> Self {
        Traced { tape: self.tape, var }
    }
}

macro_rules! traced_binop {
    ($tr:ident, $m:ident) => {
        impl<'t> $tr for Traced<'t> {
            type Output = Traced<'t>;
            fn $m(self, o: Self) -> Self {
                self.with(self.tape.$m(self.var, o.var))
            }
        }
    };
}

traced_binop!(Add, add);
traced_binop!(Sub, sub);
traced_binop!(Mul, mul);
traced_binop!(Div, div);

impl<'t> Neg for Traced<'t> {
    type Output = Traced<'t>;
    fn neg(self) -> Self {
        self.with(self.tape.neg(self.var))
    }
}

impl<'t> Scalar for Traced<'t> {
    fn lift(self, c: f64) -> Self {
        let (r, k) = self.tape.shape(self.var);
        self.with(self.tape.constant(Mat::filled(r, k, c)))
    }
    fn add_c(self, c: f64) -> Self {
        self.with(self.tape.shift(self.var, c))
    }
    fn mul_c(self, c: f64) -> Self {
        self.with(self.tape.scale(self.var, c))
    }
    fn max(self, o: Self) -> Self {
        self.with(self.tape.max(self.var, o.var))
    }
    fn min(self, o: Self) -> Self {
        self.with(self.tape.min(self.var, o.var))
    }
    fn clamp(self, lo: f64, hi: f64) -> Self {
        self.with(self.tape.clamp(self.var, lo, hi))
    }
    fn abs(self) -> Self {
        self.with(self.tape.abs(self.var))
    }
    fn sqrt(self) -> Self {
        self.with(self.tape.sqrt(self.var))
    }
    fn tanh(self) -> Self {
        self.with(self.tape.tanh(self.var))
    }
    fn sin(self) -> Self {
        self.with(self.tape.sin(self.var))
    }
    fn cos(self) -> Self {
        self.with(self.tape.cos(self.var))
    }
    fn atan2(self, x: Self) -> Self {
        self.with(self.tape.atan2(self.var, x.var))
    }
}

/// Evaluates a recorded function of a `1 x n` input row.
pub fn forward<F>(f: F, n_inputs: usize, x: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&Tape, Var) -> Var,
{
    check_len(n_inputs, x)?;
    let tape = Tape::new();
    let v = tape.input(Mat::row(x));
    let y = f(&tape, v);
    let out = tape.value(y).data.clone();
    Ok(out)
}

/// Value and gradient of a scalar function of a `1 x n` input row.
pub fn value_and_grad<F>(f: F, n_inputs: usize, x: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&Tape, Var) -> Var,
{
    check_len(n_inputs, x)?;
    let tape = Tape::new();
    let v = tape.input(Mat::row(x));
    let y = f(&tape, v);
    if tape.shape(y) != (1, 1) {
        return Err(Error::Config(format!("expected scalar output, got {:?}", tape.shape(y))));
    }
    let g = tape.gradients(y, &[v]).remove(0);
    Ok((tape.scalar(y), g.data))
}

fn check_len(n: usize, x: &[f64]) -> Result<()> {
    if x.len() != n {
        return Err(Error::Config(format!("expected {n} inputs, got {}", x.len())));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct CheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// The central difference straddles a kink; the entry is reported but not judged.
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<CheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn failures(&self) -> Vec<&CheckEntry> {
        self.entries.iter().filter(|e| !e.skipped && !(e.rel_err <= self.tol)).collect()
    }

    pub fn skipped(&self) -> Vec<usize> {
        self.entries.iter().filter(|e| e.skipped).map(|e| e.index).collect()
    }

    pub fn checked(&self) -> usize {
        self.entries.iter().filter(|e| !e.skipped).count()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().filter(|e| !e.skipped).map(|e| e.rel_err).fold(0.0, f64::max)
    }
}

/// Error measure used by [`grad_check`]: relative, with a floor of 1e-4 on
/// the denominator so vanishing partials are judged on an absolute scale.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Compares reverse-mode partials against central differences.
///
/// `coords` selects the coordinates to check (all when `None`). A coordinate
/// whose ±h evaluations take a different branch at any kink than the base
/// point is marked as skipped rather than failed.
pub fn grad_check<F>(f: F, x: &[f64], coords: Option<&[usize]>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Var,
{
    let eval = |p: &[f64]| -> (f64, Option<Vec<u8>>) {
        let tape = Tape::with_branch_log();
        let v = tape.input(Mat::row(p));
        let y = f(&tape, v);
        (tape.scalar(y), tape.branch_log())
    };
    let (_, grad) = value_and_grad(&f, x.len(), x)?;
    let (_, base) = eval(x);
    let all: Vec<usize> = (0..x.len()).collect();
    let coords = coords.unwrap_or(&all);
    let mut entries = Vec::with_capacity(coords.len());
    let mut p = x.to_vec();
    for &i in coords {
        if i >= x.len() {
            return Err(Error::Config(format!("coordinate {i} out of range")));
        }
        p[i] = x[i] + h;
        let (fp, bp) = eval(&p);
        p[i] = x[i] - h;
        let (fm, bm) = eval(&p);
        p[i] = x[i];
        let numeric = (fp - fm) / (2.0 * h);
        let skipped = bp != base || bm != base;
        entries.push(CheckEntry {
            index: i,
            analytic: grad[i],
            numeric,
            rel_err: rel_err(grad[i], numeric),
            skipped,
        });
    }
    Ok(GradCheckReport { entries, tol })
}
