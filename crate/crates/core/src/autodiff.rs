//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every value is a 2-D array; row vectors are `1 × n`, scalars `1 × 1`.

use std::borrow::Cow;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::Scalar;

pub type Mat<T> = Array2<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + row` with `row` broadcast over rows.
    AddRow(Var, Var),
    /// `a * row` with `row` broadcast over rows.
    MulRow(Var, Var),
    /// `a * col` with the `n × 1` column broadcast over columns.
    MulCol(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Gather(Var, Arc<[usize]>),
    /// Rows of `a` added into `out[idx[i]]`; output row count is stored.
    ScatterAdd(Var, Arc<[usize]>),
    /// Column-wise softmax within groups of rows sharing a segment id.
    SegmentSoftmax(Var, Arc<[usize]>, usize),
    SumRows(Var),
    Scale(Var, T),
    /// Sigmoid cross-entropy against 0/1 targets, summed over the first
    /// `rows` rows.
    Bce(Var, Mat<T>, usize),
    /// Mean squared error against a constant.
    Mse(Var, Mat<T>),
}

pub struct Tape<'p, T: Scalar> {
    values: Vec<Cow<'p, Mat<T>>>,
    ops: Vec<Op<T>>,
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn c<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("constant representable")
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, v: Mat<T>, op: Op<T>) -> Var {
        self.values.push(Cow::Owned(v));
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.values[v.0]
    }

    pub fn constant(&mut self, v: Mat<T>) -> Var {
        self.push(v, Op::Leaf)
    }

    /// Leaf borrowing an existing array (parameters).
    pub fn param(&mut self, v: &'p Mat<T>) -> Var {
        self.values.push(Cow::Borrowed(v));
        self.ops.push(Op::Leaf);
        Var(self.values.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.value(col).ncols(), 1);
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.value(a).mapv(|x| if x > T::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn gather(&mut self, a: Var, idx: Arc<[usize]>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        self.push(v, Op::Gather(a, idx))
    }

    pub fn scatter_add(&mut self, a: Var, idx: Arc<[usize]>, rows: usize) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros((rows, src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            let mut out = v.row_mut(r);
            out += &src.row(i);
        }
        self.push(v, Op::ScatterAdd(a, idx))
    }

    pub fn segment_softmax(&mut self, a: Var, seg: Arc<[usize]>, segments: usize) -> Var {
        let x = self.value(a);
        let cols = x.ncols();
        let mut max = Mat::from_elem((segments, cols), T::neg_infinity());
        for (i, &g) in seg.iter().enumerate() {
            for j in 0..cols {
                if x[[i, j]] > max[[g, j]] {
                    max[[g, j]] = x[[i, j]];
                }
            }
        }
        let mut v = Mat::zeros(x.raw_dim());
        let mut sum = Mat::<T>::zeros((segments, cols));
        for (i, &g) in seg.iter().enumerate() {
            for j in 0..cols {
                let e = (x[[i, j]] - max[[g, j]]).exp();
                v[[i, j]] = e;
                sum[[g, j]] = sum[[g, j]] + e;
            }
        }
        for (i, &g) in seg.iter().enumerate() {
            for j in 0..cols {
                v[[i, j]] = v[[i, j]] / sum[[g, j]];
            }
        }
        self.push(v, Op::SegmentSoftmax(a, seg, segments))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Mat<T>, rows: usize) -> Var {
        let x = self.value(logits);
        assert_eq!(x.dim(), targets.dim());
        let mut total = T::zero();
        for r in 0..rows {
            for j in 0..x.ncols() {
                let (z, t) = (x[[r, j]], targets[[r, j]]);
                total = total + z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p();
            }
        }
        self.push(Mat::from_elem((1, 1), total), Op::Bce(logits, targets, rows))
    }

    pub fn mse(&mut self, a: Var, target: Mat<T>) -> Var {
        let d = self.value(a) - &target;
        let n = c::<T>(d.len() as f64);
        let v = d.mapv(|x| x * x).sum() / n;
        self.push(Mat::from_elem((1, 1), v), Op::Mse(a, target))
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    /// Gradients of the scalar `out` with respect to every tape entry.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        let mut g: Vec<Option<Mat<T>>> = vec![None; self.values.len()];
        g[out.0] = Some(Mat::from_elem((1, 1), T::one()));
        for i in (0..=out.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let y = &self.values[i];
            match &self.ops[i] {
                Op::Leaf => {
                    g[i] = Some(gi);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = gi.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gi);
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, gi.clone());
                    acc(&mut g, *a, gi);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *b, gi.mapv(|x| -x));
                    acc(&mut g, *a, gi);
                }
                Op::Mul(a, b) => {
                    let ga = &gi * self.value(*b);
                    let gb = &gi * self.value(*a);
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::AddRow(a, row) => {
                    acc(&mut g, *row, gi.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut g, *a, gi);
                }
                Op::MulRow(a, row) => {
                    let gr = (&gi * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &gi * self.value(*row);
                    acc(&mut g, *row, gr);
                    acc(&mut g, *a, ga);
                }
                Op::MulCol(a, col) => {
                    let gc = (&gi * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &gi * self.value(*col);
                    acc(&mut g, *col, gc);
                    acc(&mut g, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut d = gi;
                    Zip::from(&mut d).and(&**y).for_each(|d, &y| *d = *d * (T::one() - y * y));
                    acc(&mut g, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = gi;
                    Zip::from(&mut d).and(&**y).for_each(|d, &y| *d = *d * y * (T::one() - y));
                    acc(&mut g, *a, d);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut d = gi;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= T::zero() {
                                *d = *d * *slope
                            }
                        });
                    acc(&mut g, *a, d);
                }
                Op::Gather(a, idx) => {
                    let src = self.value(*a);
                    let mut d = Mat::zeros(src.raw_dim());
                    for (k, &r) in idx.iter().enumerate() {
                        let mut row = d.row_mut(r);
                        row += &gi.row(k);
                    }
                    acc(&mut g, *a, d);
                }
                Op::ScatterAdd(a, idx) => {
                    let d = gi.select(Axis(0), idx);
                    acc(&mut g, *a, d);
                }
                Op::SegmentSoftmax(a, seg, segments) => {
                    let cols = y.ncols();
                    let mut dot = Mat::<T>::zeros((*segments, cols));
                    for (k, &s) in seg.iter().enumerate() {
                        for j in 0..cols {
                            dot[[s, j]] = dot[[s, j]] + y[[k, j]] * gi[[k, j]];
                        }
                    }
                    let mut d = gi;
                    for (k, &s) in seg.iter().enumerate() {
                        for j in 0..cols {
                            d[[k, j]] = y[[k, j]] * (d[[k, j]] - dot[[s, j]]);
                        }
                    }
                    acc(&mut g, *a, d);
                }
                Op::SumRows(a) => {
                    let n = self.value(*a).nrows();
                    let d = gi.broadcast((n, gi.ncols())).unwrap().to_owned();
                    acc(&mut g, *a, d);
                }
                Op::Scale(a, k) => acc(&mut g, *a, gi * *k),
                Op::Bce(a, t, rows) => {
                    let x = self.value(*a);
                    let scale = gi[[0, 0]];
                    let mut d = Mat::zeros(x.raw_dim());
                    for r in 0..*rows {
                        for j in 0..x.ncols() {
                            d[[r, j]] = (sigmoid(x[[r, j]]) - t[[r, j]]) * scale;
                        }
                    }
                    acc(&mut g, *a, d);
                }
                Op::Mse(a, t) => {
                    let n = c::<T>(t.len() as f64);
                    let k = gi[[0, 0]] * c::<T>(2.0) / n;
                    let d = (self.value(*a) - t) * k;
                    acc(&mut g, *a, d);
                }
            }
        }
        Gradients { grads: g }
    }
}

fn acc<T: Scalar>(g: &mut [Option<Mat<T>>], v: Var, d: Mat<T>) {
    match &mut g[v.0] {
        Some(x) => *x += &d,
        slot @ None => *slot = Some(d),
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads[v.0].take()
    }
}

/// Constant `(groups·width) × groups` matrix summing each block of `width`
/// columns into one column.
pub fn block_sum<T: Scalar>(groups: usize, width: usize) -> Mat<T> {
    let mut m = Mat::zeros((groups * width, groups));
    for g in 0..groups {
        m.slice_mut(s![g * width..(g + 1) * width, g]).fill(T::one());
    }
    m
}
