//! Dense row-major 2-D tensors and the kernels the stage models need.
//!
//! All reductions run sequentially in a fixed loop order. Accumulating
//! kernels (`matmul_tn_acc`, `col_sum_acc`) add one input row at a time
//! into the destination, so splitting a batch into row blocks and calling
//! them block by block performs exactly the same floating-point operations
//! as a single full-batch call.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::random::RandomStream;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("from_vec", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from `f64` literals. Panics on ragged input; meant for
    /// tests and fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&v| T::narrow(v)));
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows {
            return Err(Error::Index {
                what: "row slice end",
                index: end,
                bound: self.rows,
            });
        }
        Ok(Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.require_same_shape(other, op)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn neg(&self) -> Self {
        self.map(|v| -v)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| v.is_zero())
    }

    /// Largest elementwise `|a - b|`. NaN anywhere yields infinity.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.require_same_shape(other, "max_abs_diff")?;
        let mut worst = T::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let d = (a - b).abs();
            if d.is_nan() {
                return Ok(T::infinity());
            }
            if d > worst {
                worst = d;
            }
        }
        Ok(worst)
    }

    /// True when every element is bit-identical.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.widen().to_bits() == b.widen().to_bits())
    }

    pub fn require_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Vertical concatenation.
    pub fn vstack(parts: &[Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape("vstack", (rows, cols), p.shape()));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { rows, cols, data })
    }
}

/// Standard matrix product `a · b`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = T::zero();
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            let mut acc = T::zero();
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * b.data[j * b.cols + k];
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    Ok(out)
}

/// `acc += aᵀ · b`, one row of `a`/`b` at a time.
pub fn matmul_tn_acc<T: Scalar>(acc: &mut Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.rows != b.rows || acc.rows != a.cols || acc.cols != b.cols {
        return Err(Error::shape("matmul_tn_acc", a.shape(), b.shape()));
    }
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = &b.data[r * b.cols..(r + 1) * b.cols];
        for (i, &av) in arow.iter().enumerate() {
            let dst = &mut acc.data[i * b.cols..(i + 1) * b.cols];
            for (d, &bv) in dst.iter_mut().zip(brow) {
                *d += av * bv;
            }
        }
    }
    Ok(())
}

/// `acc (1×c) += column sums of g`, rows in order.
pub fn col_sum_acc<T: Scalar>(acc: &mut Tensor<T>, g: &Tensor<T>) -> Result<()> {
    if acc.rows != 1 || acc.cols != g.cols {
        return Err(Error::shape("col_sum_acc", acc.shape(), g.shape()));
    }
    for r in 0..g.rows {
        for (d, &v) in acc.data.iter_mut().zip(g.row(r)) {
            *d += v;
        }
    }
    Ok(())
}

/// `x + bias` with a `1×c` bias broadcast over rows.
pub fn add_row<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if bias.rows != 1 || bias.cols != x.cols {
        return Err(Error::shape("add_row", x.shape(), bias.shape()));
    }
    let mut out = x.clone();
    for r in 0..x.rows {
        for (d, &b) in out.data[r * x.cols..(r + 1) * x.cols]
            .iter_mut()
            .zip(&bias.data)
        {
            *d += b;
        }
    }
    Ok(out)
}

/// I.i.d. standard normal tensor drawn row-major from `stream`.
pub fn gaussian<T: Scalar>(stream: &mut RandomStream, rows: usize, cols: usize) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| T::narrow(stream.standard_normal()))
        .collect();
    Tensor { rows, cols, data }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn value<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.det_tanh(),
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
        }
    }

    fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => {
                let t = x.det_tanh();
                T::one() - t * t
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

pub fn activation_apply<T: Scalar>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| kind.value(v))
}

/// `upstream ⊙ f'(x)`.
pub fn activation_grad<T: Scalar>(
    kind: Activation,
    x: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    x.zip_with(upstream, "activation_grad", |xv, u| u * kind.derivative(xv))
}

/// Per-row cross-entropy losses and the gradient `(softmax - onehot) / denom`.
///
/// The pipeline uses this with `denom` set to the full batch size so that
/// per-micro-batch gradients add up to the full-batch mean gradient.
pub fn softmax_cross_entropy_rows<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    denom: T,
) -> Result<(Vec<T>, Tensor<T>)> {
    if labels.len() != logits.rows {
        return Err(Error::shape(
            "softmax_cross_entropy",
            logits.shape(),
            (labels.len(), 1),
        ));
    }
    let mut losses = Vec::with_capacity(logits.rows);
    let mut grad = Tensor::zeros(logits.rows, logits.cols);
    for (r, &label) in labels.iter().enumerate() {
        if label >= logits.cols {
            return Err(Error::Index {
                what: "label",
                index: label,
                bound: logits.cols,
            });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &z in row {
            sum += (z - max).det_exp();
        }
        losses.push(sum.det_ln() - (row[label] - max));
        let g = &mut grad.data[r * logits.cols..(r + 1) * logits.cols];
        for (k, (gv, &z)) in g.iter_mut().zip(row).enumerate() {
            let p = (z - max).det_exp() / sum;
            let target = if k == label { T::one() } else { T::zero() };
            *gv = (p - target) / denom;
        }
    }
    Ok((losses, grad))
}

/// Sum of `values` in order, divided by `denom`.
pub fn ordered_mean<T: Scalar>(values: &[T], denom: T) -> T {
    let mut acc = T::zero();
    for &v in values {
        acc += v;
    }
    acc / denom
}

/// Mean cross-entropy over rows and its gradient `(softmax - onehot) / rows`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let n = T::from_usize(logits.rows).expect("row count fits scalar");
    let (losses, grad) = softmax_cross_entropy_rows(logits, labels, n)?;
    Ok((ordered_mean(&losses, n), grad))
}
