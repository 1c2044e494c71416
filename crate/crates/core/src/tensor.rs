//! Dense row-major `f64` tensors.
//!
//! The leading axis is always the batch (example) axis. Linear layers act on
//! the trailing axis, so a `(B, T, in)` sequence batch is treated as a
//! `(B*T, in)` matrix by the matrix products below.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Input(format!(
                "tensor shape must be nonempty with positive extents, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor construction",
                format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("tensor from rows", "ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Number of values belonging to one example.
    pub fn example_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Extent of the trailing axis.
    pub fn width(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of trailing-axis rows, i.e. all axes but the last flattened.
    pub fn rows(&self) -> usize {
        self.data.len() / self.width()
    }

    /// Rows per example (1 for 2-D batches, T for `(B, T, w)` batches).
    pub fn rows_per_example(&self) -> usize {
        self.rows() / self.batch()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let n = self.example_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn example_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.example_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Gathers the listed examples into a new batch, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.batch() {
                return Err(Error::Input(format!(
                    "example index {i} out of range for batch of {}",
                    self.batch()
                )));
            }
            data.extend_from_slice(self.example(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        if indices.is_empty() {
            return Err(Error::Input("cannot select an empty batch".into()));
        }
        Tensor::new(shape, data)
    }

    /// Contiguous range of examples `[start, end)`.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.batch() {
            return Err(Error::Input(format!(
                "batch slice {start}..{end} invalid for batch of {}",
                self.batch()
            )));
        }
        let n = self.example_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * n..end * n].to_vec())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "axpy",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += alpha * o;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-row argmax over the trailing axis.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.data
            .chunks(self.width())
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                        if v > bv {
                            (i, v)
                        } else {
                            (bi, bv)
                        }
                    })
                    .0
            })
            .collect()
    }
}

/// Row-major GEMM wrapper: `c = alpha * op(a) * op(b) + beta * c` where the
/// operands are described by explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the caller-provided strides address only elements inside `a`
    // (m x k) and `b` (k x n); `c` is a dense m x n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x (rows x in) * w^T` for `w` stored as `(out, in)`; returns `(rows, out)` data.
pub(crate) fn matmul_xwt(x: &[f64], rows: usize, w: &[f64], out: usize, inp: usize) -> Vec<f64> {
    let mut c = vec![0.0; rows * out];
    gemm(
        rows,
        inp,
        out,
        x,
        (inp as isize, 1),
        w,
        (1, inp as isize),
        0.0,
        &mut c,
    );
    c
}

/// `e (rows x out) * w` for `w` stored as `(out, in)`; returns `(rows, in)` data.
pub(crate) fn matmul_ew(e: &[f64], rows: usize, w: &[f64], out: usize, inp: usize) -> Vec<f64> {
    let mut c = vec![0.0; rows * inp];
    gemm(
        rows,
        out,
        inp,
        e,
        (out as isize, 1),
        w,
        (inp as isize, 1),
        0.0,
        &mut c,
    );
    c
}

/// Accumulates `e^T (out x rows) * a (rows x in)` into `acc` (`out x in`).
pub(crate) fn matmul_eta_acc(
    e: &[f64],
    a: &[f64],
    rows: usize,
    out: usize,
    inp: usize,
    acc: &mut [f64],
) {
    gemm(
        out,
        rows,
        inp,
        e,
        (1, out as isize),
        a,
        (inp as isize, 1),
        1.0,
        acc,
    );
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
