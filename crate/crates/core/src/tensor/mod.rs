//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Every quantity the reading-comprehension model computes is a [`Tensor`]
//! recorded on a [`Graph`]. Matrices follow the column-per-token layout used
//! throughout the model: a `d x n` matrix holds one `d`-dimensional vector per
//! token.

mod graph;

pub use graph::{embed_lookup, Graph, OpKind, UnaryKind, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Usage(format!(
                "shape {shape:?} has a zero-length axis"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let data = rows.iter().flat_map(|row| row.iter().copied()).collect();
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix; rank-1 tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = value;
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.get(r, c)).collect()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dot product with four independent accumulators.
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let (xc, yc) = (&x[..n], &y[..n]);
    let mut acc = [0.0; 4];
    let chunks = n / 4;
    for q in 0..chunks {
        let i = 4 * q;
        acc[0] += xc[i] * yc[i];
        acc[1] += xc[i + 1] * yc[i + 1];
        acc[2] += xc[i + 2] * yc[i + 2];
        acc[3] += xc[i + 3] * yc[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += xc[i] * yc[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out += factor * x`.
pub(crate) fn axpy(out: &mut [f64], factor: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += factor * v;
    }
}

/// Products at least this large (in multiply-adds) go to the blocked kernel.
const GEMM_THRESHOLD: usize = 2048;

/// `out += A * B` through the blocked kernel, with every operand described
/// by its row and column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize), out: &mut [f64], out_rs: isize) {
    // SAFETY: callers pass buffers holding at least the strided extents
    // implied by (m, k, n) and the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            1.0,
            out.as_mut_ptr(),
            out_rs,
            1,
        );
    }
}

/// `out += a (r x k) * b (k x c)` on raw buffers.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    assert!(a.len() >= r * k && b.len() >= k * c && out.len() >= r * c);
    if c > 1 && r * k * c >= GEMM_THRESHOLD {
        gemm(r, k, c, (a, k as isize, 1), (b, c as isize, 1), out, c as isize);
        return;
    }
    if c == 1 {
        for (i, o) in out.iter_mut().enumerate().take(r) {
            *o += dot(&a[i * k..(i + 1) * k], b);
        }
        return;
    }
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            axpy(out_row, av, &b[p * c..(p + 1) * c]);
        }
    }
}

/// `out (r x k) += g (r x c) * b (k x c)^T`.
pub(crate) fn matmul_bt_into(g: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    assert!(g.len() >= r * c && b.len() >= k * c && out.len() >= r * k);
    if c > 1 && r * k * c >= GEMM_THRESHOLD {
        gemm(r, c, k, (g, c as isize, 1), (b, 1, c as isize), out, k as isize);
        return;
    }
    if c == 1 {
        for i in 0..r {
            axpy(&mut out[i * k..(i + 1) * k], g[i], &b[..k]);
        }
        return;
    }
    for i in 0..r {
        let g_row = &g[i * c..(i + 1) * c];
        for p in 0..k {
            out[i * k + p] += dot(g_row, &b[p * c..(p + 1) * c]);
        }
    }
}

/// `out (k x c) += a (r x k)^T * g (r x c)`.
pub(crate) fn matmul_at_into(a: &[f64], g: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    assert!(a.len() >= r * k && g.len() >= r * c && out.len() >= k * c);
    if c > 1 && r * k * c >= GEMM_THRESHOLD {
        gemm(k, r, c, (a, 1, k as isize), (g, c as isize, 1), out, c as isize);
        return;
    }
    if c == 1 {
        for i in 0..r {
            axpy(&mut out[..k], g[i], &a[i * k..(i + 1) * k]);
        }
        return;
    }
    for i in 0..r {
        let g_row = &g[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            axpy(&mut out[p * c..(p + 1) * c], av, g_row);
        }
    }
}

/// Logistic function evaluated without overflow for large `|x|`.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
