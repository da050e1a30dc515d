//! Dense 64-bit linear algebra, activations and the chunk-local look-ahead
//! convolution used to build fast-weight targets.
//!
//! Every reduction runs in a fixed serial order. Kernels may split work
//! across threads by output row, but each output element is always produced
//! by one thread summing its inner dimension left to right, so results do
//! not depend on the worker count.

use std::fmt;
use std::ops::Range;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Work (multiply-adds) above which matmul fans rows out to the thread pool.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("invalid conv spec: {0}")]
    Conv(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for RealMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RealMatrix({}x{}) ", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries((0..self.rows).map(|r| self.row(r)))
                .finish()
        } else {
            write!(f, "[..{} entries]", self.data.len())
        }
    }
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumericsError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// Builds a matrix from row slices. Panics on ragged input; intended for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// Scalar value of a 1x1 matrix.
    pub fn item(&self) -> Option<f64> {
        (self.rows == 1 && self.cols == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copy of rows `range`.
    pub fn slice_rows(&self, range: Range<usize>) -> Self {
        assert!(range.end <= self.rows && range.start <= range.end);
        Self {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    /// Stacks matrices vertically. All parts must share a column count.
    pub fn vstack(parts: &[RealMatrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(NumericsError::Shape {
                    op: "vstack",
                    lhs: (rows, cols),
                    rhs: p.shape(),
                });
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(NumericsError::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
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

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(NumericsError::Shape {
                op: "add_assign",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(NumericsError::Shape {
                op: "axpy",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// True when both matrices have the same shape and identical bit patterns.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Row-major kernel: `out[i, :] = sum_k a[i, k] * b[k, :]`, k ascending.
fn gemm_rows(a: &[f64], b: &[f64], out: &mut [f64], inner: usize, n: usize) {
    for (a_row, out_row) in a.chunks_exact(inner).zip(out.chunks_exact_mut(n)) {
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * n..(k + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

fn gemm(a: &[f64], b: &[f64], m: usize, inner: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if inner == 0 || n == 0 || m == 0 {
        return out;
    }
    if m * inner * n >= PAR_THRESHOLD && m > 1 && rayon::current_num_threads() > 1 {
        let rows_per_task = (PAR_THRESHOLD / (inner * n)).clamp(1, m);
        out.par_chunks_mut(rows_per_task * n)
            .zip(a.par_chunks(rows_per_task * inner))
            .for_each(|(o, a_blk)| gemm_rows(a_blk, b, o, inner, n));
    } else {
        gemm_rows(a, b, &mut out, inner, n);
    }
    out
}

/// `a · b` with the inner dimension summed left to right.
pub fn matmul(a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix> {
    if a.cols != b.rows {
        return Err(NumericsError::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let data = gemm(&a.data, &b.data, a.rows, a.cols, b.cols);
    Ok(RealMatrix {
        rows: a.rows,
        cols: b.cols,
        data,
    })
}

/// `a · bᵀ`. Same summation order as `matmul(a, &b.transpose())`.
pub fn matmul_bt(a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix> {
    if a.cols != b.cols {
        return Err(NumericsError::Shape {
            op: "matmul_bt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    matmul(a, &b.transpose())
}

/// `aᵀ · b`. Same summation order as `matmul(&a.transpose(), b)`.
pub fn matmul_at(a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix> {
    if a.rows != b.rows {
        return Err(NumericsError::Shape {
            op: "matmul_at",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    matmul(&a.transpose(), b)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

/// d/dx [x·σ(x)] = σ(x)·(1 + x·(1 − σ(x))).
#[inline]
pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu(x: &RealMatrix) -> RealMatrix {
    x.map(silu_scalar)
}

/// Gate nonlinearity of the gated MLP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    /// tanh approximation.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => silu_scalar(x),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => silu_grad_scalar(x),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "silu" => Some(Activation::Silu),
            "gelu" => Some(Activation::Gelu),
            _ => None,
        }
    }
}

pub fn activate(x: &RealMatrix, act: Activation) -> RealMatrix {
    x.map(|v| act.apply(v))
}

/// Max-shifted row softmax.
pub fn softmax_rows(x: &RealMatrix) -> RealMatrix {
    let mut out = x.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn frob_norm(x: &RealMatrix) -> f64 {
    x.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Depthwise 1D convolution over token positions without bias.
///
/// Output row `t` is `Σ_j kernel[j] ⊙ x[t + offsets[j]]`. Taps that land
/// outside the segment being convolved read zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    offsets: Vec<isize>,
    /// One row per offset, one column per channel.
    kernel: RealMatrix,
}

impl ConvSpec {
    pub fn new(offsets: Vec<isize>, kernel: RealMatrix) -> Result<Self> {
        if offsets.is_empty() {
            return Err(NumericsError::Conv("at least one offset is required".into()));
        }
        let mut sorted = offsets.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != offsets.len() {
            return Err(NumericsError::Conv(format!("offsets are not distinct: {offsets:?}")));
        }
        if kernel.rows() != offsets.len() {
            return Err(NumericsError::Conv(format!(
                "kernel has {} rows for {} offsets",
                kernel.rows(),
                offsets.len()
            )));
        }
        Ok(Self { offsets, kernel })
    }

    /// All-zero kernel over `offsets`.
    pub fn zeros(offsets: Vec<isize>, channels: usize) -> Result<Self> {
        let k = offsets.len();
        Self::new(offsets, RealMatrix::zeros(k, channels))
    }

    /// Pure look-ahead window `{0, .., width-1}` with a zero kernel.
    pub fn lookahead(width: usize, channels: usize) -> Self {
        Self::zeros((0..width as isize).collect(), channels).expect("width >= 1")
    }

    /// Kernel of ones at a single offset: the identity shift `x[t + offset]`.
    pub fn unit_tap(offset: isize, channels: usize) -> Self {
        Self::new(vec![offset], RealMatrix::filled(1, channels, 1.0)).expect("valid tap")
    }

    pub fn width(&self) -> usize {
        self.offsets.len()
    }

    pub fn channels(&self) -> usize {
        self.kernel.cols()
    }

    pub fn offsets(&self) -> &[isize] {
        &self.offsets
    }

    pub fn kernel(&self) -> &RealMatrix {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut RealMatrix {
        &mut self.kernel
    }

    pub fn with_kernel(&self, kernel: RealMatrix) -> Result<Self> {
        Self::new(self.offsets.clone(), kernel)
    }

    pub fn is_zero(&self) -> bool {
        self.kernel.data().iter().all(|&v| v == 0.0)
    }
}

/// Convolves one segment (a chunk, or a document piece of a chunk); rows
/// outside the segment are zero.
pub fn lookahead_conv1d(x: &RealMatrix, spec: &ConvSpec) -> Result<RealMatrix> {
    conv1d_segments(x, spec, std::slice::from_ref(&(0..x.rows())))
}

/// Applies [`lookahead_conv1d`] independently to each row range in `segments`.
/// Rows not covered by any segment are zero in the output.
pub fn conv1d_segments(x: &RealMatrix, spec: &ConvSpec, segments: &[Range<usize>]) -> Result<RealMatrix> {
    if spec.channels() != x.cols() {
        return Err(NumericsError::Shape {
            op: "conv1d",
            lhs: x.shape(),
            rhs: spec.kernel.shape(),
        });
    }
    let d = x.cols();
    let mut out = RealMatrix::zeros(x.rows(), d);
    for seg in segments {
        for t in seg.clone() {
            let out_row = &mut out.data[t * d..(t + 1) * d];
            for (j, &off) in spec.offsets.iter().enumerate() {
                let src = t as isize + off;
                if src < seg.start as isize || src >= seg.end as isize {
                    continue;
                }
                let src = src as usize;
                let k_row = spec.kernel.row(j);
                let x_row = &x.data[src * d..(src + 1) * d];
                for ((o, &w), &xv) in out_row.iter_mut().zip(k_row).zip(x_row) {
                    *o += w * xv;
                }
            }
        }
    }
    Ok(out)
}

/// Reproducible generator backed by ChaCha8. The stream depends only on the
/// seed, never on platform or thread count.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    draws: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            draws: 0,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream keyed by `(seed, stream)`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut mixer = ChaCha8Rng::seed_from_u64(seed);
        mixer.set_stream(stream);
        Self::new(mixer.next_u64())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of primitive draws taken so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.draws += 1;
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.draws += 1;
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.draws += 1;
        self.inner.sample(StandardNormal)
    }

    /// Normal(0, std²) truncated to `[-2·std, 2·std]` by resampling.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn sign(&mut self) -> f64 {
        if self.next_u64() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> RealMatrix {
        RealMatrix::from_fn(rows, cols, |_, _| self.normal() * std)
    }

    pub fn truncated_normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> RealMatrix {
        RealMatrix::from_fn(rows, cols, |_, _| self.truncated_normal(std))
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
