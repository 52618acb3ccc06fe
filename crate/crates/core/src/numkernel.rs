//! Dense vector/matrix arithmetic, activations and the seeded generator used
//! by every other module.
//!
//! Matrices are row-major and multiplied from the left by row vectors, so a
//! layer is always written `x W^T + b` with `W` shaped `(out, in)`.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::RngCore;
use thiserror::Error;

/// Largest `f64` strictly below one. `tanh_map` never returns a magnitude above it.
pub const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Exponent clamp for [`sigmoid`].
pub const SIGMOID_CLAMP: f64 = 500.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("{op}: matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("init_weights: scale must be finite and non-negative, got {0}")]
    BadScale(f64),
}

fn mismatch(op: &'static str, left: impl fmt::Display, right: impl fmt::Display) -> KernelError {
    KernelError::ShapeMismatch {
        op,
        left: left.to_string(),
        right: right.to_string(),
    }
}

/// A fixed-length vector of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Self { data: vec![0.0; len] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64, KernelError> {
        if self.len() != other.len() {
            return Err(mismatch("dot", format!("[{}]", self.len()), format!("[{}]", other.len())));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        if rows * cols != data.len() {
            return Err(mismatch(
                "from_rows",
                format!("{rows}x{cols}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of squared elements.
    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `x W^T` without a bias.
    pub fn mul_row(&self, x: &[f64]) -> Result<Vector, KernelError> {
        if x.len() != self.cols {
            return Err(mismatch("mul_row", format!("[{}]", x.len()), format!("{}x{}", self.rows, self.cols)));
        }
        Ok(Vector::from_vec(
            (0..self.rows)
                .map(|r| self.row(r).iter().zip(x).map(|(w, v)| w * v).sum())
                .collect(),
        ))
    }
}

/// Element-wise hyperbolic tangent, `(1 - e^{-2z}) / (1 + e^{-2z})`.
///
/// Results are clamped to `±BELOW_ONE`, so `1 - h*h` stays strictly positive
/// even where `tanh` rounds to one in double precision (|z| > ~19).
pub fn tanh_map(v: &Vector) -> Vector {
    Vector::from_vec(v.iter().map(|&z| tanh_scalar(z)).collect())
}

#[inline]
pub fn tanh_scalar(z: f64) -> f64 {
    z.tanh().clamp(-BELOW_ONE, BELOW_ONE)
}

/// Logistic function in the branch-on-sign form.
///
/// The argument is clamped to `±SIGMOID_CLAMP`. Results are strictly inside
/// (0, 1) for |z| <= 36; above that the positive side rounds to exactly 1.0
/// while the negative side stays a tiny positive number (>= e^-500).
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `x W^T + b`.
pub fn affine(x: &Vector, w: &Matrix, b: &Vector) -> Result<Vector, KernelError> {
    if x.len() != w.cols() || b.len() != w.rows() {
        return Err(mismatch(
            "affine",
            format!("x[{}], b[{}]", x.len(), b.len()),
            format!("W {}x{}", w.rows(), w.cols()),
        ));
    }
    let mut out = w.mul_row(x.as_slice())?;
    for (o, bi) in out.as_mut_slice().iter_mut().zip(b.iter()) {
        *o += bi;
    }
    Ok(out)
}

/// Matrix with i.i.d. entries uniform on `[-scale, scale]`.
pub fn init_weights(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Result<Matrix, KernelError> {
    if rows == 0 || cols == 0 {
        return Err(KernelError::EmptyShape {
            op: "init_weights",
            rows,
            cols,
        });
    }
    if !scale.is_finite() || scale < 0.0 {
        return Err(KernelError::BadScale(scale));
    }
    let data = (0..rows * cols).map(|_| rng.uniform_symmetric(scale)).collect();
    Ok(Matrix { rows, cols, data })
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_MUL_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_MUL_2: u64 = 0x94D0_49BB_1331_11EB;

/// SplitMix64 output finalizer: `z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
/// z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_MUL_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_MUL_2);
    z ^ (z >> 31)
}

/// SplitMix64 generator.
///
/// The state advances by the golden-ratio increment `0x9E3779B97F4A7C15`
/// and each output is `mix64(state)`. Pure 64-bit integer arithmetic, so the
/// stream is identical on every platform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, state: seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child generator keyed by `stream`, leaving `self` untouched.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(stream.wrapping_add(GOLDEN_GAMMA))))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform on [0, 1) with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on [-scale, scale].
    #[inline]
    pub fn uniform_symmetric(&mut self, scale: f64) -> f64 {
        (2.0 * self.uniform() - 1.0) * scale
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let span = hi - lo + 1;
        lo + ((self.next_u64() as u128 * span as u128) >> 64) as u64
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.range_inclusive(0, n as u64 - 1) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        (Rng::next_u64(self) >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        Rng::next_u64(self)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = Rng::next_u64(self).to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
