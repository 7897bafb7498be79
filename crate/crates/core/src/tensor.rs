//! Spatiotemporal tensors and the orthogonal transforms that act on them.
//!
//! A [`DynTensor`] holds an `m x n x tau` real image in a single flat buffer.
//! Element `(i, j, k)` lives at `k*m*n + j*m + i`, so a frame is a
//! column-major `m x n` matrix and frames are stored back to back. The
//! flat buffer *is* the vectorized image; [`DynTensor::vec`] and
//! [`DynTensor::from_vec`] only move ownership.

use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Tensor dimensions `(rows, cols, frames)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub rows: usize,
    pub cols: usize,
    pub frames: usize,
}

impl Dims {
    pub const fn new(rows: usize, cols: usize, frames: usize) -> Self {
        Self { rows, cols, frames }
    }

    pub const fn frame_len(&self) -> usize {
        self.rows * self.cols
    }

    pub const fn len(&self) -> usize {
        self.rows * self.cols * self.frames
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, i: usize, j: usize, k: usize) -> usize {
        k * self.rows * self.cols + j * self.rows + i
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub const fn unravel(&self, idx: usize) -> (usize, usize, usize) {
        let fl = self.rows * self.cols;
        let k = idx / fl;
        let rem = idx % fl;
        (rem % self.rows, rem / self.rows, k)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.rows, self.cols, self.frames)
    }
}

/// A real `m x n x tau` image in vectorized storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct DynTensor {
    dims: Dims,
    data: Vec<f64>,
}

impl DynTensor {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    /// Builds a tensor from data already in vectorized order (`tens`).
    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "{} values for a {dims} tensor",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for k in 0..dims.frames {
            for j in 0..dims.cols {
                for i in 0..dims.rows {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, data }
    }

    /// Stacks equally sized frames.
    pub fn from_frames(rows: usize, cols: usize, frames: &[Vec<f64>]) -> Result<Self> {
        let dims = Dims::new(rows, cols, frames.len());
        let mut data = Vec::with_capacity(dims.len());
        for (k, fr) in frames.iter().enumerate() {
            if fr.len() != dims.frame_len() {
                return Err(Error::DimMismatch(format!(
                    "frame {k} has {} values, expected {}",
                    fr.len(),
                    dims.frame_len()
                )));
            }
            data.extend_from_slice(fr);
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Vectorized view (`vec`).
    pub fn vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.dims.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.dims.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let fl = self.dims.frame_len();
        &self.data[k * fl..(k + 1) * fl]
    }

    pub fn frame_mut(&mut self, k: usize) -> &mut [f64] {
        let fl = self.dims.frame_len();
        &mut self.data[k * fl..(k + 1) * fl]
    }

    pub fn frames(&self) -> std::slice::Chunks<'_, f64> {
        self.data.chunks(self.dims.frame_len().max(1))
    }

    pub fn frames_mut(&mut self) -> std::slice::ChunksMut<'_, f64> {
        let fl = self.dims.frame_len().max(1);
        self.data.chunks_mut(fl)
    }

    pub fn check_dims(&self, expected: Dims, what: &str) -> Result<()> {
        if self.dims != expected {
            return Err(Error::DimMismatch(format!(
                "{what}: got {}, expected {expected}",
                self.dims
            )));
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.dims, other.dims);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self {
            dims: self.dims,
            data,
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frame_sums(&self) -> Vec<f64> {
        self.frames().map(|f| f.iter().sum()).collect()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|&v| v >= 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frame `k` as an `m x n` matrix.
    pub fn frame_matrix(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.dims.rows, self.dims.cols, self.frame(k))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Frobenius norm.
pub fn frobenius(t: &DynTensor) -> f64 {
    norm2(t.as_slice())
}

/// Frequency-domain slices of a tensor transformed along the time axis.
///
/// Slice `k` is the unnormalized DFT coefficient at frequency `k` for every
/// pixel; the same storage order as [`DynTensor`] is used, so each slice is a
/// contiguous column-major `m x n` block.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSliceStack {
    dims: Dims,
    data: Vec<Complex64>,
}

impl ComplexSliceStack {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![Complex64::new(0.0, 0.0); dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "{} values for a {dims} slice stack",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn slice(&self, k: usize) -> DMatrix<Complex64> {
        let fl = self.dims.frame_len();
        DMatrix::from_column_slice(
            self.dims.rows,
            self.dims.cols,
            &self.data[k * fl..(k + 1) * fl],
        )
    }

    pub fn set_slice(&mut self, k: usize, m: &DMatrix<Complex64>) {
        let fl = self.dims.frame_len();
        self.data[k * fl..(k + 1) * fl].copy_from_slice(m.as_slice());
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Planned forward/inverse DFT along the time axis for a fixed frame count.
#[derive(Clone)]
pub struct TimeFft {
    frames: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for TimeFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TimeFft")
            .field("frames", &self.frames)
            .finish()
    }
}

impl TimeFft {
    pub fn new(frames: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            frames,
            forward: planner.plan_fft_forward(frames),
            inverse: planner.plan_fft_inverse(frames),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Unnormalized forward DFT of every pixel's time signal.
    pub fn forward(&self, t: &DynTensor) -> ComplexSliceStack {
        let dims = t.dims();
        assert_eq!(
            dims.frames, self.frames,
            "time FFT planned for a different frame count"
        );
        let fl = dims.frame_len();
        let mut out = ComplexSliceStack::zeros(dims);
        let mut line = vec![Complex64::new(0.0, 0.0); self.frames];
        let src = t.as_slice();
        for p in 0..fl {
            for (k, c) in line.iter_mut().enumerate() {
                *c = Complex64::new(src[k * fl + p], 0.0);
            }
            self.forward.process(&mut line);
            for (k, c) in line.iter().enumerate() {
                out.data[k * fl + p] = *c;
            }
        }
        out
    }

    /// Inverse DFT with `1/tau` normalization, returning the real part.
    ///
    /// Fails with [`Error::SymmetryViolation`] when the discarded imaginary
    /// part exceeds `1e-6 * ||s||_F`.
    pub fn inverse(&self, s: &ComplexSliceStack) -> Result<DynTensor> {
        let dims = s.dims();
        assert_eq!(
            dims.frames, self.frames,
            "time FFT planned for a different frame count"
        );
        let fl = dims.frame_len();
        let scale = 1.0 / self.frames as f64;
        let mut out = vec![0.0; dims.len()];
        let mut line = vec![Complex64::new(0.0, 0.0); self.frames];
        let mut max_imag = 0.0f64;
        for p in 0..fl {
            for (k, c) in line.iter_mut().enumerate() {
                *c = s.data[k * fl + p];
            }
            self.inverse.process(&mut line);
            for (k, c) in line.iter().enumerate() {
                out[k * fl + p] = c.re * scale;
                max_imag = max_imag.max((c.im * scale).abs());
            }
        }
        let limit = 1e-6 * s.frobenius();
        if max_imag > limit {
            return Err(Error::SymmetryViolation {
                residual: max_imag,
                limit,
            });
        }
        DynTensor::from_vec(dims, out)
    }
}

pub fn fft_time(t: &DynTensor) -> ComplexSliceStack {
    TimeFft::new(t.dims().frames).forward(t)
}

pub fn ifft_time(s: &ComplexSliceStack) -> Result<DynTensor> {
    TimeFft::new(s.dims().frames).inverse(s)
}

/// Orthonormal DCT-II matrix of size `n` (row `k` is basis function `k`).
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let nf = n as f64;
    for k in 0..n {
        let alpha = if k == 0 {
            (1.0 / nf).sqrt()
        } else {
            (2.0 / nf).sqrt()
        };
        for x in 0..n {
            m[k * n + x] =
                alpha * (std::f64::consts::PI * (2 * x + 1) as f64 * k as f64 / (2.0 * nf)).cos();
        }
    }
    m
}

/// Separable orthonormal 3D DCT for a fixed block size.
///
/// Used both for whole images and for the per-patch transform, where the
/// same plan is applied to many contiguous blocks.
#[derive(Debug, Clone)]
pub struct Dct3 {
    dims: Dims,
    mats: [Vec<f64>; 3],
}

impl Dct3 {
    pub fn new(dims: Dims) -> Self {
        Self {
            dims,
            mats: [
                dct_matrix(dims.rows),
                dct_matrix(dims.cols),
                dct_matrix(dims.frames),
            ],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// In-place forward transform of one block in vectorized order.
    pub fn forward_block(&self, block: &mut [f64], scratch: &mut Vec<f64>) {
        self.apply(block, scratch, false);
    }

    /// In-place inverse (and adjoint) transform of one block.
    pub fn inverse_block(&self, block: &mut [f64], scratch: &mut Vec<f64>) {
        self.apply(block, scratch, true);
    }

    fn apply(&self, block: &mut [f64], scratch: &mut Vec<f64>, transpose: bool) {
        let Dims { rows, cols, frames } = self.dims;
        debug_assert_eq!(block.len(), self.dims.len());
        let strides = [1, rows, rows * cols];
        let lens = [rows, cols, frames];
        for axis in 0..3 {
            let n = lens[axis];
            if n == 1 {
                continue;
            }
            let stride = strides[axis];
            let mat = &self.mats[axis];
            scratch.resize(n, 0.0);
            // iterate over all lines along `axis`
            let outer = block.len() / n;
            for line in 0..outer {
                let base = line_base(line, axis, rows, cols);
                for (x, s) in scratch.iter_mut().enumerate() {
                    *s = block[base + x * stride];
                }
                for k in 0..n {
                    let mut acc = 0.0;
                    if transpose {
                        for x in 0..n {
                            acc += mat[x * n + k] * scratch[x];
                        }
                    } else {
                        let row = &mat[k * n..(k + 1) * n];
                        for x in 0..n {
                            acc += row[x] * scratch[x];
                        }
                    }
                    block[base + k * stride] = acc;
                }
            }
        }
    }
}

/// Offset of the first element of the `line`-th line along `axis`.
#[inline]
fn line_base(line: usize, axis: usize, rows: usize, cols: usize) -> usize {
    match axis {
        0 => line * rows,
        1 => {
            let k = line / rows;
            let i = line % rows;
            k * rows * cols + i
        }
        _ => line,
    }
}

/// Orthonormal type-II DCT along all three axes.
pub fn dct3(t: &DynTensor) -> DynTensor {
    let plan = Dct3::new(t.dims());
    let mut out = t.clone();
    let mut scratch = Vec::new();
    plan.forward_block(out.as_mut_slice(), &mut scratch);
    out
}

/// Inverse of [`dct3`], which is also its adjoint.
pub fn idct3(t: &DynTensor) -> DynTensor {
    let plan = Dct3::new(t.dims());
    let mut out = t.clone();
    let mut scratch = Vec::new();
    plan.inverse_block(out.as_mut_slice(), &mut scratch);
    out
}
