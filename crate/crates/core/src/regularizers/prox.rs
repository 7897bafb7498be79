//! Proximity operators used by the dual updates.

use nalgebra::{DMatrix, SVD};
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::{Dims, DynTensor, TimeFft};

const SVD_EPS: f64 = 1e-14;
const SVD_MAX_ITER: usize = 10_000;

/// Projection onto the nonnegative orthant.
pub fn prox_nonneg(f: &DynTensor) -> DynTensor {
    f.map(|v| v.max(0.0))
}

#[inline]
pub fn soft_threshold(v: f64, threshold: f64) -> f64 {
    let m = v.abs() - threshold;
    if m > 0.0 {
        m.copysign(v)
    } else {
        0.0
    }
}

/// Soft thresholding, the proximity operator of `threshold * ||.||_1`.
pub fn prox_l1(f: &[f64], threshold: f64) -> Result<Vec<f64>> {
    check_threshold(threshold)?;
    Ok(f.iter().map(|&v| soft_threshold(v, threshold)).collect())
}

/// In-place variant of [`prox_l1`]; the threshold is not checked.
pub fn prox_l1_inplace(f: &mut [f64], threshold: f64) {
    f.iter_mut()
        .for_each(|v| *v = soft_threshold(*v, threshold));
}

fn check_threshold(t: f64) -> Result<()> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::NegativeThreshold(t));
    }
    Ok(())
}

/// Singular value thresholding of a real matrix.
pub fn svt(m: &DMatrix<f64>, threshold: f64) -> Result<DMatrix<f64>> {
    check_threshold(threshold)?;
    let (rows, cols) = m.shape();
    let svd = SVD::try_new(m.clone(), true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or(Error::SvdFailure { rows, cols })?;
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let s = svd.singular_values.map(|s| (s - threshold).max(0.0));
    Ok(u * DMatrix::from_diagonal(&s) * vt)
}

/// Singular value thresholding of a complex matrix; phases of `U` and `V`
/// are kept.
pub fn svt_complex(m: &DMatrix<Complex64>, threshold: f64) -> Result<DMatrix<Complex64>> {
    check_threshold(threshold)?;
    let (rows, cols) = m.shape();
    let svd = SVD::try_new(m.clone(), true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or(Error::SvdFailure { rows, cols })?;
    let mut u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^H");
    for (c, s) in svd.singular_values.iter().enumerate() {
        let s = (s - threshold).max(0.0);
        u.column_mut(c).scale_mut(s);
    }
    Ok(u * vt)
}

pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let (rows, cols) = m.shape();
    SVD::try_new(m.clone(), false, false, SVD_EPS, SVD_MAX_ITER)
        .map(|s| s.singular_values.as_slice().to_vec())
        .ok_or(Error::SvdFailure { rows, cols })
}

pub fn singular_values_complex(m: &DMatrix<Complex64>) -> Result<Vec<f64>> {
    let (rows, cols) = m.shape();
    SVD::try_new(m.clone(), false, false, SVD_EPS, SVD_MAX_ITER)
        .map(|s| s.singular_values.as_slice().to_vec())
        .ok_or(Error::SvdFailure { rows, cols })
}

/// Nuclear norm of a real matrix.
pub fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.iter().sum())
}

/// Tensor nuclear-norm machinery for one block shape.
///
/// Holds the time-axis FFT plan so repeated calls on equally sized blocks
/// (patches) do not replan.
#[derive(Debug, Clone)]
pub struct TnnProx {
    dims: Dims,
    fft: TimeFft,
}

impl TnnProx {
    pub fn new(dims: Dims) -> Self {
        Self {
            dims,
            fft: TimeFft::new(dims.frames),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Frequencies that need an SVD; the rest are conjugates.
    fn half(&self) -> usize {
        self.dims.frames / 2
    }

    fn is_real_slice(&self, k: usize) -> bool {
        k == 0 || 2 * k == self.dims.frames
    }

    /// Proximity operator of the TNN applied in place to one block.
    pub fn apply_block(&self, block: &mut [f64], threshold: f64) -> Result<()> {
        check_threshold(threshold)?;
        let t = DynTensor::from_vec(self.dims, block.to_vec())?;
        let mut spec = self.fft.forward(&t);
        let tau = self.dims.frames;
        for k in 0..=self.half() {
            let slice = spec.slice(k);
            let out = if self.is_real_slice(k) {
                let re = svt(&slice.map(|c| c.re), threshold)?;
                re.map(|v| Complex64::new(v, 0.0))
            } else {
                svt_complex(&slice, threshold)?
            };
            if k != 0 && k != tau - k {
                spec.set_slice(tau - k, &out.map(|c| c.conj()));
            }
            spec.set_slice(k, &out);
        }
        let back = self.fft.inverse(&spec)?;
        block.copy_from_slice(back.as_slice());
        Ok(())
    }

    /// Sum of singular values over all frequency slices of one block.
    pub fn norm_block(&self, block: &[f64]) -> Result<f64> {
        let t = DynTensor::from_vec(self.dims, block.to_vec())?;
        let spec = self.fft.forward(&t);
        let tau = self.dims.frames;
        let mut total = 0.0;
        for k in 0..=self.half() {
            let slice = spec.slice(k);
            let s: f64 = if self.is_real_slice(k) {
                singular_values(&slice.map(|c| c.re))?.iter().sum()
            } else {
                singular_values_complex(&slice)?.iter().sum()
            };
            let mult = if k == 0 || k == tau - k { 1.0 } else { 2.0 };
            total += mult * s;
        }
        Ok(total)
    }
}

/// FFT along time, slice-wise singular value thresholding, inverse FFT.
///
/// The threshold acts on the unnormalized frequency slices, so by Parseval
/// this is the proximity operator of `threshold / tau * TNN`.
pub fn prox_tnn(f: &DynTensor, threshold: f64) -> Result<DynTensor> {
    let plan = TnnProx::new(f.dims());
    let mut out = f.clone();
    plan.apply_block(out.as_mut_slice(), threshold)?;
    Ok(out)
}

/// Tensor nuclear norm.
pub fn tnn(f: &DynTensor) -> Result<f64> {
    TnnProx::new(f.dims()).norm_block(f.as_slice())
}

/// `||y - (I - prox)(x + y)||`, zero exactly when `y` is a subgradient of
/// the function whose proximity operator is `prox`, evaluated at `x`.
pub fn moreau_residual(x: &[f64], y: &[f64], prox: impl Fn(&[f64]) -> Vec<f64>) -> f64 {
    let z: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
    let p = prox(&z);
    y.iter()
        .zip(z.iter().zip(&p))
        .map(|(&yv, (&zv, &pv))| (yv - (zv - pv)).powi(2))
        .sum::<f64>()
        .sqrt()
}
