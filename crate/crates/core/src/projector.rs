//! Parallel-beam projector with exact pixel intersection lengths.
//!
//! Each sinogram bin is a single ray traced through the pixel grid with
//! Siddon's method; the stored weight is the intersection length in pixel
//! units. The system matrix is kept in CSR form, so [`Projector::backward`]
//! is the literal transpose of [`Projector::forward`]. Optional per-bin
//! attenuation factors are folded into the operator.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Dims, DynTensor};

/// Scanner geometry for square images.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub n_radial: usize,
    pub n_angles: usize,
    pub image_side: usize,
    /// Transaxial field of view in mm.
    pub fov_mm: f64,
    /// Projection angles in radians, strictly increasing in `[0, pi)`.
    pub angles: Vec<f64>,
}

impl Geometry {
    /// Evenly spaced angles over `[0, pi)`.
    pub fn new(image_side: usize, n_radial: usize, n_angles: usize, fov_mm: f64) -> Result<Self> {
        let angles = (0..n_angles)
            .map(|a| std::f64::consts::PI * a as f64 / n_angles as f64)
            .collect();
        let g = Self {
            n_radial,
            n_angles,
            image_side,
            fov_mm,
            angles,
        };
        g.validate()?;
        Ok(g)
    }

    /// 64x64 image, 95 radial bins and 72 angles.
    pub fn desk_default() -> Self {
        Self::new(64, 95, 72, 320.0).expect("default geometry is valid")
    }

    /// Smallest radial bin count covering the image diagonal.
    pub fn min_radial(image_side: usize) -> usize {
        (image_side as f64 * std::f64::consts::SQRT_2).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.n_angles == 0 {
            return Err(Error::Config(
                "geometry needs a nonempty image and angle set".into(),
            ));
        }
        if self.n_radial < Self::min_radial(self.image_side) {
            return Err(Error::Config(format!(
                "{} radial bins do not cover a {} pixel image (need {})",
                self.n_radial,
                self.image_side,
                Self::min_radial(self.image_side)
            )));
        }
        if self.angles.len() != self.n_angles {
            return Err(Error::Config(
                "angle list length differs from n_angles".into(),
            ));
        }
        let ok = self.angles.windows(2).all(|w| w[0] < w[1])
            && self
                .angles
                .iter()
                .all(|&a| (0.0..std::f64::consts::PI).contains(&a));
        if !ok {
            return Err(Error::Config(
                "angles must be strictly increasing in [0, pi)".into(),
            ));
        }
        if !(self.fov_mm > 0.0) {
            return Err(Error::Config("field of view must be positive".into()));
        }
        Ok(())
    }

    pub fn pixel_mm(&self) -> f64 {
        self.fov_mm / self.image_side as f64
    }

    pub fn n_bins(&self) -> usize {
        self.n_radial * self.n_angles
    }

    pub fn image_dims(&self, frames: usize) -> Dims {
        Dims::new(self.image_side, self.image_side, frames)
    }

    pub fn sino_dims(&self, frames: usize) -> Dims {
        Dims::new(self.n_radial, self.n_angles, frames)
    }

    /// Signed radial offset of bin `r` in pixel units.
    pub fn radial_offset(&self, r: usize) -> f64 {
        r as f64 - (self.n_radial as f64 - 1.0) / 2.0
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    #[inline]
    pub fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        let (c, v) = self.row(r);
        c.iter().zip(v).map(|(&c, &v)| v * x[c as usize]).sum()
    }

    /// `y += alpha * row_r`
    #[inline]
    pub fn row_axpy(&self, r: usize, alpha: f64, y: &mut [f64]) {
        let (c, v) = self.row(r);
        for (&c, &v) in c.iter().zip(v) {
            y[c as usize] += alpha * v;
        }
    }
}

/// Intersection lengths of one ray with the pixel grid, as `(pixel, length)`.
///
/// The image occupies `[-N/2, N/2]^2`; pixel `(i, j)` covers
/// `x in [j - N/2, j + 1 - N/2]` and `y in [N/2 - i - 1, N/2 - i]`. The ray is
/// the set of points with `x cos(theta) + y sin(theta) = s`.
pub fn trace_ray(side: usize, theta: f64, s: f64) -> Vec<(usize, f64)> {
    let half = side as f64 / 2.0;
    let (c, sn) = (theta.cos(), theta.sin());
    let (x0, y0) = (s * c, s * sn);
    let (dx, dy) = (-sn, c);
    const TINY: f64 = 1e-12;

    let mut t_lo = f64::NEG_INFINITY;
    let mut t_hi = f64::INFINITY;
    for (p0, d) in [(x0, dx), (y0, dy)] {
        if d.abs() < TINY {
            if p0 <= -half || p0 >= half {
                return Vec::new();
            }
        } else {
            let a = (-half - p0) / d;
            let b = (half - p0) / d;
            t_lo = t_lo.max(a.min(b));
            t_hi = t_hi.min(a.max(b));
        }
    }
    if t_hi - t_lo <= TINY {
        return Vec::new();
    }

    let mut ts = Vec::with_capacity(2 * side + 2);
    ts.push(t_lo);
    ts.push(t_hi);
    for (p0, d) in [(x0, dx), (y0, dy)] {
        if d.abs() < TINY {
            continue;
        }
        for k in 1..side {
            let t = (-half + k as f64 - p0) / d;
            if t > t_lo && t < t_hi {
                ts.push(t);
            }
        }
    }
    ts.sort_by(|a, b| a.partial_cmp(b).expect("finite ray parameters"));

    let mut out = Vec::with_capacity(ts.len());
    for w in ts.windows(2) {
        let len = w[1] - w[0];
        if len <= TINY {
            continue;
        }
        let tm = 0.5 * (w[0] + w[1]);
        let (x, y) = (x0 + tm * dx, y0 + tm * dy);
        let j = ((x + half).floor() as isize).clamp(0, side as isize - 1) as usize;
        let i = ((half - y).floor() as isize).clamp(0, side as isize - 1) as usize;
        out.push((j * side + i, len));
    }
    out
}

/// The system operator `A` for one geometry, applied frame by frame.
#[derive(Debug, Clone)]
pub struct Projector {
    geometry: Geometry,
    matrix: CsrMatrix,
    /// Per-bin multiplicative factors, one frame (static) or one per frame.
    atten: Option<DynTensor>,
}

impl Projector {
    pub fn new(geometry: Geometry) -> Result<Self> {
        geometry.validate()?;
        let side = geometry.image_side;
        let mut row_ptr = Vec::with_capacity(geometry.n_bins() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for &theta in &geometry.angles {
            for r in 0..geometry.n_radial {
                for (pix, len) in trace_ray(side, theta, geometry.radial_offset(r)) {
                    col_idx.push(pix as u32);
                    values.push(len);
                }
                row_ptr.push(values.len());
            }
        }
        let matrix = CsrMatrix {
            n_rows: geometry.n_bins(),
            n_cols: side * side,
            row_ptr,
            col_idx,
            values,
        };
        Ok(Self {
            geometry,
            matrix,
            atten: None,
        })
    }

    /// Folds attenuation factors into the operator. `atten` has sinogram
    /// dims with either one frame (static) or one per image frame.
    pub fn with_attenuation(mut self, atten: DynTensor) -> Result<Self> {
        let d = atten.dims();
        if d.rows != self.geometry.n_radial || d.cols != self.geometry.n_angles {
            return Err(Error::DimMismatch(format!(
                "attenuation {d} does not match {} radial x {} angles",
                self.geometry.n_radial, self.geometry.n_angles
            )));
        }
        if atten.as_slice().iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config(
                "attenuation factors must lie in (0, 1]".into(),
            ));
        }
        self.atten = Some(atten);
        Ok(self)
    }

    pub fn without_attenuation(&self) -> Self {
        Self {
            geometry: self.geometry.clone(),
            matrix: self.matrix.clone(),
            atten: None,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn attenuation(&self) -> Option<&DynTensor> {
        self.atten.as_ref()
    }

    fn atten_frame(&self, k: usize) -> Option<&[f64]> {
        self.atten.as_ref().map(|a| {
            if a.dims().frames == 1 {
                a.frame(0)
            } else {
                a.frame(k)
            }
        })
    }

    fn check_frames(&self, frames: usize) -> Result<()> {
        if let Some(a) = &self.atten {
            let af = a.dims().frames;
            if af != 1 && af != frames {
                return Err(Error::DimMismatch(format!(
                    "attenuation has {af} frames, data has {frames}"
                )));
            }
        }
        Ok(())
    }

    /// `A f` for one frame, restricted to the listed angles (all when `None`).
    pub fn forward_frame(&self, k: usize, img: &[f64], out: &mut [f64], angles: Option<&[usize]>) {
        let nr = self.geometry.n_radial;
        let att = self.atten_frame(k);
        let mut do_angle = |a: usize| {
            for r in 0..nr {
                let row = a * nr + r;
                let v = self.matrix.row_dot(row, img);
                out[row] = match att {
                    Some(att) => v * att[row],
                    None => v,
                };
            }
        };
        match angles {
            Some(list) => list.iter().for_each(|&a| do_angle(a)),
            None => (0..self.geometry.n_angles).for_each(do_angle),
        }
    }

    /// `A^T s` for one frame, restricted to the listed angles. Overwrites `out`.
    pub fn backward_frame(
        &self,
        k: usize,
        sino: &[f64],
        out: &mut [f64],
        angles: Option<&[usize]>,
    ) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let nr = self.geometry.n_radial;
        let att = self.atten_frame(k);
        let mut do_angle = |a: usize| {
            for r in 0..nr {
                let row = a * nr + r;
                let w = match att {
                    Some(att) => sino[row] * att[row],
                    None => sino[row],
                };
                if w != 0.0 {
                    self.matrix.row_axpy(row, w, out);
                }
            }
        };
        match angles {
            Some(list) => list.iter().for_each(|&a| do_angle(a)),
            None => (0..self.geometry.n_angles).for_each(do_angle),
        }
    }

    pub fn forward(&self, f: &DynTensor) -> Result<DynTensor> {
        let frames = f.dims().frames;
        f.check_dims(self.geometry.image_dims(frames), "forward projection input")?;
        self.check_frames(frames)?;
        let mut out = DynTensor::zeros(self.geometry.sino_dims(frames));
        let nb = self.geometry.n_bins();
        let fl = f.dims().frame_len();
        out.as_mut_slice()
            .par_chunks_mut(nb)
            .enumerate()
            .for_each(|(k, o)| self.forward_frame(k, &f.as_slice()[k * fl..(k + 1) * fl], o, None));
        Ok(out)
    }

    pub fn backward(&self, s: &DynTensor) -> Result<DynTensor> {
        let frames = s.dims().frames;
        s.check_dims(self.geometry.sino_dims(frames), "backprojection input")?;
        self.check_frames(frames)?;
        let mut out = DynTensor::zeros(self.geometry.image_dims(frames));
        let nb = self.geometry.n_bins();
        let fl = out.dims().frame_len();
        out.as_mut_slice()
            .par_chunks_mut(fl)
            .enumerate()
            .for_each(|(k, o)| {
                self.backward_frame(k, &s.as_slice()[k * nb..(k + 1) * nb], o, None)
            });
        Ok(out)
    }

    /// Sensitivity image `A^T 1`.
    pub fn sensitivity(&self, frames: usize) -> Result<DynTensor> {
        self.backward(&DynTensor::filled(self.geometry.sino_dims(frames), 1.0))
    }

    /// Attenuation factors `exp(-integral of mu)` for a map in 1/mm.
    pub fn attenuation_factors(&self, mu_map: &DynTensor) -> Result<DynTensor> {
        let line = self.without_attenuation().forward(mu_map)?;
        let mm = self.geometry.pixel_mm();
        Ok(line.map(|l| (-l * mm).exp()))
    }
}

/// Expected counts `A f + gamma`, checking the zero-bin convention.
fn expected_counts(
    p: &Projector,
    f: &DynTensor,
    g: &DynTensor,
    gamma: &DynTensor,
) -> Result<DynTensor> {
    let mut ybar = p.forward(f)?;
    g.check_dims(ybar.dims(), "measured counts")?;
    gamma.check_dims(ybar.dims(), "additive counts")?;
    ybar.axpy(1.0, gamma);
    for (b, (&y, &gb)) in ybar.as_slice().iter().zip(g.as_slice()).enumerate() {
        if gb > 0.0 && !(y > 0.0) {
            return Err(Error::DivisionByZeroBin { bin: b, counts: gb });
        }
    }
    Ok(ybar)
}

/// Gradient of the KL fidelity, `A^T (1 - g / (A f + gamma))`.
pub fn kl_gradient(
    p: &Projector,
    f: &DynTensor,
    g: &DynTensor,
    gamma: &DynTensor,
) -> Result<DynTensor> {
    let ybar = expected_counts(p, f, g, gamma)?;
    let resid = ybar.zip_map(g, |y, gb| if gb == 0.0 { 1.0 } else { 1.0 - gb / y });
    p.backward(&resid)
}

/// KL fidelity `<A f, 1> - <log(A f + gamma), g>` with `0 log 0 = 0`.
pub fn kl_objective(p: &Projector, f: &DynTensor, g: &DynTensor, gamma: &DynTensor) -> Result<f64> {
    let af = p.forward(f)?;
    let ybar = expected_counts(p, f, g, gamma)?;
    let log_term: f64 = ybar
        .as_slice()
        .iter()
        .zip(g.as_slice())
        .map(|(&y, &gb)| if gb == 0.0 { 0.0 } else { gb * y.ln() })
        .sum();
    Ok(af.sum() - log_term)
}

/// KL fidelity and its gradient from a single forward projection.
pub fn kl_value_and_gradient(
    p: &Projector,
    f: &DynTensor,
    g: &DynTensor,
    gamma: &DynTensor,
) -> Result<(f64, DynTensor)> {
    let ybar = expected_counts(p, f, g, gamma)?;
    let mut value = 0.0;
    for ((&y, &gb), &gm) in ybar
        .as_slice()
        .iter()
        .zip(g.as_slice())
        .zip(gamma.as_slice())
    {
        value += y - gm;
        if gb != 0.0 {
            value -= gb * y.ln();
        }
    }
    let resid = ybar.zip_map(g, |y, gb| if gb == 0.0 { 1.0 } else { 1.0 - gb / y });
    Ok((value, p.backward(&resid)?))
}
