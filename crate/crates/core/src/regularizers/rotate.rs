//! Frame-wise 45 degree rotation onto an enlarged canvas.

use crate::error::{Error, Result};
use crate::tensor::{Dims, DynTensor};

/// Bilinear rotation by 45 degrees about the image center.
///
/// The output canvas has side `ceil(side * sqrt(2))` so the rotated square
/// fits; samples falling outside the source are zero. The interpolation
/// stencil is stored once and reused by the adjoint, which is its exact
/// transpose.
#[derive(Debug, Clone)]
pub struct Rotation45 {
    side: usize,
    canvas: usize,
    /// Per canvas pixel, up to four `(source pixel, weight)` taps.
    stencil: Vec<[(u32, f64); 4]>,
}

impl Rotation45 {
    pub fn new(side: usize) -> Self {
        let canvas = (side as f64 * std::f64::consts::SQRT_2).ceil() as usize;
        let (s, c) = std::f64::consts::FRAC_PI_4.sin_cos();
        let cc = (canvas as f64 - 1.0) / 2.0;
        let sc = (side as f64 - 1.0) / 2.0;
        let mut stencil = Vec::with_capacity(canvas * canvas);
        for j in 0..canvas {
            for i in 0..canvas {
                let (x, y) = (j as f64 - cc, i as f64 - cc);
                // inverse rotation into source coordinates
                let xs = c * x + s * y + sc;
                let ys = -s * x + c * y + sc;
                let (j0, i0) = (xs.floor(), ys.floor());
                let (fx, fy) = (xs - j0, ys - i0);
                let mut taps = [(0u32, 0.0); 4];
                let corners = [
                    (i0, j0, (1.0 - fy) * (1.0 - fx)),
                    (i0 + 1.0, j0, fy * (1.0 - fx)),
                    (i0, j0 + 1.0, (1.0 - fy) * fx),
                    (i0 + 1.0, j0 + 1.0, fy * fx),
                ];
                for (t, &(ii, jj, w)) in taps.iter_mut().zip(&corners) {
                    let inside = ii >= 0.0 && jj >= 0.0 && ii < side as f64 && jj < side as f64;
                    if inside && w > 0.0 {
                        *t = ((jj as usize * side + ii as usize) as u32, w);
                    }
                }
                stencil.push(taps);
            }
        }
        Self {
            side,
            canvas,
            stencil,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn canvas_side(&self) -> usize {
        self.canvas
    }

    pub fn canvas_dims(&self, frames: usize) -> Dims {
        Dims::new(self.canvas, self.canvas, frames)
    }

    fn check_input(&self, d: Dims) -> Result<()> {
        if d.rows != d.cols {
            return Err(Error::DimMismatch(format!(
                "rotation needs square frames, got {d}"
            )));
        }
        if d.rows != self.side {
            return Err(Error::DimMismatch(format!(
                "rotation planned for side {}, got {d}",
                self.side
            )));
        }
        Ok(())
    }

    pub fn rotate(&self, f: &DynTensor) -> Result<DynTensor> {
        let d = f.dims();
        self.check_input(d)?;
        let mut out = DynTensor::zeros(self.canvas_dims(d.frames));
        for k in 0..d.frames {
            let src = f.frame(k);
            for (o, taps) in out.frame_mut(k).iter_mut().zip(&self.stencil) {
                *o = taps.iter().map(|&(p, w)| w * src[p as usize]).sum();
            }
        }
        Ok(out)
    }

    pub fn adjoint(&self, g: &DynTensor) -> Result<DynTensor> {
        let d = g.dims();
        if d.rows != self.canvas || d.cols != self.canvas {
            return Err(Error::DimMismatch(format!(
                "rotation adjoint expects a {0}x{0} canvas, got {d}",
                self.canvas
            )));
        }
        let mut out = DynTensor::zeros(Dims::new(self.side, self.side, d.frames));
        for k in 0..d.frames {
            let src = g.frame(k);
            let dst = out.frame_mut(k);
            for (&v, taps) in src.iter().zip(&self.stencil) {
                if v != 0.0 {
                    for &(p, w) in taps {
                        dst[p as usize] += w * v;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Rotates square frames by 45 degrees onto an enlarged zero-filled canvas.
pub fn rotate45(f: &DynTensor) -> Result<DynTensor> {
    let d = f.dims();
    if d.rows != d.cols {
        return Err(Error::DimMismatch(format!(
            "rotation needs square frames, got {d}"
        )));
    }
    Rotation45::new(d.rows).rotate(f)
}

/// Adjoint of [`rotate45`] for an image of side `side`.
pub fn rotate45_adjoint(g: &DynTensor, side: usize) -> Result<DynTensor> {
    Rotation45::new(side).adjoint(g)
}
