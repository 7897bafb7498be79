//! Overlapping spatiotemporal patch extraction and its adjoint.

use crate::error::{Error, Result};
use crate::tensor::{Dims, DynTensor};

/// Patch shape, spacing between patch origins, and edge handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSettings {
    pub patch: Dims,
    pub span: Dims,
    /// Reflect-pad each spatial edge by half the patch size before
    /// extraction. Without padding, patches tile the bare image.
    pub pad: bool,
}

impl PatchSettings {
    pub fn new(patch: Dims, span: Dims) -> Self {
        Self {
            patch,
            span,
            pad: true,
        }
    }
}

/// The patch extraction operator `Q` for one image size.
///
/// Every row of `Q` selects exactly one image voxel, so extraction is a
/// gather through a precomputed index map and the adjoint is the matching
/// scatter-add. Patches are stored back to back, each in vectorized order
/// with the patch's own dims, so per-patch transforms act on contiguous
/// blocks.
#[derive(Debug, Clone)]
pub struct PatchExtractor {
    settings: PatchSettings,
    image: Dims,
    padded: Dims,
    pad: (usize, usize),
    n_patches: usize,
    index: Vec<u32>,
    coverage: Vec<f64>,
}

/// Half-sample symmetric reflection of a padded coordinate into `[0, n)`.
pub fn reflect(u: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut v = u.rem_euclid(period);
    if v >= n {
        v = period - 1 - v;
    }
    v as usize
}

/// Patch origins along one axis: every `span`, plus a final origin flush
/// with the end so the whole axis is covered.
pub fn origins(len: usize, patch: usize, span: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=len - patch).step_by(span).collect();
    if *out.last().expect("at least one origin") + patch < len {
        out.push(len - patch);
    }
    out
}

impl PatchExtractor {
    pub fn new(settings: PatchSettings, image: Dims) -> Result<Self> {
        let PatchSettings { patch, span, pad } = settings;
        if patch.is_empty() || span.is_empty() {
            return Err(Error::Config(
                "patch and span sizes must be positive".into(),
            ));
        }
        let pad = if pad {
            (patch.rows / 2, patch.cols / 2)
        } else {
            (0, 0)
        };
        let padded = Dims::new(image.rows + 2 * pad.0, image.cols + 2 * pad.1, image.frames);
        if patch.rows > padded.rows || patch.cols > padded.cols || patch.frames > padded.frames {
            return Err(Error::DimMismatch(format!(
                "patch {patch} does not fit the padded image {padded}"
            )));
        }
        if span.rows > patch.rows || span.cols > patch.cols || span.frames > patch.frames {
            return Err(Error::Config(format!(
                "span {span} leaves gaps between {patch} patches"
            )));
        }
        let oi = origins(padded.rows, patch.rows, span.rows);
        let oj = origins(padded.cols, patch.cols, span.cols);
        let ok = origins(padded.frames, patch.frames, span.frames);
        let n_patches = oi.len() * oj.len() * ok.len();

        let mut index = Vec::with_capacity(n_patches * patch.len());
        for &k0 in &ok {
            for &j0 in &oj {
                for &i0 in &oi {
                    for c in 0..patch.frames {
                        for b in 0..patch.cols {
                            let j = reflect((j0 + b) as isize - pad.1 as isize, image.cols);
                            for a in 0..patch.rows {
                                let i = reflect((i0 + a) as isize - pad.0 as isize, image.rows);
                                index.push(image.index(i, j, k0 + c) as u32);
                            }
                        }
                    }
                }
            }
        }
        let mut coverage = vec![0.0; image.len()];
        for &v in &index {
            coverage[v as usize] += 1.0;
        }
        Ok(Self {
            settings,
            image,
            padded,
            pad,
            n_patches,
            index,
            coverage,
        })
    }

    pub fn settings(&self) -> PatchSettings {
        self.settings
    }

    pub fn image_dims(&self) -> Dims {
        self.image
    }

    pub fn padded_dims(&self) -> Dims {
        self.padded
    }

    pub fn padding(&self) -> (usize, usize) {
        self.pad
    }

    pub fn patch_dims(&self) -> Dims {
        self.settings.patch
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    /// Total patch-vector length `L`.
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Image voxel read by each patch-vector slot.
    pub fn index_map(&self) -> &[u32] {
        &self.index
    }

    /// Diagonal of `Q^T Q`: how many patch slots read each voxel.
    pub fn coverage(&self) -> DynTensor {
        DynTensor::from_vec(self.image, self.coverage.clone()).expect("coverage has image dims")
    }

    /// Largest coverage count, which is `||Q||_2^2`.
    pub fn max_coverage(&self) -> f64 {
        self.coverage.iter().copied().fold(0.0, f64::max)
    }

    /// `q = Q f`
    pub fn extract(&self, f: &DynTensor) -> Result<Vec<f64>> {
        f.check_dims(self.image, "patch extraction input")?;
        let src = f.as_slice();
        Ok(self.index.iter().map(|&v| src[v as usize]).collect())
    }

    /// `f = Q^T q`
    pub fn fold_adjoint(&self, q: &[f64]) -> Result<DynTensor> {
        let mut out = DynTensor::zeros(self.image);
        self.fold_adjoint_into(q, &mut out)?;
        Ok(out)
    }

    /// `out += Q^T q`
    pub fn fold_adjoint_into(&self, q: &[f64], out: &mut DynTensor) -> Result<()> {
        if q.len() != self.len() {
            return Err(Error::DimMismatch(format!(
                "patch vector has {} entries, expected {}",
                q.len(),
                self.len()
            )));
        }
        out.check_dims(self.image, "patch fold output")?;
        let dst = out.as_mut_slice();
        for (&v, &x) in self.index.iter().zip(q) {
            dst[v as usize] += x;
        }
        Ok(())
    }

    pub fn blocks<'a>(&self, q: &'a [f64]) -> std::slice::Chunks<'a, f64> {
        q.chunks(self.settings.patch.len())
    }

    pub fn blocks_mut<'a>(&self, q: &'a mut [f64]) -> std::slice::ChunksMut<'a, f64> {
        q.chunks_mut(self.settings.patch.len())
    }
}
