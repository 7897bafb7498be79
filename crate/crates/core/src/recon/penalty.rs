//! Penalty operators `B` with their dual updates.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::regularizers::prox::soft_threshold;
use crate::regularizers::{PatchExtractor, PatchSettings, Rotation45, TnnProx};
use crate::tensor::{Dct3, Dims, DynTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    /// `||D x||_1` with the orthonormal 3D DCT per block.
    Dct,
    /// Tensor nuclear norm per block, scaled by `1 / tau_block` so that the
    /// frequency-domain threshold is its exact proximity operator.
    Tnn,
}

#[derive(Debug, Clone)]
enum Block {
    Dct(Dct3),
    Tnn(TnnProx),
}

/// One penalty term `phi(B f)` where `B` is an optional 45 degree rotation,
/// an optional patch extraction, then the per-block transform.
#[derive(Debug, Clone)]
pub struct PenaltyTerm {
    kind: PenaltyKind,
    image: Dims,
    rotation: Option<Rotation45>,
    patches: Option<PatchExtractor>,
    block_dims: Dims,
    block: Block,
}

impl PenaltyTerm {
    pub fn whole(kind: PenaltyKind, image: Dims) -> Self {
        Self::build(kind, image, None, None, image)
    }

    pub fn patched(
        kind: PenaltyKind,
        image: Dims,
        settings: PatchSettings,
        rotate: bool,
    ) -> Result<Self> {
        let (rotation, domain) = if rotate {
            if image.rows != image.cols {
                return Err(Error::DimMismatch(format!(
                    "rotation needs square frames, got {image}"
                )));
            }
            let r = Rotation45::new(image.rows);
            let d = r.canvas_dims(image.frames);
            (Some(r), d)
        } else {
            (None, image)
        };
        let q = PatchExtractor::new(settings, domain)?;
        let bd = q.patch_dims();
        Ok(Self::build(kind, image, rotation, Some(q), bd))
    }

    fn build(
        kind: PenaltyKind,
        image: Dims,
        rotation: Option<Rotation45>,
        patches: Option<PatchExtractor>,
        block_dims: Dims,
    ) -> Self {
        let block = match kind {
            PenaltyKind::Dct => Block::Dct(Dct3::new(block_dims)),
            PenaltyKind::Tnn => Block::Tnn(TnnProx::new(block_dims)),
        };
        Self {
            kind,
            image,
            rotation,
            patches,
            block_dims,
            block,
        }
    }

    pub fn kind(&self) -> PenaltyKind {
        self.kind
    }

    pub fn is_rotated(&self) -> bool {
        self.rotation.is_some()
    }

    pub fn patches(&self) -> Option<&PatchExtractor> {
        self.patches.as_ref()
    }

    pub fn block_dims(&self) -> Dims {
        self.block_dims
    }

    pub fn dual_len(&self) -> usize {
        match &self.patches {
            Some(q) => q.len(),
            None => self.image.len(),
        }
    }

    /// Sampling part of `B` (rotation then extraction), without the
    /// orthonormal block transform.
    fn sample(&self, x: &DynTensor) -> Result<Vec<f64>> {
        x.check_dims(self.image, "penalty input")?;
        let rotated;
        let src = match &self.rotation {
            Some(r) => {
                rotated = r.rotate(x)?;
                &rotated
            }
            None => x,
        };
        match &self.patches {
            Some(q) => q.extract(src),
            None => Ok(src.as_slice().to_vec()),
        }
    }

    fn sample_adjoint(&self, q: &[f64]) -> Result<DynTensor> {
        let domain = match &self.patches {
            Some(p) => p.fold_adjoint(q)?,
            None => DynTensor::from_vec(self.image, q.to_vec())?,
        };
        match &self.rotation {
            Some(r) => r.adjoint(&domain),
            None => Ok(domain),
        }
    }

    fn transform(&self, q: &mut [f64]) {
        if let Block::Dct(d) = &self.block {
            q.par_chunks_mut(self.block_dims.len())
                .for_each_init(Vec::new, |scratch, b| d.forward_block(b, scratch));
        }
    }

    fn transform_adjoint(&self, q: &mut [f64]) {
        if let Block::Dct(d) = &self.block {
            q.par_chunks_mut(self.block_dims.len())
                .for_each_init(Vec::new, |scratch, b| d.inverse_block(b, scratch));
        }
    }

    /// `B x`
    pub fn forward(&self, x: &DynTensor) -> Result<Vec<f64>> {
        let mut q = self.sample(x)?;
        self.transform(&mut q);
        Ok(q)
    }

    /// `B^T c`
    pub fn adjoint(&self, c: &[f64]) -> Result<DynTensor> {
        if c.len() != self.dual_len() {
            return Err(Error::DimMismatch(format!(
                "dual has {} entries, expected {}",
                c.len(),
                self.dual_len()
            )));
        }
        let mut q = c.to_vec();
        self.transform_adjoint(&mut q);
        self.sample_adjoint(&q)
    }

    /// `x^T B^T B x` without the transform, which is orthonormal.
    fn gram_apply(&self, x: &DynTensor) -> Result<DynTensor> {
        self.sample_adjoint(&self.sample(x)?)
    }

    /// `phi(z)` for a vector already in the range of `B`.
    pub fn phi(&self, z: &[f64]) -> Result<f64> {
        match &self.block {
            Block::Dct(_) => Ok(z.iter().map(|v| v.abs()).sum()),
            Block::Tnn(t) => {
                let tau = self.block_dims.frames as f64;
                let norms: Result<Vec<f64>> = z
                    .par_chunks(self.block_dims.len())
                    .map(|b| t.norm_block(b))
                    .collect();
                Ok(norms?.iter().sum::<f64>() / tau)
            }
        }
    }

    /// `phi(B x)`
    pub fn value(&self, x: &DynTensor) -> Result<f64> {
        self.phi(&self.forward(x)?)
    }

    /// In-place `prox_{threshold * phi}`.
    pub fn prox(&self, z: &mut [f64], threshold: f64) -> Result<()> {
        match &self.block {
            Block::Dct(_) => {
                if !(threshold >= 0.0) {
                    return Err(Error::NegativeThreshold(threshold));
                }
                z.par_iter_mut()
                    .for_each(|v| *v = soft_threshold(*v, threshold));
                Ok(())
            }
            Block::Tnn(t) => z
                .par_chunks_mut(self.block_dims.len())
                .try_for_each(|b| t.apply_block(b, threshold)),
        }
    }

    /// `c <- mu (I - prox_{phi / mu})(c / mu + B h)`
    pub fn dual_update(&self, c: &mut [f64], h: &DynTensor, mu: f64) -> Result<()> {
        let bh = self.forward(h)?;
        let mut z: Vec<f64> = c.iter().zip(&bh).map(|(&cv, &b)| cv / mu + b).collect();
        let mut s = z.clone();
        self.prox(&mut s, 1.0 / mu)?;
        for ((cv, zv), sv) in c.iter_mut().zip(z.iter_mut()).zip(&s) {
            *cv = mu * (*zv - sv);
        }
        Ok(())
    }

    /// `||c - mu (I - prox_{phi / mu})(c / mu + B f)|| / ||c||`, zero at a
    /// fixed point of the dual update.
    pub fn dual_residual(&self, c: &[f64], f: &DynTensor, mu: f64) -> Result<f64> {
        let mut next = c.to_vec();
        self.dual_update(&mut next, f, mu)?;
        let num: f64 = next
            .iter()
            .zip(c)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(if den > 0.0 { num / den } else { num })
    }
}

/// The full penalty: a sum of terms sharing one weight.
#[derive(Debug, Clone)]
pub struct Regularizer {
    terms: Vec<PenaltyTerm>,
    opnorm_sq: f64,
}

impl Regularizer {
    pub fn new(terms: Vec<PenaltyTerm>) -> Result<Self> {
        let opnorm_sq = stacked_opnorm_sq(&terms)?;
        Ok(Self { terms, opnorm_sq })
    }

    /// Builds the penalty for a solver: whole image, or patches plus an
    /// optional rotated patch term.
    pub fn for_algorithm(
        kind: PenaltyKind,
        image: Dims,
        patch: Option<PatchSettings>,
        rotation: bool,
    ) -> Result<Self> {
        let terms = match patch {
            None => vec![PenaltyTerm::whole(kind, image)],
            Some(s) => {
                let mut t = vec![PenaltyTerm::patched(kind, image, s, false)?];
                if rotation {
                    t.push(PenaltyTerm::patched(kind, image, s, true)?);
                }
                t
            }
        };
        Self::new(terms)
    }

    pub fn terms(&self) -> &[PenaltyTerm] {
        &self.terms
    }

    /// `||B||_2^2` of all terms stacked.
    pub fn opnorm_sq(&self) -> f64 {
        self.opnorm_sq
    }

    pub fn value(&self, x: &DynTensor) -> Result<f64> {
        self.terms.iter().map(|t| t.value(x)).sum()
    }
}

/// Largest eigenvalue of `sum_t B_t^T B_t`. Without rotation every term is a
/// pure voxel selection, whose Gram matrix is the diagonal coverage map; the
/// rotated case falls back to power iteration.
fn stacked_opnorm_sq(terms: &[PenaltyTerm]) -> Result<f64> {
    let Some(first) = terms.first() else {
        return Ok(0.0);
    };
    let image = first.image;
    if terms.iter().all(|t| t.rotation.is_none()) {
        let mut cov = vec![0.0; image.len()];
        for t in terms {
            match &t.patches {
                Some(q) => cov
                    .iter_mut()
                    .zip(q.coverage().as_slice())
                    .for_each(|(a, b)| *a += b),
                None => cov.iter_mut().for_each(|a| *a += 1.0),
            }
        }
        return Ok(cov.into_iter().fold(0.0, f64::max));
    }
    let mut x = DynTensor::filled(image, 1.0);
    let mut est = 0.0;
    for _ in 0..200 {
        let mut y = DynTensor::zeros(image);
        for t in terms {
            y.axpy(1.0, &t.gram_apply(&x)?);
        }
        let next = y.dot(&x) / x.dot(&x);
        let ny = y.dot(&y).sqrt();
        if ny == 0.0 {
            return Ok(0.0);
        }
        y.scale(1.0 / ny);
        x = y;
        if (next - est).abs() <= 1e-10 * next {
            est = next;
            break;
        }
        est = next;
    }
    Ok(est)
}
