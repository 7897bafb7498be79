//! Reconstruction: the OSEM baseline and the fixed-point proximity gradient
//! solvers with DCT and tensor nuclear-norm penalties.

mod fppg;
pub(crate) mod osem;
mod penalty;

pub use fppg::{
    fppg, fppg_dct, fppg_dct_patch, fppg_tnn, fppg_tnn_patch, objective, FppgSolver, IterState,
};
pub use osem::{
    gated_bin, gated_rebin, gaussian_postfilter, mlem_osem, mlem_osem_iterates, subset_angles,
};
pub use penalty::{PenaltyKind, PenaltyTerm, Regularizer};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::regularizers::PatchSettings;
use crate::tensor::{Dims, DynTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Osem,
    FppgDct,
    FppgTnn,
    FppgDctPatch,
    FppgTnnPatch,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Self::Osem,
        Self::FppgDct,
        Self::FppgTnn,
        Self::FppgDctPatch,
        Self::FppgTnnPatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Osem => "osem",
            Self::FppgDct => "fppg_dct",
            Self::FppgTnn => "fppg_tnn",
            Self::FppgDctPatch => "fppg_dct_patch",
            Self::FppgTnnPatch => "fppg_tnn_patch",
        }
    }

    pub fn is_fppg(self) -> bool {
        self != Self::Osem
    }

    pub fn uses_patches(self) -> bool {
        matches!(self, Self::FppgDctPatch | Self::FppgTnnPatch)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|a| a.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown algorithm '{s}'")))
    }
}

/// Solver hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub algorithm: Algorithm,
    pub lambda_ref: f64,
    /// Gradient step size.
    pub beta: f64,
    pub iterations: usize,
    /// Angle subsets, OSEM only.
    pub subsets: usize,
    pub patch: PatchSettings,
    /// Adds a second patch penalty on the image rotated by 45 degrees.
    pub rotation: bool,
    /// `epsilon = eps_fraction * median(f)` in the preconditioner.
    pub eps_fraction: f64,
    /// Post-filter width in mm, OSEM only.
    pub postfilter_fwhm: f64,
    pub rng_seed: u64,
    /// Keep the first iteration's `mu` instead of recomputing it.
    pub freeze_mu: bool,
    /// Stop once the relative image change stays below this for 20
    /// consecutive iterations.
    pub early_stop: Option<f64>,
    /// Evaluate the penalty, objective and dual residuals every this many
    /// iterations (0 disables).
    pub monitor_every: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::FppgDct,
            lambda_ref: 0.0,
            beta: 1.0,
            iterations: 100,
            subsets: 1,
            patch: PatchSettings::new(Dims::new(8, 8, 4), Dims::new(4, 4, 2)),
            rotation: false,
            eps_fraction: 0.01,
            postfilter_fwhm: 0.0,
            rng_seed: 0,
            freeze_mu: false,
            early_stop: None,
            monitor_every: 1,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self, n_angles: usize) -> Result<()> {
        if !(self.lambda_ref >= 0.0) || !self.lambda_ref.is_finite() {
            return Err(Error::Config(format!(
                "lambda_ref must be >= 0, got {}",
                self.lambda_ref
            )));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.subsets == 0 || n_angles % self.subsets != 0 {
            return Err(Error::Config(format!(
                "{} subsets do not divide {n_angles} angles",
                self.subsets
            )));
        }
        if !(self.eps_fraction > 0.0) {
            return Err(Error::Config(format!(
                "eps_fraction must be > 0, got {}",
                self.eps_fraction
            )));
        }
        if !(self.postfilter_fwhm >= 0.0) {
            return Err(Error::Config(format!(
                "postfilter_fwhm must be >= 0, got {}",
                self.postfilter_fwhm
            )));
        }
        Ok(())
    }
}

/// One row of the per-iteration trace. Monitored quantities are `None` on
/// iterations where they were not evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// KL fidelity at the iterate entering this iteration.
    pub fidelity: f64,
    pub penalty: Option<f64>,
    pub objective: Option<f64>,
    /// `||f_new - f_old|| / ||f_old||`
    pub rel_change: f64,
    /// Largest relative dual fixed-point residual over the penalty terms.
    pub dual_residual: Option<f64>,
    pub mu: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// `(iteration, objective)` for the monitored iterations.
    pub fn objectives(&self) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.objective.map(|o| (r.iteration, o)))
            .collect()
    }
}

/// The EM preconditioner `max(f, eps) / sens`, or `max(f, eps)` where the
/// sensitivity is not positive.
pub fn precondition(f: &DynTensor, sensitivity: &DynTensor, eps: f64) -> Result<DynTensor> {
    if !(eps > 0.0) {
        return Err(Error::NonpositiveEpsilon(eps));
    }
    sensitivity.check_dims(f.dims(), "sensitivity")?;
    Ok(f.zip_map(sensitivity, |v, s| {
        let v = v.max(eps);
        if s > 0.0 {
            v / s
        } else {
            v
        }
    }))
}

/// `epsilon` from a fraction of the median of `f`, falling back to a tiny
/// multiple of the maximum (or an absolute floor) when the median is zero.
pub fn epsilon(f: &DynTensor, fraction: f64) -> f64 {
    let mut v = f.as_slice().to_vec();
    let mid = v.len() / 2;
    let (_, median, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let eps = fraction * *median;
    if eps > 0.0 {
        return eps;
    }
    let max = f.max();
    if max > 0.0 {
        1e-9 * max
    } else {
        1e-9
    }
}

/// Dual step `mu = 1 / (2 lambda ||B||^2 max(S))`.
pub fn compute_mu(lambda_ref: f64, s: &DynTensor, opnorm: f64) -> Result<f64> {
    if !(lambda_ref > 0.0) {
        return Err(Error::ZeroLambda);
    }
    Ok(1.0 / (2.0 * lambda_ref * opnorm * opnorm * s.max()))
}

/// Per-frame weights `lambda_ref * sqrt(mean(c) / c_i)`.
pub fn scale_lambda(lambda_ref: f64, frame_counts: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = frame_counts.iter().position(|&c| !(c > 0.0)) {
        return Err(Error::ZeroFrameCounts(i));
    }
    let mean = frame_counts.iter().sum::<f64>() / frame_counts.len() as f64;
    Ok(frame_counts
        .iter()
        .map(|&c| lambda_ref * (mean / c).sqrt())
        .collect())
}

/// Uniform start: total counts over voxels times frames.
pub fn initial_image(dims: Dims, g: &DynTensor) -> DynTensor {
    let v = g.sum() / (dims.frame_len() * dims.frames) as f64;
    DynTensor::filled(dims, if v > 0.0 { v } else { 1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precondition_cases() {
        let d = Dims::new(2, 2, 1);
        let s = precondition(&DynTensor::zeros(d), &DynTensor::filled(d, 1.0), 0.01).unwrap();
        assert!(s.as_slice().iter().all(|&v| v == 0.01));

        let s = precondition(&DynTensor::filled(d, 2.0), &DynTensor::filled(d, 4.0), 0.01).unwrap();
        assert!(s.as_slice().iter().all(|&v| v == 0.5));

        let sens = DynTensor::from_vec(d, vec![4.0, 0.0, -1.0, 2.0]).unwrap();
        let f = DynTensor::from_vec(d, vec![2.0, 3.0, 0.001, 1.0]).unwrap();
        let s = precondition(&f, &sens, 0.01).unwrap();
        assert_eq!(s.as_slice(), &[0.5, 3.0, 0.01, 0.5]);

        assert!(matches!(
            precondition(&f, &sens, 0.0),
            Err(Error::NonpositiveEpsilon(_))
        ));
    }

    #[test]
    fn mu_closed_forms() {
        let d = Dims::new(2, 1, 1);
        assert_eq!(
            compute_mu(1.0, &DynTensor::filled(d, 1.0), 1.0).unwrap(),
            0.5
        );
        let s = DynTensor::from_vec(d, vec![0.25, 0.1]).unwrap();
        assert_eq!(compute_mu(2.0, &s, 1.0).unwrap(), 1.0);
        assert!(matches!(compute_mu(0.0, &s, 1.0), Err(Error::ZeroLambda)));
    }

    #[test]
    fn lambda_scaling() {
        assert_eq!(scale_lambda(0.7, &[5.0, 5.0, 5.0]).unwrap(), vec![0.7; 3]);
        let l = scale_lambda(1.0, &[100.0, 400.0]).unwrap();
        assert!((l[0] - 2.5f64.sqrt()).abs() < 1e-15);
        assert!((l[1] - 0.625f64.sqrt()).abs() < 1e-15);
        let a = scale_lambda(1.0, &[10.0, 20.0, 30.0]).unwrap();
        let b = scale_lambda(1.0, &[10.0, 80.0, 30.0]).unwrap();
        // only the quadrupled frame's weight relative to the others matters
        assert!(((a[1] / a[0]) / (b[1] / b[0]) - 2.0).abs() < 1e-12);
        assert!(matches!(
            scale_lambda(1.0, &[1.0, 0.0]),
            Err(Error::ZeroFrameCounts(1))
        ));
    }

    #[test]
    fn epsilon_guards() {
        let d = Dims::new(3, 1, 1);
        let f = DynTensor::from_vec(d, vec![1.0, 5.0, 3.0]).unwrap();
        assert_eq!(epsilon(&f, 0.01), 0.03);
        let f = DynTensor::from_vec(d, vec![0.0, 0.0, 2.0]).unwrap();
        assert_eq!(epsilon(&f, 0.01), 2e-9);
        assert_eq!(epsilon(&DynTensor::zeros(d), 0.01), 1e-9);
    }

    #[test]
    fn algorithm_names_roundtrip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert_eq!(
            "FPPG-TNN-PATCH".parse::<Algorithm>().unwrap(),
            Algorithm::FppgTnnPatch
        );
        assert!("mlem".parse::<Algorithm>().is_err());
    }
}
