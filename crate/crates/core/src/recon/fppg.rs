//! Fixed-point proximity gradient solvers.
//!
//! All four variants share one iteration:
//!
//! ```text
//! f+ = P+(f - beta S (grad F(f) + Lambda sum_t B_t^T c_t))
//! h  = 2 f+ - f
//! c_t = mu (I - prox_{phi_t / mu})(c_t / mu + B_t h)
//! ```
//!
//! and differ only in the penalty operators `B_t`: the 3D DCT of the whole
//! image, the identity (TNN), or patch extraction with an optional rotated
//! second term. For TNN the dual update is `c = mu (h' - s)` with
//! `h' = c / mu + (2 f+ - f)` and `s` the slice-wise thresholded `h'`.
//! `Lambda` holds the per-frame weights.

use std::time::Instant;

use super::penalty::{PenaltyKind, Regularizer};
use super::{
    compute_mu, epsilon, initial_image, precondition, scale_lambda, Algorithm, ReconConfig, Trace,
    TraceRow,
};
use crate::error::{Error, Result};
use crate::projector::{kl_objective, kl_value_and_gradient, Projector};
use crate::tensor::{norm2, DynTensor};

/// Iterations of small change needed for an early stop.
const QUIET_ITERATIONS: usize = 20;

/// Per-iteration variables of an FPPG run.
#[derive(Debug, Clone)]
pub struct IterState {
    pub f: DynTensor,
    /// One dual vector per penalty term; empty when `lambda_ref == 0`.
    pub c: Vec<Vec<f64>>,
    /// Extrapolated image `2 f+ - f` of the last iteration.
    pub h: DynTensor,
    pub mu: f64,
    pub lambda_frames: Vec<f64>,
    pub objective_trace: Vec<(usize, f64)>,
}

fn penalty_kind(a: Algorithm) -> Option<PenaltyKind> {
    match a {
        Algorithm::FppgDct | Algorithm::FppgDctPatch => Some(PenaltyKind::Dct),
        Algorithm::FppgTnn | Algorithm::FppgTnnPatch => Some(PenaltyKind::Tnn),
        Algorithm::Osem => None,
    }
}

fn build_regularizer(cfg: &ReconConfig, image: crate::tensor::Dims) -> Result<Option<Regularizer>> {
    if cfg.lambda_ref == 0.0 {
        return Ok(None);
    }
    let kind = penalty_kind(cfg.algorithm)
        .ok_or_else(|| Error::Config(format!("{} is not an FPPG algorithm", cfg.algorithm)))?;
    let patch = cfg.algorithm.uses_patches().then_some(cfg.patch);
    Regularizer::for_algorithm(kind, image, patch, cfg.rotation && patch.is_some()).map(Some)
}

fn weighted(f: &DynTensor, lambda_frames: &[f64], lambda_ref: f64) -> DynTensor {
    let mut w = f.clone();
    for (k, frame) in w.frames_mut().enumerate() {
        let s = lambda_frames[k] / lambda_ref;
        frame.iter_mut().for_each(|v| *v *= s);
    }
    w
}

/// `lambda_ref * sum_t phi_t(B_t W f)` with `W` the per-frame weights
/// relative to `lambda_ref`.
fn penalty_value(
    reg: &Regularizer,
    f: &DynTensor,
    lambda_frames: &[f64],
    lambda_ref: f64,
) -> Result<f64> {
    Ok(lambda_ref * reg.value(&weighted(f, lambda_frames, lambda_ref))?)
}

/// The monitored objective `F(f) + lambda_ref * Psi(W f)`.
pub fn objective(
    p: &Projector,
    f: &DynTensor,
    g: &DynTensor,
    gamma: &DynTensor,
    cfg: &ReconConfig,
) -> Result<f64> {
    let fid = kl_objective(p, f, g, gamma)?;
    match build_regularizer(cfg, f.dims())? {
        None => Ok(fid),
        Some(reg) => {
            let lf = scale_lambda(cfg.lambda_ref, &g.frame_sums())?;
            Ok(fid + penalty_value(&reg, f, &lf, cfg.lambda_ref)?)
        }
    }
}

/// A running FPPG reconstruction that can be stepped one iteration at a
/// time.
pub struct FppgSolver<'a> {
    p: &'a Projector,
    g: &'a DynTensor,
    gamma: &'a DynTensor,
    cfg: ReconConfig,
    sens: DynTensor,
    reg: Option<Regularizer>,
    state: IterState,
    iteration: usize,
    quiet: usize,
    start: Instant,
    trace: Trace,
}

impl<'a> FppgSolver<'a> {
    pub fn new(
        p: &'a Projector,
        g: &'a DynTensor,
        gamma: &'a DynTensor,
        cfg: &ReconConfig,
    ) -> Result<Self> {
        if !cfg.algorithm.is_fppg() {
            return Err(Error::Config(format!(
                "{} is not an FPPG algorithm",
                cfg.algorithm
            )));
        }
        let geo = p.geometry();
        cfg.validate(geo.n_angles)?;
        let frames = g.dims().frames;
        g.check_dims(geo.sino_dims(frames), "measured counts")?;
        gamma.check_dims(geo.sino_dims(frames), "additive counts")?;
        let image = geo.image_dims(frames);
        let reg = build_regularizer(cfg, image)?;
        let lambda_frames = if reg.is_some() {
            scale_lambda(cfg.lambda_ref, &g.frame_sums())?
        } else {
            vec![0.0; frames]
        };
        let c = reg
            .as_ref()
            .map(|r| r.terms().iter().map(|t| vec![0.0; t.dual_len()]).collect())
            .unwrap_or_default();
        let f = initial_image(image, g);
        let state = IterState {
            h: f.clone(),
            f,
            c,
            mu: 0.0,
            lambda_frames,
            objective_trace: Vec::new(),
        };
        Ok(Self {
            p,
            g,
            gamma,
            cfg: cfg.clone(),
            sens: p.sensitivity(frames)?,
            reg,
            state,
            iteration: 0,
            quiet: 0,
            start: Instant::now(),
            trace: Trace::default(),
        })
    }

    pub fn state(&self) -> &IterState {
        &self.state
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn regularizer(&self) -> Option<&Regularizer> {
        self.reg.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn sensitivity(&self) -> &DynTensor {
        &self.sens
    }

    /// True once the early-stop rule has fired.
    pub fn converged(&self) -> bool {
        self.cfg.early_stop.is_some() && self.quiet >= QUIET_ITERATIONS
    }

    /// Monitored penalty `lambda_ref * Psi(W f)` of an image.
    pub fn penalty(&self, f: &DynTensor) -> Result<f64> {
        match &self.reg {
            None => Ok(0.0),
            Some(reg) => penalty_value(reg, f, &self.state.lambda_frames, self.cfg.lambda_ref),
        }
    }

    /// Relative dual fixed-point residual of every term at the current
    /// `(f, c, mu)`.
    pub fn dual_residuals(&self) -> Result<Vec<f64>> {
        let Some(reg) = &self.reg else {
            return Ok(Vec::new());
        };
        reg.terms()
            .iter()
            .zip(&self.state.c)
            .map(|(t, c)| t.dual_residual(c, &self.state.f, self.state.mu))
            .collect()
    }

    /// One iteration; returns its trace row.
    pub fn step(&mut self) -> Result<&TraceRow> {
        let it = self.iteration + 1;
        let cfg = &self.cfg;
        let f_old = &self.state.f;
        let (fidelity, mut grad) = kl_value_and_gradient(self.p, f_old, self.g, self.gamma)?;
        let s = precondition(f_old, &self.sens, epsilon(f_old, cfg.eps_fraction))?;

        if let Some(reg) = &self.reg {
            self.state.mu = if cfg.freeze_mu && self.iteration > 0 {
                self.state.mu
            } else {
                compute_mu(cfg.lambda_ref, &s, reg.opnorm_sq().sqrt())?
            };
            let mut pen = DynTensor::zeros(f_old.dims());
            for (t, c) in reg.terms().iter().zip(&self.state.c) {
                pen.axpy(1.0, &t.adjoint(c)?);
            }
            for (k, (gk, pk)) in grad.frames_mut().zip(pen.frames()).enumerate() {
                let l = self.state.lambda_frames[k];
                gk.iter_mut().zip(pk).for_each(|(a, b)| *a += l * b);
            }
        }

        let beta = cfg.beta;
        let mut f_new = f_old.clone();
        let mut finite = true;
        for ((v, &sv), &gv) in f_new
            .as_mut_slice()
            .iter_mut()
            .zip(s.as_slice())
            .zip(grad.as_slice())
        {
            let u = *v - beta * sv * gv;
            finite &= u.is_finite();
            *v = u.max(0.0);
        }
        if !finite {
            return Err(Error::NonFinite {
                iteration: it,
                what: "image",
            });
        }
        let h = f_new.zip_map(f_old, |a, b| 2.0 * a - b);
        if let Some(reg) = &self.reg {
            for (t, c) in reg.terms().iter().zip(self.state.c.iter_mut()) {
                t.dual_update(c, &h, self.state.mu)?;
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        iteration: it,
                        what: "dual",
                    });
                }
            }
        }

        let diff: Vec<f64> = f_new
            .as_slice()
            .iter()
            .zip(f_old.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        let base = norm2(f_old.as_slice());
        let rel_change = if base > 0.0 {
            norm2(&diff) / base
        } else {
            norm2(&diff)
        };

        let monitor = cfg.monitor_every > 0
            && (it % cfg.monitor_every == 0 || it == 1 || it == cfg.iterations);
        let (penalty, objective) = if monitor {
            let pen = self.penalty(f_old)?;
            (Some(pen), Some(fidelity + pen))
        } else {
            (None, None)
        };
        if let Some(o) = objective {
            self.state.objective_trace.push((it - 1, o));
        }

        self.state.f = f_new;
        self.state.h = h;
        self.iteration = it;
        if cfg.early_stop.is_some_and(|tol| rel_change < tol) {
            self.quiet += 1;
        } else {
            self.quiet = 0;
        }
        let dual_residual = if monitor && self.reg.is_some() {
            Some(self.dual_residuals()?.into_iter().fold(0.0, f64::max))
        } else {
            None
        };
        self.trace.rows.push(TraceRow {
            iteration: it,
            fidelity,
            penalty,
            objective,
            rel_change,
            dual_residual,
            mu: self.state.mu,
            wall_s: self.start.elapsed().as_secs_f64(),
        });
        Ok(self.trace.rows.last().expect("row just pushed"))
    }

    /// Runs the remaining iteration budget (or until the early stop).
    pub fn run(mut self) -> Result<(DynTensor, Trace)> {
        while self.iteration < self.cfg.iterations && !self.converged() {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> (DynTensor, Trace) {
        (self.state.f, self.trace)
    }
}

fn run_checked(
    p: &Projector,
    g: &DynTensor,
    gamma: &DynTensor,
    cfg: &ReconConfig,
    expected: Algorithm,
) -> Result<(DynTensor, Trace)> {
    if cfg.algorithm != expected {
        return Err(Error::Config(format!(
            "{expected} called with algorithm {}",
            cfg.algorithm
        )));
    }
    FppgSolver::new(p, g, gamma, cfg)?.run()
}

/// Any of the four FPPG variants, chosen by `cfg.algorithm`.
pub fn fppg(
    p: &Projector,
    g: &DynTensor,
    gamma: &DynTensor,
    cfg: &ReconConfig,
) -> Result<(DynTensor, Trace)> {
    FppgSolver::new(p, g, gamma, cfg)?.run()
}

/// FPPG with the whole-image 3D DCT sparsity penalty.
pub fn fppg_dct(
    p: &Projector,
    g: &DynTensor,
    gamma: &DynTensor,
    cfg: &ReconConfig,
) -> Result<(DynTensor, Trace)> {
    run_checked(p, g, gamma, cfg, Algorithm::FppgDct)
}

/// FPPG with the tensor nuclear-norm penalty.
pub fn fppg_tnn(
    p: &Projector,
    g: &DynTensor,
    gamma: &DynTensor,
    cfg: &ReconConfig,
) -> Result<(DynTensor, Trace)> {
    run_checked(p, g, gamma, cfg, Algorithm::FppgTnn)
}

/// FPPG with per-patch 3D DCT penalties.
pub fn fppg_dct_patch(
    p: &Projector,
    g: &DynTensor,
    gamma: &DynTensor,
    cfg: &ReconConfig,
) -> Result<(DynTensor, Trace)> {
    run_checked(p, g, gamma, cfg, Algorithm::FppgDctPatch)
}

/// FPPG with per-patch tensor nuclear-norm penalties.
pub fn fppg_tnn_patch(
    p: &Projector,
    g: &DynTensor,
    gamma: &DynTensor,
    cfg: &ReconConfig,
) -> Result<(DynTensor, Trace)> {
    run_checked(p, g, gamma, cfg, Algorithm::FppgTnnPatch)
}
