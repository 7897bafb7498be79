//! Two-tissue compartment model, its frame-averaged time-activity curves,
//! and weighted nonlinear least-squares fitting.
//!
//! Times inside the model are in minutes and rate constants in 1/min; frame
//! schedules are given in seconds.

use nalgebra::{DMatrix, Matrix5, Vector5};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Dims, DynTensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KineticParams {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub va: f64,
}

impl KineticParams {
    pub const NAMES: [&'static str; 5] = ["K1", "k2", "k3", "k4", "Va"];

    pub fn new(k1: f64, k2: f64, k3: f64, k4: f64, va: f64) -> Self {
        Self { k1, k2, k3, k4, va }
    }

    pub fn uniform(v: f64) -> Self {
        Self::new(v, v, v, v, v)
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.k1, self.k2, self.k3, self.k4, self.va]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn ki(&self) -> f64 {
        ki(self)
    }
}

/// Net influx rate `K1 k3 / (k2 + k3)`, zero when `k2 + k3 == 0`.
pub fn ki(p: &KineticParams) -> f64 {
    let d = p.k2 + p.k3;
    if d > 0.0 {
        p.k1 * p.k3 / d
    } else {
        0.0
    }
}

/// Frame start times and durations in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSchedule {
    starts: Vec<f64>,
    durations: Vec<f64>,
}

impl FrameSchedule {
    /// Contiguous frames starting at time 0.
    pub fn from_durations(durations: &[f64]) -> Result<Self> {
        if durations.is_empty() {
            return Err(Error::BadSchedule("no frames".into()));
        }
        if let Some(d) = durations.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
            return Err(Error::BadSchedule(format!(
                "frame duration {d} is not positive"
            )));
        }
        let mut starts = Vec::with_capacity(durations.len());
        let mut t = 0.0;
        for d in durations {
            starts.push(t);
            t += d;
        }
        Ok(Self {
            starts,
            durations: durations.to_vec(),
        })
    }

    /// `(count, seconds)` runs, e.g. `[(6, 5.0), (3, 10.0)]`.
    pub fn from_runs(runs: &[(usize, f64)]) -> Result<Self> {
        let d: Vec<f64> = runs
            .iter()
            .flat_map(|&(n, s)| std::iter::repeat(s).take(n))
            .collect();
        Self::from_durations(&d)
    }

    pub fn uniform(frames: usize, seconds: f64) -> Result<Self> {
        Self::from_durations(&vec![seconds; frames])
    }

    /// The 28-frame, one-hour brain protocol.
    pub fn brain() -> Self {
        Self::from_runs(&[
            (6, 5.0),
            (3, 10.0),
            (3, 20.0),
            (2, 30.0),
            (2, 60.0),
            (2, 150.0),
            (10, 300.0),
        ])
        .expect("valid schedule")
    }

    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.durations.is_empty()
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn total(&self) -> f64 {
        self.durations.iter().sum()
    }

    pub fn mid_times(&self) -> Vec<f64> {
        self.starts
            .iter()
            .zip(&self.durations)
            .map(|(s, d)| s + d / 2.0)
            .collect()
    }
}

/// One term `(p + q u) exp(lambda u)` of the arterial input, `u` in
/// minutes after injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputTerm {
    pub p: f64,
    pub q: f64,
    pub lambda: f64,
}

/// Analytic multi-exponential arterial input, zero before `delay_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputFunction {
    pub terms: Vec<InputTerm>,
    pub delay_min: f64,
}

impl InputFunction {
    /// Feng-style input `(A1 u - A2 - A3) e^{l1 u} + A2 e^{l2 u} + A3 e^{l3 u}`.
    pub fn feng(a: [f64; 3], l: [f64; 3], delay_min: f64) -> Self {
        Self {
            terms: vec![
                InputTerm {
                    p: -a[1] - a[2],
                    q: a[0],
                    lambda: l[0],
                },
                InputTerm {
                    p: a[1],
                    q: 0.0,
                    lambda: l[1],
                },
                InputTerm {
                    p: a[2],
                    q: 0.0,
                    lambda: l[2],
                },
            ],
            delay_min,
        }
    }

    /// Published FDG-type parameters, in kBq/ml.
    pub fn feng_default() -> Self {
        Self::feng(
            [851.1225, 21.8798, 20.8113],
            [-4.133859, -0.01043449, -0.1190996],
            0.0,
        )
    }

    /// Activity at `t` minutes.
    pub fn eval(&self, t: f64) -> f64 {
        let u = t - self.delay_min;
        if u <= 0.0 {
            return 0.0;
        }
        self.terms
            .iter()
            .map(|c| (c.p + c.q * u) * (c.lambda * u).exp())
            .sum::<f64>()
            .max(0.0)
    }

    /// Samples at times in seconds.
    pub fn sample(&self, times_s: &[f64]) -> Vec<f64> {
        times_s.iter().map(|t| self.eval(t / 60.0)).collect()
    }

    /// `int_0^t C_a(u) e^{-b (t - u)} du` and its derivative in `b`.
    fn convolve(&self, b: f64, t: f64) -> (f64, f64) {
        let u = t - self.delay_min;
        if u <= 0.0 {
            return (0.0, 0.0);
        }
        let (mut v, mut d) = (0.0, 0.0);
        for c in &self.terms {
            let j = exp_moments(b, c.lambda, u);
            v += c.p * j[0] + c.q * j[1];
            d += c.p * (j[1] - u * j[0]) + c.q * (j[2] - u * j[1]);
        }
        (v, d)
    }
}

/// `J_n = int_0^t u^n e^{lambda u} e^{-b (t - u)} du` for `n = 0, 1, 2`.
fn exp_moments(b: f64, lambda: f64, t: f64) -> [f64; 3] {
    let c = lambda + b;
    if (c * t).abs() < 2.0 {
        // J_n = e^{-bt} sum_m c^m t^{n+m+1} / (m! (n+m+1))
        let eb = (-b * t).exp();
        let mut out = [0.0; 3];
        for (n, o) in out.iter_mut().enumerate() {
            let mut term = t.powi(n as i32 + 1); // c^m t^{n+m+1} / m!
            let mut sum = 0.0;
            for m in 0..60 {
                let add = term / (n + m + 1) as f64;
                sum += add;
                if add.abs() <= 1e-17 * sum.abs() {
                    break;
                }
                term *= c * t / (m + 1) as f64;
            }
            *o = eb * sum;
        }
        out
    } else {
        let el = (lambda * t).exp();
        let j0 = (el - (-b * t).exp()) / c;
        let j1 = (t * el - j0) / c;
        let j2 = (t * t * el - 2.0 * j1) / c;
        [j0, j1, j2]
    }
}

/// How the blood volume fraction enters the measured signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BloodVolume {
    /// `(1 - Va) C_T + Va C_a`
    #[default]
    Fractional,
    /// `C_T + Va C_a`
    Additive,
}

const GAUSS_POINTS: usize = 16;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Frame-averaged two-tissue model for one input and schedule, with the
/// quadrature precomputed.
#[derive(Debug, Clone)]
pub struct TacModel {
    input: InputFunction,
    blood: BloodVolume,
    /// Per frame: `(time in minutes, weight)` with weights summing to one.
    nodes: Vec<Vec<(f64, f64)>>,
    /// Frame-averaged input.
    input_avg: Vec<f64>,
}

impl TacModel {
    pub fn new(input: &InputFunction, schedule: &FrameSchedule, blood: BloodVolume) -> Self {
        let gl = gauss_legendre(GAUSS_POINTS);
        let nodes: Vec<Vec<(f64, f64)>> = schedule
            .starts()
            .iter()
            .zip(schedule.durations())
            .map(|(&s, &d)| {
                let (a, b) = (s / 60.0, (s + d) / 60.0);
                // split at the injection so the kink is a segment edge
                let mut cuts = vec![a];
                if input.delay_min > a && input.delay_min < b {
                    cuts.push(input.delay_min);
                }
                cuts.push(b);
                let mut pts = Vec::new();
                for w in cuts.windows(2) {
                    let (lo, hi) = (w[0], w[1]);
                    let half = (hi - lo) / 2.0;
                    for &(x, wt) in &gl {
                        pts.push((lo + half * (x + 1.0), wt * half / (b - a)));
                    }
                }
                pts
            })
            .collect();
        let input_avg = nodes
            .iter()
            .map(|n| n.iter().map(|&(t, w)| w * input.eval(t)).sum())
            .collect();
        Self {
            input: input.clone(),
            blood,
            nodes,
            input_avg,
        }
    }

    pub fn frames(&self) -> usize {
        self.nodes.len()
    }

    /// Frame-averaged input function.
    pub fn input_averages(&self) -> &[f64] {
        &self.input_avg
    }

    fn blood_weight(&self, va: f64) -> (f64, f64) {
        match self.blood {
            BloodVolume::Fractional => (1.0 - va, -1.0),
            BloodVolume::Additive => (1.0, 0.0),
        }
    }

    pub fn eval(&self, p: &KineticParams) -> Vec<f64> {
        self.eval_impl(p, None)
    }

    /// Frame values and the `frames x 5` Jacobian in parameter order
    /// `(K1, k2, k3, k4, Va)`.
    pub fn eval_with_jacobian(&self, p: &KineticParams) -> (Vec<f64>, DMatrix<f64>) {
        let mut jac = DMatrix::zeros(self.frames(), 5);
        let v = self.eval_impl(p, Some(&mut jac));
        (v, jac)
    }

    fn eval_impl(&self, p: &KineticParams, mut jac: Option<&mut DMatrix<f64>>) -> Vec<f64> {
        let s = p.k2 + p.k3 + p.k4;
        let delta = (s * s - 4.0 * p.k2 * p.k4).max(0.0);
        let r = delta.sqrt().max(1e-7);
        let alpha = [(s - r) / 2.0, (s + r) / 2.0];
        let a1 = (p.k3 + p.k4 - alpha[0]) / r;
        let a = [a1, 1.0 - a1];

        // derivatives of r, alpha, a with respect to (k2, k3, k4)
        let d_delta = [2.0 * s - 4.0 * p.k4, 2.0 * s, 2.0 * s - 4.0 * p.k2];
        let d_r = d_delta.map(|d| d / (2.0 * r));
        let d_alpha = [d_r.map(|x| (1.0 - x) / 2.0), d_r.map(|x| (1.0 + x) / 2.0)];
        let d_num = [0.0, 1.0, 1.0]; // d(k3 + k4)
        let d_a1: [f64; 3] = std::array::from_fn(|x| {
            (d_num[x] - d_alpha[0][x]) / r - (p.k3 + p.k4 - alpha[0]) * d_r[x] / (r * r)
        });
        let d_a = [d_a1, d_a1.map(|x| -x)];

        let (bw, dbw) = self.blood_weight(p.va);
        let mut out = Vec::with_capacity(self.frames());
        for (f, nodes) in self.nodes.iter().enumerate() {
            let mut e = [0.0; 2];
            let mut de = [0.0; 2];
            for &(t, w) in nodes {
                for i in 0..2 {
                    let (v, d) = self.input.convolve(alpha[i], t);
                    e[i] += w * v;
                    de[i] += w * d;
                }
            }
            let ct = p.k1 * (a[0] * e[0] + a[1] * e[1]);
            let ca = self.input_avg[f];
            out.push(bw * ct + p.va * ca);
            if let Some(j) = jac.as_deref_mut() {
                j[(f, 0)] = bw * (a[0] * e[0] + a[1] * e[1]);
                for x in 0..3 {
                    let d: f64 = (0..2)
                        .map(|i| d_a[i][x] * e[i] + a[i] * de[i] * d_alpha[i][x])
                        .sum();
                    j[(f, 1 + x)] = bw * p.k1 * d;
                }
                j[(f, 4)] = dbw * ct + ca;
            }
        }
        out
    }
}

/// Frame-averaged two-tissue TAC with the fractional blood convention.
pub fn two_tissue_tac(
    p: &KineticParams,
    input: &InputFunction,
    schedule: &FrameSchedule,
) -> Vec<f64> {
    TacModel::new(input, schedule, BloodVolume::Fractional).eval(p)
}

/// Fit settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Upper bound for the rate constants; `Va` is also capped at 1.
    pub upper: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub initial_damping: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            upper: 5.0,
            max_iterations: 200,
            tolerance: 1e-8,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub params: KineticParams,
    /// Weighted sum of squared residuals.
    pub residual: f64,
    pub iterations: usize,
    /// False when the iteration budget ran out first; `params` is then the
    /// best point found.
    pub converged: bool,
}

/// Weights `duration / max(tac, floor)` with the floor at 1% of the peak.
pub fn default_weights(tac: &[f64], schedule: &FrameSchedule) -> Vec<f64> {
    let peak = tac.iter().copied().fold(0.0, f64::max);
    let floor = if peak > 0.0 { 0.01 * peak } else { 1.0 };
    tac.iter()
        .zip(schedule.durations())
        .map(|(&v, &d)| d / v.max(floor))
        .collect()
}

/// Box-constrained Levenberg-Marquardt fit of the two-tissue model.
///
/// When `K1` ends at zero the rate constants are unidentifiable and are
/// reported as zero.
pub fn wnls_fit(
    model: &TacModel,
    tac: &[f64],
    weights: &[f64],
    init: &KineticParams,
    opts: &FitOptions,
) -> Result<FitResult> {
    let n = model.frames();
    if tac.len() != n || weights.len() != n {
        return Err(Error::DimMismatch(format!(
            "TAC has {} frames and {} weights, model has {n}",
            tac.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::BadWeights(
            "weights must be finite and nonnegative".into(),
        ));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::BadWeights("all weights are zero".into()));
    }
    let hi = Vector5::new(
        opts.upper,
        opts.upper,
        opts.upper,
        opts.upper,
        opts.upper.min(1.0),
    );
    let clamp = |x: Vector5<f64>| Vector5::from_fn(|i, _| x[i].clamp(0.0, hi[i]));
    let cost_of = |m: &[f64]| -> f64 {
        m.iter()
            .zip(tac)
            .zip(weights)
            .map(|((a, b), w)| w * (b - a).powi(2))
            .sum()
    };
    let to_params = |x: &Vector5<f64>| KineticParams::new(x[0], x[1], x[2], x[3], x[4]);

    let mut x = clamp(Vector5::from(init.to_array()));
    let (mut m, mut jac) = model.eval_with_jacobian(&to_params(&x));
    let mut cost = cost_of(&m);
    if !cost.is_finite() {
        return Err(Error::FitDiverged);
    }
    let mut damping = opts.initial_damping;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        if cost == 0.0 {
            converged = true;
            break;
        }
        let mut a = Matrix5::<f64>::zeros();
        let mut g = Vector5::<f64>::zeros();
        for f in 0..n {
            let r = tac[f] - m[f];
            for i in 0..5 {
                g[i] += weights[f] * jac[(f, i)] * r;
                for j in 0..5 {
                    a[(i, j)] += weights[f] * jac[(f, i)] * jac[(f, j)];
                }
            }
        }
        let diag_floor = 1e-12 * a.diagonal().max().max(1e-300);
        let mut accepted = false;
        while damping < 1e16 {
            let mut lhs = a;
            for i in 0..5 {
                lhs[(i, i)] += damping * a[(i, i)].max(diag_floor);
            }
            let Some(step) = lhs.lu().solve(&g) else {
                damping *= 10.0;
                continue;
            };
            let xn = clamp(x + step);
            let (mn, jn) = model.eval_with_jacobian(&to_params(&xn));
            let cn = cost_of(&mn);
            if cn.is_finite() && cn < cost {
                let dx = (xn - x).amax();
                let rel = (cost - cn) / cost;
                x = xn;
                m = mn;
                jac = jn;
                cost = cn;
                damping = (damping / 10.0).max(1e-12);
                accepted = true;
                if dx <= opts.tolerance * (1.0 + x.amax()) || rel < 1e-15 {
                    converged = true;
                }
                break;
            }
            damping *= 10.0;
        }
        if !accepted {
            // no descent direction left at machine precision
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !cost.is_finite() {
        return Err(Error::FitDiverged);
    }
    let mut params = to_params(&x);
    if params.k1 == 0.0 {
        params.k2 = 0.0;
        params.k3 = 0.0;
        params.k4 = 0.0;
    }
    Ok(FitResult {
        params,
        residual: cost,
        iterations,
        converged,
    })
}

/// Parameter maps from voxel-wise fits.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricMaps {
    pub k1: DynTensor,
    pub k2: DynTensor,
    pub k3: DynTensor,
    pub k4: DynTensor,
    pub va: DynTensor,
    pub ki: DynTensor,
    /// 1 where the fit failed or did not converge.
    pub failures: DynTensor,
}

impl ParametricMaps {
    pub fn named(&self) -> [(&'static str, &DynTensor); 6] {
        [
            ("K1", &self.k1),
            ("k2", &self.k2),
            ("k3", &self.k3),
            ("k4", &self.k4),
            ("Va", &self.va),
            ("Ki", &self.ki),
        ]
    }
}

/// Fits every masked voxel's TAC; unmasked voxels are zero.
pub fn parametric_images(
    dynamic: &DynTensor,
    input: &InputFunction,
    schedule: &FrameSchedule,
    mask: &[bool],
    opts: &FitOptions,
) -> Result<ParametricMaps> {
    parametric_images_with(dynamic, input, schedule, mask, opts, BloodVolume::Fractional)
}

/// [`parametric_images`] under a chosen blood-volume convention.
pub fn parametric_images_with(
    dynamic: &DynTensor,
    input: &InputFunction,
    schedule: &FrameSchedule,
    mask: &[bool],
    opts: &FitOptions,
    blood: BloodVolume,
) -> Result<ParametricMaps> {
    let d = dynamic.dims();
    if d.frames != schedule.len() {
        return Err(Error::DimMismatch(format!(
            "image has {} frames, schedule has {}",
            d.frames,
            schedule.len()
        )));
    }
    if mask.len() != d.frame_len() {
        return Err(Error::DimMismatch(format!(
            "mask has {} voxels, frame has {}",
            mask.len(),
            d.frame_len()
        )));
    }
    let model = TacModel::new(input, schedule, blood);
    let init = KineticParams::uniform(0.1);
    let fits: Vec<Option<(KineticParams, bool)>> = (0..d.frame_len())
        .into_par_iter()
        .map(|v| {
            if !mask[v] {
                return None;
            }
            let tac: Vec<f64> = (0..d.frames).map(|k| dynamic.frame(k)[v]).collect();
            let w = default_weights(&tac, schedule);
            Some(match wnls_fit(&model, &tac, &w, &init, opts) {
                Ok(r) => (r.params, r.converged),
                Err(_) => (KineticParams::uniform(0.0), false),
            })
        })
        .collect();
    let plane = Dims::new(d.rows, d.cols, 1);
    let map = |f: &dyn Fn(&KineticParams) -> f64| {
        DynTensor::from_vec(
            plane,
            fits.iter()
                .map(|r| r.as_ref().map_or(0.0, |(p, _)| f(p)))
                .collect(),
        )
        .expect("plane dims")
    };
    Ok(ParametricMaps {
        k1: map(&|p| p.k1),
        k2: map(&|p| p.k2),
        k3: map(&|p| p.k3),
        k4: map(&|p| p.k4),
        va: map(&|p| p.va),
        ki: map(&|p| ki(p)),
        failures: DynTensor::from_vec(
            plane,
            fits.iter()
                .map(|r| {
                    if matches!(r, Some((_, false))) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        )
        .expect("plane dims"),
    })
}
