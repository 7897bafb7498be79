//! Procedural dynamic phantoms and Poisson sinogram generation.
//!
//! Two phantoms are available. The cardiac/lung analogue has a contracting
//! left ventricle (LV) and a liver that moves with breathing, each on its
//! own period. The brain analogue is a static head whose regions follow
//! two-tissue kinetics. Coordinates are in mm with the origin at the image
//! centre, x to the right and y up.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kinetics::{two_tissue_tac, FrameSchedule, InputFunction, KineticParams};
use crate::projector::{Geometry, Projector};
use crate::recon::osem::gaussian_kernel;
use crate::tensor::{Dims, DynTensor};

/// Linear attenuation of water, 1/mm.
pub const MU_WATER: f64 = 0.0096;
/// Linear attenuation of inflated lung, 1/mm.
pub const MU_LUNG: f64 = 0.0029;

/// Cardiac/lung region labels.
pub mod cardiac_labels {
    pub const BACKGROUND: u8 = 0;
    pub const BODY: u8 = 1;
    pub const LUNG: u8 = 2;
    pub const MYOCARDIUM: u8 = 3;
    pub const LV_CAVITY: u8 = 4;
    pub const LIVER: u8 = 5;
    pub const NAMES: [&str; 6] = [
        "background",
        "body",
        "lung",
        "myocardium",
        "lv_cavity",
        "liver",
    ];
}

/// Brain region labels.
pub mod brain_labels {
    pub const BACKGROUND: u8 = 0;
    pub const SCALP: u8 = 1;
    pub const WHITE: u8 = 2;
    pub const GRAY: u8 = 3;
    pub const LESION_LARGE: u8 = 4;
    pub const LESION_MEDIUM: u8 = 5;
    pub const LESION_SMALL: u8 = 6;
    pub const NAMES: [&str; 7] = [
        "background",
        "scalp",
        "white",
        "gray",
        "lesion_large",
        "lesion_medium",
        "lesion_small",
    ];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CardiacActivity {
    pub body: f64,
    pub lung: f64,
    pub myocardium: f64,
    pub blood: f64,
    pub liver: f64,
}

impl Default for CardiacActivity {
    fn default() -> Self {
        Self {
            body: 1.0,
            lung: 0.3,
            myocardium: 4.0,
            blood: 0.8,
            liver: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CardiacSpec {
    pub side: usize,
    pub frames: usize,
    pub fov_mm: f64,
    pub frame_seconds: f64,
    pub cardiac_frames: usize,
    pub breathing_frames: usize,
    /// Mean cavity radius.
    pub lv_radius_mm: f64,
    /// Relative cavity area swing: area = mean * (1 + a sin).
    pub lv_area_amplitude: f64,
    /// Wall thickness at the mean cavity radius.
    pub myocardium_mm: f64,
    /// Vertical liver excursion.
    pub liver_shift_mm: f64,
    pub activity: CardiacActivity,
    /// Subsamples per pixel side for partial-volume values. The default of
    /// 1 renders crisp regions so the LV truth masks are exact level sets.
    pub supersample: usize,
}

impl Default for CardiacSpec {
    fn default() -> Self {
        Self {
            side: 64,
            frames: 60,
            fov_mm: 400.0,
            frame_seconds: 0.1,
            cardiac_frames: 10,
            breathing_frames: 30,
            lv_radius_mm: 22.0,
            lv_area_amplitude: 0.5,
            myocardium_mm: 12.0,
            liver_shift_mm: 12.0,
            activity: CardiacActivity::default(),
            supersample: 1,
        }
    }
}

impl CardiacSpec {
    /// Analytic cavity area in mm^2 at frame `k`.
    pub fn lv_area_mm2(&self, k: usize) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * k as f64 / self.cardiac_frames as f64;
        std::f64::consts::PI
            * self.lv_radius_mm.powi(2)
            * (1.0 + self.lv_area_amplitude * phase.sin())
    }

    pub fn lv_radius_at(&self, k: usize) -> f64 {
        (self.lv_area_mm2(k) / std::f64::consts::PI).sqrt()
    }

    /// Liver vertical offset at frame `k`.
    pub fn liver_offset_at(&self, k: usize) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * k as f64 / self.breathing_frames as f64;
        self.liver_shift_mm * phase.sin()
    }

    pub fn pixel_mm(&self) -> f64 {
        self.fov_mm / self.side as f64
    }

    /// LV centre in mm.
    pub fn lv_centre_mm(&self) -> (f64, f64) {
        HEART_CENTRE
    }

    /// Pixel `(row, col)` containing the LV centre.
    pub fn lv_seed(&self) -> (usize, usize) {
        let h = self.side as f64 / 2.0;
        let p = self.pixel_mm();
        (
            (h - HEART_CENTRE.1 / p).floor() as usize,
            (h + HEART_CENTRE.0 / p).floor() as usize,
        )
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadSpec(m.into()));
        if self.side == 0 || self.frames == 0 || self.supersample == 0 {
            return bad("image size, frame count and supersampling must be positive");
        }
        if !(self.frame_seconds > 0.0) || !(self.fov_mm > 0.0) {
            return bad("frame duration and field of view must be positive");
        }
        if self.cardiac_frames == 0 || self.breathing_frames == 0 {
            return bad("motion cycles must be at least one frame");
        }
        if self.frames % self.breathing_frames != 0
            || self.breathing_frames % self.cardiac_frames != 0
        {
            return bad(
                "frame count must hold whole breathing cycles, each holding whole cardiac cycles",
            );
        }
        if !(0.0..1.0).contains(&self.lv_area_amplitude) || !(self.lv_radius_mm > 0.0) {
            return bad("LV radius must be positive and its area amplitude in [0, 1)");
        }
        if !(self.myocardium_mm > 0.0) || !(self.liver_shift_mm >= 0.0) {
            return bad("wall thickness must be positive and liver shift nonnegative");
        }
        if self.fov_mm / 2.0 < THORAX_AXES.0 {
            return bad("field of view is smaller than the thorax");
        }
        Ok(())
    }

    fn label_at(&self, x: f64, y: f64, k: usize) -> u8 {
        use cardiac_labels::*;
        let (hx, hy) = HEART_CENTRE;
        let r2 = (x - hx).powi(2) + (y - hy).powi(2);
        let cav = self.lv_radius_at(k);
        let r0 = self.lv_radius_mm;
        let outer2 = cav * cav + (r0 + self.myocardium_mm).powi(2) - r0 * r0;
        let (lx, ly, lax, lay) = LIVER_SHAPE;
        if r2 <= cav * cav {
            LV_CAVITY
        } else if r2 <= outer2 {
            MYOCARDIUM
        } else if in_ellipse(x, y, lx, ly + self.liver_offset_at(k), lax, lay) {
            LIVER
        } else if in_ellipse(
            x,
            y,
            LUNG_OFFSET_X,
            LUNG_SHAPE.0,
            LUNG_SHAPE.1,
            LUNG_SHAPE.2,
        ) || in_ellipse(
            x,
            y,
            -LUNG_OFFSET_X,
            LUNG_SHAPE.0,
            LUNG_SHAPE.1,
            LUNG_SHAPE.2,
        ) {
            LUNG
        } else if in_ellipse(x, y, 0.0, 0.0, THORAX_AXES.0, THORAX_AXES.1) {
            BODY
        } else {
            BACKGROUND
        }
    }

    fn activity_of(&self, label: u8) -> f64 {
        use cardiac_labels::*;
        let a = &self.activity;
        match label {
            BODY => a.body,
            LUNG => a.lung,
            MYOCARDIUM => a.myocardium,
            LV_CAVITY => a.blood,
            LIVER => a.liver,
            _ => 0.0,
        }
    }

    /// Attenuation from the static anatomy: moving organs are water-like.
    fn mu_at(&self, x: f64, y: f64) -> f64 {
        if in_ellipse(
            x,
            y,
            LUNG_OFFSET_X,
            LUNG_SHAPE.0,
            LUNG_SHAPE.1,
            LUNG_SHAPE.2,
        ) || in_ellipse(
            x,
            y,
            -LUNG_OFFSET_X,
            LUNG_SHAPE.0,
            LUNG_SHAPE.1,
            LUNG_SHAPE.2,
        ) {
            MU_LUNG
        } else if in_ellipse(x, y, 0.0, 0.0, THORAX_AXES.0, THORAX_AXES.1) {
            MU_WATER
        } else {
            0.0
        }
    }
}

// thorax semi-axes; lungs (centre y, semi-x, semi-y) mirrored at +-LUNG_OFFSET_X;
// heart centre; liver (centre x, centre y, semi-x, semi-y)
const THORAX_AXES: (f64, f64) = (180.0, 150.0);
const LUNG_OFFSET_X: f64 = 100.0;
const LUNG_SHAPE: (f64, f64, f64) = (35.0, 45.0, 80.0);
const HEART_CENTRE: (f64, f64) = (-10.0, 10.0);
const LIVER_SHAPE: (f64, f64, f64, f64) = (30.0, -90.0, 55.0, 30.0);

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, ax: f64, ay: f64) -> bool {
    ((x - cx) / ax).powi(2) + ((y - cy) / ay).powi(2) <= 1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrainSpec {
    pub side: usize,
    pub fov_mm: f64,
    pub schedule: FrameSchedule,
    pub input: InputFunction,
    /// Kinetic parameters indexed by label (background entry ignored).
    pub kinetics: [KineticParams; 7],
    /// Large, medium and small lesion diameters.
    pub lesion_diameters_mm: [f64; 3],
    pub supersample: usize,
}

impl Default for BrainSpec {
    fn default() -> Self {
        let lesion = KineticParams::new(0.3, 0.5, 0.1, 0.05, 0.04);
        Self {
            side: 96,
            fov_mm: 256.0,
            schedule: FrameSchedule::brain(),
            input: InputFunction::feng_default(),
            kinetics: [
                KineticParams::uniform(0.0),
                KineticParams::new(0.05, 0.2, 0.02, 0.01, 0.02),
                KineticParams::new(0.03, 0.15, 0.02, 0.02, 0.03),
                KineticParams::new(0.06, 0.2, 0.03, 0.02, 0.05),
                lesion,
                lesion,
                lesion,
            ],
            lesion_diameters_mm: [24.0, 12.0, 6.0],
            supersample: 4,
        }
    }
}

// scalp outer, brain outer, white matter outer (semi-x, semi-y);
// deep gray nuclei centres (mirrored) and semi-axes; lesion centres
const SCALP_AXES: (f64, f64) = (95.0, 115.0);
const BRAIN_AXES: (f64, f64) = (85.0, 105.0);
const WHITE_AXES: (f64, f64) = (72.0, 92.0);
const NUCLEUS_SHAPE: (f64, f64, f64, f64) = (22.0, 5.0, 10.0, 16.0);
const LESION_CENTRES: [(f64, f64); 3] = [(-40.0, 40.0), (40.0, 45.0), (0.0, -50.0)];

impl BrainSpec {
    pub fn pixel_mm(&self) -> f64 {
        self.fov_mm / self.side as f64
    }

    /// Lesion centres in mm.
    pub fn lesion_centres(&self) -> [(f64, f64); 3] {
        LESION_CENTRES
    }

    fn validate(&self) -> Result<()> {
        if self.side == 0 || self.supersample == 0 {
            return Err(Error::BadSpec(
                "image size and supersampling must be positive".into(),
            ));
        }
        if self.fov_mm / 2.0 < SCALP_AXES.1 {
            return Err(Error::BadSpec(
                "field of view is smaller than the head".into(),
            ));
        }
        if self
            .lesion_diameters_mm
            .iter()
            .any(|d| !(*d > 0.0 && *d <= 30.0))
        {
            return Err(Error::BadSpec(
                "lesion diameters must lie in (0, 30] mm".into(),
            ));
        }
        let ok = self
            .kinetics
            .iter()
            .all(|p| p.to_array().iter().all(|v| v.is_finite() && *v >= 0.0));
        if !ok {
            return Err(Error::BadSpec(
                "kinetic parameters must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    fn label_at(&self, x: f64, y: f64) -> u8 {
        use brain_labels::*;
        for (l, (&(cx, cy), d)) in LESION_CENTRES
            .iter()
            .zip(self.lesion_diameters_mm)
            .enumerate()
        {
            if (x - cx).powi(2) + (y - cy).powi(2) <= (d / 2.0).powi(2) {
                return LESION_LARGE + l as u8;
            }
        }
        let (nx, ny, nax, nay) = NUCLEUS_SHAPE;
        if in_ellipse(x, y, nx, ny, nax, nay) || in_ellipse(x, y, -nx, ny, nax, nay) {
            GRAY
        } else if in_ellipse(x, y, 0.0, 0.0, WHITE_AXES.0, WHITE_AXES.1) {
            WHITE
        } else if in_ellipse(x, y, 0.0, 0.0, BRAIN_AXES.0, BRAIN_AXES.1) {
            GRAY
        } else if in_ellipse(x, y, 0.0, 0.0, SCALP_AXES.0, SCALP_AXES.1) {
            SCALP
        } else {
            BACKGROUND
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PhantomSpec {
    CardiacLung(CardiacSpec),
    Brain(BrainSpec),
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::CardiacLung(s) => s.validate(),
            Self::Brain(s) => s.validate(),
        }
    }

    pub fn schedule(&self) -> Result<FrameSchedule> {
        match self {
            Self::CardiacLung(s) => FrameSchedule::uniform(s.frames, s.frame_seconds),
            Self::Brain(s) => Ok(s.schedule.clone()),
        }
    }

    pub fn generate(&self) -> Result<Phantom> {
        match self {
            Self::CardiacLung(s) => gen_cardiac_lung(s),
            Self::Brain(s) => gen_brain(s),
        }
    }
}

/// A generated phantom with its ground truth annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    /// Activity concentration per frame.
    pub truth: DynTensor,
    /// Region label at each pixel centre, per frame.
    pub labels: DynTensor,
    pub region_names: Vec<&'static str>,
    /// Single-frame attenuation map in 1/mm.
    pub mu_map: DynTensor,
    pub schedule: FrameSchedule,
    pub pixel_mm: f64,
    /// Activity of each labelled region per frame.
    pub region_tacs: Vec<Vec<f64>>,
}

impl Phantom {
    pub fn region_mask(&self, label: u8, frame: usize) -> Vec<bool> {
        self.labels
            .frame(frame)
            .iter()
            .map(|&l| l == label as f64)
            .collect()
    }

    /// Per-frame LV cavity masks (empty for the brain phantom).
    pub fn lv_masks(&self) -> Vec<Vec<bool>> {
        if self.region_names.len() != cardiac_labels::NAMES.len() {
            return Vec::new();
        }
        (0..self.truth.dims().frames)
            .map(|k| self.region_mask(cardiac_labels::LV_CAVITY, k))
            .collect()
    }
}

/// Pixel centre `(i, j)` in mm (row 0 at the top).
pub fn pixel_centre(side: usize, pixel_mm: f64, i: usize, j: usize) -> (f64, f64) {
    let h = side as f64 / 2.0;
    (
        (j as f64 + 0.5 - h) * pixel_mm,
        (h - i as f64 - 0.5) * pixel_mm,
    )
}

/// Per-pixel average of `value(x, y)` over `s x s` subsamples.
fn supersampled(
    side: usize,
    pixel_mm: f64,
    s: usize,
    value: impl Fn(f64, f64) -> f64 + Sync,
) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    out.par_chunks_mut(side).enumerate().for_each(|(j, col)| {
        for (i, o) in col.iter_mut().enumerate() {
            let (cx, cy) = pixel_centre(side, pixel_mm, i, j);
            let mut acc = 0.0;
            for a in 0..s {
                for b in 0..s {
                    let dx = ((b as f64 + 0.5) / s as f64 - 0.5) * pixel_mm;
                    let dy = ((a as f64 + 0.5) / s as f64 - 0.5) * pixel_mm;
                    acc += value(cx + dx, cy - dy);
                }
            }
            *o = acc / (s * s) as f64;
        }
    });
    out
}

fn centre_labels(side: usize, pixel_mm: f64, label: impl Fn(f64, f64) -> u8) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    for j in 0..side {
        for i in 0..side {
            let (x, y) = pixel_centre(side, pixel_mm, i, j);
            out[j * side + i] = label(x, y) as f64;
        }
    }
    out
}

pub fn gen_cardiac_lung(spec: &CardiacSpec) -> Result<Phantom> {
    spec.validate()?;
    let (side, pix) = (spec.side, spec.pixel_mm());
    // motion is periodic in the breathing cycle; build one cycle and tile it
    let cycle = spec.breathing_frames;
    let frames_truth: Vec<Vec<f64>> = (0..cycle)
        .into_par_iter()
        .map(|k| {
            supersampled(side, pix, spec.supersample, |x, y| {
                spec.activity_of(spec.label_at(x, y, k))
            })
        })
        .collect();
    let frames_label: Vec<Vec<f64>> = (0..cycle)
        .map(|k| centre_labels(side, pix, |x, y| spec.label_at(x, y, k)))
        .collect();
    let dims = Dims::new(side, side, spec.frames);
    let tile = |src: &[Vec<f64>]| {
        let mut out = DynTensor::zeros(dims);
        for k in 0..spec.frames {
            out.frame_mut(k).copy_from_slice(&src[k % cycle]);
        }
        out
    };
    let mu = supersampled(side, pix, spec.supersample, |x, y| spec.mu_at(x, y));
    let region_tacs = (0..cardiac_labels::NAMES.len() as u8)
        .map(|l| vec![spec.activity_of(l); spec.frames])
        .collect();
    Ok(Phantom {
        truth: tile(&frames_truth),
        labels: tile(&frames_label),
        region_names: cardiac_labels::NAMES.to_vec(),
        mu_map: DynTensor::from_vec(Dims::new(side, side, 1), mu)?,
        schedule: FrameSchedule::uniform(spec.frames, spec.frame_seconds)?,
        pixel_mm: pix,
        region_tacs,
    })
}

pub fn gen_brain(spec: &BrainSpec) -> Result<Phantom> {
    spec.validate()?;
    let (side, pix) = (spec.side, spec.pixel_mm());
    let n_regions = brain_labels::NAMES.len();
    let tacs: Vec<Vec<f64>> = (0..n_regions)
        .map(|l| {
            if l == brain_labels::BACKGROUND as usize {
                vec![0.0; spec.schedule.len()]
            } else {
                two_tissue_tac(&spec.kinetics[l], &spec.input, &spec.schedule)
            }
        })
        .collect();
    // fractional region occupancy per pixel
    let occupancy: Vec<Vec<f64>> = (0..n_regions)
        .map(|l| {
            supersampled(side, pix, spec.supersample, |x, y| {
                (spec.label_at(x, y) == l as u8) as u8 as f64
            })
        })
        .collect();
    let dims = Dims::new(side, side, spec.schedule.len());
    let truth = DynTensor::from_fn(dims, |i, j, k| {
        let v = j * side + i;
        (1..n_regions).map(|l| occupancy[l][v] * tacs[l][k]).sum()
    });
    let label_frame = centre_labels(side, pix, |x, y| spec.label_at(x, y));
    let labels = DynTensor::from_fn(dims, |i, j, _| label_frame[j * side + i]);
    let mu = supersampled(side, pix, spec.supersample, |x, y| {
        if spec.label_at(x, y) == brain_labels::BACKGROUND {
            0.0
        } else {
            MU_WATER
        }
    });
    Ok(Phantom {
        truth,
        labels,
        region_names: brain_labels::NAMES.to_vec(),
        mu_map: DynTensor::from_vec(Dims::new(side, side, 1), mu)?,
        schedule: spec.schedule.clone(),
        pixel_mm: pix,
        region_tacs: tacs,
    })
}

/// Counting statistics for sinogram generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Mean expected total counts per frame, trues plus scatter plus randoms.
    pub mean_counts_per_frame: f64,
    pub scatter_fraction: f64,
    pub random_fraction: f64,
    pub rng_seed: u64,
}

impl NoiseSpec {
    pub fn cardiac(seed: u64) -> Self {
        Self {
            mean_counts_per_frame: 1.5e4,
            scatter_fraction: 0.40,
            random_fraction: 0.05,
            rng_seed: seed,
        }
    }

    pub fn brain(seed: u64) -> Self {
        Self {
            mean_counts_per_frame: 1.5e5,
            scatter_fraction: 0.29,
            random_fraction: 0.02,
            rng_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (s, r) = (self.scatter_fraction, self.random_fraction);
        if !(0.0..1.0).contains(&s) || !(0.0..1.0).contains(&r) || s + r >= 1.0 {
            return Err(Error::BadFractions {
                scatter: s,
                randoms: r,
            });
        }
        if !(self.mean_counts_per_frame > 0.0) || !self.mean_counts_per_frame.is_finite() {
            return Err(Error::BadSpec(
                "mean counts per frame must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Noisy data with the inputs a reconstruction needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SinogramStack {
    /// Poisson counts.
    pub g: DynTensor,
    /// Noiseless scatter plus randoms.
    pub gamma: DynTensor,
    /// Noiseless expected counts `s_k A f_k + gamma`.
    pub expected: DynTensor,
    /// Counts per unit activity for each frame: a reconstruction of `g`
    /// divided by this factor estimates the activity.
    pub frame_scale: Vec<f64>,
}

impl SinogramStack {
    /// Converts a reconstruction to activity units, frame by frame.
    pub fn to_activity(&self, recon: &DynTensor) -> DynTensor {
        let mut out = recon.clone();
        for (k, fr) in out.frames_mut().enumerate() {
            let s = self.frame_scale[k];
            fr.iter_mut()
                .for_each(|v| *v = if s > 0.0 { *v / s } else { 0.0 });
        }
        out
    }
}

/// Radial Gaussian blur of each projection with reflective edges.
pub fn smooth_radial(sino: &[f64], n_radial: usize, fwhm_bins: f64) -> Vec<f64> {
    let sigma = fwhm_bins / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
    let kernel = gaussian_kernel(sigma);
    let half = (kernel.len() / 2) as isize;
    let n = n_radial as isize;
    let reflect = |mut x: isize| loop {
        if x < 0 {
            x = -x - 1;
        } else if x >= n {
            x = 2 * n - x - 1;
        } else {
            return x as usize;
        }
    };
    let mut out = vec![0.0; sino.len()];
    for (src, dst) in sino.chunks(n_radial).zip(out.chunks_mut(n_radial)) {
        for (r, d) in dst.iter_mut().enumerate() {
            *d = kernel
                .iter()
                .enumerate()
                .map(|(t, w)| w * src[reflect(r as isize + t as isize - half)])
                .sum();
        }
    }
    out
}

/// Projector with attenuation factors computed from `mu_map` (1/mm).
pub fn attenuated_projector(geometry: Geometry, mu_map: &DynTensor) -> Result<Projector> {
    let p = Projector::new(geometry)?;
    let att = p.attenuation_factors(mu_map)?;
    p.with_attenuation(att)
}

/// Draws Poisson sinograms for `truth` acquired over frames of the given
/// durations (seconds).
///
/// Trues are `s * d_k * A f_k` with one global `s` chosen so the mean
/// expected frame total is `mean_counts_per_frame`. Each frame's scatter is
/// its trues blurred radially (FWHM a quarter of the radial extent) and
/// rescaled to the scatter fraction of that frame's total. Randoms are
/// uniform, proportional to frame duration, and make up the random fraction
/// of the mean total.
pub fn simulate_sinograms(
    truth: &DynTensor,
    proj: &Projector,
    durations: &[f64],
    noise: &NoiseSpec,
) -> Result<SinogramStack> {
    noise.validate()?;
    let frames = truth.dims().frames;
    if durations.len() != frames {
        return Err(Error::DimMismatch(format!(
            "{} durations for {frames} frames",
            durations.len()
        )));
    }
    if !truth.is_nonnegative() {
        return Err(Error::BadSpec("truth must be nonnegative".into()));
    }
    let geo = proj.geometry();
    let nb = geo.n_bins();
    let mut trues = proj.forward(truth)?;
    for (k, fr) in trues.frames_mut().enumerate() {
        fr.iter_mut().for_each(|v| *v *= durations[k]);
    }
    let (sf, rf, n) = (
        noise.scatter_fraction,
        noise.random_fraction,
        noise.mean_counts_per_frame,
    );
    let mean_trues = trues.sum() / frames as f64;
    let scale = if mean_trues > 0.0 {
        (1.0 - sf - rf) * n / mean_trues
    } else {
        0.0
    };
    trues.scale(scale);
    let mean_d = durations.iter().sum::<f64>() / frames as f64;

    let mut gamma = DynTensor::zeros(trues.dims());
    gamma
        .as_mut_slice()
        .par_chunks_mut(nb)
        .zip(trues.as_slice().par_chunks(nb))
        .enumerate()
        .for_each(|(k, (gm, tr))| {
            let t_total: f64 = tr.iter().sum();
            let scatter_total = sf / (1.0 - sf - rf) * t_total;
            if scatter_total > 0.0 {
                let blurred = smooth_radial(tr, geo.n_radial, geo.n_radial as f64 / 4.0);
                let b: f64 = blurred.iter().sum();
                gm.iter_mut()
                    .zip(&blurred)
                    .for_each(|(g, v)| *g = scatter_total * v / b);
            }
            let per_bin = rf * n * durations[k] / mean_d / nb as f64;
            gm.iter_mut().for_each(|g| *g += per_bin);
        });
    let mut expected = trues;
    expected.axpy(1.0, &gamma);

    let mut g = DynTensor::zeros(expected.dims());
    g.as_mut_slice()
        .par_chunks_mut(nb)
        .zip(expected.as_slice().par_chunks(nb))
        .enumerate()
        .for_each(|(k, (out, mean))| {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
            rng.set_stream(k as u64);
            for (o, &m) in out.iter_mut().zip(mean) {
                *o = if m > 0.0 {
                    Poisson::new(m).expect("positive mean").sample(&mut rng)
                } else {
                    0.0
                };
            }
        });
    let frame_scale = durations.iter().map(|d| scale * d).collect();
    Ok(SinogramStack {
        g,
        gamma,
        expected,
        frame_scale,
    })
}
