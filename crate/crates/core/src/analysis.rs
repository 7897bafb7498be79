//! Image quality metrics, LV segmentation by region growing, line profiles
//! and aggregation over noise realizations.

use std::collections::VecDeque;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::tensor::{Dims, DynTensor};

/// Relative RMSE in percent of the truth mean.
pub fn rrmse(recon: &DynTensor, truth: &DynTensor) -> Result<f64> {
    recon.check_dims(truth.dims(), "reconstruction")?;
    let n = truth.dims().len() as f64;
    let mean = truth.sum() / n;
    if mean == 0.0 {
        return Err(Error::ZeroTruthMean);
    }
    let mse = recon
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n;
    Ok(100.0 * mse.sqrt() / mean)
}

/// Per-frame rRMSE, each relative to its own frame mean.
pub fn rrmse_frames(recon: &DynTensor, truth: &DynTensor) -> Result<Vec<f64>> {
    recon.check_dims(truth.dims(), "reconstruction")?;
    let d = truth.dims();
    (0..d.frames)
        .map(|k| {
            let one = Dims::new(d.rows, d.cols, 1);
            rrmse(
                &DynTensor::from_vec(one, recon.frame(k).to_vec())?,
                &DynTensor::from_vec(one, truth.frame(k).to_vec())?,
            )
        })
        .collect()
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel(len: usize) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering of a column-major `rows x cols` image.
fn filter_valid(img: &[f64], rows: usize, cols: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let w = k.len();
    let (or, oc) = (rows - w + 1, cols - w + 1);
    let mut tmp = vec![0.0; or * cols];
    for j in 0..cols {
        for i in 0..or {
            tmp[j * or + i] = (0..w).map(|t| k[t] * img[j * rows + i + t]).sum();
        }
    }
    let mut out = vec![0.0; or * oc];
    for j in 0..oc {
        for i in 0..or {
            out[j * or + i] = (0..w).map(|t| k[t] * tmp[(j + t) * or + i]).sum();
        }
    }
    (out, or, oc)
}

/// Windowed SSIM of one frame (column-major `rows x cols`), averaged over
/// all window positions that fit inside the image. Images smaller than the
/// 11x11 window use the largest odd window that fits.
pub fn ssim_frame(x: &[f64], y: &[f64], rows: usize, cols: usize, dynamic_range: f64) -> f64 {
    assert_eq!(x.len(), rows * cols);
    assert_eq!(y.len(), rows * cols);
    let mut w = SSIM_WINDOW.min(rows).min(cols);
    if w % 2 == 0 {
        w -= 1;
    }
    let k = ssim_kernel(w);
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (mx, _, _) = filter_valid(x, rows, cols, &k);
    let (my, _, _) = filter_valid(y, rows, cols, &k);
    let (mxx, _, _) = filter_valid(&prod(x, x), rows, cols, &k);
    let (myy, _, _) = filter_valid(&prod(y, y), rows, cols, &k);
    let (mxy, _, _) = filter_valid(&prod(x, y), rows, cols, &k);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|p| {
            let (ux, uy) = (mx[p], my[p]);
            let sx = mxx[p] - ux * ux;
            let sy = myy[p] - uy * uy;
            let sxy = mxy[p] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * sxy + c2)) / ((ux * ux + uy * uy + c1) * (sx + sy + c2))
        })
        .sum();
    total / n as f64
}

/// Per-frame SSIM of a dynamic image.
pub fn ssim_frames(recon: &DynTensor, truth: &DynTensor, dynamic_range: f64) -> Result<Vec<f64>> {
    recon.check_dims(truth.dims(), "reconstruction")?;
    if !(dynamic_range > 0.0) {
        return Err(Error::Config(format!(
            "SSIM dynamic range must be positive, got {dynamic_range}"
        )));
    }
    let d = truth.dims();
    Ok((0..d.frames)
        .into_par_iter()
        .map(|k| {
            ssim_frame(
                recon.frame(k),
                truth.frame(k),
                d.rows,
                d.cols,
                dynamic_range,
            )
        })
        .collect())
}

/// Frame-averaged SSIM.
pub fn ssim(recon: &DynTensor, truth: &DynTensor, dynamic_range: f64) -> Result<f64> {
    let f = ssim_frames(recon, truth, dynamic_range)?;
    Ok(f.iter().sum::<f64>() / f.len() as f64)
}

/// Metrics of one reconstruction against the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub realization: usize,
    /// Percent, over the whole dynamic image.
    pub rrmse: f64,
    /// Frame-averaged SSIM.
    pub ssim: f64,
    pub rrmse_frames: Vec<f64>,
    pub ssim_frames: Vec<f64>,
}

/// Metrics with the SSIM dynamic range taken as the truth maximum.
pub fn metric_report(
    recon: &DynTensor,
    truth: &DynTensor,
    realization: usize,
) -> Result<MetricReport> {
    let range = truth.max();
    let ssim_frames = ssim_frames(recon, truth, range)?;
    let ssim = ssim_frames.iter().sum::<f64>() / ssim_frames.len() as f64;
    Ok(MetricReport {
        realization,
        rrmse: rrmse(recon, truth)?,
        ssim,
        rrmse_frames: rrmse_frames(recon, truth).unwrap_or_default(),
        ssim_frames,
    })
}

/// Region growing result over a dynamic series.
#[derive(Debug, Clone, PartialEq)]
pub struct LvResult {
    pub masks: Vec<Vec<bool>>,
    /// Mask voxel count per frame.
    pub volume_curve: Vec<usize>,
    pub threshold_used: f64,
    /// Voxels differing from the truth mask, per frame.
    pub misclassified: Vec<usize>,
    /// RMSE between the masks and the truth masks over all frames.
    pub rmse: f64,
}

impl LvResult {
    /// Mean over frames of recovered area relative to true area.
    pub fn area_fraction(&self, truth_masks: &[Vec<bool>]) -> f64 {
        let n = self.volume_curve.len() as f64;
        self.volume_curve
            .iter()
            .zip(truth_masks)
            .map(|(&v, t)| v as f64 / t.iter().filter(|&&b| b).count().max(1) as f64)
            .sum::<f64>()
            / n
    }
}

/// Linear rescale of a frame to `[0, 255]`; constant frames map to 0.
pub fn scale_to_255(frame: &[f64]) -> Vec<f64> {
    let lo = frame.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = frame.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; frame.len()];
    }
    frame.iter().map(|v| 255.0 * (v - lo) / (hi - lo)).collect()
}

/// Neighbours of `(i, j)` in increasing storage order.
fn neighbours(
    i: usize,
    j: usize,
    rows: usize,
    cols: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let mut v = [(usize::MAX, 0); 4];
    if j > 0 {
        v[0] = (i, j - 1);
    }
    if i > 0 {
        v[1] = (i - 1, j);
    }
    if i + 1 < rows {
        v[2] = (i + 1, j);
    }
    if j + 1 < cols {
        v[3] = (i, j + 1);
    }
    v.into_iter().filter(|p| p.0 != usize::MAX)
}

/// 4-connected breadth-first region growing from `seed = (row, col)`:
/// a neighbour joins while its distance to the running region mean is at
/// most `threshold`. Column-major `rows x cols` input.
pub fn grow_region(
    img: &[f64],
    rows: usize,
    cols: usize,
    seed: (usize, usize),
    threshold: f64,
) -> Result<Vec<bool>> {
    if seed.0 >= rows || seed.1 >= cols {
        return Err(Error::SeedOutOfBounds(seed.0, seed.1));
    }
    let idx = |i: usize, j: usize| j * rows + i;
    let mut mask = vec![false; rows * cols];
    let mut queue = VecDeque::new();
    mask[idx(seed.0, seed.1)] = true;
    let mut sum = img[idx(seed.0, seed.1)];
    let mut count = 1.0;
    queue.push_back(seed);
    while let Some((i, j)) = queue.pop_front() {
        for (p, q) in neighbours(i, j, rows, cols) {
            let v = idx(p, q);
            if !mask[v] && (img[v] - sum / count).abs() <= threshold {
                mask[v] = true;
                sum += img[v];
                count += 1.0;
                queue.push_back((p, q));
            }
        }
    }
    Ok(mask)
}

/// Fills background components not 4-connected to the image border.
pub fn fill_holes(mask: &[bool], rows: usize, cols: usize) -> Vec<bool> {
    let idx = |i: usize, j: usize| j * rows + i;
    let mut outside = vec![false; rows * cols];
    let mut queue = VecDeque::new();
    for j in 0..cols {
        for i in 0..rows {
            let border = i == 0 || j == 0 || i + 1 == rows || j + 1 == cols;
            if border && !mask[idx(i, j)] {
                outside[idx(i, j)] = true;
                queue.push_back((i, j));
            }
        }
    }
    while let Some((i, j)) = queue.pop_front() {
        for (p, q) in neighbours(i, j, rows, cols) {
            let v = idx(p, q);
            if !mask[v] && !outside[v] {
                outside[v] = true;
                queue.push_back((p, q));
            }
        }
    }
    outside.iter().map(|o| !o).collect()
}

/// LV masks for every frame at one global threshold, chosen from
/// `thresholds` to minimize the mask RMSE against `truth_masks` (first
/// threshold wins ties). Frames are rescaled to `[0, 255]` first.
pub fn region_grow_lv(
    frames: &DynTensor,
    seed: (usize, usize),
    thresholds: &[f64],
    truth_masks: &[Vec<bool>],
) -> Result<LvResult> {
    let d = frames.dims();
    if seed.0 >= d.rows || seed.1 >= d.cols {
        return Err(Error::SeedOutOfBounds(seed.0, seed.1));
    }
    if truth_masks.len() != d.frames || truth_masks.iter().any(|m| m.len() != d.frame_len()) {
        return Err(Error::DimMismatch(
            "truth masks must match the frames".into(),
        ));
    }
    if thresholds.is_empty() {
        return Err(Error::Config("no region growing thresholds".into()));
    }
    let scaled: Vec<Vec<f64>> = (0..d.frames)
        .map(|k| scale_to_255(frames.frame(k)))
        .collect();
    let candidates: Vec<(Vec<Vec<bool>>, Vec<usize>)> = thresholds
        .par_iter()
        .map(|&t| {
            let masks: Vec<Vec<bool>> = scaled
                .iter()
                .map(|f| {
                    fill_holes(
                        &grow_region(f, d.rows, d.cols, seed, t).expect("seed checked"),
                        d.rows,
                        d.cols,
                    )
                })
                .collect();
            let wrong = masks
                .iter()
                .zip(truth_masks)
                .map(|(m, t)| m.iter().zip(t).filter(|(a, b)| a != b).count())
                .collect();
            (masks, wrong)
        })
        .collect();
    let (best, _) = candidates
        .iter()
        .enumerate()
        .map(|(i, (_, w))| (i, w.iter().sum::<usize>()))
        .fold((0, usize::MAX), |acc, x| if x.1 < acc.1 { x } else { acc });
    let (masks, misclassified) = candidates.into_iter().nth(best).expect("nonempty");
    let total: usize = misclassified.iter().sum();
    Ok(LvResult {
        volume_curve: masks
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count())
            .collect(),
        masks,
        threshold_used: thresholds[best],
        rmse: (total as f64 / d.len() as f64).sqrt(),
        misclassified,
    })
}

/// `samples` bilinear samples from `p0` to `p1`, points given as
/// `(row, col)` in pixel units with pixel centres at integers.
pub fn line_profile(
    frame: &[f64],
    rows: usize,
    cols: usize,
    p0: (f64, f64),
    p1: (f64, f64),
    samples: usize,
) -> Result<Vec<f64>> {
    for p in [p0, p1] {
        let inside =
            p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (rows - 1) as f64 && p.1 <= (cols - 1) as f64;
        if !inside {
            return Err(Error::OutOfBounds(p.0, p.1));
        }
    }
    let at = |i: usize, j: usize| frame[j * rows + i];
    Ok((0..samples)
        .map(|s| {
            let t = if samples > 1 {
                s as f64 / (samples - 1) as f64
            } else {
                0.0
            };
            let (r, c) = (p0.0 + t * (p1.0 - p0.0), p0.1 + t * (p1.1 - p0.1));
            let (i0, j0) = (
                (r.floor() as usize).min(rows.saturating_sub(2)),
                (c.floor() as usize).min(cols.saturating_sub(2)),
            );
            let (i1, j1) = ((i0 + 1).min(rows - 1), (j0 + 1).min(cols - 1));
            let (fr, fc) = (r - i0 as f64, c - j0 as f64);
            (1.0 - fr) * (1.0 - fc) * at(i0, j0)
                + fr * (1.0 - fc) * at(i1, j0)
                + (1.0 - fr) * fc * at(i0, j1)
                + fr * fc * at(i1, j1)
        })
        .collect())
}

/// Mean, standard error and 95% t confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Summary {
    pub fn half_width(&self) -> f64 {
        (self.ci_high - self.ci_low) / 2.0
    }

    /// True when the two intervals share no point.
    pub fn disjoint(&self, other: &Summary) -> bool {
        self.ci_high < other.ci_low || other.ci_high < self.ci_low
    }
}

pub fn aggregate(values: &[f64]) -> Result<Summary> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewRealizations(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let se = sd / (n as f64).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive dof")
        .inverse_cdf(0.975);
    Ok(Summary {
        n,
        mean,
        sd,
        se,
        ci_low: mean - t * se,
        ci_high: mean + t * se,
    })
}

/// Summary of paired differences `a - b`.
pub fn paired(a: &[f64], b: &[f64]) -> Result<Summary> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(format!(
            "{} vs {} paired values",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    aggregate(&d)
}
