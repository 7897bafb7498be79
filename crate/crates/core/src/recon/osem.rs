//! Frame-by-frame OSEM, Gaussian post-filtering and gated rebinning.

use rayon::prelude::*;

use super::{initial_image, Algorithm, ReconConfig};
use crate::error::{Error, Result};
use crate::projector::Projector;
use crate::regularizers::patch::reflect;
use crate::tensor::{Dims, DynTensor};

/// Interleaved angle subsets: subset `s` holds angles `s, s + n, s + 2n, ...`.
pub fn subset_angles(n_angles: usize, subsets: usize) -> Vec<Vec<usize>> {
    (0..subsets)
        .map(|s| (s..n_angles).step_by(subsets).collect())
        .collect()
}

/// OSEM reconstruction; see [`mlem_osem_iterates`].
pub fn mlem_osem(
    p: &Projector,
    g: &DynTensor,
    gamma: &DynTensor,
    cfg: &ReconConfig,
) -> Result<DynTensor> {
    mlem_osem_iterates(p, g, gamma, cfg, |_, _| {})
}

/// OSEM reconstruction calling `on_iter(k, f)` after every full iteration
/// (`k` counts from 1). Frames are reconstructed independently.
pub fn mlem_osem_iterates(
    p: &Projector,
    g: &DynTensor,
    gamma: &DynTensor,
    cfg: &ReconConfig,
    mut on_iter: impl FnMut(usize, &DynTensor),
) -> Result<DynTensor> {
    if cfg.algorithm != Algorithm::Osem {
        return Err(Error::Config(format!(
            "mlem_osem called with algorithm {}",
            cfg.algorithm
        )));
    }
    let geo = p.geometry();
    cfg.validate(geo.n_angles)?;
    let frames = g.dims().frames;
    g.check_dims(geo.sino_dims(frames), "measured counts")?;
    gamma.check_dims(geo.sino_dims(frames), "additive counts")?;

    let subsets = subset_angles(geo.n_angles, cfg.subsets);
    let (nb, fl) = (geo.n_bins(), geo.image_side * geo.image_side);
    let ones = vec![1.0; nb];
    // subset sensitivities, [frame][subset]
    let sens: Vec<Vec<Vec<f64>>> = (0..frames)
        .into_par_iter()
        .map(|k| {
            subsets
                .iter()
                .map(|s| {
                    let mut out = vec![0.0; fl];
                    p.backward_frame(k, &ones, &mut out, Some(s));
                    out
                })
                .collect()
        })
        .collect();

    let mut f = initial_image(geo.image_dims(frames), g);
    for it in 1..=cfg.iterations {
        f.as_mut_slice()
            .par_chunks_mut(fl)
            .enumerate()
            .try_for_each(|(k, fk)| {
                let gk = &g.as_slice()[k * nb..(k + 1) * nb];
                let yk = &gamma.as_slice()[k * nb..(k + 1) * nb];
                let mut proj = vec![0.0; nb];
                let mut back = vec![0.0; fl];
                for (s, angles) in subsets.iter().enumerate() {
                    p.forward_frame(k, fk, &mut proj, Some(angles));
                    let nr = geo.n_radial;
                    for &a in angles {
                        for row in a * nr..(a + 1) * nr {
                            let y = proj[row] + yk[row];
                            proj[row] = if gk[row] == 0.0 {
                                0.0
                            } else if y > 0.0 {
                                gk[row] / y
                            } else {
                                return Err(Error::DivisionByZeroBin {
                                    bin: k * nb + row,
                                    counts: gk[row],
                                });
                            };
                        }
                    }
                    p.backward_frame(k, &proj, &mut back, Some(angles));
                    for ((v, &b), &sv) in fk.iter_mut().zip(&back).zip(&sens[k][s]) {
                        *v = if sv > 0.0 { *v * b / sv } else { 0.0 };
                    }
                }
                Ok(())
            })?;
        on_iter(it, &f);
    }
    Ok(f)
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Frame-wise 2D Gaussian filter with reflective edges.
pub fn gaussian_postfilter(f: &DynTensor, fwhm_mm: f64, pixel_mm: f64) -> DynTensor {
    if !(fwhm_mm > 0.0) {
        return f.clone();
    }
    let sigma = fwhm_mm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt()) / pixel_mm;
    let kernel = gaussian_kernel(sigma);
    let half = (kernel.len() / 2) as isize;
    let d = f.dims();
    let (m, n) = (d.rows, d.cols);
    let mut out = f.clone();
    out.as_mut_slice()
        .par_chunks_mut(d.frame_len())
        .for_each(|frame| {
            let mut tmp = vec![0.0; m * n];
            // along rows (i), then columns (j)
            for j in 0..n {
                for i in 0..m {
                    tmp[j * m + i] = kernel
                        .iter()
                        .enumerate()
                        .map(|(t, w)| w * frame[j * m + reflect(i as isize + t as isize - half, m)])
                        .sum();
                }
            }
            for j in 0..n {
                for i in 0..m {
                    frame[j * m + i] = kernel
                        .iter()
                        .enumerate()
                        .map(|(t, w)| w * tmp[reflect(j as isize + t as isize - half, n) * m + i])
                        .sum();
                }
            }
        });
    out
}

/// Gate of frame `k` when each cycle of `cycle` frames is split into `bins`
/// equal phases.
pub fn gated_bin(k: usize, bins: usize, cycle: usize) -> usize {
    (k % cycle) * bins / cycle
}

/// Sums the frames of each phase into one frame per gate.
pub fn gated_rebin(g: &DynTensor, bins: usize, cycle: usize) -> Result<DynTensor> {
    let d = g.dims();
    if bins == 0 || cycle == 0 || cycle % bins != 0 || d.frames % cycle != 0 {
        return Err(Error::BadBinning(format!(
            "{bins} bins over a {cycle}-frame cycle do not fit {} frames",
            d.frames
        )));
    }
    let mut out = DynTensor::zeros(Dims::new(d.rows, d.cols, bins));
    for k in 0..d.frames {
        let b = gated_bin(k, bins, cycle);
        out.frame_mut(b)
            .iter_mut()
            .zip(g.frame(k))
            .for_each(|(o, v)| *o += v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::{kl_objective, Geometry};

    fn disk(side: usize, frames: usize) -> DynTensor {
        let c = (side as f64 - 1.0) / 2.0;
        DynTensor::from_fn(Dims::new(side, side, frames), |i, j, _| {
            let r = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
            if r < side as f64 * 0.3 {
                10.0
            } else if r < side as f64 * 0.4 {
                4.0
            } else {
                0.0
            }
        })
    }

    fn osem_cfg(iterations: usize, subsets: usize) -> ReconConfig {
        ReconConfig {
            algorithm: Algorithm::Osem,
            iterations,
            subsets,
            ..Default::default()
        }
    }

    fn rrmse(a: &DynTensor, b: &DynTensor) -> f64 {
        let d = a.zip_map(b, |x, y| x - y);
        (d.dot(&d) / d.dims().len() as f64).sqrt() / (b.sum() / b.dims().len() as f64)
    }

    #[test]
    fn subsets_interleave() {
        assert_eq!(
            subset_angles(6, 3),
            vec![vec![0, 3], vec![1, 4], vec![2, 5]]
        );
        assert_eq!(subset_angles(4, 1), vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn noiseless_mlem_converges() {
        let geo = Geometry::new(16, 25, 24, 16.0).unwrap();
        let p = Projector::new(geo).unwrap();
        let truth = disk(16, 1);
        let g = p.forward(&truth).unwrap();
        let gamma = DynTensor::zeros(g.dims());
        let f = mlem_osem(&p, &g, &gamma, &osem_cfg(50, 1)).unwrap();
        let e = rrmse(&f, &truth);
        assert!(e < 0.10, "rRMSE {e}");
        // subsets speed things up without changing the fixed point
        let f = mlem_osem(&p, &g, &gamma, &osem_cfg(10, 4)).unwrap();
        assert!(rrmse(&f, &truth) < 0.12);
    }

    #[test]
    fn zero_data_gives_zero_image() {
        let geo = Geometry::new(8, 13, 8, 8.0).unwrap();
        let p = Projector::new(geo).unwrap();
        let g = DynTensor::zeros(p.geometry().sino_dims(2));
        let f = mlem_osem(&p, &g, &g, &osem_cfg(1, 2)).unwrap();
        assert!(f.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlem_likelihood_is_monotone() {
        let geo = Geometry::new(16, 25, 24, 16.0).unwrap();
        let p = Projector::new(geo).unwrap();
        let truth = disk(16, 2);
        let g = p.forward(&truth).unwrap().map(|v| (v * 3.0).round());
        let gamma = DynTensor::filled(g.dims(), 0.5);
        let mut prev = f64::INFINITY;
        mlem_osem_iterates(&p, &g, &gamma, &osem_cfg(30, 1), |_, f| {
            assert!(f.is_nonnegative());
            let v = kl_objective(&p, f, &g, &gamma).unwrap();
            assert!(v <= prev + 1e-9 * v.abs(), "{v} > {prev}");
            prev = v;
        })
        .unwrap();
        // total counts tend toward the measured total without background
        let gamma0 = DynTensor::zeros(g.dims());
        let f = mlem_osem(&p, &g, &gamma0, &osem_cfg(20, 1)).unwrap();
        let af = p.forward(&f).unwrap().sum();
        assert!((af - g.sum()).abs() < 1e-6 * g.sum());
    }

    #[test]
    fn wrong_algorithm_or_subsets_rejected() {
        let geo = Geometry::new(8, 13, 8, 8.0).unwrap();
        let p = Projector::new(geo).unwrap();
        let g = DynTensor::zeros(p.geometry().sino_dims(1));
        let cfg = ReconConfig {
            algorithm: Algorithm::FppgDct,
            ..osem_cfg(1, 1)
        };
        assert!(mlem_osem(&p, &g, &g, &cfg).is_err());
        assert!(matches!(
            mlem_osem(&p, &g, &g, &osem_cfg(1, 3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn postfilter_identity_and_constant() {
        let f = disk(12, 2);
        assert_eq!(gaussian_postfilter(&f, 0.0, 2.0), f);
        let c = DynTensor::filled(Dims::new(9, 11, 2), 3.7);
        let out = gaussian_postfilter(&c, 10.0, 1.5);
        assert!(out.as_slice().iter().all(|&v| (v - 3.7).abs() < 1e-10));
        let s = gaussian_postfilter(&f, 6.0, 1.0);
        assert!((s.sum() - f.sum()).abs() < 1e-3 * f.sum());
    }

    #[test]
    fn impulse_response_has_requested_fwhm() {
        for fwhm_px in [3.0, 5.0, 8.0] {
            let side = 65;
            let mut f = DynTensor::zeros(Dims::new(side, side, 1));
            f.set(32, 32, 0, 1.0);
            let out = gaussian_postfilter(&f, fwhm_px * 2.0, 2.0);
            let profile: Vec<f64> = (0..side).map(|j| out.get(32, j, 0)).collect();
            let peak = profile[32];
            // linear interpolation of the half-maximum crossing on the right
            let j = (32..side).find(|&j| profile[j] < peak / 2.0).unwrap();
            let (a, b) = (profile[j - 1], profile[j]);
            let x = (j - 1) as f64 + (a - peak / 2.0) / (a - b);
            let measured = 2.0 * (x - 32.0);
            assert!(
                (measured - fwhm_px).abs() < 0.05 * fwhm_px,
                "{measured} vs {fwhm_px}"
            );
        }
    }

    #[test]
    fn gated_rebin_cases() {
        let g = DynTensor::from_fn(Dims::new(3, 2, 20), |i, j, k| {
            (i + 3 * j) as f64 + 100.0 * k as f64
        });
        assert_eq!(gated_rebin(&g, 20, 20).unwrap(), g);
        let one = gated_rebin(&g, 1, 10).unwrap();
        assert_eq!(one.dims().frames, 1);
        assert_eq!(one.sum(), g.sum());
        let ten = gated_rebin(&g, 10, 10).unwrap();
        for b in 0..10 {
            for (x, (p, q)) in ten
                .frame(b)
                .iter()
                .zip(g.frame(b).iter().zip(g.frame(b + 10)))
            {
                assert_eq!(*x, p + q);
            }
        }
        let five = gated_rebin(&g, 5, 10).unwrap();
        assert_eq!(
            five.frame(0)[0],
            g.frame(0)[0] + g.frame(1)[0] + g.frame(10)[0] + g.frame(11)[0]
        );
        assert!(matches!(gated_rebin(&g, 3, 10), Err(Error::BadBinning(_))));
        assert!(matches!(gated_rebin(&g, 10, 15), Err(Error::BadBinning(_))));
    }
}
