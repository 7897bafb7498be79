//! Penalty-weight search: evaluate a starting grid, then repeatedly bisect
//! (in log scale) around the best point until neighbouring weights differ
//! by at most the refinement ratio.

use crate::config::SweepConfig;

/// One evaluated weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub lambda: f64,
    pub ssim: f64,
    pub rrmse: f64,
    /// 0 for the starting grid.
    pub round: usize,
}

/// Result of [`refine_lambda`]: every point in evaluation order and the
/// index of the best one.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub points: Vec<SweepPoint>,
    pub best: usize,
}

impl SweepOutcome {
    pub fn best(&self) -> &SweepPoint {
        &self.points[self.best]
    }
}

/// Index of the highest SSIM, the smaller weight winning ties.
fn argmax(sorted: &[SweepPoint]) -> usize {
    let mut b = 0;
    for (i, p) in sorted.iter().enumerate() {
        if p.ssim > sorted[b].ssim {
            b = i;
        }
    }
    b
}

/// Refines the weight grid around the SSIM maximum. `eval` scores a batch
/// of weights and returns `(ssim, rrmse)` for each; batches may be run in
/// parallel by the caller.
pub fn refine_lambda<E>(
    grid: &[f64],
    cfg: &SweepConfig,
    mut eval: impl FnMut(&[f64]) -> Result<Vec<(f64, f64)>, E>,
) -> Result<SweepOutcome, E> {
    let mut start: Vec<f64> = grid.to_vec();
    start.sort_by(f64::total_cmp);
    start.dedup();
    let mut points: Vec<SweepPoint> = Vec::new();
    let add = |points: &mut Vec<SweepPoint>, lambdas: &[f64], round: usize, scores: Vec<(f64, f64)>| {
        for (&lambda, (ssim, rrmse)) in lambdas.iter().zip(scores) {
            points.push(SweepPoint {
                lambda,
                ssim,
                rrmse,
                round,
            });
        }
    };
    let scores = eval(&start)?;
    add(&mut points, &start, 0, scores);
    let mut prev_best = f64::NEG_INFINITY;
    for round in 1..=cfg.max_rounds {
        let mut sorted = points.clone();
        sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        let b = argmax(&sorted);
        let best = sorted[b];
        let last = sorted.len() - 1;
        let ratio_lo = (b > 0).then(|| best.lambda / sorted[b - 1].lambda);
        let ratio_hi = (b < last).then(|| sorted[b + 1].lambda / best.lambda);
        let interior = b > 0 && b < last;
        if interior {
            let spacing = ratio_lo.unwrap().max(ratio_hi.unwrap());
            if spacing <= cfg.refine_ratio
                || (cfg.ssim_tol > 0.0 && best.ssim - prev_best < cfg.ssim_tol)
            {
                break;
            }
        }
        prev_best = best.ssim;
        // an edge optimum extends the grid by the neighbouring step
        let step = ratio_lo.or(ratio_hi).unwrap_or(10.0);
        let lo = match ratio_lo {
            Some(_) => (best.lambda * sorted[b - 1].lambda).sqrt(),
            None => best.lambda / step,
        };
        let hi = match ratio_hi {
            Some(_) => (best.lambda * sorted[b + 1].lambda).sqrt(),
            None => best.lambda * step,
        };
        let cand = [lo, hi];
        let scores = eval(&cand)?;
        add(&mut points, &cand, round, scores);
    }
    let best = points
        .iter()
        .enumerate()
        .fold(0, |b, (i, p)| {
            let q = &points[b];
            if p.ssim > q.ssim || (p.ssim == q.ssim && p.lambda < q.lambda) {
                i
            } else {
                b
            }
        });
    Ok(SweepOutcome { points, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn peaked(at: f64) -> impl FnMut(&[f64]) -> Result<Vec<(f64, f64)>, ()> {
        move |ls| {
            Ok(ls
                .iter()
                .map(|l| {
                    let d = (l / at).ln();
                    (1.0 - d * d, d.abs())
                })
                .collect())
        }
    }

    #[test]
    fn finds_interior_peak_to_ten_percent() {
        let cfg = SweepConfig::default();
        let out = refine_lambda(&[0.1, 1.0, 10.0, 100.0], &cfg, peaked(3.7)).unwrap();
        let best = out.best().lambda;
        assert!((best / 3.7 - 1.0).abs() < 0.1, "{best}");
    }

    #[test]
    fn extends_past_grid_edge() {
        let cfg = SweepConfig::default();
        let out = refine_lambda(&[1.0, 10.0], &cfg, peaked(250.0)).unwrap();
        let best = out.best().lambda;
        assert!((best / 250.0 - 1.0).abs() < 0.15, "{best}");
    }

    #[test]
    fn ssim_tolerance_stops_early() {
        let mut cfg = SweepConfig::default();
        let full = refine_lambda(&[1.0, 10.0, 100.0], &cfg, peaked(10.0)).unwrap();
        cfg.ssim_tol = 1e-3;
        let short = refine_lambda(&[1.0, 10.0, 100.0], &cfg, peaked(10.0)).unwrap();
        assert!(short.points.len() < full.points.len());
        assert_eq!(short.best().lambda, 10.0);
    }

    #[test]
    fn round_budget_is_respected() {
        let cfg = SweepConfig {
            max_rounds: 2,
            ..SweepConfig::default()
        };
        let out = refine_lambda(&[1.0, 10.0, 100.0], &cfg, peaked(3.0)).unwrap();
        assert_eq!(out.points.len(), 3 + 2 * 2);
    }
}
