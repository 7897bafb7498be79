use fppg::kinetics::*;
use fppg::{Dims, DynTensor};
use proptest::prelude::*;

const TRUE: KineticParams = KineticParams {
    k1: 0.3,
    k2: 0.5,
    k3: 0.1,
    k4: 0.05,
    va: 0.04,
};

/// Frame averages of the compartment ODEs integrated with RK4 at 0.01 s.
fn rk_oracle(p: &KineticParams, input: &InputFunction, schedule: &FrameSchedule) -> Vec<f64> {
    let dt = 0.01 / 60.0;
    let end = schedule.total() / 60.0;
    let steps = (end / dt).round() as usize;
    let deriv = |t: f64, c: [f64; 2]| {
        let ca = input.eval(t);
        [
            p.k1 * ca - (p.k2 + p.k3) * c[0] + p.k4 * c[1],
            p.k3 * c[0] - p.k4 * c[1],
        ]
    };
    let mut c = [0.0; 2];
    let mut signal = Vec::with_capacity(steps + 1);
    signal.push(p.va * input.eval(0.0));
    for s in 0..steps {
        let t = s as f64 * dt;
        let k1 = deriv(t, c);
        let k2 = deriv(
            t + dt / 2.0,
            [c[0] + dt / 2.0 * k1[0], c[1] + dt / 2.0 * k1[1]],
        );
        let k3 = deriv(
            t + dt / 2.0,
            [c[0] + dt / 2.0 * k2[0], c[1] + dt / 2.0 * k2[1]],
        );
        let k4 = deriv(t + dt, [c[0] + dt * k3[0], c[1] + dt * k3[1]]);
        for i in 0..2 {
            c[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let tn = (s + 1) as f64 * dt;
        signal.push((1.0 - p.va) * (c[0] + c[1]) + p.va * input.eval(tn));
    }
    frame_average(&signal, dt, schedule)
}

/// Trapezoid frame averages of a signal sampled every `dt` minutes from 0.
fn frame_average(signal: &[f64], dt: f64, schedule: &FrameSchedule) -> Vec<f64> {
    schedule
        .starts()
        .iter()
        .zip(schedule.durations())
        .map(|(&s, &d)| {
            let a = (s / 60.0 / dt).round() as usize;
            let b = ((s + d) / 60.0 / dt).round() as usize;
            let sum: f64 = (a..b).map(|i| 0.5 * (signal[i] + signal[i + 1])).sum();
            sum / (b - a) as f64
        })
        .collect()
}

/// Closed form of `K1 e^{-k2 t}` convolved with the Feng input.
fn one_tissue_closed_form(k1: f64, k2: f64, a: [f64; 3], l: [f64; 3], t: f64) -> f64 {
    // first term (A1 u + P) e^{l1 u}, P = -A2 - A3
    let p = -a[1] - a[2];
    let mut v = 0.0;
    let c = l[0] + k2;
    let e0 = ((l[0] * t).exp() - (-k2 * t).exp()) / c;
    let e1 = t * (l[0] * t).exp() / c - e0 / c;
    v += p * e0 + a[0] * e1;
    for j in 1..3 {
        v += a[j] * ((l[j] * t).exp() - (-k2 * t).exp()) / (l[j] + k2);
    }
    k1 * v
}

#[test]
fn tac_matches_ode_integration() {
    let input = InputFunction::feng_default();
    let schedule = FrameSchedule::brain();
    for p in [
        TRUE,
        KineticParams::new(0.1, 0.15, 0.08, 0.01, 0.05),
        KineticParams::new(0.6, 1.2, 0.02, 0.3, 0.0),
    ] {
        let tac = two_tissue_tac(&p, &input, &schedule);
        let oracle = rk_oracle(&p, &input, &schedule);
        for (f, (a, b)) in tac.iter().zip(&oracle).enumerate() {
            assert!(
                (a - b).abs() <= 1e-3 * b.abs(),
                "{p:?} frame {f}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn one_tissue_matches_closed_form() {
    let (a, l) = (
        [851.1225, 21.8798, 20.8113],
        [-4.133859, -0.01043449, -0.1190996],
    );
    let input = InputFunction::feng(a, l, 0.0);
    let schedule = FrameSchedule::brain();
    let p = KineticParams::new(0.25, 0.4, 0.0, 0.0, 0.0);
    let tac = two_tissue_tac(&p, &input, &schedule);
    let dt: f64 = 0.01 / 60.0;
    let steps = (60.0 / dt).round() as usize;
    let signal: Vec<f64> = (0..=steps)
        .map(|i| one_tissue_closed_form(p.k1, p.k2, a, l, i as f64 * dt))
        .collect();
    let oracle = frame_average(&signal, dt, &schedule);
    for (x, y) in tac.iter().zip(&oracle) {
        // trapezoid error of the oracle dominates
        assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let input = InputFunction::feng_default();
    let schedule = FrameSchedule::brain();
    let model = TacModel::new(&input, &schedule, BloodVolume::Fractional);
    for p in [
        TRUE,
        KineticParams::new(0.1, 0.2, 0.3, 0.4, 0.1),
        KineticParams::new(0.4, 0.3, 0.01, 0.3, 0.02),
    ] {
        let (_, jac) = model.eval_with_jacobian(&p);
        let base = p.to_array();
        for i in 0..5 {
            let h = 1e-6 * base[i].abs().max(1e-3);
            let mut up = base;
            let mut dn = base;
            up[i] += h;
            dn[i] -= h;
            let fu = model.eval(&KineticParams::from_array(up));
            let fd = model.eval(&KineticParams::from_array(dn));
            let scale = (0..model.frames())
                .map(|f| jac[(f, i)].abs())
                .fold(0.0, f64::max);
            for f in 0..model.frames() {
                let fdv = (fu[f] - fd[f]) / (2.0 * h);
                assert!(
                    (jac[(f, i)] - fdv).abs() <= 1e-4 * scale,
                    "param {i} frame {f}: {} vs {fdv}",
                    jac[(f, i)]
                );
            }
        }
    }
}

#[test]
fn additive_blood_convention() {
    let input = InputFunction::feng_default();
    let schedule = FrameSchedule::brain();
    let frac = TacModel::new(&input, &schedule, BloodVolume::Fractional);
    let add = TacModel::new(&input, &schedule, BloodVolume::Additive);
    let tissue = frac.eval(&KineticParams { va: 0.0, ..TRUE });
    let a = add.eval(&TRUE);
    for f in 0..schedule.len() {
        let expect = tissue[f] + TRUE.va * add.input_averages()[f];
        assert!((a[f] - expect).abs() < 1e-9 * expect.abs().max(1.0));
    }
}

#[test]
fn noiseless_round_trip() {
    let input = InputFunction::feng_default();
    let schedule = FrameSchedule::brain();
    let model = TacModel::new(&input, &schedule, BloodVolume::Fractional);
    let tac = model.eval(&TRUE);
    let w = default_weights(&tac, &schedule);
    let fit = wnls_fit(
        &model,
        &tac,
        &w,
        &KineticParams::uniform(0.1),
        &FitOptions::default(),
    )
    .unwrap();
    let got = fit.params.to_array();
    let want = TRUE.to_array();
    for i in 0..5 {
        assert!(
            (got[i] - want[i]).abs() <= 0.01 * want[i],
            "{}: {} vs {}",
            KineticParams::NAMES[i],
            got[i],
            want[i]
        );
    }
    assert!((ki(&fit.params) - ki(&TRUE)).abs() <= 0.01 * ki(&TRUE));
}

#[test]
fn zero_tac_fits_to_zero() {
    let input = InputFunction::feng_default();
    let schedule = FrameSchedule::brain();
    let model = TacModel::new(&input, &schedule, BloodVolume::Fractional);
    let tac = vec![0.0; schedule.len()];
    let fit = wnls_fit(
        &model,
        &tac,
        &vec![1.0; tac.len()],
        &KineticParams::uniform(0.1),
        &FitOptions::default(),
    )
    .unwrap();
    assert_eq!(fit.params.k1, 0.0);
    assert_eq!(fit.params.va, 0.0);
    assert_eq!(ki(&fit.params), 0.0);
    assert!(fit.residual < 1e-20);
}

#[test]
fn fit_rejects_bad_input() {
    let input = InputFunction::feng_default();
    let schedule = FrameSchedule::brain();
    let model = TacModel::new(&input, &schedule, BloodVolume::Fractional);
    let tac = model.eval(&TRUE);
    let init = KineticParams::uniform(0.1);
    let opts = FitOptions::default();
    let zeros = vec![0.0; tac.len()];
    assert!(matches!(
        wnls_fit(&model, &tac, &zeros, &init, &opts),
        Err(fppg::Error::BadWeights(_))
    ));
    let mut neg = vec![1.0; tac.len()];
    neg[3] = -1.0;
    assert!(matches!(
        wnls_fit(&model, &tac, &neg, &init, &opts),
        Err(fppg::Error::BadWeights(_))
    ));
    let mut nan = tac.clone();
    nan[0] = f64::NAN;
    assert!(matches!(
        wnls_fit(&model, &nan, &vec![1.0; tac.len()], &init, &opts),
        Err(fppg::Error::FitDiverged)
    ));
}

#[test]
fn iteration_budget_is_reported() {
    let input = InputFunction::feng_default();
    let schedule = FrameSchedule::brain();
    let model = TacModel::new(&input, &schedule, BloodVolume::Fractional);
    let tac = model.eval(&TRUE);
    let w = default_weights(&tac, &schedule);
    let opts = FitOptions {
        max_iterations: 2,
        ..FitOptions::default()
    };
    let fit = wnls_fit(&model, &tac, &w, &KineticParams::uniform(0.1), &opts).unwrap();
    assert!(!fit.converged);
    assert_eq!(fit.iterations, 2);
}

#[test]
fn parametric_maps_recover_voxels() {
    let input = InputFunction::feng_default();
    let schedule = FrameSchedule::brain();
    let params = [TRUE, KineticParams::new(0.1, 0.15, 0.08, 0.01, 0.05)];
    let tacs: Vec<Vec<f64>> = params
        .iter()
        .map(|p| two_tissue_tac(p, &input, &schedule))
        .collect();
    // 2x2 image: voxels 0 and 3 carry TACs, voxel 1 is masked out
    let dims = Dims::new(2, 2, schedule.len());
    let img = DynTensor::from_fn(dims, |i, j, k| match (i, j) {
        (0, 0) => tacs[0][k],
        (1, 1) => tacs[1][k],
        _ => 1.0,
    });
    let mask = [true, false, true, true];
    let maps = parametric_images(&img, &input, &schedule, &mask, &FitOptions::default()).unwrap();
    assert!((maps.k1.as_slice()[0] - 0.3).abs() < 3e-3);
    assert!((maps.ki.as_slice()[3] - ki(&params[1])).abs() < 0.01 * ki(&params[1]));
    assert_eq!(maps.k1.as_slice()[1], 0.0);
    assert_eq!(maps.failures.as_slice()[1], 0.0);
    assert!(parametric_images(
        &img,
        &input,
        &FrameSchedule::uniform(3, 10.0).unwrap(),
        &mask,
        &FitOptions::default()
    )
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tac_nondecreasing_in_k1(k1 in 0.01f64..1.0, dk in 0.0f64..1.0, k2 in 0.0f64..2.0, k3 in 0.0f64..1.0,
                               k4 in 0.0f64..1.0, va in 0.0f64..0.5) {
        let input = InputFunction::feng_default();
        let schedule = FrameSchedule::brain();
        let lo = two_tissue_tac(&KineticParams::new(k1, k2, k3, k4, va), &input, &schedule);
        let hi = two_tissue_tac(&KineticParams::new(k1 + dk, k2, k3, k4, va), &input, &schedule);
        for (a, b) in lo.iter().zip(&hi) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn tac_is_nonnegative(k1 in 0.0f64..5.0, k2 in 0.0f64..5.0, k3 in 0.0f64..5.0, k4 in 0.0f64..5.0,
                          va in 0.0f64..1.0) {
        let tac = two_tissue_tac(&KineticParams::new(k1, k2, k3, k4, va), &InputFunction::feng_default(),
                                 &FrameSchedule::brain());
        prop_assert!(tac.iter().all(|v| v.is_finite() && *v >= -1e-9));
    }

    #[test]
    fn ki_limits(k1 in 0.0f64..5.0, k2 in 0.0f64..5.0, k3 in 0.0f64..5.0) {
        let v = ki(&KineticParams::new(k1, k2, k3, 0.0, 0.0));
        prop_assert!(v >= 0.0 && v <= k1 + 1e-12);
    }
}
