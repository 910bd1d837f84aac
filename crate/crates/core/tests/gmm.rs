mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use ridgepath::estimators::{ridge_beta, ridge_path_point, RidgeConfig};
use ridgepath::gmm::*;
use ridgepath::model::{generate_dataset, ObservationSampler};
use ridgepath::rng::StreamRng;

fn layout() -> ThetaLayout {
    ThetaLayout::new(3, 2)
}

fn sup(v: &DVector<f64>) -> f64 {
    v.amax()
}

proptest! {
    #[test]
    fn pack_unpack_round_trip(values in proptest::collection::vec(-5.0f64..5.0, 27)) {
        let theta = ThetaVector::from_values(layout(), DVector::from_vec(values)).unwrap();
        let parts = unpack_theta(&theta);
        prop_assert_eq!(parts.r_train.clone(), parts.r_train.transpose());
        prop_assert_eq!(parts.r_test.clone(), parts.r_test.transpose());
        let again = pack_theta(&parts, layout()).unwrap();
        prop_assert_eq!(again, theta);
    }
}

#[test]
fn second_moment_blocks_vanish_at_subsample_averages() {
    let spec = design(0.5, 500, [INV_SQRT2, INV_SQRT2]);
    let d = generate_dataset(&spec, 3).unwrap();
    let parts = ThetaParts::sample(&d, DVector::from_column_slice(&[0.3, -0.2]), 0.8);
    let theta = pack_theta(&parts, layout()).unwrap();
    let h = moment_conditions(&d, &theta, &spec.prior).unwrap();
    let l = layout();
    for r in [l.r_train(), l.s_train(), l.r_test(), l.s_test()] {
        for i in r {
            assert!(h[i].abs() < 1e-14, "coordinate {i}: {}", h[i]);
        }
    }
}

#[test]
fn moment_system_vanishes_at_interior_fits() {
    let mut checked = 0;
    for i in 0..60u64 {
        let (d, prior) = random_instance(i, &[50, 250, 500]);
        let cfg = RidgeConfig::new(0.7, prior.iter().cloned().collect());
        let fit = ridge_path_point(&d, &cfg).unwrap();
        if fit.alpha_hat == 0.0 || fit.alpha_hat >= cfg.alpha_infinity {
            continue;
        }
        let (train, test) = d.split();
        let alpha = polish_alpha(&train, &test, fit.alpha_hat, &prior);
        assert!(alpha > 0.0);
        let beta = ridge_beta(&train, alpha, &prior).unwrap();
        let theta = pack_theta(&ThetaParts::sample(&d, beta, alpha), layout()).unwrap();
        let h = moment_conditions(&d, &theta, &prior).unwrap();
        assert!(h.norm() <= 1e-8, "instance {i}: |H_n| = {}", h.norm());
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} interior fits");
}

#[test]
fn moment_system_is_small_at_the_truth() {
    // Each coordinate of sqrt(n) H_n has standard deviation at most about 1.7
    // in this design, so 0.02 is close to four standard errors at n = 1e5.
    let spec = design(1.0, 100_000, [INV_SQRT2, INV_SQRT2]);
    let theta0 = pack_theta(&ThetaParts::population(&spec), layout()).unwrap();
    for seed in 0..5u64 {
        let d = generate_dataset(&spec, 900 + seed).unwrap();
        let h = moment_conditions(&d, &theta0, &spec.prior).unwrap();
        assert!(sup(&h) <= 0.02, "seed {seed}: {}", sup(&h));
    }
}

#[test]
fn moments_have_mean_zero_at_the_truth() {
    let spec = design(1.0, 10, [INV_SQRT2, INV_SQRT2]);
    let theta0 = pack_theta(&ThetaParts::population(&spec), layout()).unwrap();
    let f = MomentFunction::new(&theta0, &spec.prior).unwrap();
    let sampler = ObservationSampler::new(&spec).unwrap();
    let mut rng = StreamRng::new(31).stream(0);
    let mut obs = sampler.empty_observation();
    let n = 1_000_000;
    let l = layout();
    let (mut sum, mut sq) = (DVector::<f64>::zeros(27), DVector::<f64>::zeros(27));
    let mut h = vec![0.0; 27];
    for _ in 0..n {
        sampler.fill(&mut rng, &mut obs);
        let (tr, te) = h.split_at_mut(l.alpha_index());
        f.train_block(obs.z.as_slice(), obs.x.as_slice(), obs.y, tr);
        f.test_block(obs.z.as_slice(), obs.x.as_slice(), obs.y, te);
        for (r, v) in h.iter().enumerate() {
            sum[r] += v;
            sq[r] += v * v;
        }
    }
    for r in 0..27 {
        let mean = sum[r] / n as f64;
        let se = ((sq[r] / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se, "coordinate {r}: mean {mean}, se {se}");
    }
}

#[test]
fn moment_system_is_affine_in_beta_and_alpha_except_the_test_block() {
    let spec = design(0.5, 300, [INV_SQRT2, INV_SQRT2]);
    let d = generate_dataset(&spec, 8).unwrap();
    let l = layout();
    let at = |beta: [f64; 2], alpha: f64| {
        let parts = ThetaParts::sample(&d, DVector::from_column_slice(&beta), alpha);
        moment_conditions(&d, &pack_theta(&parts, l).unwrap(), &spec.prior).unwrap()
    };
    let ai = l.alpha_index();
    let b1 = [0.2, -0.4];
    let b2 = [1.1, 0.3];
    let t = 2.5;
    let b3 = [b1[0] + t * (b2[0] - b1[0]), b1[1] + t * (b2[1] - b1[1])];
    let (h1, h2, h3) = (at(b1, 0.6), at(b2, 0.6), at(b3, 0.6));
    let secant = &h1 + (&h2 - &h1) * t;
    for r in (0..27).filter(|&r| r != ai) {
        assert!((h3[r] - secant[r]).abs() < 1e-12, "row {r}");
    }
    // The test block is a product of two affine functions of beta: quadratic.
    let mid = [(b1[0] + b2[0]) / 2.0, (b1[1] + b2[1]) / 2.0];
    let hm = at(mid, 0.6);
    let quad = |s: f64| {
        let l0 = (s - 0.5) * (s - 1.0) / 0.5;
        let l1 = -s * (s - 1.0) / 0.25;
        let l2 = s * (s - 0.5) / 0.5;
        l0 * h1[ai] + l1 * hm[ai] + l2 * h2[ai]
    };
    assert!((quad(t) - h3[ai]).abs() < 1e-12 * (1.0 + h3[ai].abs()));

    let (a1, a2, a3) = (0.1, 2.0, 7.5);
    let (g1, g2, g3) = (at(b1, a1), at(b1, a2), at(b1, a3));
    let s = (a3 - a1) / (a2 - a1);
    let secant = &g1 + (&g2 - &g1) * s;
    for r in (0..27).filter(|&r| r != ai) {
        assert!((g3[r] - secant[r]).abs() < 1e-12, "row {r}");
    }
}

#[test]
fn jacobian_blocks() {
    let spec = design(0.5, 200, [INV_SQRT2, INV_SQRT2]);
    let d = generate_dataset(&spec, 5).unwrap();
    let l = layout();
    let beta = DVector::from_column_slice(&[0.4, 0.1]);
    let theta = pack_theta(&ThetaParts::sample(&d, beta.clone(), 0.3), l).unwrap();
    let jac = numerical_jacobian(&d, &theta, &spec.prior, 1e-5).unwrap();
    let share_tr = d.split_at() as f64 / d.n() as f64;
    let share_te = 1.0 - share_tr;
    let eye = DMatrix::<f64>::identity(6, 6);
    let r = l.r_train();
    assert!((jac.view((r.start, r.start), (6, 6)) - &eye * share_tr).amax() < 1e-9);
    let r = l.r_test();
    assert!((jac.view((r.start, r.start), (6, 6)) - &eye * share_te).amax() < 1e-9);
    let ai = l.alpha_index();
    for j in 0..2 {
        let want = share_tr * (beta[j] - spec.prior[j]);
        assert!((jac[(l.beta().start + j, ai)] - want).abs() < 1e-9);
    }
    // Second moment blocks do not depend on beta or alpha.
    for row in l.r_train().chain(l.s_train()).chain(l.r_test()).chain(l.s_test()) {
        for col in l.beta().start..=ai {
            assert_eq!(jac[(row, col)], 0.0);
        }
    }
}
