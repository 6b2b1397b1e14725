use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpgp::cloaking::{calc_m, grad_lambda, prepare_cloaking, release_cloaking_with, solve, CloakingOptions};
use dpgp::harness::data::Synthetic;
use dpgp::{DpParams, GpModel, KernelSpec};

mod common;

/// Centred minimum-volume ellipsoid through the columns (Fedorov-Wynn /
/// Khachiyan iterations). Returns multipliers `lambda = p * u` of the
/// optimal `M = sum lambda_i c_i c_i^T`.
fn d_optimal_design(c: &DMatrix<f64>) -> DVector<f64> {
    let (p, n) = c.shape();
    let mut u = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..200_000 {
        let mut m = DMatrix::zeros(p, p);
        for (j, col) in c.column_iter().enumerate() {
            m += u[j] * col * col.transpose();
        }
        let inv = m.try_inverse().unwrap();
        let kappa: Vec<f64> = c.column_iter().map(|col| (col.transpose() * &inv * col)[(0, 0)]).collect();
        let (j, &k) = kappa
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        if k / p as f64 - 1.0 < 1e-9 {
            break;
        }
        let beta = (k / p as f64 - 1.0) / (k - 1.0);
        u *= 1.0 - beta;
        u[j] += beta;
    }
    u * p as f64
}

#[test]
fn log_det_matches_design_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..5 {
        let c = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let sol = solve(&c, &CloakingOptions { seed: trial, ..Default::default() }).unwrap();
        let oracle = calc_m(&d_optimal_design(&c), &c).unwrap();
        let ours = sol.m.determinant().ln();
        let theirs = oracle.determinant().ln();
        assert!((ours - theirs).abs() < 1e-2, "trial {trial}: {ours} vs {theirs}");
    }
}

#[test]
fn gradient_matches_finite_differences_4x6() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let c = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
    let lambdas = DVector::from_fn(6, |_, _| rng.random_range(0.3..1.5));
    // -ln|M| + sum lambda (1 - c^T M^-1 c)
    let objective = |l: &DVector<f64>| {
        let m = calc_m(l, &c).unwrap();
        let inv = m.clone().try_inverse().unwrap();
        -m.determinant().ln()
            + c.column_iter()
                .zip(l.iter())
                .map(|(col, li)| li * (1.0 - (col.transpose() * &inv * col)[(0, 0)]))
                .sum::<f64>()
    };
    let g = grad_lambda(&lambdas, &c).unwrap();
    for j in 0..6 {
        let h = 1e-6;
        let mut up = lambdas.clone();
        up[j] += h;
        let mut down = lambdas.clone();
        down[j] -= h;
        let fd = (objective(&up) - objective(&down)) / (2.0 * h);
        assert!((g[j] - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "component {j}: {} vs {fd}", g[j]);
    }
}

fn instance(seed: u64, n: usize, p: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(0.0..1.0));
    let xs = DMatrix::from_fn(p, 1, |_, _| rng.random_range(-0.2..1.2));
    let spec = KernelSpec::isotropic(1.0, rng.random_range(0.1..0.6), 1, rng.random_range(0.01..0.3)).unwrap();
    GpModel::fit(x, DVector::zeros(n), spec).unwrap().cloaking_matrix(&xs).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solution_invariants(seed in 0u64..10_000, n in 3usize..12, p in 1usize..6) {
        let c = instance(seed, n, p);
        let sol = solve(&c, &CloakingOptions { seed, ..Default::default() }).unwrap();
        prop_assert!(sol.lambdas.iter().all(|l| *l >= 0.0));
        let rebuilt = calc_m(&sol.lambdas, &c).unwrap();
        prop_assert!((&rebuilt - &sol.m).norm() <= 1e-10 * sol.m.norm().max(1.0));
        prop_assert!((&sol.m - sol.m.transpose()).amax() == 0.0);
        prop_assert!(sol.m.clone().symmetric_eigenvalues().min() >= -1e-10 * sol.m.amax());
        prop_assert!(sol.delta_achieved <= 1.0 + 1e-3);
        let q = common::column_quad_forms(&c, &sol.lambdas);
        for (l, qi) in sol.lambdas.iter().zip(&q) {
            prop_assert!((l * (qi - 1.0)).abs() <= 1e-3);
            // every column is masked
            prop_assert!(*qi <= sol.delta_achieved * (1.0 + 1e-6));
        }
    }
}

fn cluster_model() -> GpModel {
    let ds = Synthetic::ClusterOutlier1d { n: 30, noise_sd: 0.05 }.generate(5).unwrap();
    let y = ds.y.map(|v| v.clamp(-1.0, 1.0));
    GpModel::fit(ds.x, y, KernelSpec::isotropic(1.0, 0.1, 1, 0.01).unwrap()).unwrap()
}

#[test]
fn noise_concentrates_away_from_the_cluster() {
    let model = cluster_model();
    let xs = DMatrix::from_column_slice(6, 1, &[0.35, 0.4, 0.45, 0.85, 0.9, 0.95]);
    let dp = DpParams::new(1.0, 0.01, 2.0).unwrap();
    let r = release_cloaking_with(&model, &xs, &dp, &CloakingOptions::default(), &mut ChaCha8Rng::seed_from_u64(1), 1.0)
        .unwrap();
    let inside: f64 = r.noise_std[..3].iter().sum::<f64>() / 3.0;
    let outlier: f64 = r.noise_std[3..].iter().sum::<f64>() / 3.0;
    assert!(inside < outlier, "cluster {inside} vs outlier {outlier}");
}

#[test]
fn dense_test_grid_is_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = DMatrix::from_fn(30, 1, |_, _| rng.random_range(0.0..1.0));
    let y = DVector::from_fn(30, |_, _| rng.random_range(-0.5..0.5));
    let model = GpModel::fit(x, y, KernelSpec::isotropic(1.0, 0.2, 1, 0.05).unwrap()).unwrap();
    let dp = DpParams::new(1.0, 0.01, 1.0).unwrap();
    let max_std = |p: usize| {
        let xs = DMatrix::from_fn(p, 1, |i, _| i as f64 / (p - 1) as f64);
        let r = prepare_cloaking(&model, &xs, &dp, &CloakingOptions::default()).unwrap().sample(&mut ChaCha8Rng::seed_from_u64(0), 1.0);
        r.noise_std.iter().cloned().fold(0.0, f64::max)
    };
    let (coarse, fine) = (max_std(10), max_std(20));
    assert!((fine - coarse).abs() / coarse < 0.2, "{coarse} -> {fine}");
}

#[test]
fn release_mean_is_unbiased() {
    let model = cluster_model();
    let xs = DMatrix::from_column_slice(3, 1, &[0.2, 0.4, 0.9]);
    let dp = DpParams::new(1.0, 0.01, 2.0).unwrap();
    let prep = prepare_cloaking(&model, &xs, &dp, &CloakingOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws = 100_000;
    let mut sum = DVector::zeros(3);
    for _ in 0..draws {
        sum += DVector::from_vec(prep.sample(&mut rng, 1.0).predictions);
    }
    let mean = sum / draws as f64;
    let sd = prep.noise_covariance().diagonal().map(f64::sqrt);
    for i in 0..3 {
        assert!((mean[i] - prep.mean[i]).abs() <= 3.0 * sd[i] / (draws as f64).sqrt() + 1e-12);
    }
}
