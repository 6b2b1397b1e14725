use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpgp::rkhs::{bound_b, prepare_rkhs, release_rkhs, varah_bound};
use dpgp::{DpParams, GpModel, KernelSpec};

#[test]
fn bound_b_covers_brute_force_neighbours() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let x = DMatrix::from_fn(5, 1, |_, _| rng.random_range(0.0..1.0));
    let spec = KernelSpec::isotropic(1.0, 0.3, 1, 0.05).unwrap();
    let y = DVector::from_fn(5, |_, _| rng.random_range(-0.5..0.5));
    let kinv = spec.gram_with_noise(&x).unwrap().try_inverse().unwrap();
    let b = bound_b(&kinv, true);
    let xs = DMatrix::from_fn(7, 1, |_, _| rng.random_range(-0.5..1.5));
    let kstar = spec.cross(&xs, &x).unwrap();
    let d = 1.0;
    let alpha = &kinv * &y;
    for _ in 0..1000 {
        let i = rng.random_range(0..5);
        let mut y2 = y.clone();
        y2[i] += rng.random_range(-d..d);
        let change = &kstar * (&alpha - &kinv * &y2);
        assert!(change.amax() <= d * b * (1.0 + 1e-12));
    }
}

#[test]
fn varah_on_random_dominant_6x6() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for _ in 0..50 {
        let mut j: DMatrix<f64> = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        for i in 0..6 {
            let off: f64 = (0..6).filter(|&k| k != i).map(|k| j[(i, k)].abs()).sum();
            j[(i, i)] = off + rng.random_range(0.05..2.0);
        }
        let exact = j
            .clone()
            .try_inverse()
            .unwrap()
            .row_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        assert!(varah_bound(&j).unwrap() >= exact * (1.0 - 1e-12));
    }
}

#[test]
fn release_mean_within_three_standard_errors() {
    let x = DMatrix::from_column_slice(4, 1, &[0.0, 0.3, 0.6, 1.0]);
    let y = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
    let model = GpModel::fit(x, y, KernelSpec::isotropic(1.0, 0.4, 1, 0.1).unwrap()).unwrap();
    let xs = DMatrix::from_column_slice(2, 1, &[0.2, 0.8]);
    let dp = DpParams::new(5.0, 0.01, 1.0).unwrap();
    let prep = prepare_rkhs(&model, &xs, &dp).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 100_000;
    let mut sum = DVector::zeros(2);
    for _ in 0..draws {
        sum += DVector::from_vec(prep.sample(&mut rng, 1.0).predictions);
    }
    let mean = sum / draws as f64;
    let se = prep.privacy.scale / (draws as f64).sqrt();
    for i in 0..2 {
        assert!((mean[i] - prep.mean[i]).abs() <= 3.0 * se);
    }
}

#[test]
fn fixed_seed_repeats_bit_identically() {
    let x = DMatrix::from_column_slice(3, 1, &[0.0, 0.5, 1.0]);
    let model = GpModel::fit(x, DVector::from_vec(vec![0.2, 0.0, -0.2]), KernelSpec::isotropic(1.0, 0.5, 1, 0.1).unwrap()).unwrap();
    let xs = DMatrix::from_column_slice(2, 1, &[0.25, 0.75]);
    let dp = DpParams::new(1.0, 0.01, 1.0).unwrap();
    let a = release_rkhs(&model, &xs, &dp, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = release_rkhs(&model, &xs, &dp, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scale_is_sensitivity_times_constant(eps in 0.01f64..100.0, d in 0.1f64..10.0, delta in 1e-6f64..0.5) {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 0.4, 1.0]);
        let model = GpModel::fit(x, DVector::zeros(3), KernelSpec::isotropic(1.0, 0.3, 1, 0.1).unwrap()).unwrap();
        let xs = DMatrix::from_column_slice(1, 1, &[0.5]);
        let p = prepare_rkhs(&model, &xs, &DpParams::new(eps, delta, d).unwrap()).unwrap().privacy;
        prop_assert!(p.bound_b.unwrap() >= 0.0);
        prop_assert_eq!(p.scale, p.sensitivity * p.c_delta / eps);
        let bigger_eps = prepare_rkhs(&model, &xs, &DpParams::new(eps * 1.5, delta, d).unwrap()).unwrap().privacy;
        let bigger_d = prepare_rkhs(&model, &xs, &DpParams::new(eps, delta, d * 1.5).unwrap()).unwrap().privacy;
        prop_assert!(bigger_eps.scale < p.scale);
        prop_assert!(bigger_d.scale > p.scale);
    }
}
