use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{bin_data, dp_bin_means, predict_binned, BinGrid, IntegralGp};
use crate::cloaking::{release_cloaking_with, CloakingOptions};
use crate::error::{invalid, Error, Result};
use crate::gp::GpModel;
use crate::harness::config::ExperimentConfig;
use crate::harness::data::{clip_and_center, rmse, Dataset};
use crate::kernel::KernelSpec;
use crate::release::{DpParams, Mechanism, PrivacyReport, ReleaseResult};
use crate::rkhs::release_rkhs_scaled;

/// Stream-specific seed from a master seed and an index (SplitMix64 finaliser).
pub fn derive_seed(master: u64, index: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SPLIT_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// Settings for one mechanism run, resolved from a config.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub mechanism: Mechanism,
    pub kernel: KernelSpec,
    pub epsilon: f64,
    pub delta: f64,
    pub clip: (f64, f64),
    pub bins_per_dim: usize,
    pub bounds: Option<Vec<(f64, f64)>>,
    pub normalize: bool,
    pub cloaking: CloakingOptions,
    pub noise_multiplier: f64,
}

impl RunSpec {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            mechanism: cfg.mechanism,
            kernel: cfg.kernel.clone(),
            epsilon: cfg.privacy.epsilon,
            delta: cfg.privacy.delta,
            clip: (cfg.data.clip_low, cfg.data.clip_high),
            bins_per_dim: cfg.bins_per_dim,
            bounds: cfg.data.bounds.clone(),
            normalize: cfg.normalize,
            cloaking: cfg.cloaking,
            noise_multiplier: cfg.noise_multiplier,
        }
    }

    fn dp(&self, d: f64) -> Result<DpParams> {
        DpParams::new(self.epsilon, self.delta, d)
    }
}

/// Fit on `train` (raw outputs) and release predictions at `xstar` in the
/// original output units.
pub fn release_on<R: Rng + ?Sized>(
    run: &RunSpec,
    train: &Dataset,
    xstar: &DMatrix<f64>,
    bounds: &[(f64, f64)],
    rng: &mut R,
) -> Result<ReleaseResult> {
    let centred = clip_and_center(train, run.clip.0, run.clip.1)?;
    let d = run.clip.1 - run.clip.0;
    let mut result = match run.mechanism {
        Mechanism::Rkhs | Mechanism::Cloaking => {
            let (spec, y, dp, unit) = if run.normalize {
                let s = run.kernel.variance.sqrt();
                let spec = KernelSpec {
                    variance: 1.0,
                    noise_variance: run.kernel.noise_variance / run.kernel.variance,
                    ..run.kernel.clone()
                };
                (spec, centred.y.unscale(s), run.dp(d / s)?, s)
            } else {
                (run.kernel.clone(), centred.y.clone(), run.dp(d)?, 1.0)
            };
            let model = GpModel::fit(centred.x.clone(), y, spec)?;
            let mut r = if run.mechanism == Mechanism::Rkhs {
                release_rkhs_scaled(&model, xstar, &dp, rng, run.noise_multiplier)?
            } else {
                let opts = CloakingOptions {
                    seed: rng.random(),
                    ..run.cloaking
                };
                release_cloaking_with(&model, xstar, &dp, &opts, rng, run.noise_multiplier)?
            };
            if unit != 1.0 {
                r.predictions.iter_mut().for_each(|v| *v *= unit);
                r.noise_std.iter_mut().for_each(|v| *v *= unit);
                r.posterior_var.iter_mut().for_each(|v| *v *= unit * unit);
                r.privacy.notes.push(format!("outputs rescaled by 1/{unit} before release"));
            }
            r
        }
        Mechanism::SimpleBinning | Mechanism::IntegralBinning => {
            let dp = run.dp(d)?;
            let edges = BinGrid::uniform_edges(bounds, run.bins_per_dim)?;
            let grid = bin_data(&centred.x, &centred.y, edges)?;
            let mut bins = dp_bin_means(&grid, &dp, rng)?;
            if run.noise_multiplier != 1.0 {
                for (v, (s, m)) in bins.values.iter_mut().zip(bins.laplace_scale.iter().zip(&grid.means)) {
                    if let (Some(_), Some(m)) = (s, m) {
                        *v = m + (*v - m) * run.noise_multiplier;
                    }
                }
            }
            let laplace_sd: Vec<f64> = bins
                .laplace_scale
                .iter()
                .map(|s| s.map_or(0.0, |s| s * 2f64.sqrt() * run.noise_multiplier))
                .collect();
            let (predictions, posterior_var, noise_std) = if run.mechanism == Mechanism::SimpleBinning {
                let (pred, _) = predict_binned(&grid, &bins.values, xstar)?;
                let (sd, _) = predict_binned(&grid, &laplace_sd, xstar)?;
                (pred, vec![0.0; xstar.nrows()], sd)
            } else {
                let igp = IntegralGp::fit(&grid, &bins, &run.kernel)?;
                let pred = igp.predict(xstar)?;
                let var = igp.predict_var(xstar)?;
                (pred.iter().copied().collect(), var.iter().copied().collect(), vec![0.0; xstar.nrows()])
            };
            let mut notes = vec!["empty bins use the non-private population mean".to_string()];
            if run.mechanism == Mechanism::IntegralBinning {
                notes.push("noise_std not reported; posterior_var includes the Laplace noise".into());
            }
            let max_scale = bins.laplace_scale.iter().flatten().fold(0.0, |a: f64, s| a.max(*s));
            ReleaseResult {
                predictions,
                posterior_var,
                noise_std,
                privacy: PrivacyReport {
                    mechanism: run.mechanism.name().to_string(),
                    epsilon: dp.epsilon,
                    delta: dp.delta,
                    d: dp.d,
                    sensitivity: dp.d,
                    scale: max_scale,
                    not_private: run.noise_multiplier != 1.0 || dp.epsilon.is_infinite(),
                    notes,
                    ..PrivacyReport::default()
                },
            }
        }
    };
    result.predictions.iter_mut().for_each(|v| *v += centred.offset);
    result.privacy.notes.push("centring offset is not privatised".into());
    Ok(result)
}

/// Per-fold and summary RMSE for one mechanism setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub label: String,
    pub mechanism: String,
    pub epsilon: f64,
    pub fold_rmse: Vec<f64>,
    pub failures: Vec<String>,
    pub mean_rmse: f64,
    /// Half-width of the 95% interval `1.96 sd / sqrt(folds)`.
    pub ci95: f64,
    pub privacy: Option<PrivacyReport>,
}

/// `(mean, 1.96 * sd / sqrt(n))` with the sample standard deviation.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Train/test indices of fold `k`, drawn without replacement.
pub fn fold_split(n: usize, train_size: Option<usize>, test_size: usize, seed: u64, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let train_size = train_size.unwrap_or(n.saturating_sub(test_size));
    if train_size == 0 || train_size + test_size > n {
        return Err(invalid(
            "cv",
            format!("train {train_size} + test {test_size} exceeds the {n} available points"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64, SPLIT_STREAM));
    let idx = sample(&mut rng, n, train_size + test_size).into_vec();
    let (test, train) = idx.split_at(test_size);
    Ok((train.to_vec(), test.to_vec()))
}

/// Repeated random train/test splits of `data`, one release per fold,
/// RMSE against the held-out outputs. Folds run in parallel; results only
/// depend on `seed`.
pub fn run_experiment(
    label: &str,
    run: &RunSpec,
    data: &Dataset,
    folds: usize,
    train_size: Option<usize>,
    test_size: usize,
    seed: u64,
) -> Result<ExperimentResult> {
    if folds == 0 {
        return Err(invalid("folds", "must be positive"));
    }
    let bounds = run.bounds.clone().unwrap_or_else(|| data.input_bounds());
    let outcomes: Vec<Result<(f64, PrivacyReport)>> = (0..folds)
        .into_par_iter()
        .map(|k| {
            let (train, test) = fold_split(data.n(), train_size, test_size, seed, k)?;
            let tr = data.subset(&train);
            let te = data.subset(&test);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64, NOISE_STREAM));
            let r = release_on(run, &tr, &te.x, &bounds, &mut rng)?;
            let truth: Vec<f64> = te.y.iter().copied().collect();
            Ok((rmse(&r.predictions, &truth)?, r.privacy))
        })
        .collect();

    let mut fold_rmse = Vec::new();
    let mut failures = Vec::new();
    let mut privacy = None;
    for (k, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok((e, p)) => {
                fold_rmse.push(e);
                privacy.get_or_insert(p);
            }
            Err(e) => {
                log::warn!("{label}: fold {k} failed: {e}");
                failures.push(format!("fold {k}: {e}"));
            }
        }
    }
    if failures.len() * 2 > folds {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: folds,
        });
    }
    let (mean_rmse, ci95) = mean_ci(&fold_rmse);
    Ok(ExperimentResult {
        label: label.to_string(),
        mechanism: run.mechanism.name().to_string(),
        epsilon: run.epsilon,
        fold_rmse,
        failures,
        mean_rmse,
        ci95,
        privacy,
    })
}

/// Every variant at every epsilon of the config's `bench` table. All rows
/// share the same fold splits.
pub fn run_bench(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<ExperimentResult>> {
    let bench = cfg
        .bench
        .as_ref()
        .ok_or_else(|| Error::Config("missing [bench] table".into()))?;
    let mut rows = Vec::new();
    for v in &bench.variants {
        for &eps in &bench.epsilons {
            let mut run = RunSpec::from_config(cfg);
            run.mechanism = v.mechanism;
            run.epsilon = eps;
            if let Some(l) = v.lengthscale {
                run.kernel.lengthscales.iter_mut().for_each(|x| *x = l);
            }
            if let Some(b) = v.bins_per_dim {
                run.bins_per_dim = b;
            }
            log::info!("bench {} at epsilon {eps}", v.label);
            rows.push(run_experiment(
                &v.label,
                &run,
                data,
                cfg.cv.folds,
                cfg.cv.train_size,
                cfg.cv.test_size,
                cfg.seed,
            )?);
        }
    }
    Ok(rows)
}

/// Fit on all of `data` and release at `xstar`.
pub fn release_all<R: Rng + ?Sized>(cfg: &ExperimentConfig, data: &Dataset, xstar: &DMatrix<f64>, rng: &mut R) -> Result<ReleaseResult> {
    let run = RunSpec::from_config(cfg);
    let bounds = run.bounds.clone().unwrap_or_else(|| data.input_bounds());
    release_on(&run, data, xstar, &bounds, rng)
}

/// Non-private fit summary used by the `fit` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub n: usize,
    pub dim: usize,
    pub kernel: KernelSpec,
    pub clip: (f64, f64),
    pub bound_b: f64,
    pub rkhs_sensitivity: f64,
    pub log_marginal_likelihood: f64,
}

pub fn fit_summary(cfg: &ExperimentConfig, data: &Dataset) -> Result<FitSummary> {
    let centred = clip_and_center(data, cfg.data.clip_low, cfg.data.clip_high)?;
    let model = GpModel::fit(centred.x.clone(), centred.y.clone(), cfg.kernel.clone())?;
    let b = crate::rkhs::bound_b(&model.k_inverse(), true);
    let l = model.chol_l();
    let log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let n = centred.n() as f64;
    let lml = -0.5 * centred.y.dot(model.alpha()) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    Ok(FitSummary {
        n: centred.n(),
        dim: centred.dim(),
        kernel: cfg.kernel.clone(),
        clip: (cfg.data.clip_low, cfg.data.clip_high),
        bound_b: b,
        rkhs_sensitivity: cfg.sensitivity() * b,
        log_marginal_likelihood: lml,
    })
}
