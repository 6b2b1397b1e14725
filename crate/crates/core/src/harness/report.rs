use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::bench::{derive_seed, ExperimentResult};
use crate::harness::config::ExperimentConfig;
use crate::harness::data::{clip_and_center, Dataset};
use crate::hyperparam::{
    make_folds, select_hyperparameters, selection_probabilities, sse_utility, CandidateScore, HyperGrid,
    RegressionNoise, Selection, UtilityOptions,
};
use crate::kernel::KernelSpec;
use crate::release::{DpParams, ReleaseResult};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// One row per test point: inputs, released prediction, posterior variance
/// and the standard deviation of the DP noise.
pub fn write_release_csv(path: &Path, xstar: &DMatrix<f64>, r: &ReleaseResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..xstar.ncols()).map(|j| format!("x{j}")).collect();
    header.extend(["prediction", "posterior_var", "noise_std"].map(String::from));
    w.write_record(&header)?;
    for i in 0..xstar.nrows() {
        let mut row: Vec<String> = xstar.row(i).iter().map(|v| v.to_string()).collect();
        row.push(r.predictions[i].to_string());
        row.push(r.posterior_var[i].to_string());
        row.push(r.noise_std[i].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Benchmark table: one row per (variant, epsilon).
pub fn write_bench_csv(path: &Path, rows: &[ExperimentResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "mechanism", "epsilon", "mean_rmse", "ci95", "folds_ok", "folds_failed"])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.mechanism.clone(),
            r.epsilon.to_string(),
            r.mean_rmse.to_string(),
            r.ci95.to_string(),
            r.fold_rmse.len().to_string(),
            r.failures.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Output of the `hpselect` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HpReport {
    pub candidates: Vec<KernelSpec>,
    pub select_epsilon: f64,
    pub selection: Selection,
    /// Selection probabilities when the fold predictions carry cloaking
    /// noise at each regression budget.
    pub probability_table: Vec<ProbabilityRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbabilityRow {
    pub regression_epsilon: f64,
    pub scores: Vec<CandidateScore>,
    pub probabilities: Vec<f64>,
}

/// DP hyperparameter selection over the config's `[hyperparam]` grid, plus
/// the probability table for its `regression_epsilons`.
pub fn run_hpselect<R: Rng + ?Sized>(cfg: &ExperimentConfig, data: &Dataset, rng: &mut R) -> Result<HpReport> {
    let hp = cfg
        .hyperparam
        .as_ref()
        .ok_or_else(|| Error::Config("missing [hyperparam] table".into()))?;
    let centred = clip_and_center(data, cfg.data.clip_low, cfg.data.clip_high)?;
    let d = cfg.sensitivity();
    let mut grid = HyperGrid::product(
        cfg.kernel.variance,
        &hp.lengthscales,
        &hp.noise_variances,
        centred.dim(),
        hp.folds,
        hp.select_epsilon,
    )?;
    grid.scheme = hp.scheme;
    let opts = UtilityOptions {
        rule: hp.rule,
        noise: None,
    };
    let selection = select_hyperparameters(&centred.x, &centred.y, d, &grid, opts, rng)?;

    let folds = make_folds(centred.n(), grid.folds, grid.scheme, rng)?;
    let mut probability_table = Vec::new();
    for (k, &eps) in hp.regression_epsilons.iter().enumerate() {
        let noise = RegressionNoise {
            dp: DpParams::new(eps, cfg.privacy.delta, d)?,
            seed: derive_seed(cfg.seed, k as u64, 3),
        };
        let opts = UtilityOptions {
            rule: hp.rule,
            noise: Some(noise),
        };
        let scores: Vec<CandidateScore> = grid
            .candidates
            .iter()
            .map(|spec| sse_utility(&centred.x, &centred.y, spec, &folds, d, opts))
            .collect::<Result<_>>()?;
        let utilities: Vec<f64> = scores.iter().map(|s| s.utility).collect();
        let sensitivity = scores.iter().map(|s| s.sensitivity).fold(0.0, f64::max);
        let probabilities = selection_probabilities(&utilities, sensitivity, hp.select_epsilon)?;
        probability_table.push(ProbabilityRow {
            regression_epsilon: eps,
            scores,
            probabilities,
        });
    }
    Ok(HpReport {
        candidates: grid.candidates,
        select_epsilon: hp.select_epsilon,
        selection,
        probability_table,
    })
}

/// Regression epsilon by candidate probability matrix.
pub fn write_probability_csv(path: &Path, report: &HpReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["regression_epsilon".to_string()];
    header.extend(report.candidates.iter().map(|c| {
        format!("l={:?};nv={}", c.lengthscales, c.noise_variance)
    }));
    w.write_record(&header)?;
    for row in &report.probability_table {
        let mut rec = vec![row.regression_epsilon.to_string()];
        rec.extend(row.probabilities.iter().map(|p| p.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
