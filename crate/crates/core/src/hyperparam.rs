//! DP hyperparameter selection: grid search scored by cross-validated SSE,
//! with the final choice drawn by the exponential mechanism.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloaking::{release_cloaking_with, CloakingOptions};
use crate::error::{invalid, Error, Result};
use crate::gp::GpModel;
use crate::kernel::KernelSpec;
use crate::release::DpParams;

/// Bound on a held-out prediction error used in the test-point term of the
/// SSE sensitivity, in units of `d`.
pub const ERROR_CLIP: f64 = 4.0;

/// One train/test split, as indices into the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FoldScheme {
    /// Disjoint test sets covering every point once.
    KFold,
    /// Independent random splits with the given test fraction.
    MonteCarlo { test_fraction: f64 },
}

impl Default for FoldScheme {
    fn default() -> Self {
        FoldScheme::MonteCarlo { test_fraction: 0.1 }
    }
}

/// Shuffle `0..n` and cut it into `k` nearly equal test blocks.
pub fn kfold_partition<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<Fold>> {
    if k < 2 || k > n {
        return Err(invalid("folds", format!("need 2 <= K <= n, got K = {k}, n = {n}")));
    }
    let order = sample(rng, n, n).into_vec();
    Ok((0..k)
        .map(|f| {
            let lo = f * n / k;
            let hi = (f + 1) * n / k;
            let test = order[lo..hi].to_vec();
            let train = order[..lo].iter().chain(&order[hi..]).copied().collect();
            Fold { train, test }
        })
        .collect())
}

/// `k` independent splits, each holding out `round(test_fraction * n)` points.
pub fn monte_carlo_folds<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    test_fraction: f64,
    rng: &mut R,
) -> Result<Vec<Fold>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(invalid("test_fraction", format!("must lie in (0, 1), got {test_fraction}")));
    }
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::DegenerateFold {
            fold: 0,
            reason: format!("test fraction {test_fraction} of {n} points leaves an empty side"),
        });
    }
    Ok((0..k)
        .map(|_| {
            let order = sample(rng, n, n).into_vec();
            Fold {
                test: order[..n_test].to_vec(),
                train: order[n_test..].to_vec(),
            }
        })
        .collect())
}

pub fn make_folds<R: Rng + ?Sized>(n: usize, k: usize, scheme: FoldScheme, rng: &mut R) -> Result<Vec<Fold>> {
    match scheme {
        FoldScheme::KFold => kfold_partition(n, k, rng),
        FoldScheme::MonteCarlo { test_fraction } => monte_carlo_folds(n, k, test_fraction, rng),
    }
}

fn select_rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}

fn select(y: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| y[idx[i]])
}

/// Cross-validated score of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    /// Negative SSE summed over folds.
    pub utility: f64,
    /// Bound on the change of `utility` between neighbouring datasets.
    pub sensitivity: f64,
    pub fold_sse: Vec<f64>,
    /// Training-side sensitivity term of each fold, in units of `d^2`.
    pub fold_terms: Vec<f64>,
}

/// How a training-side perturbation is charged to a fold's SSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityRule {
    /// Raw SSE; fold term `max_j |c_j|^2`. Omits the cross term
    /// `2 d r^T c_j` between the residuals and the prediction shift, so it
    /// can be exceeded when the GP nearly interpolates.
    Published,
    /// Per-point errors clipped to `±4d` inside the utility; fold term
    /// `max_j sum_i min(8 |c_ij|, 16)`, which bounds
    /// `|clip(e + dc)^2 - clip(e)^2| <= d |c| * 8d` and `<= 16 d^2`.
    #[default]
    Clipped,
}

impl SensitivityRule {
    /// Training-side term of one fold, in units of `d^2`.
    pub fn fold_term(self, c: &DMatrix<f64>) -> f64 {
        match self {
            SensitivityRule::Published => c.column_iter().map(|col| col.norm_squared()).fold(0.0, f64::max),
            SensitivityRule::Clipped => c
                .column_iter()
                .map(|col| {
                    col.iter()
                        .map(|v| (2.0 * ERROR_CLIP * v.abs()).min(ERROR_CLIP * ERROR_CLIP))
                        .sum::<f64>()
                })
                .fold(0.0, f64::max),
        }
    }

    fn squared_error(self, e: f64, d: f64) -> f64 {
        match self {
            SensitivityRule::Published => e * e,
            SensitivityRule::Clipped => {
                let c = e.clamp(-ERROR_CLIP * d, ERROR_CLIP * d);
                c * c
            }
        }
    }
}

/// Sensitivity of the summed SSE.
///
/// `fold_terms` are the training-side terms in units of `d^2`. A point held
/// out in `t` folds contributes `9 d^2` for each of them (`d^2 + 2d * 4d`)
/// plus its training-side term in every other fold. With a partition
/// (`t = 1` everywhere) this is `9 d^2 + d^2 * (sum of the K-1 largest terms)`.
pub fn sse_sensitivity(fold_terms: &[f64], test_counts: &[usize], d: f64) -> f64 {
    let mut terms: Vec<f64> = fold_terms.iter().map(|s| d * d * s).collect();
    terms.sort_by(|a, b| b.total_cmp(a));
    let k = terms.len();
    let test_term = (1.0 + 2.0 * ERROR_CLIP) * d * d;
    let mut counts: Vec<usize> = test_counts.iter().map(|t| (*t).min(k)).collect();
    counts.sort_unstable();
    counts.dedup();
    if counts.is_empty() {
        counts.push(1.min(k));
    }
    counts
        .into_iter()
        .map(|t| test_term * t as f64 + terms[..k - t].iter().sum::<f64>())
        .fold(0.0, f64::max)
}

/// Number of folds in which each point is held out.
pub fn test_counts(n: usize, folds: &[Fold]) -> Vec<usize> {
    let mut counts = vec![0; n];
    for f in folds {
        for &i in &f.test {
            counts[i] += 1;
        }
    }
    counts
}

/// Cross-validation settings shared by every candidate.
#[derive(Debug, Clone, Copy, Default)]
pub struct UtilityOptions {
    pub rule: SensitivityRule,
    pub noise: Option<RegressionNoise>,
}

/// Optional DP noise on the fold predictions, so the utility reflects the
/// accuracy of the released (cloaked) predictions.
#[derive(Debug, Clone, Copy)]
pub struct RegressionNoise {
    pub dp: DpParams,
    pub seed: u64,
}

fn score_fold(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    spec: &KernelSpec,
    fold: &Fold,
    index: usize,
    d: f64,
    opts: UtilityOptions,
) -> Result<(f64, f64)> {
    if fold.train.is_empty() || fold.test.is_empty() {
        return Err(Error::DegenerateFold {
            fold: index,
            reason: "empty train or test set".into(),
        });
    }
    let xt = select_rows(x, &fold.train);
    let yt = select(y, &fold.train);
    let xs = select_rows(x, &fold.test);
    let ys = select(y, &fold.test);
    let model = GpModel::fit(xt, yt, spec.clone())?;
    let c = model.cloaking_matrix(&xs)?;
    let term = opts.rule.fold_term(&c);
    let pred = match opts.noise {
        None => model.predict_mean(&xs)?,
        Some(noise) => {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed.wrapping_add(index as u64));
            let cloak = CloakingOptions {
                seed: rng.random(),
                ..CloakingOptions::default()
            };
            let r = release_cloaking_with(&model, &xs, &noise.dp, &cloak, &mut rng, 1.0)?;
            DVector::from_vec(r.predictions)
        }
    };
    let sse = (pred - ys).iter().map(|e| opts.rule.squared_error(*e, d)).sum();
    Ok((sse, term))
}

/// Score one candidate kernel: utility is the negative SSE summed over
/// `folds`, sensitivity from [`sse_sensitivity`].
///
/// `y` must already be clipped to an interval of width `d`.
pub fn sse_utility(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    spec: &KernelSpec,
    folds: &[Fold],
    d: f64,
    opts: UtilityOptions,
) -> Result<CandidateScore> {
    if !(d > 0.0) {
        return Err(invalid("d", format!("must be positive, got {d}")));
    }
    if folds.is_empty() {
        return Err(Error::Empty("no folds"));
    }
    let per_fold: Vec<(f64, f64)> = folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| score_fold(x, y, spec, f, i, d, opts))
        .collect::<Result<_>>()?;
    let fold_sse: Vec<f64> = per_fold.iter().map(|p| p.0).collect();
    let fold_terms: Vec<f64> = per_fold.iter().map(|p| p.1).collect();
    let sensitivity = sse_sensitivity(&fold_terms, &test_counts(y.len(), folds), d);
    Ok(CandidateScore {
        utility: -fold_sse.iter().sum::<f64>(),
        sensitivity,
        fold_sse,
        fold_terms,
    })
}

/// Selection probabilities `exp(eps u_i / (2 Δu)) / sum_j exp(eps u_j / (2 Δu))`.
pub fn selection_probabilities(utilities: &[f64], sensitivity: f64, epsilon: f64) -> Result<Vec<f64>> {
    if utilities.is_empty() {
        return Err(Error::Empty("no utilities"));
    }
    if !(sensitivity > 0.0) {
        return Err(invalid("sensitivity", format!("must be positive, got {sensitivity}")));
    }
    if !(epsilon >= 0.0) {
        return Err(invalid("epsilon", format!("must be non-negative, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(vec![1.0 / utilities.len() as f64; utilities.len()]);
    }
    let logits: Vec<f64> = utilities.iter().map(|u| epsilon * u / (2.0 * sensitivity)).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Draw an index with the exponential mechanism.
pub fn exponential_mechanism<R: Rng + ?Sized>(
    utilities: &[f64],
    sensitivity: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    let probs = selection_probabilities(utilities, sensitivity, epsilon)?;
    let u: f64 = Uniform::new(0.0, 1.0).expect("unit interval").sample(rng);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.len() - 1)
}

/// Candidate kernels plus the cross-validation and budget settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub candidates: Vec<KernelSpec>,
    pub folds: usize,
    #[serde(default)]
    pub scheme: FoldScheme,
    /// Budget spent on the selection, separate from the regression budget.
    pub select_epsilon: f64,
}

impl HyperGrid {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::Empty("hyperparameter grid has no candidates"));
        }
        if self.folds < 2 {
            return Err(invalid("folds", format!("need at least 2, got {}", self.folds)));
        }
        if !(self.select_epsilon >= 0.0) {
            return Err(invalid("select_epsilon", "must be non-negative"));
        }
        for c in &self.candidates {
            c.validate()?;
        }
        Ok(())
    }

    /// Cartesian product of lengthscales and noise variances for a fixed
    /// signal variance, isotropic over `dim` inputs.
    pub fn product(
        variance: f64,
        lengthscales: &[f64],
        noise_variances: &[f64],
        dim: usize,
        folds: usize,
        select_epsilon: f64,
    ) -> Result<Self> {
        let mut candidates = Vec::new();
        for &l in lengthscales {
            for &nv in noise_variances {
                candidates.push(KernelSpec::isotropic(variance, l, dim, nv)?);
            }
        }
        let grid = Self {
            candidates,
            folds,
            scheme: FoldScheme::default(),
            select_epsilon,
        };
        grid.validate()?;
        Ok(grid)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub spec: KernelSpec,
    pub scores: Vec<CandidateScore>,
    /// `max` over candidates of the per-candidate sensitivity.
    pub sensitivity: f64,
    pub probabilities: Vec<f64>,
}

/// Score every candidate on shared folds and draw one with the exponential
/// mechanism at `grid.select_epsilon`.
pub fn select_hyperparameters<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    d: f64,
    grid: &HyperGrid,
    opts: UtilityOptions,
    rng: &mut R,
) -> Result<Selection> {
    grid.validate()?;
    let folds = make_folds(y.len(), grid.folds, grid.scheme, rng)?;
    let scores: Vec<CandidateScore> = grid
        .candidates
        .iter()
        .map(|spec| sse_utility(x, y, spec, &folds, d, opts))
        .collect::<Result<_>>()?;
    let utilities: Vec<f64> = scores.iter().map(|s| s.utility).collect();
    let sensitivity = scores.iter().map(|s| s.sensitivity).fold(0.0, f64::max);
    let probabilities = selection_probabilities(&utilities, sensitivity, grid.select_epsilon)?;
    let index = if grid.candidates.len() == 1 {
        0
    } else {
        exponential_mechanism(&utilities, sensitivity, grid.select_epsilon, rng)?
    };
    Ok(Selection {
        index,
        spec: grid.candidates[index].clone(),
        scores,
        sensitivity,
        probabilities,
    })
}
