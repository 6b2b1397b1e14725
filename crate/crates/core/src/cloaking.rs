//! The cloaking mechanism: Gaussian noise whose covariance `M` is shaped to
//! the directions a single training output can move the test predictions.
//!
//! Each column `c_i` of the cloaking matrix `C = K_{*f} K^{-1}` is the
//! prediction change caused by a unit change of training output `i`. The
//! noise covariance is restricted to `M = sum_i lambda_i c_i c_i^T` and the
//! multipliers are chosen by projected gradient descent on
//! `-ln|M| + sum_i lambda_i`, which maximises `ln|M^{-1}|` subject to
//! `c_i^T M^+ c_i <= 1`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gp::GpModel;
use crate::linalg::FactorPinv;
use crate::release::{check_output_width, DpParams, Mechanism, PreparedRelease, PrivacyReport, ReleaseResult};
use crate::rkhs::{c_delta, CDeltaMode};

/// Columns whose component outside the range of `M` exceeds this fraction of
/// the largest column norm are not masked by the noise.
const RANGE_RTOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloakingOptions {
    pub learning_rate: f64,
    /// Stop once the norm of a projected step falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Attempts in total, each with a fresh random start.
    pub restarts: usize,
    pub init_low: f64,
    pub init_high: f64,
    /// A converged solution must satisfy `delta_achieved <= 1 + feasibility_tol`.
    pub feasibility_tol: f64,
    pub seed: u64,
}

impl Default for CloakingOptions {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            tolerance: 1e-5,
            max_iterations: 50_000,
            restarts: 5,
            init_low: 0.1,
            init_high: 0.9,
            feasibility_tol: 1e-3,
            seed: 0,
        }
    }
}

/// Optimised noise covariance for a fixed cloaking matrix.
#[derive(Debug, Clone)]
pub struct CloakingSolution {
    pub c: DMatrix<f64>,
    pub lambdas: DVector<f64>,
    pub m: DMatrix<f64>,
    /// `max_j c_j^T M^+ c_j` for the `M` actually reached.
    pub delta_achieved: f64,
    pub iterations: usize,
    /// Attempts used, including the successful one.
    pub attempts: usize,
}

impl CloakingSolution {
    /// `lambda_i (c_i^T M^+ c_i - 1)` for every column.
    pub fn slackness(&self) -> Result<DVector<f64>> {
        let q = quad_forms(&self.lambdas, &self.c)?;
        Ok(self.lambdas.component_mul(&q.map(|v| v - 1.0)))
    }
}

fn check_lambdas(lambdas: &DVector<f64>, c: &DMatrix<f64>) -> Result<()> {
    if lambdas.len() != c.ncols() {
        return Err(Error::DimensionMismatch {
            expected: c.ncols(),
            got: lambdas.len(),
        });
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0)) {
        return Err(invalid("lambdas", format!("must be non-negative, got {l}")));
    }
    Ok(())
}

/// `M = sum_i lambda_i c_i c_i^T`.
pub fn calc_m(lambdas: &DVector<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_lambdas(lambdas, c)?;
    Ok(weighted_outer(lambdas, c))
}

fn weighted_outer(lambdas: &DVector<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let mut scaled = c.clone();
    for (j, l) in lambdas.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*l);
    }
    let m = scaled * c.transpose();
    (&m + m.transpose()) * 0.5
}

/// `C diag(sqrt(lambda))`, a square root of `M`.
pub fn noise_factor(lambdas: &DVector<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let mut f = c.clone();
    for (j, l) in lambdas.iter().enumerate() {
        f.column_mut(j).scale_mut(l.max(0.0).sqrt());
    }
    f
}

fn factor_pinv(lambdas: &DVector<f64>, c: &DMatrix<f64>) -> FactorPinv {
    FactorPinv::new(&noise_factor(lambdas, c))
}

/// `(c_j^T M^+ c_j, residual outside the range of M)` for every column.
fn quad_forms_with(pinv: &FactorPinv, c: &DMatrix<f64>) -> Vec<(f64, f64)> {
    pinv.quad_forms(c)
}

fn quad_forms(lambdas: &DVector<f64>, c: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_lambdas(lambdas, c)?;
    let q = quad_forms_with(&factor_pinv(lambdas, c), c);
    Ok(DVector::from_iterator(q.len(), q.into_iter().map(|(v, _)| v)))
}

fn delta_with(pinv: &FactorPinv, c: &DMatrix<f64>) -> f64 {
    let scale = c.column_iter().map(|col| col.norm()).fold(0.0, f64::max);
    let mut delta: f64 = 0.0;
    for (col, (q, outside)) in c.column_iter().zip(quad_forms_with(pinv, c)) {
        if col.norm() == 0.0 {
            continue;
        }
        if outside > RANGE_RTOL * scale {
            return f64::INFINITY;
        }
        delta = delta.max(q);
    }
    delta
}

/// `max_j c_j^T M^+ c_j`. Infinite when some nonzero column lies outside the
/// range of `M`, since no finite noise scale then masks that column.
pub fn calc_delta(lambdas: &DVector<f64>, c: &DMatrix<f64>) -> Result<f64> {
    check_lambdas(lambdas, c)?;
    Ok(delta_with(&factor_pinv(lambdas, c), c))
}

/// Gradient of the dual objective: component `j` is `1 - c_j^T M^+ c_j`.
pub fn grad_lambda(lambdas: &DVector<f64>, c: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(quad_forms(lambdas, c)?.map(|q| 1.0 - q))
}

struct Attempt {
    lambdas: DVector<f64>,
    iterations: usize,
    last_step: f64,
    converged: bool,
}

fn descend(c: &DMatrix<f64>, opts: &CloakingOptions, rng: &mut ChaCha8Rng) -> Attempt {
    let init = Uniform::new(opts.init_low, opts.init_high).expect("valid init range");
    let mut lambdas = DVector::from_fn(c.ncols(), |_, _| init.sample(rng));
    let mut last_step = f64::INFINITY;
    for it in 1..=opts.max_iterations {
        let q = quad_forms_with(&factor_pinv(&lambdas, c), c);
        let mut step_sq = 0.0;
        for (l, (qj, _)) in lambdas.iter_mut().zip(q) {
            let next = (*l - opts.learning_rate * (1.0 - qj)).max(0.0);
            step_sq += (next - *l) * (next - *l);
            *l = next;
        }
        last_step = step_sq.sqrt();
        if !last_step.is_finite() {
            break;
        }
        if last_step < opts.tolerance {
            return Attempt {
                lambdas,
                iterations: it,
                last_step,
                converged: true,
            };
        }
    }
    Attempt {
        lambdas,
        iterations: opts.max_iterations,
        last_step,
        converged: false,
    }
}

/// Optimise the multipliers for `c`, restarting from fresh random points
/// when an attempt fails to converge to a feasible solution.
pub fn find_lambdas(c: &DMatrix<f64>, opts: &CloakingOptions) -> Result<DVector<f64>> {
    Ok(solve(c, opts)?.lambdas)
}

/// [`find_lambdas`] plus the derived covariance and achieved bound.
pub fn solve(c: &DMatrix<f64>, opts: &CloakingOptions) -> Result<CloakingSolution> {
    if c.nrows() == 0 || c.ncols() == 0 || c.iter().all(|v| *v == 0.0) {
        return Err(invalid("c", "cloaking matrix must be nonzero"));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(invalid("c", "cloaking matrix has non-finite entries"));
    }
    let mut best: Option<(f64, f64, DVector<f64>)> = None;
    let attempts = opts.restarts.max(1);
    for attempt in 0..attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(attempt as u64));
        let run = descend(c, opts, &mut rng);
        let m = weighted_outer(&run.lambdas, c);
        let delta = delta_with(&factor_pinv(&run.lambdas, c), c);
        if run.converged && delta <= 1.0 + opts.feasibility_tol {
            return Ok(CloakingSolution {
                c: c.clone(),
                lambdas: run.lambdas,
                m,
                delta_achieved: delta,
                iterations: run.iterations,
                attempts: attempt + 1,
            });
        }
        log::debug!(
            "cloaking attempt {attempt} failed: converged={} delta={delta} step={}",
            run.converged,
            run.last_step
        );
        let better = match &best {
            None => true,
            Some((bd, _, _)) => delta < *bd,
        };
        if better {
            best = Some((delta, run.last_step, run.lambdas));
        }
    }
    let (best_delta, best_step, best_lambdas) = best.expect("at least one attempt");
    Err(Error::NotConverged {
        restarts: attempts,
        best_delta,
        best_step,
        best_lambdas: best_lambdas.iter().copied().collect(),
    })
}

/// Cloaking release: `y* + (d sqrt(delta_achieved) c(delta) / epsilon) z`
/// with `z ~ N(0, M)`.
///
/// The achieved bound enters under a square root: it bounds the squared
/// Mahalanobis length `c_j^T M^+ c_j`, while the mechanism scales by the
/// length itself.
pub fn release_cloaking<R: Rng + ?Sized>(
    model: &GpModel,
    xstar: &DMatrix<f64>,
    dp: &DpParams,
    rng: &mut R,
) -> Result<ReleaseResult> {
    let opts = CloakingOptions {
        seed: rng.random(),
        ..CloakingOptions::default()
    };
    release_cloaking_with(model, xstar, dp, &opts, rng, 1.0)
}

pub fn release_cloaking_with<R: Rng + ?Sized>(
    model: &GpModel,
    xstar: &DMatrix<f64>,
    dp: &DpParams,
    opts: &CloakingOptions,
    rng: &mut R,
    noise_multiplier: f64,
) -> Result<ReleaseResult> {
    Ok(prepare_cloaking(model, xstar, dp, opts)?.sample(rng, noise_multiplier))
}

/// Everything in [`release_cloaking`] except the noise draw: fits `M` once.
pub fn prepare_cloaking(
    model: &GpModel,
    xstar: &DMatrix<f64>,
    dp: &DpParams,
    opts: &CloakingOptions,
) -> Result<PreparedRelease> {
    dp.validate()?;
    if xstar.nrows() == 0 {
        return Err(Error::Empty("no test points"));
    }
    check_output_width(model.y(), dp.d)?;
    let mean = model.predict_mean(xstar)?;
    let posterior_var = model.predict_var(xstar)?;
    let c_const = c_delta(dp.delta, CDeltaMode::Cloaking)?;

    let mut privacy = PrivacyReport {
        mechanism: Mechanism::Cloaking.name().to_string(),
        epsilon: dp.epsilon,
        delta: dp.delta,
        d: dp.d,
        c_delta: c_const,
        not_private: dp.epsilon.is_infinite(),
        notes: vec!["noise scaled by d*sqrt(delta_achieved)*c(delta)/epsilon".to_string()],
        ..PrivacyReport::default()
    };
    if dp.epsilon.is_infinite() {
        return Ok(PreparedRelease {
            mean,
            posterior_var,
            noise_factor: None,
            privacy,
        });
    }

    let c = model.cloaking_matrix(xstar)?;
    let sol = solve(&c, opts)?;
    privacy.sensitivity = sol.delta_achieved;
    privacy.delta_achieved = Some(sol.delta_achieved);
    privacy.scale = dp.d * sol.delta_achieved.sqrt() * c_const / dp.epsilon;
    Ok(PreparedRelease {
        mean,
        posterior_var,
        noise_factor: Some(noise_factor(&sol.lambdas, &c)),
        privacy,
    })
}
