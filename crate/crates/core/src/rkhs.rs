//! Release of the posterior mean with a scaled GP-prior sample, calibrated
//! to the RKHS sensitivity of the mean function.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gp::GpModel;
use crate::kernel::KernelSpec;
use crate::linalg::{inf_norm, psd_factor, sample_with_factor};
use crate::release::{check_output_width, DpParams, Mechanism, PreparedRelease, PrivacyReport, ReleaseResult};

/// Which Gaussian-mechanism constant to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CDeltaMode {
    /// `sqrt(2 ln(1.25 / delta))`, for the function release.
    Rkhs,
    /// `sqrt(2 ln(2 / delta))`, for the vector (cloaking) release.
    Cloaking,
}

pub fn c_delta(delta: f64, mode: CDeltaMode) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("delta", format!("must lie in (0, 1), got {delta}")));
    }
    let numerator = match mode {
        CDeltaMode::Rkhs => 1.25,
        CDeltaMode::Cloaking => 2.0,
    };
    Ok((2.0 * (numerator / delta).ln()).sqrt())
}

/// Column-sum bound `b(K^{-1})` on the change of the posterior mean per unit
/// change of one training output.
///
/// Without `nonneg_kernel` this is `||K^{-1}||_inf`. With it, the kernel
/// values are known to lie in `[0, 1]`, so only same-signed entries of a
/// column can add up: the bound is the larger of the infinity norms of the
/// positive part of `K^{-1}` and of `-K^{-1}`.
pub fn bound_b(kinv: &DMatrix<f64>, nonneg_kernel: bool) -> f64 {
    if !nonneg_kernel {
        return inf_norm(kinv);
    }
    let pos = kinv.map(|v| v.max(0.0));
    let neg = kinv.map(|v| (-v).max(0.0));
    inf_norm(&pos).max(inf_norm(&neg))
}

/// Draw from the zero-mean GP prior `N(0, K_**)` at `xstar`.
pub fn sample_prior<R: Rng + ?Sized>(
    spec: &KernelSpec,
    xstar: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let factor = psd_factor(&spec.gram(xstar)?)?;
    Ok(sample_with_factor(&factor, rng))
}

/// Varah's bound on `||J^{-1}||_inf` for a strictly diagonally dominant `J`:
/// `max_i 1 / (|J_ii| - sum_{j != i} |J_ij|)`.
pub fn varah_bound(j: &DMatrix<f64>) -> Result<f64> {
    if !j.is_square() {
        return Err(Error::DimensionMismatch {
            expected: j.nrows(),
            got: j.ncols(),
        });
    }
    let mut worst: f64 = 0.0;
    for (i, row) in j.row_iter().enumerate() {
        let off: f64 = row
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != i)
            .map(|(_, v)| v.abs())
            .sum();
        let margin = row[i].abs() - off;
        if !(margin > 0.0) {
            return Err(Error::NotDiagonallyDominant { row: i, margin });
        }
        worst = worst.max(1.0 / margin);
    }
    Ok(worst)
}

/// RKHS release: `y* + (d b(K^-1) c(delta) / epsilon) g` with `g` a prior
/// sample at the test points.
///
/// The bound assumes kernel values in `[0, 1]`, so the kernel variance must
/// be exactly one; outputs must already be clipped to a width-`d` interval.
pub fn release_rkhs<R: Rng + ?Sized>(
    model: &GpModel,
    xstar: &DMatrix<f64>,
    dp: &DpParams,
    rng: &mut R,
) -> Result<ReleaseResult> {
    release_rkhs_scaled(model, xstar, dp, rng, 1.0)
}

pub(crate) fn release_rkhs_scaled<R: Rng + ?Sized>(
    model: &GpModel,
    xstar: &DMatrix<f64>,
    dp: &DpParams,
    rng: &mut R,
    noise_multiplier: f64,
) -> Result<ReleaseResult> {
    Ok(prepare_rkhs(model, xstar, dp)?.sample(rng, noise_multiplier))
}

/// Everything in [`release_rkhs`] except the prior draw.
pub fn prepare_rkhs(model: &GpModel, xstar: &DMatrix<f64>, dp: &DpParams) -> Result<PreparedRelease> {
    dp.validate()?;
    let spec = model.spec();
    if (spec.variance - 1.0).abs() > 1e-12 {
        return Err(Error::UnnormalizedKernel(spec.variance));
    }
    check_output_width(model.y(), dp.d)?;

    let b = bound_b(&model.k_inverse(), true);
    let sensitivity = dp.d * b;
    let c = c_delta(dp.delta, CDeltaMode::Rkhs)?;
    let scale = if dp.epsilon.is_infinite() {
        0.0
    } else {
        sensitivity * c / dp.epsilon
    };
    let noise_factor = if scale > 0.0 {
        Some(psd_factor(&spec.gram(xstar)?)?)
    } else {
        None
    };
    Ok(PreparedRelease {
        mean: model.predict_mean(xstar)?,
        posterior_var: model.predict_var(xstar)?,
        noise_factor,
        privacy: PrivacyReport {
            mechanism: Mechanism::Rkhs.name().to_string(),
            epsilon: dp.epsilon,
            delta: dp.delta,
            d: dp.d,
            c_delta: c,
            sensitivity,
            scale,
            bound_b: Some(b),
            delta_achieved: None,
            not_private: dp.epsilon.is_infinite(),
            notes: Vec::new(),
        },
    })
}
