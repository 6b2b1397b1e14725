use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Privacy budget and data sensitivity for one release.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    pub epsilon: f64,
    pub delta: f64,
    /// Largest change a single output can undergo (width of the clip interval).
    pub d: f64,
}

impl DpParams {
    pub fn new(epsilon: f64, delta: f64, d: f64) -> Result<Self> {
        let p = Self { epsilon, delta, d };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || self.epsilon.is_nan() {
            return Err(invalid("epsilon", format!("must be positive, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta", format!("must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(invalid("d", format!("must be positive, got {}", self.d)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Rkhs,
    Cloaking,
    SimpleBinning,
    IntegralBinning,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Rkhs => "rkhs",
            Mechanism::Cloaking => "cloaking",
            Mechanism::SimpleBinning => "simple_binning",
            Mechanism::IntegralBinning => "integral_binning",
        }
    }
}

/// Every constant needed to re-derive the privacy guarantee of a release.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub mechanism: String,
    pub epsilon: f64,
    pub delta: f64,
    pub d: f64,
    pub c_delta: f64,
    /// RKHS: `d * b(K^-1)`. Cloaking: achieved `max_j c_j^T M^+ c_j`.
    pub sensitivity: f64,
    /// Multiplier applied to the unit noise draw.
    pub scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound_b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_achieved: Option<f64>,
    /// Set when noise was suppressed for testing; such output is NOT PRIVATE.
    pub not_private: bool,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

/// Output of one DP release over a set of test points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseResult {
    pub predictions: Vec<f64>,
    pub posterior_var: Vec<f64>,
    /// Standard deviation of the DP noise at each test point.
    pub noise_std: Vec<f64>,
    pub privacy: PrivacyReport,
}

/// Checks that the outputs fit in an interval of width `d`.
pub(crate) fn check_output_width(y: &nalgebra::DVector<f64>, d: f64) -> Result<()> {
    if y.is_empty() {
        return Ok(());
    }
    let width = y.max() - y.min();
    if width > d * (1.0 + 1e-9) {
        return Err(invalid(
            "y",
            format!("outputs span {width}, wider than the sensitivity d = {d}; clip them first"),
        ));
    }
    Ok(())
}


/// A release with everything except the noise draw computed, so repeated
/// draws do not refit or re-optimise.
#[derive(Debug, Clone)]
pub struct PreparedRelease {
    pub mean: nalgebra::DVector<f64>,
    pub posterior_var: nalgebra::DVector<f64>,
    /// `L` with `L L^T` the noise covariance before scaling; `None` when the
    /// scale is zero.
    pub noise_factor: Option<nalgebra::DMatrix<f64>>,
    pub privacy: PrivacyReport,
}

impl PreparedRelease {
    /// Covariance of the added noise, `scale^2 L L^T`.
    pub fn noise_covariance(&self) -> nalgebra::DMatrix<f64> {
        let p = self.mean.len();
        match &self.noise_factor {
            Some(l) => l * l.transpose() * (self.privacy.scale * self.privacy.scale),
            None => nalgebra::DMatrix::zeros(p, p),
        }
    }

    /// One noisy release. A `noise_multiplier` other than one is a test
    /// hook and marks the result NOT PRIVATE.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R, noise_multiplier: f64) -> ReleaseResult {
        let applied = self.privacy.scale * noise_multiplier;
        let p = self.mean.len();
        let (predictions, noise_std) = match &self.noise_factor {
            Some(l) if applied > 0.0 => {
                let noisy = &self.mean + crate::linalg::sample_with_factor(l, rng) * applied;
                let sd = l.row_iter().map(|r| r.norm() * applied).collect();
                (noisy.iter().copied().collect(), sd)
            }
            _ => (self.mean.iter().copied().collect(), vec![0.0; p]),
        };
        let mut privacy = self.privacy.clone();
        privacy.not_private = privacy.not_private || noise_multiplier != 1.0;
        ReleaseResult {
            predictions,
            posterior_var: self.posterior_var.iter().copied().collect(),
            noise_std,
            privacy,
        }
    }
}
