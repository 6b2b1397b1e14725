//! Zero-mean GP posterior and the cloaking matrix.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::linalg::cholesky_with_jitter;

/// A GP conditioned on `(x, y)`, holding the Cholesky factor of
/// `K = K' + noise_variance * I` and the weights `alpha = K^{-1} y`.
#[derive(Debug, Clone)]
pub struct GpModel {
    x: DMatrix<f64>,
    y: DVector<f64>,
    spec: KernelSpec,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl GpModel {
    pub fn fit(x: DMatrix<f64>, y: DVector<f64>, spec: KernelSpec) -> Result<Self> {
        spec.validate()?;
        if x.nrows() == 0 {
            return Err(Error::Empty("training set has no points"));
        }
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(crate::error::invalid("y", "training outputs must be finite"));
        }
        let k = spec.gram_with_noise(&x)?;
        let chol = cholesky_with_jitter(&k, spec.variance)?;
        let alpha = chol.solve(&y);
        Ok(Self {
            x,
            y,
            spec,
            chol,
            alpha,
        })
    }

    /// Same inputs and kernel, new outputs. Reuses the factorisation.
    pub fn refit(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.y.len() {
            return Err(Error::DimensionMismatch {
                expected: self.y.len(),
                got: y.len(),
            });
        }
        let alpha = self.chol.solve(&y);
        Ok(Self {
            x: self.x.clone(),
            y,
            spec: self.spec.clone(),
            chol: self.chol.clone(),
            alpha,
        })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Lower-triangular Cholesky factor of `K`.
    pub fn chol_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Explicit `K^{-1}`. Only the RKHS sensitivity bound needs this.
    pub fn k_inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Posterior mean `K_{*f} alpha`.
    pub fn predict_mean(&self, xstar: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.spec.cross(xstar, &self.x)? * &self.alpha)
    }

    /// Latent-function posterior covariance
    /// `K_** - K_{*f} K^{-1} K_{f*}` (no observation noise).
    pub fn predict_cov(&self, xstar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let kss = self.spec.gram(xstar)?;
        let ksf = self.spec.cross(xstar, &self.x)?;
        let mut v = ksf.transpose();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        let cov = kss - v.transpose() * &v;
        Ok((&cov + cov.transpose()) * 0.5)
    }

    /// Diagonal of [`predict_cov`](Self::predict_cov), floored at zero.
    pub fn predict_var(&self, xstar: &DMatrix<f64>) -> Result<DVector<f64>> {
        let ksf = self.spec.cross(xstar, &self.x)?;
        let mut v = ksf.transpose();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        let prior = self.spec.prior_variance(xstar);
        Ok(DVector::from_fn(xstar.nrows(), |i, _| {
            (prior[i] - v.column(i).norm_squared()).max(0.0)
        }))
    }

    /// `C = K_{*f} K^{-1}` (p x n); column `i` is the change in the
    /// predictions per unit change in `y_i`.
    pub fn cloaking_matrix(&self, xstar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let ksf = self.spec.cross(xstar, &self.x)?;
        // K symmetric, so C^T = K^{-1} K_{f*}.
        Ok(self.chol.solve(&ksf.transpose()).transpose())
    }
}
