//! Stationary covariance functions and Gram-matrix construction.
//!
//! Input matrices hold one point per row (`n x D`).

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// Exponentiated quadratic (squared exponential).
    #[default]
    ExponentiatedQuadratic,
}

/// Kernel hyperparameters: signal variance, one lengthscale per input
/// dimension and the observation noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(default)]
    pub family: KernelFamily,
    pub variance: f64,
    pub lengthscales: Vec<f64>,
    #[serde(default)]
    pub noise_variance: f64,
}

impl KernelSpec {
    pub fn new(variance: f64, lengthscales: Vec<f64>, noise_variance: f64) -> Result<Self> {
        let spec = Self {
            family: KernelFamily::ExponentiatedQuadratic,
            variance,
            lengthscales,
            noise_variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Isotropic EQ kernel over `dim` input dimensions.
    pub fn isotropic(variance: f64, lengthscale: f64, dim: usize, noise_variance: f64) -> Result<Self> {
        Self::new(variance, vec![lengthscale; dim], noise_variance)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(invalid("variance", format!("must be positive, got {}", self.variance)));
        }
        if self.lengthscales.is_empty() {
            return Err(invalid("lengthscales", "at least one lengthscale is required"));
        }
        if let Some(l) = self.lengthscales.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(invalid("lengthscales", format!("must be positive, got {l}")));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(invalid(
                "noise_variance",
                format!("must be non-negative, got {}", self.noise_variance),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    /// Squared distance scaled by the per-dimension lengthscales.
    fn scaled_sq_dist<'a>(&self, a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
        a.zip(b)
            .zip(&self.lengthscales)
            .map(|((x1, x2), l)| {
                let r = (x1 - x2) / l;
                r * r
            })
            .sum()
    }

    /// `k(x1, x2) = variance * exp(-0.5 * sum_d ((x1_d - x2_d) / l_d)^2)`.
    pub fn eval(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        self.check_dim(x1.len())?;
        self.check_dim(x2.len())?;
        Ok(self.variance * (-0.5 * self.scaled_sq_dist(x1.iter(), x2.iter())).exp())
    }

    fn eval_rows(&self, a: &RowDVector<f64>, b: &RowDVector<f64>) -> f64 {
        match self.family {
            KernelFamily::ExponentiatedQuadratic => {
                self.variance * (-0.5 * self.scaled_sq_dist(a.iter(), b.iter())).exp()
            }
        }
    }

    /// Noise-free covariance `K'` between the rows of `x`.
    pub fn gram(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() == 0 {
            return Err(Error::Empty("gram input has no rows"));
        }
        self.check_dim(x.ncols())?;
        let rows: Vec<RowDVector<f64>> = x.row_iter().map(|r| r.into_owned()).collect();
        let n = rows.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.variance;
            for j in 0..i {
                let v = self.eval_rows(&rows[i], &rows[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    /// `K = K' + noise_variance * I`.
    pub fn gram_with_noise(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut k = self.gram(x)?;
        for i in 0..k.nrows() {
            k[(i, i)] += self.noise_variance;
        }
        Ok(k)
    }

    /// Cross covariance `K_{*f}`, one row per test point.
    pub fn cross(&self, xstar: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(xstar.ncols())?;
        self.check_dim(x.ncols())?;
        let train: Vec<RowDVector<f64>> = x.row_iter().map(|r| r.into_owned()).collect();
        let mut k = DMatrix::zeros(xstar.nrows(), x.nrows());
        for (i, row) in xstar.row_iter().enumerate() {
            let row = row.into_owned();
            for (j, t) in train.iter().enumerate() {
                k[(i, j)] = self.eval_rows(&row, t);
            }
        }
        Ok(k)
    }

    /// Prior variance at each row of `x` (the diagonal of `gram`).
    pub fn prior_variance(&self, x: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_element(x.nrows(), self.variance)
    }
}
