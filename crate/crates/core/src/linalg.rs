//! Dense linear-algebra helpers shared by the mechanisms.

use nalgebra::{Cholesky, ColPivQR, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative jitter added once when a Cholesky factorisation fails.
pub const JITTER: f64 = 1e-8;

/// Cholesky factorisation with a single `JITTER * scale * I` retry.
pub fn cholesky_with_jitter(k: &DMatrix<f64>, scale: f64) -> Result<Cholesky<f64, Dyn>> {
    if let Some(ch) = Cholesky::new(k.clone()) {
        return Ok(ch);
    }
    let mut jittered = k.clone();
    for i in 0..jittered.nrows() {
        jittered[(i, i)] += JITTER * scale;
    }
    Cholesky::new(jittered).ok_or(Error::NotPositiveDefinite)
}

/// Pseudo-inverse quadratic forms of `M = F F^T`, computed from `F` alone.
///
/// A column-pivoted QR of `F^T` gives `M = P R^T R P^T`; forming `M` would
/// square the condition number and lose directions below `eps * |M|`.
pub struct FactorPinv {
    qr: ColPivQR<f64, Dyn, Dyn>,
    r: DMatrix<f64>,
    rank: usize,
}

impl FactorPinv {
    pub fn new(factor: &DMatrix<f64>) -> Self {
        let qr = ColPivQR::new(factor.transpose());
        let r = qr.r();
        let diag: Vec<f64> = (0..r.nrows()).map(|i| r[(i, i)].abs()).collect();
        let largest = diag.iter().cloned().fold(0.0, f64::max);
        let cutoff = 10.0 * f64::EPSILON * factor.nrows().max(factor.ncols()) as f64 * largest;
        let rank = if largest > 0.0 { diag.iter().take_while(|d| **d > cutoff).count() } else { 0 };
        Self { qr, r, rank }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// `(v^T M^+ v, r)` for each column `v` of `vs`, where `r` is the residual
    /// of the trailing, inconsistent rows of `R^T w = P^T v`: zero exactly when
    /// `v` lies in the range of `M`.
    pub fn quad_forms(&self, vs: &DMatrix<f64>) -> Vec<(f64, f64)> {
        let mut u = vs.clone();
        self.qr.p().permute_rows(&mut u);
        let k = self.rank;
        let p = u.nrows();
        let lead = self.r.view((0, 0), (k, k));
        let w = lead
            .tr_solve_upper_triangular(&u.rows(0, k))
            .expect("retained diagonal is nonzero");
        let rest = u.rows(k, p - k) - self.r.view((0, k), (k, p - k)).tr_mul(&w);
        (0..vs.ncols())
            .map(|j| (w.column(j).norm_squared(), rest.column(j).norm()))
            .collect()
    }

    pub fn quad_form(&self, v: &DVector<f64>) -> (f64, f64) {
        let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        self.quad_forms(&m)[0]
    }
}

/// Infinity norm: the largest absolute row sum.
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// A factor `L` with `L L^T = cov` for a symmetric PSD `cov`.
///
/// Uses the eigendecomposition so rank-deficient covariances (coincident
/// test points, low-rank noise) factor without jitter. Eigenvalues more
/// negative than round-off are rejected.
pub fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let largest = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = -JITTER * largest.max(f64::MIN_POSITIVE) * cov.nrows() as f64;
    if eig.eigenvalues.iter().any(|&v| v < floor) {
        return Err(Error::NotPositiveDefinite);
    }
    let mut factor = eig.eigenvectors;
    for (j, ev) in eig.eigenvalues.iter().enumerate() {
        let s = ev.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(s);
    }
    Ok(factor)
}

/// Draw `factor * z` with `z` standard normal.
pub fn sample_with_factor<R: Rng + ?Sized>(factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    factor * z
}
