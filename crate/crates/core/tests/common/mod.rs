//! Oracles shared by the integration tests.

use nalgebra::{DMatrix, DVector};

/// Rows of `F = C diag(sqrt(lambda))` orthonormalised by modified
/// Gram-Schmidt (two passes), giving `F = L Q` with `L` lower triangular and
/// `M = F F^T = L L^T`. Rows left with relative norm below `1e-13` are
/// dependent and get a zero diagonal.
fn gram_schmidt_factor(c: &DMatrix<f64>, lambdas: &DVector<f64>) -> DMatrix<f64> {
    let p = c.nrows();
    let f = DMatrix::from_fn(p, c.ncols(), |i, j| c[(i, j)] * lambdas[j].max(0.0).sqrt());
    let largest = f.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut owner: Vec<usize> = Vec::new();
    let mut l = DMatrix::zeros(p, p);
    for i in 0..p {
        let mut r: DVector<f64> = f.row(i).transpose();
        for _ in 0..2 {
            for (b, &k) in basis.iter().zip(&owner) {
                let proj = b.dot(&r);
                l[(i, k)] += proj;
                r -= b * proj;
            }
        }
        let norm = r.norm();
        if norm > 1e-13 * largest {
            l[(i, i)] = norm;
            basis.push(r / norm);
            owner.push(i);
        }
    }
    l
}

/// `(v^T M^+ v, residual of the dependent rows)` by forward substitution on
/// `L w = v`.
fn solve_lower(l: &DMatrix<f64>, v: &DVector<f64>) -> (f64, f64) {
    let p = l.nrows();
    let mut w = DVector::zeros(p);
    let mut outside = 0.0;
    for i in 0..p {
        let mut acc = v[i];
        for k in 0..i {
            acc -= l[(i, k)] * w[k];
        }
        if l[(i, i)] > 0.0 {
            w[i] = acc / l[(i, i)];
        } else {
            outside += acc * acc;
        }
    }
    (w.norm_squared(), outside.sqrt())
}

/// `v^T M^+ v` for `M = C diag(lambda) C^T`, infinite when `v` is
/// (relative to `1e-8 * |v|`) outside the range of `M`.
pub fn mahalanobis(c: &DMatrix<f64>, lambdas: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let (q, outside) = solve_lower(&gram_schmidt_factor(c, lambdas), v);
    if outside > 1e-8 * v.norm() { f64::INFINITY } else { q }
}

/// `c_j^T M^+ c_j` for every column.
pub fn column_quad_forms(c: &DMatrix<f64>, lambdas: &DVector<f64>) -> Vec<f64> {
    let l = gram_schmidt_factor(c, lambdas);
    c.column_iter()
        .map(|col| {
            let v = col.into_owned();
            let (q, outside) = solve_lower(&l, &v);
            if outside > 1e-8 * v.norm() { f64::INFINITY } else { q }
        })
        .collect()
}
