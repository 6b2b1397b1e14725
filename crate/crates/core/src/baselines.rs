//! Binning baselines: Laplace-noised bin means, and a GP with an integral
//! kernel fitted to those noisy bin means.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernel::KernelSpec;
use crate::linalg::cholesky_with_jitter;
use crate::release::DpParams;

/// Axis-aligned bins with per-bin occupancy and training-output means.
///
/// Bins are half-open `[low, high)` per dimension, except that the last bin
/// of each dimension also contains its upper edge. Bins are numbered in
/// row-major order over the dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub edges: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    /// Mean training output per bin; `None` for empty bins.
    pub means: Vec<Option<f64>>,
    pub population_mean: f64,
}

impl BinGrid {
    /// `bins_per_dim` equal-width bins over `[low_d, high_d]` in each dimension.
    pub fn uniform_edges(bounds: &[(f64, f64)], bins_per_dim: usize) -> Result<Vec<Vec<f64>>> {
        if bins_per_dim == 0 {
            return Err(invalid("bins_per_dim", "must be at least 1"));
        }
        bounds
            .iter()
            .map(|&(lo, hi)| {
                if !(hi > lo) {
                    return Err(invalid("bounds", format!("need high > low, got [{lo}, {hi}]")));
                }
                Ok((0..=bins_per_dim)
                    .map(|i| {
                        if i == bins_per_dim {
                            hi
                        } else {
                            lo + (hi - lo) * i as f64 / bins_per_dim as f64
                        }
                    })
                    .collect())
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.edges.len()
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.counts.iter().filter(|c| **c > 0).count() as f64 / self.n_bins() as f64
    }

    /// Bin containing `point`, or `None` outside the grid.
    pub fn locate(&self, point: &[f64]) -> Option<usize> {
        locate(&self.edges, point)
    }

    /// Interval box `[(low, high); D]` of bin `index`.
    pub fn bin_box(&self, index: usize) -> Vec<(f64, f64)> {
        let mut rem = index;
        let mut out = vec![(0.0, 0.0); self.dim()];
        for d in (0..self.dim()).rev() {
            let nb = self.edges[d].len() - 1;
            let b = rem % nb;
            rem /= nb;
            out[d] = (self.edges[d][b], self.edges[d][b + 1]);
        }
        out
    }
}

fn validate_edges(edges: &[Vec<f64>]) -> Result<()> {
    if edges.is_empty() {
        return Err(Error::Empty("bin grid has no dimensions"));
    }
    for e in edges {
        if e.len() < 2 {
            return Err(invalid("edges", "each dimension needs at least two edges"));
        }
        if e.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("edges", "edges must be strictly increasing"));
        }
    }
    Ok(())
}

fn locate(edges: &[Vec<f64>], point: &[f64]) -> Option<usize> {
    if point.len() != edges.len() {
        return None;
    }
    let mut index = 0;
    for (e, &v) in edges.iter().zip(point) {
        let nb = e.len() - 1;
        if !(v >= e[0] && v <= e[nb]) {
            return None;
        }
        // first edge strictly greater than v, minus one; top edge goes to last bin
        let b = (e.partition_point(|edge| *edge <= v) - 1).min(nb - 1);
        index = index * nb + b;
    }
    Some(index)
}

/// Count and average the training outputs per bin.
pub fn bin_data(x: &DMatrix<f64>, y: &DVector<f64>, edges: Vec<Vec<f64>>) -> Result<BinGrid> {
    validate_edges(&edges)?;
    if x.ncols() != edges.len() {
        return Err(Error::DimensionMismatch {
            expected: edges.len(),
            got: x.ncols(),
        });
    }
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::Empty("no training points to bin"));
    }
    let n_bins: usize = edges.iter().map(|e| e.len() - 1).product();
    let mut counts = vec![0usize; n_bins];
    let mut sums = vec![0.0; n_bins];
    for (i, row) in x.row_iter().enumerate() {
        let point: Vec<f64> = row.iter().copied().collect();
        let b = locate(&edges, &point).ok_or(Error::OutOfRange { index: i, point })?;
        counts[b] += 1;
        sums[b] += y[i];
    }
    let means = counts
        .iter()
        .zip(&sums)
        .map(|(&c, &s)| (c > 0).then(|| s / c as f64))
        .collect();
    Ok(BinGrid {
        edges,
        counts,
        means,
        population_mean: y.mean(),
    })
}

/// Sample Laplace(0, scale) by inverting the CDF.
fn laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let u: f64 = Uniform::new(-0.5, 0.5).expect("valid range").sample(rng);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// DP bin values released with the Laplace mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpBins {
    pub values: Vec<f64>,
    /// Laplace scale used per bin; `None` for empty bins.
    pub laplace_scale: Vec<Option<f64>>,
}

/// Occupied bin `k` gets `mean_k + Laplace(d / (count_k * epsilon))`; one
/// record moves only its own bin mean, by at most `d / count_k`. Empty bins
/// get the population mean without noise.
pub fn dp_bin_means<R: Rng + ?Sized>(grid: &BinGrid, dp: &DpParams, rng: &mut R) -> Result<DpBins> {
    dp.validate()?;
    let mut values = Vec::with_capacity(grid.n_bins());
    let mut laplace_scale = Vec::with_capacity(grid.n_bins());
    for (mean, &count) in grid.means.iter().zip(&grid.counts) {
        match mean {
            Some(m) => {
                let scale = dp.d / (count as f64 * dp.epsilon);
                let noise = if scale > 0.0 { laplace(scale, rng) } else { 0.0 };
                values.push(m + noise);
                laplace_scale.push(Some(scale));
            }
            None => {
                values.push(grid.population_mean);
                laplace_scale.push(None);
            }
        }
    }
    Ok(DpBins { values, laplace_scale })
}

/// Look up each test point's bin value. Points outside the grid get the
/// population mean and a `true` flag.
pub fn predict_binned(grid: &BinGrid, values: &[f64], xstar: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<bool>)> {
    if values.len() != grid.n_bins() {
        return Err(Error::DimensionMismatch {
            expected: grid.n_bins(),
            got: values.len(),
        });
    }
    if xstar.ncols() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: xstar.ncols(),
        });
    }
    let mut preds = Vec::with_capacity(xstar.nrows());
    let mut outside = Vec::with_capacity(xstar.nrows());
    for row in xstar.row_iter() {
        let point: Vec<f64> = row.iter().copied().collect();
        match grid.locate(&point) {
            Some(b) => {
                preds.push(values[b]);
                outside.push(false);
            }
            None => {
                log::warn!("test point {point:?} outside the bin grid; using the population mean");
                preds.push(grid.population_mean);
                outside.push(true);
            }
        }
    }
    Ok((preds, outside))
}

/// `∫_0^z exp(-t^2 / 2l^2) dt`.
fn eq_antiderivative(z: f64, l: f64) -> f64 {
    l * (PI / 2.0).sqrt() * libm::erf(z / (2f64.sqrt() * l))
}

/// Second antiderivative of the unit EQ profile, zero slope at the origin.
fn eq_second_antiderivative(z: f64, l: f64) -> f64 {
    l * (PI / 2.0).sqrt() * z * libm::erf(z / (2f64.sqrt() * l)) + l * l * (-z * z / (2.0 * l * l)).exp()
}

fn check_box(spec: &KernelSpec, b: &[(f64, f64)]) -> Result<()> {
    if b.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: b.len(),
        });
    }
    if let Some((lo, hi)) = b.iter().find(|(lo, hi)| !(hi > lo)) {
        return Err(invalid("bin", format!("degenerate interval [{lo}, {hi}]")));
    }
    Ok(())
}

/// Covariance between the integrals of the latent function over two boxes:
/// `variance * prod_d ∫_{A_d} ∫_{B_d} exp(-(s - t)^2 / 2 l_d^2) dt ds`.
pub fn integral_kernel_eval(spec: &KernelSpec, a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64> {
    check_box(spec, a)?;
    check_box(spec, b)?;
    let mut v = spec.variance;
    for (((a1, b1), (a2, b2)), &l) in a.iter().zip(b).zip(&spec.lengthscales) {
        let g = |z: f64| eq_second_antiderivative(z, l);
        v *= g(b1 - a2) - g(a1 - a2) - g(b1 - b2) + g(a1 - b2);
    }
    Ok(v)
}

/// Covariance between the integral over a box and the latent value at `x`.
pub fn integral_point_cross(spec: &KernelSpec, a: &[(f64, f64)], x: &[f64]) -> Result<f64> {
    check_box(spec, a)?;
    if x.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: x.len(),
        });
    }
    let mut v = spec.variance;
    for (((lo, hi), &xd), &l) in a.iter().zip(x).zip(&spec.lengthscales) {
        v *= eq_antiderivative(xd - lo, l) - eq_antiderivative(xd - hi, l);
    }
    Ok(v)
}

fn volume(b: &[(f64, f64)]) -> f64 {
    b.iter().map(|(lo, hi)| hi - lo).product()
}

/// GP over the latent function, observed through per-bin averages.
///
/// Each occupied bin contributes one observation: its DP value, read as the
/// average of the latent function over the bin. The observation noise is the
/// Laplace variance `2 (d / (count * epsilon))^2` plus the averaged sample
/// noise `noise_variance / count`. Empty bins carry no observation.
#[derive(Debug, Clone)]
pub struct IntegralGp {
    spec: KernelSpec,
    boxes: Vec<Vec<(f64, f64)>>,
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
    offset: f64,
}

impl IntegralGp {
    pub fn fit(grid: &BinGrid, dp_values: &DpBins, spec: &KernelSpec) -> Result<Self> {
        spec.validate()?;
        if spec.dim() != grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: grid.dim(),
                got: spec.dim(),
            });
        }
        let occupied: Vec<usize> = (0..grid.n_bins()).filter(|&k| grid.counts[k] > 0).collect();
        if occupied.is_empty() {
            return Err(Error::Empty("no occupied bins"));
        }
        let boxes: Vec<Vec<(f64, f64)>> = occupied.iter().map(|&k| grid.bin_box(k)).collect();
        let vols: Vec<f64> = boxes.iter().map(|b| volume(b)).collect();
        let m = occupied.len();
        let mut k = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let v = integral_kernel_eval(spec, &boxes[i], &boxes[j])? / (vols[i] * vols[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        for (i, &b) in occupied.iter().enumerate() {
            let count = grid.counts[b] as f64;
            let laplace_var = dp_values.laplace_scale[b].map_or(0.0, |s| 2.0 * s * s);
            k[(i, i)] += laplace_var + spec.noise_variance / count;
        }
        let offset = grid.population_mean;
        let obs = DVector::from_fn(m, |i, _| dp_values.values[occupied[i]] - offset);
        let chol = cholesky_with_jitter(&k, spec.variance)?;
        let weights = chol.solve(&obs);
        Ok(Self {
            spec: spec.clone(),
            boxes,
            chol,
            weights,
            offset,
        })
    }

    pub fn n_observations(&self) -> usize {
        self.boxes.len()
    }

    /// Posterior mean of the latent function at each row of `xstar`.
    pub fn predict(&self, xstar: &DMatrix<f64>) -> Result<DVector<f64>> {
        let cross = self.cross(xstar)?;
        Ok((cross * &self.weights).add_scalar(self.offset))
    }

    fn cross(&self, xstar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut cross = DMatrix::zeros(xstar.nrows(), self.boxes.len());
        for (i, row) in xstar.row_iter().enumerate() {
            let x: Vec<f64> = row.iter().copied().collect();
            for (j, b) in self.boxes.iter().enumerate() {
                cross[(i, j)] = integral_point_cross(&self.spec, b, &x)? / volume(b);
            }
        }
        Ok(cross)
    }

    /// Posterior variance of the latent function at each row of `xstar`.
    pub fn predict_var(&self, xstar: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut v = self.cross(xstar)?.transpose();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        Ok(DVector::from_fn(xstar.nrows(), |i, _| {
            (self.spec.variance - v.column(i).norm_squared()).max(0.0)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_bins() -> (DMatrix<f64>, DVector<f64>, Vec<Vec<f64>>) {
        let x = DMatrix::from_column_slice(4, 1, &[0.1, 0.4, 0.6, 1.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 4.0, 8.0]);
        (x, y, vec![vec![0.0, 0.5, 1.0]])
    }

    #[test]
    fn single_bin_mean_is_population_mean() {
        let (x, y, _) = two_bins();
        let g = bin_data(&x, &y, vec![vec![0.0, 1.0]]).unwrap();
        assert_eq!(g.means, vec![Some(3.75)]);
        assert_eq!(g.population_mean, 3.75);
    }

    #[test]
    fn two_bins_hand_means() {
        let (x, y, edges) = two_bins();
        let g = bin_data(&x, &y, edges).unwrap();
        assert_eq!(g.counts, vec![2, 2]);
        assert_eq!(g.means, vec![Some(1.5), Some(6.0)]);
    }

    #[test]
    fn bin_data_errors() {
        let (x, y, _) = two_bins();
        let out = bin_data(&x, &y, vec![vec![0.0, 0.5]]);
        assert!(matches!(out, Err(Error::OutOfRange { index: 2, .. })));
        assert!(bin_data(&x, &y, vec![vec![0.0, 1.0], vec![0.0, 1.0]]).is_err());
        assert!(bin_data(&x, &y, vec![vec![0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn half_open_boundaries() {
        let edges = vec![vec![0.0, 0.5, 1.0]];
        assert_eq!(locate(&edges, &[0.5]), Some(1));
        assert_eq!(locate(&edges, &[0.4999]), Some(0));
        assert_eq!(locate(&edges, &[1.0]), Some(1));
        assert_eq!(locate(&edges, &[0.0]), Some(0));
        assert_eq!(locate(&edges, &[1.0001]), None);
    }

    #[test]
    fn row_major_multi_dim() {
        let edges = vec![vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 2.0, 3.0]];
        let x = DMatrix::from_row_slice(2, 2, &[1.5, 2.5, 0.5, 0.5]);
        let g = bin_data(&x, &DVector::from_vec(vec![1.0, 2.0]), edges).unwrap();
        assert_eq!(g.n_bins(), 6);
        assert_eq!(g.counts[5], 1);
        assert_eq!(g.counts[0], 1);
        assert_eq!(g.bin_box(5), vec![(1.0, 2.0), (2.0, 3.0)]);
        assert_relative_eq!(g.occupied_fraction(), 2.0 / 6.0);
    }

    #[test]
    fn empty_bin_gets_population_mean() {
        let x = DMatrix::from_column_slice(2, 1, &[0.1, 0.2]);
        let y = DVector::from_vec(vec![1.0, 3.0]);
        let g = bin_data(&x, &y, vec![vec![0.0, 0.5, 1.0]]).unwrap();
        let dp = DpParams::new(1.0, 0.01, 1.0).unwrap();
        let v = dp_bin_means(&g, &dp, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(v.values[1], 2.0);
        assert_eq!(v.laplace_scale[1], None);
        assert_eq!(v.laplace_scale[0], Some(0.5));
    }

    #[test]
    fn vanishing_noise_recovers_means() {
        let (x, y, edges) = two_bins();
        let g = bin_data(&x, &y, edges).unwrap();
        let dp = DpParams::new(1e6, 0.01, 1.0).unwrap();
        let v = dp_bin_means(&g, &dp, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!((v.values[0] - 1.5).abs() < 1e-3);
        assert!((v.values[1] - 6.0).abs() < 1e-3);
    }

    #[test]
    fn laplace_std_matches_scale() {
        let x = DMatrix::from_column_slice(5, 1, &[0.1, 0.2, 0.3, 0.4, 0.5]);
        let g = bin_data(&x, &DVector::zeros(5), vec![vec![0.0, 1.0]]).unwrap();
        let dp = DpParams::new(1.0, 0.01, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| dp_bin_means(&g, &dp, &mut rng).unwrap().values[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let expected = 0.2 * 2f64.sqrt();
        assert!((sd - expected).abs() / expected < 0.02, "sd {sd}");
        // unbiased within three standard errors
        assert!(mean.abs() < 3.0 * expected / (n as f64).sqrt());
    }

    #[test]
    fn predict_binned_steps_and_flags() {
        let (x, y, edges) = two_bins();
        let g = bin_data(&x, &y, edges).unwrap();
        let xs = DMatrix::from_column_slice(4, 1, &[0.2, 0.3, 0.5, 2.0]);
        let (p, out) = predict_binned(&g, &[10.0, 20.0], &xs).unwrap();
        assert_eq!(p, vec![10.0, 10.0, 20.0, 3.75]);
        assert_eq!(out, vec![false, false, false, true]);
        let single = bin_data(&x, &y, vec![vec![0.0, 1.0]]).unwrap();
        let (p, _) = predict_binned(&single, &[7.0], &xs.rows(0, 3).into_owned()).unwrap();
        assert_eq!(p, vec![7.0; 3]);
    }

    #[test]
    fn integral_kernel_narrow_bins_and_symmetry() {
        let spec = KernelSpec::isotropic(1.7, 2.0, 1, 0.0).unwrap();
        let w = 1e-3;
        let a = [(0.3, 0.3 + w)];
        assert_relative_eq!(integral_kernel_eval(&spec, &a, &a).unwrap(), 1.7 * w * w, max_relative = 1e-6);
        let b = [(1.1, 2.4)];
        assert_eq!(
            integral_kernel_eval(&spec, &a, &b).unwrap(),
            integral_kernel_eval(&spec, &b, &a).unwrap()
        );
        assert!(integral_kernel_eval(&spec, &[(0.0, 0.0)], &b).is_err());
    }

    #[test]
    fn integral_cross_narrow_bin_matches_point_kernel() {
        let spec = KernelSpec::isotropic(1.0, 0.7, 2, 0.0).unwrap();
        let w = 1e-4;
        let a = [(0.2, 0.2 + w), (0.5, 0.5 + w)];
        let v = integral_point_cross(&spec, &a, &[0.9, 0.1]).unwrap() / (w * w);
        assert_relative_eq!(v, spec.eval(&[0.2, 0.5], &[0.9, 0.1]).unwrap(), max_relative = 1e-3);
    }

    #[test]
    fn integral_gp_single_bin_constant() {
        let x = DMatrix::from_column_slice(3, 1, &[0.1, 0.5, 0.9]);
        let y = DVector::from_element(3, 0.0);
        let g = bin_data(&x, &y, vec![vec![0.0, 1.0]]).unwrap();
        // DP value equals the latent constant 0.8 (relative to the zero population mean)
        let dp_values = DpBins {
            values: vec![0.8],
            laplace_scale: vec![None],
        };
        let spec = KernelSpec::isotropic(1.0, 5.0, 1, 1e-6).unwrap();
        let gp = IntegralGp::fit(&g, &dp_values, &spec).unwrap();
        let p = gp.predict(&DMatrix::from_element(1, 1, 0.5)).unwrap()[0];
        // conjugate solve: k_avg(x) / (k_avg_avg + noise / count) * 0.8
        let k_aa = integral_kernel_eval(&spec, &[(0.0, 1.0)], &[(0.0, 1.0)]).unwrap();
        let k_xa = integral_point_cross(&spec, &[(0.0, 1.0)], &[0.5]).unwrap();
        let expected = k_xa / (k_aa + 1e-6 / 3.0) * 0.8;
        assert_relative_eq!(p, expected, epsilon = 1e-10);
        assert!((p - 0.8).abs() < 0.01);
    }
}
