//! Covariance/correlation matrices, spectral decomposition and the
//! reduced-rank construction.
//!
//! Both construction paths start from a K x T return block. The covariance
//! approach computes the standard covariance matrix, removes the dyad of the
//! largest eigenvalue (the market mode) and rescales the residual to a
//! correlation matrix C_B. The correlation approach does the same starting
//! from the standard correlation matrix, yielding C_L.

use nalgebra::{DMatrix, DMatrixView, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which construction path produced a reduced-rank matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    Covariance,
    Correlation,
}

impl Approach {
    pub fn tag(self) -> u32 {
        match self {
            Approach::Covariance => 0,
            Approach::Correlation => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Approach::Covariance),
            1 => Ok(Approach::Correlation),
            t => Err(Error::Format(format!("unknown approach tag {t}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Approach::Covariance => "covariance",
            Approach::Correlation => "correlation",
        }
    }
}

/// Dense symmetric matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    data: DMatrix<f64>,
}

impl SymmetricMatrix {
    /// Wrap a matrix, enforcing exact symmetry and finiteness.
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() != data.ncols() {
            return Err(Error::Numerical("matrix not square".into()));
        }
        for i in 0..data.nrows() {
            for j in 0..i {
                if data[(i, j)] != data[(j, i)] {
                    return Err(Error::Numerical(format!(
                        "asymmetry at ({i},{j}): {} vs {}",
                        data[(i, j)],
                        data[(j, i)]
                    )));
                }
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite matrix entry".into()));
        }
        Ok(SymmetricMatrix { data })
    }

    /// Build from the upper triangle of `f`, mirroring the lower one.
    pub fn from_upper_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                data[(i, j)] = v;
                data[(j, i)] = v;
            }
        }
        SymmetricMatrix { data }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        self.data.trace()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[(i, j)]
    }
}

impl std::ops::Index<(usize, usize)> for SymmetricMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.data[idx]
    }
}

/// Full eigensystem of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SpectralResult {
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors as columns, same order as `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
}

impl SpectralResult {
    /// The largest eigenpair (last position in ascending order).
    pub fn largest(&self) -> (f64, DVector<f64>) {
        let k = self.eigenvalues.len() - 1;
        (self.eigenvalues[k], self.eigenvectors.column(k).into_owned())
    }

    /// Max-norm deviation of U^T U from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let u = &self.eigenvectors;
        let g = u.transpose() * u;
        let mut worst: f64 = 0.0;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }

    /// Max-norm deviation of sum_i k_i u_i u_i^T from `m`.
    pub fn reconstruction_defect(&self, m: &SymmetricMatrix) -> f64 {
        let u = &self.eigenvectors;
        let rebuilt = u * DMatrix::from_diagonal(&self.eigenvalues) * u.transpose();
        (rebuilt - m.matrix()).abs().max()
    }
}

/// Standard covariance matrix Sigma = (1/T) A A^T with row-mean-removed A.
///
/// The divisor is T, not T - 1.
pub fn covariance_matrix(block: DMatrixView<'_, f64>) -> SymmetricMatrix {
    let (k, t) = block.shape();
    debug_assert!(t >= 2 && k >= 2);
    let mut centered = block.clone_owned();
    for i in 0..k {
        let mean = centered.row(i).sum() / t as f64;
        for j in 0..t {
            centered[(i, j)] -= mean;
        }
    }
    gram_over_t(&centered)
}

/// Standard correlation matrix C = (1/T) M M^T with rows normalized to mean
/// zero and standard deviation one. The diagonal is exactly one.
pub fn correlation_matrix(block: DMatrixView<'_, f64>) -> Result<SymmetricMatrix> {
    let (k, t) = block.shape();
    let mut normalized = block.clone_owned();
    for i in 0..k {
        let mean = normalized.row(i).sum() / t as f64;
        let mut var = 0.0;
        for j in 0..t {
            let d = normalized[(i, j)] - mean;
            var += d * d;
        }
        var /= t as f64;
        if var <= 0.0 {
            return Err(Error::DegenerateWindow {
                row: i,
                ticker: None,
                window: None,
            });
        }
        let sd = var.sqrt();
        for j in 0..t {
            normalized[(i, j)] = (normalized[(i, j)] - mean) / sd;
        }
    }
    let mut c = gram_over_t(&normalized);
    // Unit diagonal exactly, by construction of the normalization.
    for i in 0..k {
        c.data[(i, i)] = 1.0;
    }
    Ok(c)
}

fn gram_over_t(rows: &DMatrix<f64>) -> SymmetricMatrix {
    let (k, t) = rows.shape();
    let inv_t = 1.0 / t as f64;
    SymmetricMatrix::from_upper_fn(k, |i, j| rows.row(i).dot(&rows.row(j)) * inv_t)
}

/// Eigenvector sign convention: entry sum >= 0, ties broken by the first
/// nonzero entry.
fn fix_sign(col: &mut nalgebra::DVectorViewMut<'_, f64>) {
    let s: f64 = col.iter().sum();
    let flip = if s != 0.0 {
        s < 0.0
    } else {
        match col.iter().find(|v| **v != 0.0) {
            Some(v) => *v < 0.0,
            None => false,
        }
    };
    if flip {
        col.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Full symmetric eigendecomposition with ascending eigenvalues.
pub fn spectral_decompose(m: &SymmetricMatrix) -> Result<SpectralResult> {
    let dim = m.dim();
    let eig = nalgebra::SymmetricEigen::try_new(m.matrix().clone(), 1e-12, 10_000)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut eigenvalues = DVector::zeros(dim);
    let mut eigenvectors = DMatrix::zeros(dim, dim);
    for (pos, &src) in order.iter().enumerate() {
        eigenvalues[pos] = eig.eigenvalues[src];
        eigenvectors.column_mut(pos).copy_from(&eig.eigenvectors.column(src));
        fix_sign(&mut eigenvectors.column_mut(pos));
    }
    if eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite eigenvalue".into()));
    }
    Ok(SpectralResult {
        eigenvalues,
        eigenvectors,
    })
}

/// Index of the dyad to subtract. When the top eigenvalue is degenerate the
/// candidate whose eigenvector maximizes |sum of entries| wins.
pub fn top_dyad_index(s: &SpectralResult) -> usize {
    let n = s.eigenvalues.len();
    let top = s.eigenvalues[n - 1];
    let tol = 1e-12 * top.abs().max(1.0);
    let mut best = n - 1;
    let mut best_score = s.eigenvectors.column(n - 1).sum().abs();
    for i in (0..n - 1).rev() {
        if top - s.eigenvalues[i] > tol {
            break;
        }
        let score = s.eigenvectors.column(i).sum().abs();
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    best
}

/// Remove the market dyad: m - k_K u_K u_K^T.
pub fn subtract_market_dyad(m: &SymmetricMatrix, s: &SpectralResult) -> SymmetricMatrix {
    let idx = top_dyad_index(s);
    let kappa = s.eigenvalues[idx];
    let u = s.eigenvectors.column(idx);
    SymmetricMatrix::from_upper_fn(m.dim(), |i, j| m.get(i, j) - kappa * u[i] * u[j])
}

/// Threshold below which a residual variance counts as analytically zero.
pub const EPS_VAR: f64 = 1e-14;

/// Reduced-rank correlation matrix tagged with its construction path.
#[derive(Debug, Clone)]
pub struct ReducedRankCorr {
    pub approach: Approach,
    pub matrix: SymmetricMatrix,
    pub window_index: usize,
    /// The K rescaling standard deviations (sigma_B or sigma_L).
    pub sigma_diag: Vec<f64>,
}

impl ReducedRankCorr {
    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }
}

/// Rescale a residual covariance matrix to unit diagonal.
pub fn rescale_to_correlation(
    m: &SymmetricMatrix,
    approach: Approach,
    window_index: usize,
) -> Result<ReducedRankCorr> {
    let dim = m.dim();
    let mut sigma = Vec::with_capacity(dim);
    for i in 0..dim {
        let var = m.get(i, i);
        if var < -1e-10 {
            return Err(Error::Numerical(format!(
                "negative residual variance {var} for asset {i}"
            )));
        }
        if var <= EPS_VAR {
            return Err(Error::DegenerateResidual {
                asset: i.to_string(),
            });
        }
        sigma.push(var.sqrt());
    }
    let mut matrix = SymmetricMatrix::from_upper_fn(dim, |i, j| m.get(i, j) / (sigma[i] * sigma[j]));
    for i in 0..dim {
        matrix.data[(i, i)] = 1.0;
    }
    Ok(ReducedRankCorr {
        approach,
        matrix,
        window_index,
        sigma_diag: sigma,
    })
}

/// Full construction path for one window block.
pub fn reduced_rank_pipeline(
    block: DMatrixView<'_, f64>,
    approach: Approach,
) -> Result<ReducedRankCorr> {
    let base = match approach {
        Approach::Covariance => covariance_matrix(block),
        Approach::Correlation => correlation_matrix(block)?,
    };
    let spec = spectral_decompose(&base)?;
    let residual = subtract_market_dyad(&base, &spec);
    rescale_to_correlation(&residual, approach, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_block(k: usize, t: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(k, t, |_, _| rng.gen::<f64>() - 0.5)
    }

    #[test]
    fn covariance_of_identical_pm_one_rows() {
        let block = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 1.0, -1.0]);
        let cov = covariance_matrix(block.view((0, 0), (2, 2)));
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(cov.get(i, j), 1.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn constant_row_gives_zero_row_and_column() {
        let block = DMatrix::from_row_slice(2, 4, &[3.0, 3.0, 3.0, 3.0, 1.0, 2.0, 3.0, 4.0]);
        let cov = covariance_matrix(block.view((0, 0), (2, 4)));
        assert_eq!(cov.get(0, 0), 0.0);
        assert_eq!(cov.get(0, 1), 0.0);
        assert_eq!(cov.get(1, 0), 0.0);
        assert!(cov.get(1, 1) > 0.0);
    }

    #[test]
    fn covariance_matches_double_loop_oracle() {
        let block = random_block(4, 10, 1);
        let cov = covariance_matrix(block.view((0, 0), (4, 10)));
        // Independent elementwise-sum oracle.
        for i in 0..4 {
            for j in 0..4 {
                let mi = block.row(i).sum() / 10.0;
                let mj = block.row(j).sum() / 10.0;
                let mut s = 0.0;
                for t in 0..10 {
                    s += (block[(i, t)] - mi) * (block[(j, t)] - mj);
                }
                assert_abs_diff_eq!(cov.get(i, j), s / 10.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn correlation_perfect_and_anti() {
        let r = [0.3, -0.1, 0.7, 0.2];
        let mut data = Vec::new();
        data.extend_from_slice(&r);
        data.extend(r.iter().map(|v| 2.0 * v));
        data.extend(r.iter().map(|v| -v));
        let block = DMatrix::from_row_slice(3, 4, &data);
        let c = correlation_matrix(block.view((0, 0), (3, 4))).unwrap();
        assert_abs_diff_eq!(c.get(0, 1), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c.get(0, 2), -1.0, epsilon = 1e-14);
        assert_eq!(c.get(0, 0), 1.0);
    }

    #[test]
    fn correlation_matches_pearson_oracle() {
        let block = random_block(5, 50, 2);
        let c = correlation_matrix(block.view((0, 0), (5, 50))).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let t = 50.0;
                let mi = block.row(i).sum() / t;
                let mj = block.row(j).sum() / t;
                let (mut sij, mut sii, mut sjj) = (0.0, 0.0, 0.0);
                for a in 0..50 {
                    let di = block[(i, a)] - mi;
                    let dj = block[(j, a)] - mj;
                    sij += di * dj;
                    sii += di * di;
                    sjj += dj * dj;
                }
                let pearson = sij / (sii.sqrt() * sjj.sqrt());
                assert_abs_diff_eq!(c.get(i, j), pearson, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn correlation_trace_is_k_exactly() {
        let block = random_block(7, 30, 3);
        let c = correlation_matrix(block.view((0, 0), (7, 30))).unwrap();
        assert_eq!(c.trace(), 7.0);
    }

    #[test]
    fn zero_variance_row_is_degenerate() {
        let block = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 0.1, 0.2, 0.3]);
        let err = correlation_matrix(block.view((0, 0), (2, 3))).unwrap_err();
        assert!(matches!(err, Error::DegenerateWindow { row: 0, .. }));
    }

    #[test]
    fn identity_eigenvalues() {
        let m = SymmetricMatrix::new(DMatrix::identity(3, 3)).unwrap();
        let s = spectral_decompose(&m).unwrap();
        for v in s.eigenvalues.iter() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn all_ones_two_by_two_spectrum() {
        let m = SymmetricMatrix::new(DMatrix::from_element(2, 2, 1.0)).unwrap();
        let s = spectral_decompose(&m).unwrap();
        assert_abs_diff_eq!(s.eigenvalues[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.eigenvalues[1], 2.0, epsilon = 1e-12);
        let (_, u) = s.largest();
        let inv_sqrt2 = 1.0 / 2f64.sqrt();
        assert_abs_diff_eq!(u[0], inv_sqrt2, epsilon = 1e-12);
        assert_abs_diff_eq!(u[1], inv_sqrt2, epsilon = 1e-12);
    }

    #[test]
    fn tridiagonal_spectrum_matches_characteristic_polynomial() {
        // det([[2-x,1,0],[1,2-x,1],[0,1,2-x]]) = (2-x)((2-x)^2 - 2)
        let m = SymmetricMatrix::new(DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0],
        ))
        .unwrap();
        let s = spectral_decompose(&m).unwrap();
        let sqrt2 = 2f64.sqrt();
        assert_abs_diff_eq!(s.eigenvalues[0], 2.0 - sqrt2, epsilon = 1e-10);
        assert_abs_diff_eq!(s.eigenvalues[1], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(s.eigenvalues[2], 2.0 + sqrt2, epsilon = 1e-10);
        assert!(s.orthonormality_defect() <= 1e-10);
        assert!(s.reconstruction_defect(&m) <= 1e-8);
    }

    #[test]
    fn dyad_subtraction_of_rank_one_input_is_zero() {
        let u = DVector::from_vec(vec![0.6, 0.8]);
        let m = SymmetricMatrix::from_upper_fn(2, |i, j| 3.0 * u[i] * u[j]);
        let s = spectral_decompose(&m).unwrap();
        let r = subtract_market_dyad(&m, &s);
        assert!(r.matrix().abs().max() <= 1e-10);
    }

    #[test]
    fn dyad_subtraction_of_identity() {
        let m = SymmetricMatrix::new(DMatrix::identity(2, 2)).unwrap();
        let s = spectral_decompose(&m).unwrap();
        let r = subtract_market_dyad(&m, &s);
        assert_abs_diff_eq!(r.trace(), 1.0, epsilon = 1e-12);
        let rs = spectral_decompose(&r).unwrap();
        assert_abs_diff_eq!(rs.eigenvalues[0], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(rs.eigenvalues[1], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn dyad_of_equicorrelation_matrix_closed_form() {
        // J + 0.1 I has top dyad (3 + 0.1) (1/sqrt(3)) 1, so the residual is
        // 0.1 (I - J/3).
        let j = DMatrix::from_element(3, 3, 1.0);
        let m = SymmetricMatrix::new(&j + 0.1 * DMatrix::identity(3, 3)).unwrap();
        let s = spectral_decompose(&m).unwrap();
        let r = subtract_market_dyad(&m, &s);
        let expected: DMatrix<f64> = 0.1 * (DMatrix::identity(3, 3) - j / 3.0);
        assert!((r.matrix() - &expected).abs().max() <= 1e-10);
    }

    #[test]
    fn trace_law_after_dyad_removal() {
        let block = random_block(6, 40, 4);
        let cov = covariance_matrix(block.view((0, 0), (6, 40)));
        let s = spectral_decompose(&cov).unwrap();
        let (kappa, _) = s.largest();
        let r = subtract_market_dyad(&cov, &s);
        assert_abs_diff_eq!(r.trace(), cov.trace() - kappa, epsilon = 1e-10);
    }

    #[test]
    fn rescale_simple_two_by_two() {
        let m = SymmetricMatrix::new(DMatrix::from_row_slice(2, 2, &[4.0, 3.0, 3.0, 9.0])).unwrap();
        let c = rescale_to_correlation(&m, Approach::Covariance, 0).unwrap();
        assert_eq!(c.matrix.get(0, 0), 1.0);
        assert_abs_diff_eq!(c.matrix.get(0, 1), 0.5, epsilon = 1e-15);
        assert_eq!(c.sigma_diag, vec![2.0, 3.0]);
    }

    #[test]
    fn perfectly_collective_pair_is_degenerate() {
        // Two assets with correlation exactly one: the residual after dyad
        // removal has zero diagonal.
        let block = DMatrix::from_row_slice(2, 4, &[0.1, -0.2, 0.3, 0.0, 0.2, -0.4, 0.6, 0.0]);
        let err = reduced_rank_pipeline(block.view((0, 0), (2, 4)), Approach::Correlation).unwrap_err();
        assert!(matches!(err, Error::DegenerateResidual { .. }));
    }

    #[test]
    fn approaches_coincide_under_unit_variance() {
        // Normalize rows to exactly unit population variance and zero mean.
        let raw = random_block(6, 80, 5);
        let mut block = raw.clone();
        for i in 0..6 {
            let t = 80.0;
            let mean = block.row(i).sum() / t;
            let mut var = 0.0;
            for j in 0..80 {
                let d = block[(i, j)] - mean;
                var += d * d;
            }
            var /= t;
            let sd = var.sqrt();
            for j in 0..80 {
                block[(i, j)] = (block[(i, j)] - mean) / sd;
            }
        }
        let cb = reduced_rank_pipeline(block.view((0, 0), (6, 80)), Approach::Covariance).unwrap();
        let cl = reduced_rank_pipeline(block.view((0, 0), (6, 80)), Approach::Correlation).unwrap();
        assert!((cb.matrix.matrix() - cl.matrix.matrix()).abs().max() <= 1e-10);
    }

    fn mean_off_diagonal(m: &SymmetricMatrix) -> f64 {
        let k = m.dim();
        let mut sum = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    sum += m.get(i, j);
                }
            }
        }
        sum / (k * (k - 1)) as f64
    }

    #[test]
    fn independent_noise_residual_is_slightly_negative() {
        // Removing the (weak) top dyad of a near-identity matrix pushes the
        // average off-diagonal below zero, bounded by the equal-weight
        // residual level -1/(K-1).
        let k = 20;
        let t = 1000;
        let block = random_block(k, t, 6);
        let cb = reduced_rank_pipeline(block.view((0, 0), (k, t)), Approach::Covariance).unwrap();
        let mean_off = mean_off_diagonal(&cb.matrix);
        let floor = -2.0 / (k as f64 - 1.0);
        assert!(
            mean_off < 0.0 && mean_off > floor,
            "mean off-diagonal {mean_off} outside ({floor}, 0)"
        );
    }

    #[test]
    fn collective_market_residual_hits_equal_weight_level() {
        // When a dominant uniform market mode is removed, the reduced-rank
        // off-diagonals settle at the equal-weight residual level -1/(K-1).
        use rand_distr::{Distribution, StandardNormal};
        let k = 20;
        let t = 1000;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let normal = StandardNormal;
        let mut block = DMatrix::zeros(k, t);
        for j in 0..t {
            let f: f64 = normal.sample(&mut rng);
            for i in 0..k {
                let eps: f64 = normal.sample(&mut rng);
                block[(i, j)] = 3.0 * f + 0.5 * eps;
            }
        }
        let cb = reduced_rank_pipeline(block.view((0, 0), (k, t)), Approach::Covariance).unwrap();
        let mean_off = mean_off_diagonal(&cb.matrix);
        let predicted = -1.0 / (k as f64 - 1.0);
        assert!(
            (mean_off - predicted).abs() <= 0.05,
            "mean off-diagonal {mean_off} vs predicted {predicted}"
        );
    }

    #[test]
    fn paper_shape_rank_deficiency() {
        // K > T: rank of the reduced-rank matrix is at most T - 2 before
        // rescaling, so far fewer than K eigenvalues exceed the tolerance.
        let k = 60;
        let t = 42;
        let block = random_block(k, t, 7);
        let cb = reduced_rank_pipeline(block.view((0, 0), (k, t)), Approach::Covariance).unwrap();
        let s = spectral_decompose(&cb.matrix).unwrap();
        let rank = s.eigenvalues.iter().filter(|v| **v > 1e-8).count();
        assert!(rank <= t - 2, "rank {rank} exceeds {}", t - 2);
        assert!(s.eigenvalues[0] >= -1e-8);
    }

    #[test]
    fn scale_invariance_of_correlation() {
        let block = random_block(5, 60, 8);
        let c1 = correlation_matrix(block.view((0, 0), (5, 60))).unwrap();
        let mut scaled = block.clone();
        for j in 0..60 {
            scaled[(2, j)] *= 37.5;
        }
        let c2 = correlation_matrix(scaled.view((0, 0), (5, 60))).unwrap();
        assert!((c1.matrix() - c2.matrix()).abs().max() <= 1e-12);
    }

    #[test]
    fn permutation_equivariance() {
        let block = random_block(5, 30, 9);
        let c = correlation_matrix(block.view((0, 0), (5, 30))).unwrap();
        let perm = [2usize, 0, 4, 1, 3];
        let mut permuted = DMatrix::zeros(5, 30);
        for (new_i, &old_i) in perm.iter().enumerate() {
            permuted.row_mut(new_i).copy_from(&block.row(old_i));
        }
        let cp = correlation_matrix(permuted.view((0, 0), (5, 30))).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_abs_diff_eq!(cp.get(i, j), c.get(perm[i], perm[j]), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sigma_identity_holds() {
        // Sigma = Sigma_B + kappa_K u_K u_K^T in max norm.
        let block = random_block(8, 50, 10);
        let cov = covariance_matrix(block.view((0, 0), (8, 50)));
        let s = spectral_decompose(&cov).unwrap();
        let (kappa, u) = s.largest();
        let r = subtract_market_dyad(&cov, &s);
        let rebuilt = r.matrix() + kappa * &u * u.transpose();
        assert!((rebuilt - cov.matrix()).abs().max() <= 1e-10);
    }
}
