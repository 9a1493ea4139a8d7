//! Indicator time series derived from sliding-window matrices: mean matrix
//! values, pairwise distance matrices and cutoff-filtered averaged distances,
//! plus the equal-weight sector price index.

use chrono::NaiveDate;
use nalgebra::DMatrixView;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{PricePanel, SectorMap};
use crate::spectral::{
    self, Approach, ReducedRankCorr, SymmetricMatrix,
};

/// The six mean-value series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndicatorName {
    /// Mean of the standard covariance matrix.
    MeanCovSigma,
    /// Mean of the covariance matrix after dyad removal (covariance approach).
    MeanCovSigmaB,
    /// Mean of the residual matrix in the correlation approach.
    MeanCovSigmaL,
    /// Mean of the standard correlation matrix.
    MeanCorrC,
    /// Mean of the reduced-rank correlation matrix C_B.
    MeanCorrCB,
    /// Mean of the reduced-rank correlation matrix C_L.
    MeanCorrCL,
}

impl IndicatorName {
    pub fn all() -> [IndicatorName; 6] {
        [
            IndicatorName::MeanCovSigma,
            IndicatorName::MeanCovSigmaB,
            IndicatorName::MeanCovSigmaL,
            IndicatorName::MeanCorrC,
            IndicatorName::MeanCorrCB,
            IndicatorName::MeanCorrCL,
        ]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IndicatorName::MeanCovSigma => "mean_cov_sigma",
            IndicatorName::MeanCovSigmaB => "mean_cov_sigma_b",
            IndicatorName::MeanCovSigmaL => "mean_cov_sigma_l",
            IndicatorName::MeanCorrC => "mean_corr_c",
            IndicatorName::MeanCorrCB => "mean_corr_c_b",
            IndicatorName::MeanCorrCL => "mean_corr_c_l",
        }
    }

    /// The construction path this series depends on.
    pub fn approach(self) -> Approach {
        match self {
            IndicatorName::MeanCovSigma
            | IndicatorName::MeanCovSigmaB
            | IndicatorName::MeanCorrCB => Approach::Covariance,
            _ => Approach::Correlation,
        }
    }
}

/// One scalar per window; degenerate windows appear as gaps.
#[derive(Debug, Clone)]
pub struct IndicatorSeries {
    pub name: IndicatorName,
    pub timestamps: Vec<NaiveDate>,
    pub values: Vec<Option<f64>>,
}

/// Average of all matrix elements, diagonal included.
pub fn mean_matrix_value(m: &SymmetricMatrix) -> f64 {
    let k = m.dim() as f64;
    m.matrix().sum() / (k * k)
}

/// Everything computed from a single window block under one approach.
pub struct WindowOutputs {
    /// Mean of the standard matrix (Sigma or C).
    pub mean_standard: f64,
    /// Mean of the residual matrix after dyad removal (Sigma_B or Sigma_L).
    pub mean_residual: f64,
    /// Mean of the reduced-rank correlation matrix (C_B or C_L).
    pub mean_reduced: f64,
    pub reduced: ReducedRankCorr,
}

/// Run one approach on one window block.
pub fn compute_window(
    block: DMatrixView<'_, f64>,
    approach: Approach,
    window_index: usize,
) -> Result<WindowOutputs> {
    let base = match approach {
        Approach::Covariance => spectral::covariance_matrix(block),
        Approach::Correlation => spectral::correlation_matrix(block)?,
    };
    let spec = spectral::spectral_decompose(&base)?;
    let residual = spectral::subtract_market_dyad(&base, &spec);
    let reduced = spectral::rescale_to_correlation(&residual, approach, window_index)?;
    Ok(WindowOutputs {
        mean_standard: mean_matrix_value(&base),
        mean_residual: mean_matrix_value(&residual),
        mean_reduced: mean_matrix_value(&reduced.matrix),
        reduced,
    })
}

/// Per-window failure captured as a gap, never silently interpolated.
#[derive(Debug, Clone, Serialize)]
pub struct WindowDiagnostic {
    pub window: usize,
    pub approach: Approach,
    pub error: String,
}

/// Results of the sliding-window stage for one approach.
pub struct ApproachSeries {
    pub approach: Approach,
    pub mean_standard: Vec<Option<f64>>,
    pub mean_residual: Vec<Option<f64>>,
    pub mean_reduced: Vec<Option<f64>>,
    /// Packed upper-triangle vectors of the reduced-rank matrices, weight
    /// sqrt(2) on off-diagonal entries; None for degenerate windows.
    pub packed: Vec<Option<Vec<f64>>>,
    pub diagnostics: Vec<WindowDiagnostic>,
}

/// Pack the upper triangle of a reduced-rank matrix for distance work.
///
/// Off-diagonal entries carry weight sqrt(2) so squared Euclidean distances
/// between packed vectors match the full-matrix double sum.
pub fn pack_upper(m: &SymmetricMatrix) -> Vec<f64> {
    let dim = m.dim();
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut v = Vec::with_capacity(dim * (dim + 1) / 2);
    for i in 0..dim {
        v.push(m.get(i, i));
        for j in i + 1..dim {
            v.push(sqrt2 * m.get(i, j));
        }
    }
    v
}

/// Compute one approach over every window of a grid, in parallel.
pub fn approach_series(
    rp: &crate::market_data::ReturnPanel,
    grid: &crate::market_data::WindowGrid,
    approach: Approach,
) -> ApproachSeries {
    // Keep only the three means and the packed vector per window; the full
    // K x K matrices would hold gigabytes at paper scale.
    let results: Vec<std::result::Result<(f64, f64, f64, Vec<f64>), String>> = grid
        .windows
        .par_iter()
        .enumerate()
        .map(|(idx, &w)| {
            compute_window(rp.window_block(w), approach, idx)
                .map(|out| {
                    let packed = pack_upper(&out.reduced.matrix);
                    (out.mean_standard, out.mean_residual, out.mean_reduced, packed)
                })
                .map_err(|e| e.to_string())
        })
        .collect();

    let n = results.len();
    let mut out = ApproachSeries {
        approach,
        mean_standard: Vec::with_capacity(n),
        mean_residual: Vec::with_capacity(n),
        mean_reduced: Vec::with_capacity(n),
        packed: Vec::with_capacity(n),
        diagnostics: Vec::new(),
    };
    for (idx, r) in results.into_iter().enumerate() {
        match r {
            Ok((standard, residual, reduced, packed)) => {
                out.mean_standard.push(Some(standard));
                out.mean_residual.push(Some(residual));
                out.mean_reduced.push(Some(reduced));
                out.packed.push(Some(packed));
            }
            Err(e) => {
                out.mean_standard.push(None);
                out.mean_residual.push(None);
                out.mean_reduced.push(None);
                out.packed.push(None);
                out.diagnostics.push(WindowDiagnostic {
                    window: idx,
                    approach,
                    error: e,
                });
            }
        }
    }
    out
}

/// Symmetric matrix of pairwise scaled Euclidean distances between windows.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub approach: Approach,
    pub dim: usize,
    /// Row-major dense storage; NaN marks rows/columns of degenerate windows.
    pub values: Vec<f64>,
    pub cutoff: f64,
}

impl DistanceMatrix {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.dim + b]
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.values[a * self.dim..(a + 1) * self.dim]
    }
}

/// Distance between two packed vectors: sqrt(sum of squared differences) / K,
/// summed in index order.
pub fn packed_distance(a: &[f64], b: &[f64], k: usize) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt() / k as f64
}

/// Distance row of `a` against all windows, in index order.
pub fn distance_row(packed: &[Option<Vec<f64>>], a: usize, k: usize) -> Vec<f64> {
    let va = packed[a].as_ref();
    packed
        .iter()
        .map(|vb| match (va, vb.as_ref()) {
            (Some(x), Some(y)) => packed_distance(x, y, k),
            _ => f64::NAN,
        })
        .collect()
}

/// Full distance matrix over the packed reduced-rank matrices of one
/// approach. Rows are computed in parallel; within a row the summation order
/// is fixed, so the result is independent of the thread count.
pub fn distance_matrix_packed(
    packed: &[Option<Vec<f64>>],
    k: usize,
    approach: Approach,
    cutoff: f64,
) -> DistanceMatrix {
    let n = packed.len();
    let mut values = vec![0.0; n * n];
    values
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(a, row)| row.copy_from_slice(&distance_row(packed, a, k)));
    // Exact zero diagonal and symmetry by copying the upper triangle.
    for a in 0..n {
        values[a * n + a] = if packed[a].is_some() { 0.0 } else { f64::NAN };
        for b in a + 1..n {
            values[b * n + a] = values[a * n + b];
        }
    }
    DistanceMatrix {
        approach,
        dim: n,
        values,
        cutoff,
    }
}

/// Distance matrix from a list of reduced-rank matrices sharing dimension
/// and approach.
pub fn distance_matrix(mats: &[ReducedRankCorr], cutoff: f64) -> Result<DistanceMatrix> {
    let first = mats
        .first()
        .ok_or_else(|| Error::config("empty matrix list".to_string()))?;
    let (k, approach) = (first.dim(), first.approach);
    for m in mats {
        if m.approach != approach {
            return Err(Error::config("mixed approaches in distance matrix".to_string()));
        }
        if m.dim() != k {
            return Err(Error::config("mixed dimensions in distance matrix".to_string()));
        }
    }
    let packed: Vec<Option<Vec<f64>>> = mats.iter().map(|m| Some(pack_upper(&m.matrix))).collect();
    Ok(distance_matrix_packed(&packed, k, approach, cutoff))
}

/// How the averaged distance divides the surviving terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivisorMode {
    /// Divide by the number of entries >= cutoff (default).
    Survivors,
    /// Divide by the full baseline length t_c.
    Baseline,
}

/// Per-row averaged distances over a fixed baseline column range.
#[derive(Debug, Clone)]
pub struct AveragedDistanceSeries {
    pub approach: Approach,
    /// Baseline length t_c: columns 0..t_c enter the average.
    pub baseline_end: usize,
    /// None where no entry survived the cutoff.
    pub values: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

/// Average each row of the distance matrix over the baseline columns,
/// excluding entries below the cutoff from both the sum and (in `Survivors`
/// mode) the divisor.
pub fn averaged_distance(
    dm: &DistanceMatrix,
    t_c: usize,
    cutoff: f64,
    mode: DivisorMode,
) -> Result<AveragedDistanceSeries> {
    if t_c == 0 || t_c > dm.dim {
        return Err(Error::config(format!(
            "baseline end {t_c} out of range 1..={}",
            dm.dim
        )));
    }
    let mut values = Vec::with_capacity(dm.dim);
    let mut counts = Vec::with_capacity(dm.dim);
    for a in 0..dm.dim {
        let row = dm.row(a);
        let mut sum = 0.0;
        let mut count = 0usize;
        for &z in &row[..t_c] {
            if z.is_nan() {
                continue;
            }
            if z >= cutoff {
                sum += z;
                count += 1;
            }
        }
        counts.push(count);
        if count == 0 {
            values.push(None);
        } else {
            let divisor = match mode {
                DivisorMode::Survivors => count as f64,
                DivisorMode::Baseline => t_c as f64,
            };
            values.push(Some(sum / divisor));
        }
    }
    Ok(AveragedDistanceSeries {
        approach: dm.approach,
        baseline_end: t_c,
        values,
        counts,
    })
}

/// Equal-weight average of member adjusted closing prices per date.
#[derive(Debug, Clone)]
pub struct SectorIndex {
    pub sector: String,
    pub timestamps: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

pub fn sector_index(panel: &PricePanel, sm: &SectorMap, sector: &str) -> Result<SectorIndex> {
    let members = sm.members_of(sector);
    if members.is_empty() {
        return Err(Error::config(format!("unknown or empty sector {sector}")));
    }
    let rows: Vec<usize> = members
        .iter()
        .filter_map(|m| panel.tickers.iter().position(|t| t == m))
        .collect();
    if rows.is_empty() {
        return Err(Error::config(format!(
            "sector {sector} has no members in the panel"
        )));
    }
    let values = (0..panel.dates.len())
        .map(|j| rows.iter().map(|&i| panel.prices[(i, j)]).sum::<f64>() / rows.len() as f64)
        .collect();
    Ok(SectorIndex {
        sector: sector.to_string(),
        timestamps: panel.dates.clone(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_of_identity() {
        let m = SymmetricMatrix::new(DMatrix::identity(4, 4)).unwrap();
        assert_abs_diff_eq!(mean_matrix_value(&m), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn mean_of_all_ones() {
        let m = SymmetricMatrix::new(DMatrix::from_element(5, 5, 1.0)).unwrap();
        assert_abs_diff_eq!(mean_matrix_value(&m), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn paper_scale_offdiagonal_pair_count() {
        let k = 250usize;
        assert_eq!(k * (k - 1) / 2, 31125);
    }

    #[test]
    fn mean_value_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = SymmetricMatrix::from_upper_fn(6, |_, _| rng.gen::<f64>());
        let b = SymmetricMatrix::from_upper_fn(6, |_, _| rng.gen::<f64>());
        let (alpha, beta) = (1.7, -0.3);
        let combo =
            SymmetricMatrix::new(alpha * a.matrix() + beta * b.matrix()).unwrap();
        assert_abs_diff_eq!(
            mean_matrix_value(&combo),
            alpha * mean_matrix_value(&a) + beta * mean_matrix_value(&b),
            epsilon = 1e-12
        );
    }

    #[test]
    fn equicorrelation_mean_including_diagonal() {
        // <c> = (1 + (K-1) rho) / K for an exact equicorrelation matrix.
        let k = 10;
        let rho = 0.3;
        let m = SymmetricMatrix::from_upper_fn(k, |i, j| if i == j { 1.0 } else { rho });
        let expected = (1.0 + (k as f64 - 1.0) * rho) / k as f64;
        assert_abs_diff_eq!(mean_matrix_value(&m), expected, epsilon = 1e-14);
    }

    fn packed_from(mats: &[SymmetricMatrix]) -> Vec<Option<Vec<f64>>> {
        mats.iter().map(|m| Some(pack_upper(m))).collect()
    }

    #[test]
    fn identical_matrices_distance_zero() {
        let m = SymmetricMatrix::from_upper_fn(4, |i, j| if i == j { 1.0 } else { 0.2 });
        let packed = packed_from(&[m.clone(), m]);
        let dm = distance_matrix_packed(&packed, 4, Approach::Covariance, 0.0);
        assert_eq!(dm.get(0, 1), 0.0);
        assert_eq!(dm.get(0, 0), 0.0);
    }

    #[test]
    fn worst_case_distance_bound() {
        // Unit diagonals and off-diagonals +1 vs -1: per-entry difference 2
        // off the diagonal, so zeta = sqrt(4 K (K-1)) / K < 2.
        let k = 6;
        let a = SymmetricMatrix::from_upper_fn(k, |i, j| if i == j { 1.0 } else { 1.0 });
        let b = SymmetricMatrix::from_upper_fn(k, |i, j| if i == j { 1.0 } else { -1.0 });
        let packed = packed_from(&[a, b]);
        let dm = distance_matrix_packed(&packed, k, Approach::Covariance, 0.0);
        let expected = (4.0 * (k * (k - 1)) as f64).sqrt() / k as f64;
        assert_abs_diff_eq!(dm.get(0, 1), expected, epsilon = 1e-12);
        assert!(dm.get(0, 1) <= 2.0);
    }

    #[test]
    fn distance_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = 7;
        let mats: Vec<SymmetricMatrix> = (0..4)
            .map(|_| SymmetricMatrix::from_upper_fn(k, |i, j| {
                if i == j {
                    1.0
                } else {
                    rng.gen::<f64>() - 0.5
                }
            }))
            .collect();
        let packed = packed_from(&mats);
        let dm = distance_matrix_packed(&packed, k, Approach::Covariance, 0.0);
        for a in 0..4 {
            for b in 0..4 {
                let mut s = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        let d = mats[a].get(i, j) - mats[b].get(i, j);
                        s += d * d;
                    }
                }
                let oracle = s.sqrt() / k as f64;
                assert_abs_diff_eq!(dm.get(a, b), oracle, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn distance_metric_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let k = 5;
        let mats: Vec<SymmetricMatrix> = (0..6)
            .map(|_| SymmetricMatrix::from_upper_fn(k, |i, j| {
                if i == j {
                    1.0
                } else {
                    rng.gen::<f64>() - 0.5
                }
            }))
            .collect();
        let packed = packed_from(&mats);
        let dm = distance_matrix_packed(&packed, k, Approach::Covariance, 0.0);
        for a in 0..6 {
            assert_eq!(dm.get(a, a), 0.0);
            for b in 0..6 {
                assert_eq!(dm.get(a, b), dm.get(b, a));
                for c in 0..6 {
                    assert!(dm.get(a, b) <= dm.get(a, c) + dm.get(c, b) + 1e-10);
                }
            }
        }
    }

    #[test]
    fn mixed_approach_rejected() {
        use crate::spectral::{Approach, ReducedRankCorr};
        let m = SymmetricMatrix::from_upper_fn(3, |i, j| if i == j { 1.0 } else { 0.1 });
        let a = ReducedRankCorr {
            approach: Approach::Covariance,
            matrix: m.clone(),
            window_index: 0,
            sigma_diag: vec![1.0; 3],
        };
        let b = ReducedRankCorr {
            approach: Approach::Correlation,
            matrix: m,
            window_index: 1,
            sigma_diag: vec![1.0; 3],
        };
        assert!(matches!(
            distance_matrix(&[a, b], 0.22),
            Err(Error::Config(_))
        ));
    }

    fn toy_distance_matrix(rows: &[&[f64]]) -> DistanceMatrix {
        let n = rows.len();
        let mut values = vec![0.0; n * n];
        for (i, r) in rows.iter().enumerate() {
            values[i * n..(i + 1) * n].copy_from_slice(r);
        }
        DistanceMatrix {
            approach: Approach::Covariance,
            dim: n,
            values,
            cutoff: 0.22,
        }
    }

    #[test]
    fn averaged_distance_uniform() {
        let n = 10;
        let dm = DistanceMatrix {
            approach: Approach::Covariance,
            dim: n,
            values: vec![0.5; n * n],
            cutoff: 0.22,
        };
        let s = averaged_distance(&dm, 10, 0.22, DivisorMode::Survivors).unwrap();
        for (v, c) in s.values.iter().zip(&s.counts) {
            assert_abs_diff_eq!(v.unwrap(), 0.5, epsilon = 1e-15);
            assert_eq!(*c, 10);
        }
    }

    #[test]
    fn averaged_distance_masking_rule() {
        let dm = toy_distance_matrix(&[
            &[0.1, 0.1, 0.3],
            &[0.1, 0.1, 0.3],
            &[0.3, 0.3, 0.1],
        ]);
        let s = averaged_distance(&dm, 3, 0.22, DivisorMode::Survivors).unwrap();
        assert_abs_diff_eq!(s.values[0].unwrap(), 0.3, epsilon = 1e-15);
        assert_eq!(s.counts[0], 1);
    }

    #[test]
    fn averaged_distance_zero_survivors_is_missing() {
        let dm = toy_distance_matrix(&[&[0.1, 0.2], &[0.2, 0.1]]);
        let s = averaged_distance(&dm, 2, 0.22, DivisorMode::Survivors).unwrap();
        assert!(s.values[0].is_none());
        assert_eq!(s.counts[0], 0);
    }

    #[test]
    fn strict_baseline_divisor_mode() {
        let dm = toy_distance_matrix(&[
            &[0.1, 0.1, 0.3],
            &[0.1, 0.1, 0.3],
            &[0.3, 0.3, 0.1],
        ]);
        let s = averaged_distance(&dm, 3, 0.22, DivisorMode::Baseline).unwrap();
        assert_abs_diff_eq!(s.values[0].unwrap(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn cutoff_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..50 {
            let n = 8;
            let mut values = vec![0.0; n * n];
            for a in 0..n {
                for b in a + 1..n {
                    let v = rng.gen::<f64>();
                    values[a * n + b] = v;
                    values[b * n + a] = v;
                }
            }
            let dm = DistanceMatrix {
                approach: Approach::Covariance,
                dim: n,
                values,
                cutoff: 0.0,
            };
            let lo = averaged_distance(&dm, n, 0.2, DivisorMode::Survivors).unwrap();
            let hi = averaged_distance(&dm, n, 0.5, DivisorMode::Survivors).unwrap();
            for (l, h) in lo.values.iter().zip(&hi.values) {
                if let (Some(l), Some(h)) = (l, h) {
                    assert!(h >= l, "raising the cutoff decreased a value: {l} -> {h}");
                }
            }
        }
    }

    #[test]
    fn sector_index_simple_cases() {
        use chrono::NaiveDate;
        use std::collections::BTreeMap;
        let dates: Vec<NaiveDate> = (0..3)
            .map(|j| NaiveDate::from_ymd_opt(2020, 1, 1 + j).unwrap())
            .collect();
        let prices = DMatrix::from_row_slice(3, 3, &[
            1.0, 2.0, 3.0, // A, sector X
            3.0, 6.0, 9.0, // B, sector X (3x A)
            5.0, 5.0, 5.0, // C, sector Y
        ]);
        let panel = PricePanel::new(
            vec!["A".into(), "B".into(), "C".into()],
            dates,
            prices,
        )
        .unwrap();
        let mut entries = BTreeMap::new();
        entries.insert("A".into(), ("X".into(), "a".into()));
        entries.insert("B".into(), ("X".into(), "b".into()));
        entries.insert("C".into(), ("Y".into(), "c".into()));
        let sm = SectorMap::new(entries, vec!["X".into(), "Y".into()]).unwrap();

        let y = sector_index(&panel, &sm, "Y").unwrap();
        assert_eq!(y.values, vec![5.0, 5.0, 5.0]);

        let x = sector_index(&panel, &sm, "X").unwrap();
        assert_eq!(x.values, vec![2.0, 4.0, 6.0]);

        assert!(matches!(
            sector_index(&panel, &sm, "Z"),
            Err(Error::Config(_))
        ));
    }
}
