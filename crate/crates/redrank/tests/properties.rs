//! Randomized property checks complementing the unit suites.

use proptest::prelude::*;

use redrank::indicators::{distance_matrix_packed, mean_matrix_value, pack_upper};
use redrank::market_data::build_window_grid;
use redrank::spectral::{Approach, SymmetricMatrix};

fn symmetric_matrix(dim: usize) -> impl Strategy<Value = SymmetricMatrix> {
    proptest::collection::vec(-1.0f64..1.0, dim * (dim + 1) / 2).prop_map(move |upper| {
        let mut it = upper.into_iter();
        let mut rows = vec![vec![0.0; dim]; dim];
        for i in 0..dim {
            for j in i..dim {
                let v = it.next().unwrap();
                rows[i][j] = v;
                rows[j][i] = v;
            }
        }
        SymmetricMatrix::from_upper_fn(dim, |i, j| rows[i][j])
    })
}

proptest! {
    /// Packed vectors reproduce the full double-loop distance exactly up
    /// to rounding: zeta(a, b) = sqrt(sum_ij (a_ij - b_ij)^2) / K.
    #[test]
    fn packed_distance_equals_double_loop(
        (a, b) in (3usize..8).prop_flat_map(|d| (symmetric_matrix(d), symmetric_matrix(d)))
    ) {
        let k = a.dim();
        let packed = vec![Some(pack_upper(&a)), Some(pack_upper(&b))];
        let dm = distance_matrix_packed(&packed, k, Approach::Covariance, 0.0);
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                let d = a.get(i, j) - b.get(i, j);
                s += d * d;
            }
        }
        let oracle = s.sqrt() / k as f64;
        prop_assert!((dm.get(0, 1) - oracle).abs() <= 1e-12);
        prop_assert_eq!(dm.get(0, 1), dm.get(1, 0));
    }

    /// Disjoint grids tile the axis: floor(n / t_ep) windows. Sliding
    /// stride-1 grids drop the end-aligned window, giving n - t_ep --
    /// except at t_ep = 1, where stride equals t_ep and the grid is the
    /// disjoint one with n windows.
    #[test]
    fn window_grid_counts(n in 1usize..500, t_ep in 1usize..100) {
        prop_assume!(t_ep <= n);
        let disjoint = build_window_grid(n, t_ep, t_ep).unwrap();
        prop_assert_eq!(disjoint.len(), n / t_ep);
        let sliding = build_window_grid(n, t_ep, 1).unwrap();
        let expected = if t_ep > 1 { n - t_ep } else { n };
        prop_assert_eq!(sliding.len(), expected);
    }

    /// The mean matrix value is bounded by the extreme entries.
    #[test]
    fn mean_value_within_entry_range(m in symmetric_matrix(6)) {
        let mean = mean_matrix_value(&m);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..6 {
            for j in 0..6 {
                lo = lo.min(m.get(i, j));
                hi = hi.max(m.get(i, j));
            }
        }
        prop_assert!(mean >= lo - 1e-12 && mean <= hi + 1e-12);
    }
}
