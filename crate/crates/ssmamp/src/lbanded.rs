//! Algebra for L-banded matrices.
//!
//! A `t x t` matrix is L-banded when entry `(i, j)` equals `v_max(i,j)`: the
//! matrix is constant along each "L" formed by row `k` and column `k` from
//! the diagonal outward, so it is fully determined by its diagonal
//! `(v_1, ..., v_t)`. Error covariance matrices of sufficient-statistic
//! damped iterations have exactly this shape, and their inverses are
//! tridiagonal in closed form:
//!
//! ```text
//! inv(V)[i][i]   = 1/d_{i-1} + 1/d_i      d_i = v_i - v_{i+1},
//! inv(V)[i][i+1] = -1/d_i                 1/d_0 = 0,  v_{t+1} = 0,
//! ```
//!
//! which gives `1^T inv(V) = (0, ..., 0, 1/v_t)` and `1^T inv(V) 1 = 1/v_t`.

use nalgebra::DMatrix;
use thiserror::Error;

/// Relative scale below which two diagonal values are considered equal
/// (the matrix is then singular).
pub const DEFAULT_GAP_TOL: f64 = 1e-12;

/// Floor used when normalizing deviations against a (possibly zero) band
/// value in [`is_lbanded`].
pub const DEVIATION_FLOOR: f64 = 1e-30;

#[derive(Debug, Error, PartialEq)]
pub enum LBandedError {
    #[error("L-banded matrix needs at least one diagonal entry")]
    Empty,
    #[error("singular L-banded matrix: diagonal entries {i} and {j} coincide")]
    SingularLBanded { i: usize, j: usize },
    #[error("diagonal is not a valid covariance band sequence (must be positive and nonincreasing)")]
    NotCovarianceDiag,
}

/// L-banded matrix, stored as its diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct LBandedMatrix {
    diag: Vec<f64>,
}

impl LBandedMatrix {
    /// Wrap an arbitrary real diagonal. No covariance validity is implied;
    /// use [`LBandedMatrix::from_covariance_diag`] when the band values must
    /// form a covariance sequence.
    pub fn new(diag: Vec<f64>) -> Result<Self, LBandedError> {
        if diag.is_empty() {
            return Err(LBandedError::Empty);
        }
        Ok(Self { diag })
    }

    /// Wrap a covariance band sequence: positive and nonincreasing.
    pub fn from_covariance_diag(diag: Vec<f64>) -> Result<Self, LBandedError> {
        let m = Self::new(diag)?;
        if !m.is_covariance_diag() {
            return Err(LBandedError::NotCovarianceDiag);
        }
        Ok(m)
    }

    /// True when the band sequence is positive and nonincreasing, i.e. a
    /// diagonal that a damped covariance can produce.
    pub fn is_covariance_diag(&self) -> bool {
        self.diag.iter().all(|&v| v > 0.0) && self.diag.windows(2).all(|w| w[0] >= w[1])
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// Dense symmetric realization: entry `(i, j) = diag[max(i, j)]`.
    pub fn expand(&self) -> DMatrix<f64> {
        let t = self.dim();
        DMatrix::from_fn(t, t, |i, j| self.diag[i.max(j)])
    }

    /// Invertibility test with the default relative gap tolerance.
    pub fn is_invertible(&self) -> bool {
        self.check_invertible(DEFAULT_GAP_TOL).is_ok()
    }

    /// Closed-form tridiagonal inverse.
    ///
    /// Fails with [`LBandedError::SingularLBanded`] when two diagonal values
    /// coincide within the default relative gap, or when the last value is
    /// zero (the whole last band vanishes).
    pub fn inverse(&self) -> Result<TridiagonalMatrix, LBandedError> {
        self.inverse_with_gap(DEFAULT_GAP_TOL)
    }

    /// Same as [`LBandedMatrix::inverse`] with an explicit relative gap
    /// tolerance: entries closer than `gap_tol * max(|v_i|)` count as equal.
    pub fn inverse_with_gap(&self, gap_tol: f64) -> Result<TridiagonalMatrix, LBandedError> {
        self.check_invertible(gap_tol)?;
        let t = self.dim();
        let delta_inv = |i: usize| -> f64 {
            // d_i = v_i - v_{i+1}, 1-indexed, with v_{t+1} = 0.
            if i == 0 {
                0.0 // v_0 = +infinity
            } else if i == t {
                1.0 / self.diag[t - 1]
            } else {
                1.0 / (self.diag[i - 1] - self.diag[i])
            }
        };
        let main = (1..=t).map(|i| delta_inv(i - 1) + delta_inv(i)).collect();
        let off = (1..t).map(|i| -delta_inv(i)).collect();
        Ok(TridiagonalMatrix { main, off })
    }

    /// Row sums of the inverse and their total, computed by summing the
    /// tridiagonal inverse explicitly. For an invertible L-banded matrix the
    /// result is `(0, ..., 0, 1/v_t)` with total `1/v_t`.
    pub fn quadratic_sums(&self) -> Result<(Vec<f64>, f64), LBandedError> {
        let inv = self.inverse()?;
        let row_sums = inv.row_sums();
        let total = row_sums.iter().sum();
        Ok((row_sums, total))
    }

    fn check_invertible(&self, gap_tol: f64) -> Result<(), LBandedError> {
        let t = self.dim();
        let scale = self.diag.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let gap = gap_tol * scale.max(f64::MIN_POSITIVE);
        // The phantom band v_{t+1} = 0 takes part: a zero last band kills
        // the whole last row.
        if self.diag[t - 1].abs() <= gap {
            return Err(LBandedError::SingularLBanded { i: t, j: t + 1 });
        }
        for i in 0..t {
            for j in (i + 1)..t {
                if (self.diag[i] - self.diag[j]).abs() <= gap {
                    return Err(LBandedError::SingularLBanded { i: i + 1, j: j + 1 });
                }
            }
        }
        Ok(())
    }
}

/// Symmetric tridiagonal matrix: main diagonal plus one off-diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalMatrix {
    main: Vec<f64>,
    off: Vec<f64>,
}

impl TridiagonalMatrix {
    pub fn dim(&self) -> usize {
        self.main.len()
    }

    pub fn main(&self) -> &[f64] {
        &self.main
    }

    pub fn off(&self) -> &[f64] {
        &self.off
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let t = self.dim();
        let mut m = DMatrix::zeros(t, t);
        for i in 0..t {
            m[(i, i)] = self.main[i];
            if i + 1 < t {
                m[(i, i + 1)] = self.off[i];
                m[(i + 1, i)] = self.off[i];
            }
        }
        m
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let t = self.dim();
        (0..t)
            .map(|i| {
                let mut s = self.main[i];
                if i > 0 {
                    s += self.off[i - 1];
                }
                if i + 1 < t {
                    s += self.off[i];
                }
                s
            })
            .collect()
    }
}

/// Test whether a dense symmetric matrix is L-banded within a relative
/// tolerance. Returns the verdict together with the largest relative
/// deviation `|V[i][j] - V[m][m]| / max(|V[m][m]|, floor)` over all entries,
/// `m = max(i, j)`.
pub fn is_lbanded(v: &DMatrix<f64>, tol: f64) -> (bool, f64) {
    assert_eq!(v.nrows(), v.ncols(), "is_lbanded expects a square matrix");
    let t = v.nrows();
    let mut max_dev = 0.0_f64;
    for i in 0..t {
        for j in 0..t {
            let m = i.max(j);
            let band = v[(m, m)];
            let dev = (v[(i, j)] - band).abs() / band.abs().max(DEVIATION_FLOOR);
            max_dev = max_dev.max(dev);
        }
    }
    (max_dev <= tol, max_dev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lb(diag: &[f64]) -> LBandedMatrix {
        LBandedMatrix::new(diag.to_vec()).unwrap()
    }

    #[test]
    fn expand_scalar() {
        let m = lb(&[5.0]).expand();
        assert_eq!(m, DMatrix::from_row_slice(1, 1, &[5.0]));
    }

    #[test]
    fn expand_matches_band_pattern() {
        let m = lb(&[2.0, 1.0]).expand();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]));
        let m = lb(&[3.0, 2.0, 1.0]).expand();
        assert_eq!(
            m,
            DMatrix::from_row_slice(3, 3, &[3.0, 2.0, 1.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0])
        );
    }

    #[test]
    fn inverse_two_bands() {
        let inv = lb(&[2.0, 1.0]).inverse().unwrap();
        assert_eq!(inv.main(), &[1.0, 2.0]);
        assert_eq!(inv.off(), &[-1.0]);
        // direct 2x2 product check
        let prod = lb(&[2.0, 1.0]).expand() * inv.to_dense();
        assert_abs_diff_eq!(prod, DMatrix::identity(2, 2), epsilon = 1e-14);
    }

    #[test]
    fn inverse_three_bands_matches_dense_inversion() {
        let m = lb(&[3.0, 2.0, 1.0]);
        let inv = m.inverse().unwrap();
        assert_eq!(inv.main(), &[1.0, 2.0, 2.0]);
        assert_eq!(inv.off(), &[-1.0, -1.0]);
        let dense_inv = m.expand().try_inverse().expect("dense inverse");
        assert_abs_diff_eq!(inv.to_dense(), dense_inv, epsilon = 1e-12);
    }

    #[test]
    fn coinciding_bands_are_singular() {
        assert_eq!(
            lb(&[1.0, 1.0]).inverse().unwrap_err(),
            LBandedError::SingularLBanded { i: 1, j: 2 }
        );
        // zero last band: singular even though the values are distinct
        assert!(matches!(
            lb(&[1.0, 0.0]).inverse(),
            Err(LBandedError::SingularLBanded { .. })
        ));
    }

    #[test]
    fn quadratic_sums_concentrate_on_last_entry() {
        let (rows, total) = lb(&[2.0, 1.0]).quadratic_sums().unwrap();
        assert_abs_diff_eq!(rows[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rows[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-15);

        let (rows, total) = lb(&[3.0, 2.0, 1.0]).quadratic_sums().unwrap();
        assert_abs_diff_eq!(rows[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rows[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rows[2], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-15);

        let (rows, total) = lb(&[4.0]).quadratic_sums().unwrap();
        assert_abs_diff_eq!(rows[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(total, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn is_lbanded_examples() {
        let (ok, dev) = is_lbanded(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]), 1e-12);
        assert!(ok);
        assert_abs_diff_eq!(dev, 0.0, epsilon = 1e-15);

        let (ok, dev) = is_lbanded(&DMatrix::from_row_slice(2, 2, &[2.0, 0.9, 0.9, 1.0]), 1e-3);
        assert!(!ok);
        assert_abs_diff_eq!(dev, 0.1, epsilon = 1e-12);

        let (ok, dev) = is_lbanded(&DMatrix::identity(3, 3), 1e-12);
        assert!(!ok);
        assert_abs_diff_eq!(dev, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn covariance_constructor_rejects_increasing_or_nonpositive() {
        assert!(LBandedMatrix::from_covariance_diag(vec![1.0, 2.0]).is_err());
        assert!(LBandedMatrix::from_covariance_diag(vec![1.0, 0.0]).is_err());
        assert!(LBandedMatrix::from_covariance_diag(vec![1.0, -0.5]).is_err());
        assert!(LBandedMatrix::from_covariance_diag(vec![2.0, 1.0, 1.0]).is_ok());
        assert!(LBandedMatrix::new(vec![]).is_err());
    }

    /// Strictly decreasing positive diagonal of length 1..=30, values in (0, 10].
    fn decreasing_diag() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(1e-3_f64..1.0, 1..=30).prop_map(|gaps| {
            // cumulative sums read back-to-front give a strictly decreasing
            // positive sequence bounded by 10
            let total: f64 = gaps.iter().sum();
            let scale = 10.0 / total.max(1.0);
            let mut acc = 0.0;
            let mut diag: Vec<f64> = gaps
                .iter()
                .map(|g| {
                    acc += g * scale;
                    acc
                })
                .collect();
            diag.reverse();
            diag
        })
    }

    proptest! {
        #[test]
        fn inverse_is_exact_inverse(diag in decreasing_diag()) {
            let m = LBandedMatrix::new(diag).unwrap();
            let t = m.dim();
            let prod = m.expand() * m.inverse().unwrap().to_dense();
            let err = (&prod - DMatrix::identity(t, t)).abs().max();
            prop_assert!(err < 1e-10, "max |VV^-1 - I| = {err:e}");
        }

        #[test]
        fn inverse_matches_dense_inversion(diag in decreasing_diag()) {
            let m = LBandedMatrix::new(diag).unwrap();
            let tri = m.inverse().unwrap().to_dense();
            let dense = m.expand().try_inverse().unwrap();
            for i in 0..m.dim() {
                for j in 0..m.dim() {
                    let scale = dense[(i, j)].abs().max(1.0);
                    prop_assert!((tri[(i, j)] - dense[(i, j)]).abs() / scale < 1e-9);
                }
            }
        }

        #[test]
        fn quadratic_sum_total_is_reciprocal_last_band(diag in decreasing_diag()) {
            let m = LBandedMatrix::new(diag).unwrap();
            let (_, total) = m.quadratic_sums().unwrap();
            let expected = 1.0 / m.diag()[m.dim() - 1];
            prop_assert!((total - expected).abs() <= 1e-12 * expected.abs());
        }

        #[test]
        fn expanded_form_passes_detector(diag in decreasing_diag()) {
            let m = LBandedMatrix::new(diag).unwrap();
            let (ok, dev) = is_lbanded(&m.expand(), 1e-12);
            prop_assert!(ok, "deviation {dev}");
        }
    }
}
