//! Variance-optimal damping of correlated estimates.
//!
//! Given `t` zero-mean-error estimates of the same signal with error
//! covariance `V`, the convex combination minimizing the combined error
//! variance subject to the weights summing to one is
//! `zeta = V^-1 1 / (1^T V^-1 1)`, with damped variance
//! `1 / (1^T V^-1 1)`. When `V` is singular (the estimates carry no new
//! information), the previous weight vector is kept and padded with a zero.
//!
//! The last estimate is a sufficient statistic of the whole stack exactly
//! when the last row and column of `V` are constant; damping then collapses
//! onto that estimate and brings no improvement.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

const VALUE_FLOOR: f64 = 1e-30;

#[derive(Debug, Error, PartialEq)]
pub enum DampingError {
    #[error("dimension mismatch: covariance is {rows}x{cols}, weights have length {weights}")]
    DimensionMismatch { rows: usize, cols: usize, weights: usize },
    #[error("covariance is singular at t={t} and no previous damping vector was supplied")]
    MissingPrev { t: usize },
    #[error("KKT system is numerically singular")]
    SingularKkt,
}

/// Unbiased combination weights: sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DampingVector {
    weights: Vec<f64>,
}

impl DampingVector {
    /// Normalizes the given weights to sum to one. The residual after the
    /// division is folded into the largest-magnitude entry so the constraint
    /// holds exactly, not just to rounding.
    pub fn new(mut weights: Vec<f64>) -> Self {
        assert!(!weights.is_empty(), "damping vector cannot be empty");
        let sum: f64 = weights.iter().sum();
        assert!(
            sum.abs() > VALUE_FLOOR && sum.is_finite(),
            "weights cannot be normalized (sum = {sum})"
        );
        for w in &mut weights {
            *w /= sum;
        }
        let residual = weights.iter().sum::<f64>() - 1.0;
        if residual != 0.0 {
            let k = weights
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(k, _)| k)
                .unwrap();
            weights[k] -= residual;
        }
        Self { weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Previous vector extended with a zero weight for a column that brought
    /// no new information.
    pub fn padded_with_zero(&self) -> Self {
        let mut w = self.weights.clone();
        w.push(0.0);
        Self { weights: w }
    }

    /// Canonical basis vector `e_t`: all weight on the last estimate.
    pub fn last_only(t: usize) -> Self {
        assert!(t >= 1);
        let mut w = vec![0.0; t];
        w[t - 1] = 1.0;
        Self { weights: w }
    }
}

/// Knobs for the singularity decision.
#[derive(Debug, Clone)]
pub struct DampingConfig {
    /// `V` counts as invertible when `lambda_min > threshold * lambda_max`.
    /// Empirical covariances go numerically singular exactly when damping
    /// has converged, so the branch must be deterministic.
    pub eigen_ratio_threshold: f64,
}

impl Default for DampingConfig {
    fn default() -> Self {
        Self { eigen_ratio_threshold: 1e-10 }
    }
}

/// Invertibility / sufficient-statistic diagnostics of a covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceDiagnostics {
    pub invertible: bool,
    pub sufficient_statistic: bool,
    pub condition_estimate: f64,
}

fn check_square(v: &DMatrix<f64>) -> usize {
    assert_eq!(v.nrows(), v.ncols(), "covariance must be square");
    assert!(v.nrows() >= 1, "covariance must be nonempty");
    v.nrows()
}

fn eigen_extremes(v: &DMatrix<f64>) -> (f64, f64) {
    let eig = v.clone().symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &l in eig.eigenvalues.iter() {
        lo = lo.min(l);
        hi = hi.max(l);
    }
    (lo, hi)
}

/// Eigenvalue-gated invertibility used for the damping branch.
pub fn covariance_invertible(v: &DMatrix<f64>, config: &DampingConfig) -> bool {
    check_square(v);
    let (lo, hi) = eigen_extremes(v);
    hi > 0.0 && lo > config.eigen_ratio_threshold * hi
}

/// Optimal damping vector for error covariance `v`.
///
/// Invertible `v`: solves `v u = 1` and normalizes. Singular `v`: the new
/// estimate is discarded by returning `prev` padded with a zero weight
/// (`prev` is required whenever `t > 1`). At `t = 1` the only unbiased
/// combination is weight one, returned even for a zero-variance covariance.
pub fn optimal_damping(
    v: &DMatrix<f64>,
    prev: Option<&DampingVector>,
    config: &DampingConfig,
) -> Result<DampingVector, DampingError> {
    let t = check_square(v);
    if let Some(p) = prev {
        if p.len() != t - 1 {
            return Err(DampingError::DimensionMismatch {
                rows: t,
                cols: t,
                weights: p.len(),
            });
        }
    }
    if t == 1 {
        return Ok(DampingVector::new(vec![1.0]));
    }
    if !covariance_invertible(v, config) {
        return match prev {
            Some(p) => Ok(p.padded_with_zero()),
            None => Err(DampingError::MissingPrev { t }),
        };
    }
    // Solve v u = 1 by factorization; never form the explicit inverse.
    let ones = DVector::from_element(t, 1.0);
    let u = v
        .clone()
        .lu()
        .solve(&ones)
        .filter(|u| u.iter().all(|x| x.is_finite()))
        .ok_or(DampingError::SingularKkt)?;
    Ok(DampingVector::new(u.as_slice().to_vec()))
}

/// Damped error variance `zeta^T V zeta`.
pub fn damped_variance(v: &DMatrix<f64>, zeta: &DampingVector) -> Result<f64, DampingError> {
    let t = check_square(v);
    if zeta.len() != t {
        return Err(DampingError::DimensionMismatch {
            rows: t,
            cols: t,
            weights: zeta.len(),
        });
    }
    let z = DVector::from_column_slice(zeta.weights());
    Ok((&z.transpose() * v * &z)[(0, 0)])
}

/// Reference solver for the damping optimum, independent of
/// [`optimal_damping`]: minimizes `zeta^T V zeta / 2` subject to
/// `1^T zeta = 1` by solving the stationarity system
///
/// ```text
/// [ V   -1 ] [ zeta ]   [ 0 ]
/// [ 1^T  0 ] [  c   ] = [ 1 ]
/// ```
///
/// directly. Kept as a verification oracle for the closed form.
pub fn qp_oracle_damping(v: &DMatrix<f64>) -> Result<DampingVector, DampingError> {
    let t = check_square(v);
    let mut kkt = DMatrix::zeros(t + 1, t + 1);
    kkt.view_mut((0, 0), (t, t)).copy_from(v);
    for i in 0..t {
        kkt[(i, t)] = -1.0;
        kkt[(t, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(t + 1);
    rhs[t] = 1.0;
    let sol = kkt
        .lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|x| x.is_finite()))
        .ok_or(DampingError::SingularKkt)?;
    Ok(DampingVector::new(sol.as_slice()[..t].to_vec()))
}

/// Checks whether the last estimate is a sufficient statistic of the stack:
/// all entries of the last row and column equal the corner entry within
/// `tol` (relative to the corner). Also reports eigenvalue-based
/// invertibility with the default threshold.
pub fn sufficient_statistic_check(v: &DMatrix<f64>, tol: f64) -> CovarianceDiagnostics {
    let t = check_square(v);
    let corner = v[(t - 1, t - 1)];
    let scale = corner.abs().max(VALUE_FLOOR);
    let mut sufficient = true;
    for i in 0..t {
        if (v[(t - 1, i)] - corner).abs() > tol * scale
            || (v[(i, t - 1)] - corner).abs() > tol * scale
        {
            sufficient = false;
            break;
        }
    }
    let (lo, hi) = eigen_extremes(v);
    let config = DampingConfig::default();
    CovarianceDiagnostics {
        invertible: hi > 0.0 && lo > config.eigen_ratio_threshold * hi,
        sufficient_statistic: sufficient,
        condition_estimate: if lo > 0.0 { hi / lo } else { f64::INFINITY },
    }
}
