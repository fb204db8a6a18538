//! Deterministic state-evolution prediction of the iteration.
//!
//! The linear step maps error covariances affinely through the spectral
//! responses of the filter; the denoiser step maps them through
//! Gauss-Hermite integrals of the posterior-mean kernels against the
//! joint-Gaussian noise model (the same signal enters every column, so
//! cross terms are integrated over a shared signal draw). In `SsDamped`
//! mode the predicted pre-damping covariance of each new column is damped
//! exactly as the engine damps the empirical one, which makes the predicted
//! covariances L-banded by construction and the diagonal sequences
//! nonincreasing.
//!
//! Everything here is instance-free: the spectrum is deterministic given
//! the spec, so the prediction depends only on (spec, prior, noise level,
//! filter).

use crate::damping::{covariance_invertible, optimal_damping, DampingConfig, DampingError};
use crate::engine::RunMode;
use crate::lbanded::LBandedMatrix;
use crate::processors::{
    nle_cross_transfer, nle_cross_with_initial, nle_mse_transfer, MleError, MlePolicy, MleSpec,
    MleTransfer,
};
use crate::quadrature::GaussHermite;
use crate::system::{SignalPrior, SpectrumSpec, SystemError};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Mle(#[from] MleError),
    #[error(transparent)]
    Damping(#[from] DampingError),
}

#[derive(Debug, Clone)]
pub struct SeConfig {
    pub mode: RunMode,
    pub max_iterations: usize,
    pub damping: DampingConfig,
    pub quadrature_nodes: usize,
    pub variance_floor: f64,
    pub convergence_rel: f64,
    pub convergence_window: usize,
    pub stop_on_convergence: bool,
}

impl SeConfig {
    pub fn new(mode: RunMode, max_iterations: usize) -> Self {
        Self {
            mode,
            max_iterations,
            damping: DampingConfig::default(),
            quadrature_nodes: 40,
            variance_floor: 1e-13,
            convergence_rel: 1e-6,
            convergence_window: 3,
            stop_on_convergence: true,
        }
    }
}

/// Predicted variance trajectory and covariance structure.
#[derive(Debug, Clone)]
pub struct SeTrajectory {
    pub mode: RunMode,
    /// Damped output variance of the linear step, one entry per iteration.
    pub v_gamma: Vec<f64>,
    /// Damped estimate variances: `v_phi[0] = 1` is the all-zero start,
    /// `v_phi[t]` the variance after iteration `t`.
    pub v_phi: Vec<f64>,
    /// Predicted covariance of the (damped) linear-step errors.
    pub cov_gamma: DMatrix<f64>,
    /// Predicted covariance of the (damped) estimate errors, including the
    /// initial column.
    pub cov_phi: DMatrix<f64>,
    pub converged: bool,
    pub converged_at: Option<usize>,
    /// 1-based iterations whose predicted raw column was excluded.
    pub excluded_gamma: Vec<usize>,
    pub excluded_phi: Vec<usize>,
    /// Damping weight given to the newest linear-step column per iteration
    /// (zero when it was excluded, one in plain mode).
    pub zeta_last: Vec<f64>,
}

impl SeTrajectory {
    pub fn iterations(&self) -> usize {
        self.v_gamma.len()
    }
}

/// Limiting values of a trajectory and when they were reached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoint {
    pub v_gamma_star: f64,
    pub v_phi_star: f64,
    pub iterations_to_converge: Option<usize>,
    pub converged: bool,
}

pub fn fixed_point(trajectory: &SeTrajectory) -> FixedPoint {
    FixedPoint {
        v_gamma_star: trajectory.v_gamma.last().copied().unwrap_or(f64::NAN),
        v_phi_star: trajectory.v_phi.last().copied().unwrap_or(f64::NAN),
        iterations_to_converge: trajectory.converged_at,
        converged: trajectory.converged,
    }
}

/// Predicted covariance of the linear-step errors from the estimate-error
/// covariance block.
pub fn se_gamma_step(transfer: &MleTransfer, v_phi_block: &DMatrix<f64>) -> DMatrix<f64> {
    transfer.gamma_cov(v_phi_block)
}

/// Predicted covariance of the raw denoiser-output errors (including the
/// initial `f_1 = -x` column) from the covariance of their input noises.
pub fn se_phi_step(
    v_gamma_block: &DMatrix<f64>,
    prior: &SignalPrior,
    quad: &GaussHermite,
) -> DMatrix<f64> {
    let t = v_gamma_block.nrows();
    let mut out = DMatrix::zeros(t + 1, t + 1);
    out[(0, 0)] = 1.0;
    for i in 0..t {
        let vi = v_gamma_block[(i, i)];
        let with_initial = nle_cross_with_initial(vi, prior, quad);
        out[(0, i + 1)] = with_initial;
        out[(i + 1, 0)] = with_initial;
        for j in 0..=i {
            let e = if i == j {
                nle_mse_transfer(vi, prior, quad)
            } else {
                nle_cross_transfer(
                    v_gamma_block[(j, j)],
                    vi,
                    v_gamma_block[(i, j)],
                    prior,
                    quad,
                )
            };
            out[(i + 1, j + 1)] = e;
            out[(j + 1, i + 1)] = e;
        }
    }
    out
}

struct SeDampOutcome {
    variance: f64,
    excluded: bool,
    newest_weight: f64,
}

/// Damps one new predicted raw column against the active set, mirroring the
/// engine's branch: singular covariance keeps the previous variance and
/// permanently excludes the new column.
fn se_damp(
    raw: &DMatrix<f64>,
    active: &mut Vec<usize>,
    prev_variance: Option<f64>,
    config: &DampingConfig,
) -> Result<SeDampOutcome, SeError> {
    let new_idx = raw.nrows() - 1;
    let mut candidate = active.clone();
    candidate.push(new_idx);
    let k = candidate.len();
    let cov = DMatrix::from_fn(k, k, |a, b| raw[(candidate[a], candidate[b])]);
    if k > 1 && !covariance_invertible(&cov, config) {
        let prev = prev_variance.expect("carry-over needs a previous variance");
        return Ok(SeDampOutcome { variance: prev, excluded: true, newest_weight: 0.0 });
    }
    let (variance, newest_weight) = if k == 1 {
        (cov[(0, 0)], 1.0)
    } else {
        let zeta = optimal_damping(&cov, None, config)?;
        let z = DVector::from_column_slice(zeta.weights());
        ((z.transpose() * &cov * &z)[(0, 0)], zeta.weights()[k - 1])
    };
    active.push(new_idx);
    Ok(SeDampOutcome { variance, excluded: false, newest_weight })
}

fn grow(m: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(t, t);
    out.view_mut((0, 0), (m.nrows(), m.ncols())).copy_from(m);
    out
}

/// Runs the state evolution for the given system family and filter.
pub fn run_se(
    spec: &SpectrumSpec,
    prior: &SignalPrior,
    noise_var: f64,
    policy: &MlePolicy,
    config: &SeConfig,
) -> Result<SeTrajectory, SeError> {
    prior.validate()?;
    let spectrum = spec.spectrum()?;
    let mle = MleSpec::from_policy(policy, &spectrum)?;
    let transfer = MleTransfer::new(&mle, &spectrum, noise_var);
    let quad = GaussHermite::new(config.quadrature_nodes);
    let ss = config.mode == RunMode::SsDamped;

    // phi covariance starts with the initial column: variance 1
    let mut cov_phi = DMatrix::from_element(1, 1, 1.0);
    let mut raw_phi = cov_phi.clone();
    let mut cov_gamma = DMatrix::zeros(0, 0);
    let mut raw_gamma = DMatrix::zeros(0, 0);
    let mut active_gamma: Vec<usize> = Vec::new();
    let mut active_phi: Vec<usize> = vec![0];
    let mut v_gamma = Vec::new();
    let mut v_phi = vec![1.0];
    let mut excluded_gamma = Vec::new();
    let mut excluded_phi = Vec::new();
    let mut zeta_last = Vec::new();
    let mut flat_count = 0usize;
    let mut converged_at: Option<usize> = None;

    for t in 1..=config.max_iterations {
        // ---- linear step: grow the raw covariance by one column ----
        raw_gamma = grow(&raw_gamma, t);
        for j in 0..t {
            // input errors are the damped estimate errors f_1..f_t
            let cross = transfer.gamma_cross(cov_phi[(t - 1, j)]);
            raw_gamma[(t - 1, j)] = cross;
            raw_gamma[(j, t - 1)] = cross;
        }
        let vg = if ss {
            let out = se_damp(&raw_gamma, &mut active_gamma, v_gamma.last().copied(), &config.damping)?;
            if out.excluded {
                excluded_gamma.push(t);
            }
            zeta_last.push(out.newest_weight);
            out.variance
        } else {
            active_gamma.push(t - 1);
            zeta_last.push(1.0);
            raw_gamma[(t - 1, t - 1)]
        };
        v_gamma.push(vg);
        cov_gamma = if ss {
            LBandedMatrix::new(v_gamma.clone()).expect("nonempty").expand()
        } else {
            raw_gamma.clone()
        };

        // exact recovery: nothing left to denoise
        if vg <= config.variance_floor {
            v_phi.push(vg);
            cov_phi = grow(&cov_phi, t + 1);
            cov_phi[(t, t)] = vg;
            converged_at.get_or_insert(t);
            break;
        }

        // ---- denoiser step: grow the raw phi covariance by one column ----
        raw_phi = grow(&raw_phi, t + 1);
        let with_initial = nle_cross_with_initial(vg, prior, &quad);
        raw_phi[(0, t)] = with_initial;
        raw_phi[(t, 0)] = with_initial;
        for j in 1..t {
            // noise pair of iterations j and t over the damped covariance
            let e = nle_cross_transfer(
                cov_gamma[(j - 1, j - 1)],
                vg,
                cov_gamma[(t - 1, j - 1)],
                prior,
                &quad,
            );
            raw_phi[(j, t)] = e;
            raw_phi[(t, j)] = e;
        }
        raw_phi[(t, t)] = nle_mse_transfer(vg, prior, &quad);

        let vp = if ss {
            let out = se_damp(&raw_phi, &mut active_phi, v_phi.last().copied(), &config.damping)?;
            if out.excluded {
                excluded_phi.push(t);
            }
            out.variance
        } else {
            active_phi.push(t);
            raw_phi[(t, t)]
        };
        v_phi.push(vp);
        cov_phi = if ss {
            LBandedMatrix::new(v_phi.clone()).expect("nonempty").expand()
        } else {
            raw_phi.clone()
        };

        let stalled =
            v_phi.len() >= 3 && (v_phi[v_phi.len() - 1] - v_phi[v_phi.len() - 2]).abs()
                < config.convergence_rel * v_phi[0];
        flat_count = if stalled { flat_count + 1 } else { 0 };
        if flat_count >= config.convergence_window {
            converged_at.get_or_insert(t);
            if config.stop_on_convergence {
                break;
            }
        }
    }

    Ok(SeTrajectory {
        mode: config.mode,
        v_gamma,
        v_phi,
        cov_gamma,
        cov_phi,
        converged: converged_at.is_some(),
        converged_at,
        excluded_gamma,
        excluded_phi,
        zeta_last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lbanded::is_lbanded;
    use crate::system::SpectrumProfile;
    use approx::assert_abs_diff_eq;

    fn spec(n: usize, delta: f64, kappa: f64) -> SpectrumSpec {
        let profile = if kappa == 1.0 { SpectrumProfile::Flat } else { SpectrumProfile::Geometric };
        SpectrumSpec { n, delta, kappa, profile }
    }

    fn prior() -> SignalPrior {
        SignalPrior { rho: 0.1 }
    }

    #[test]
    fn unitary_system_gamma_variance_is_noise_level() {
        let noise = 0.01;
        let cfg = SeConfig::new(RunMode::SsDamped, 12);
        let traj = run_se(&spec(64, 1.0, 1.0), &prior(), noise, &MlePolicy::MatchedFilter, &cfg)
            .unwrap();
        for &vg in &traj.v_gamma {
            assert_abs_diff_eq!(vg, noise, epsilon = 1e-11);
        }
        assert_abs_diff_eq!(traj.v_phi[0], 1.0, epsilon = 0.0);
        let fp = fixed_point(&traj);
        assert!(fp.converged);
        // decoupled case: the denoiser output variance is already the fixed
        // point after the first step
        assert!((traj.v_phi[1] - fp.v_phi_star).abs() < 1e-8);
        assert!(fp.iterations_to_converge.unwrap() <= 5);
    }

    #[test]
    fn initial_estimate_variance_is_always_one() {
        for mode in [RunMode::Plain, RunMode::SsDamped] {
            let cfg = SeConfig::new(mode, 5);
            let traj =
                run_se(&spec(128, 0.5, 10.0), &prior(), 1e-3, &MlePolicy::MatchedFilter, &cfg)
                    .unwrap();
            assert_eq!(traj.v_phi[0], 1.0);
        }
    }

    #[test]
    fn first_gamma_step_matches_hand_spectral_sum() {
        // two-value spectrum: signal response 119212/40804, noise response 1
        let noise = 0.1;
        let cfg = SeConfig::new(RunMode::Plain, 1);
        let traj = run_se(&spec(4, 0.5, 10.0), &prior(), noise, &MlePolicy::MatchedFilter, &cfg)
            .unwrap();
        assert_abs_diff_eq!(traj.v_gamma[0], 119212.0 / 40804.0 + noise, epsilon = 1e-12);
    }

    #[test]
    fn noiseless_sparse_regime_reaches_perfect_recovery() {
        let cfg = SeConfig::new(RunMode::SsDamped, 60);
        let traj =
            run_se(&spec(512, 0.5, 10.0), &prior(), 0.0, &MlePolicy::MatchedFilter, &cfg).unwrap();
        let fp = fixed_point(&traj);
        assert!(
            fp.v_phi_star < 1e-6,
            "expected perfect recovery, got v_phi_star = {}",
            fp.v_phi_star
        );
    }

    #[test]
    fn ss_covariances_are_exactly_lbanded_and_monotone() {
        let cfg = SeConfig::new(RunMode::SsDamped, 25);
        let traj = run_se(&spec(256, 0.5, 100.0), &prior(), 1e-3, &MlePolicy::MatchedFilter, &cfg)
            .unwrap();
        let (ok_g, dev_g) = is_lbanded(&traj.cov_gamma, 1e-12);
        let (ok_p, dev_p) = is_lbanded(&traj.cov_phi, 1e-12);
        assert!(ok_g, "gamma deviation {dev_g}");
        assert!(ok_p, "phi deviation {dev_p}");
        for w in traj.v_gamma.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "gamma sequence must not increase: {w:?}");
        }
        for w in traj.v_phi.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "phi sequence must not increase: {w:?}");
        }
        // limit of a nonincreasing sequence bounds every element
        let fp = fixed_point(&traj);
        for &v in &traj.v_phi {
            assert!(fp.v_phi_star <= v + 1e-12);
        }
    }

    #[test]
    fn damped_trajectory_never_exceeds_plain() {
        for kappa in [1.0, 10.0, 100.0, 1000.0] {
            let sp = spec(256, 0.5, kappa);
            let mut plain_cfg = SeConfig::new(RunMode::Plain, 20);
            plain_cfg.stop_on_convergence = false;
            let mut ss_cfg = SeConfig::new(RunMode::SsDamped, 20);
            ss_cfg.stop_on_convergence = false;
            let plain =
                run_se(&sp, &prior(), 1e-3, &MlePolicy::MatchedFilter, &plain_cfg).unwrap();
            let ss = run_se(&sp, &prior(), 1e-3, &MlePolicy::MatchedFilter, &ss_cfg).unwrap();
            let len = plain.v_phi.len().min(ss.v_phi.len());
            for i in 0..len {
                assert!(
                    ss.v_phi[i] <= plain.v_phi[i] + 1e-12,
                    "kappa {kappa} t {i}: ss {} vs plain {}",
                    ss.v_phi[i],
                    plain.v_phi[i]
                );
            }
            let len = plain.v_gamma.len().min(ss.v_gamma.len());
            for i in 0..len {
                assert!(ss.v_gamma[i] <= plain.v_gamma[i] + 1e-12);
            }
        }
    }

    #[test]
    fn se_phi_step_block_shape() {
        let quad = GaussHermite::new(40);
        let vg = DMatrix::from_row_slice(2, 2, &[0.5, 0.3, 0.3, 0.3]);
        let block = se_phi_step(&vg, &prior(), &quad);
        assert_eq!(block.nrows(), 3);
        assert_eq!(block[(0, 0)], 1.0);
        // diagonal entries are the scalar transfers
        assert_abs_diff_eq!(
            block[(1, 1)],
            nle_mse_transfer(0.5, &prior(), &quad),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            block[(2, 2)],
            nle_mse_transfer(0.3, &prior(), &quad),
            epsilon = 1e-12
        );
        assert_eq!(block[(1, 2)], block[(2, 1)]);
    }
}
