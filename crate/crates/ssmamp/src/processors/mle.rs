//! Memory linear estimator: polynomial interference suppression.
//!
//! The estimator maps the current signal estimate `x_t` to
//!
//! ```text
//! r = x_t + sum_k c_k (A^T A)^k A^T (y - A x_t)
//! ```
//!
//! with the coefficients scaled so that `tr(sum_k c_k (A^T A)^{k+1})/N = 1`.
//! That normalization removes the bias of the update along the input error,
//! which is what makes the output error asymptotically orthogonal to both
//! the signal and the input error. Degree zero is the classical
//! trace-normalized matched filter.

use crate::system::{Spectrum, SystemInstance};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MleError {
    #[error("dimension mismatch: expected length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("polynomial cannot be trace-normalized (response {response:e} too small)")]
    DegenerateNormalization { response: f64 },
    #[error("empty coefficient vector")]
    EmptyPolynomial,
}

/// Which linear estimator an experiment uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MlePolicy {
    /// Degree-zero trace-normalized matched filter (the default).
    MatchedFilter,
    /// Chebyshev residual-polynomial filter of the given degree over the
    /// nonzero eigenvalue range of `A^T A`.
    Chebyshev(usize),
    /// Explicit coefficients on `(A^T A)^k`, trace-normalized on
    /// construction.
    Polynomial(Vec<f64>),
}

/// Trace-normalized polynomial filter coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MleSpec {
    coeffs: Vec<f64>,
}

impl MleSpec {
    /// Matched filter: degree 0, `c_0 = 1 / [tr(A^T A)/N]`.
    pub fn matched_filter(spectrum: &Spectrum) -> Self {
        Self { coeffs: vec![1.0 / spectrum.moment(1)] }
    }

    /// Normalize the given raw coefficients so the filtered trace response
    /// is one.
    pub fn polynomial(spectrum: &Spectrum, raw: &[f64]) -> Result<Self, MleError> {
        if raw.is_empty() {
            return Err(MleError::EmptyPolynomial);
        }
        let response: f64 = raw
            .iter()
            .enumerate()
            .map(|(k, c)| c * spectrum.moment(k + 1))
            .sum();
        if !response.is_finite() || response.abs() < 1e-14 {
            return Err(MleError::DegenerateNormalization { response });
        }
        Ok(Self { coeffs: raw.iter().map(|c| c / response).collect() })
    }

    /// Degree-`k` filter from the Chebyshev residual polynomial on the
    /// nonzero eigenvalue range: `P(l) = (1 - prod_j (1 - l/theta_j)) / l`
    /// with `theta_j` the Chebyshev nodes, then trace-normalized. Larger
    /// degrees suppress a wider eigenvalue spread per iteration.
    pub fn chebyshev(spectrum: &Spectrum, degree: usize) -> Result<Self, MleError> {
        let (lo, hi) = spectrum
            .sigma()
            .iter()
            .map(|s| s * s)
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), l| (lo.min(l), hi.max(l)));
        let center = 0.5 * (hi + lo);
        let half = 0.5 * (hi - lo);
        let order = degree + 1;
        // residual(l) = prod_j (1 - l/theta_j), coefficients by expansion
        let mut residual = vec![0.0; order + 1];
        residual[0] = 1.0;
        for j in 1..=order {
            let angle = std::f64::consts::PI * (2.0 * j as f64 - 1.0) / (2.0 * order as f64);
            let theta = center + half * angle.cos();
            for k in (1..=j).rev() {
                let prev = residual[k - 1];
                residual[k] -= prev / theta;
            }
        }
        // P(l) = (1 - residual(l))/l: drop the constant term, shift down
        let raw: Vec<f64> = residual[1..].iter().map(|c| -c).collect();
        Self::polynomial(spectrum, &raw)
    }

    pub fn from_policy(policy: &MlePolicy, spectrum: &Spectrum) -> Result<Self, MleError> {
        match policy {
            MlePolicy::MatchedFilter => Ok(Self::matched_filter(spectrum)),
            MlePolicy::Chebyshev(k) => Self::chebyshev(spectrum, *k),
            MlePolicy::Polynomial(raw) => Self::polynomial(spectrum, raw),
        }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Filter response `P(l) = sum_k c_k l^k`.
    pub fn response(&self, eigenvalue: f64) -> f64 {
        self.coeffs
            .iter()
            .rev()
            .fold(0.0, |acc, c| acc * eigenvalue + c)
    }
}

/// One linear-estimator update.
pub fn mle_apply(
    spec: &MleSpec,
    inst: &SystemInstance,
    x_t: &DVector<f64>,
) -> Result<DVector<f64>, MleError> {
    if x_t.len() != inst.n() {
        return Err(MleError::DimensionMismatch { expected: inst.n(), got: x_t.len() });
    }
    let map_dim = |e: crate::system::SystemError| match e {
        crate::system::SystemError::DimensionMismatch { expected, got } => {
            MleError::DimensionMismatch { expected, got }
        }
        _ => unreachable!("operator application only fails on dimensions"),
    };
    let residual = inst.y() - inst.apply_a(x_t).map_err(map_dim)?;
    let z = inst.apply_ah(&residual).map_err(map_dim)?;
    // Horner in the operator A^T A
    let mut acc = &z * spec.coeffs[spec.coeffs.len() - 1];
    for &c in spec.coeffs.iter().rev().skip(1) {
        let aa = inst
            .apply_ah(&inst.apply_a(&acc).map_err(map_dim)?)
            .map_err(map_dim)?;
        acc = aa + &z * c;
    }
    Ok(x_t + acc)
}

/// Closed-form error-moment transfer of the linear estimator.
///
/// With input errors of cross-variance `p` and white observation noise of
/// variance `sigma^2`, the output errors have cross-variance
/// `signal_response * p + sigma^2 * noise_response`, where the responses are
/// spectral sums of the filter: `signal_response = E[(1 - l P(l))^2]` over
/// all `N` eigenvalues of `A^T A` (zeros included) and
/// `noise_response = E[l P(l)^2]` over the nonzero ones. The noise term is
/// common to every iteration because the same observation noise enters each
/// update.
#[derive(Debug, Clone, PartialEq)]
pub struct MleTransfer {
    signal_response: f64,
    noise_response: f64,
    noise_var: f64,
}

impl MleTransfer {
    pub fn new(spec: &MleSpec, spectrum: &Spectrum, noise_var: f64) -> Self {
        let n = spectrum.n() as f64;
        let rank = spectrum.sigma().len();
        let mut signal = (spectrum.n() - rank) as f64; // zero eigenvalues pass errors through
        let mut noise = 0.0;
        for s in spectrum.sigma() {
            let l = s * s;
            let p = spec.response(l);
            signal += (1.0 - l * p).powi(2);
            noise += l * p * p;
        }
        Self { signal_response: signal / n, noise_response: noise / n, noise_var }
    }

    pub fn signal_response(&self) -> f64 {
        self.signal_response
    }

    pub fn noise_response(&self) -> f64 {
        self.noise_response
    }

    /// Output cross-variance from an input cross-variance.
    pub fn gamma_cross(&self, v_phi_cross: f64) -> f64 {
        self.signal_response * v_phi_cross + self.noise_var * self.noise_response
    }

    /// Full output covariance block from an input covariance block.
    pub fn gamma_cov(&self, v_phi: &DMatrix<f64>) -> DMatrix<f64> {
        v_phi.map(|p| self.gamma_cross(p))
    }
}

/// Predicted output error cross-variance for a given input cross-variance.
pub fn mle_error_moments(spec: &MleSpec, inst: &SystemInstance, v_phi_cross: f64) -> f64 {
    MleTransfer::new(spec, inst.spectrum(), inst.noise_var()).gamma_cross(v_phi_cross)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{generate_system, SignalPrior, SpectrumProfile, SpectrumSpec};
    use approx::assert_abs_diff_eq;

    fn spec(n: usize, delta: f64, kappa: f64) -> SpectrumSpec {
        let profile = if kappa == 1.0 { SpectrumProfile::Flat } else { SpectrumProfile::Geometric };
        SpectrumSpec { n, delta, kappa, profile }
    }

    #[test]
    fn trace_normalization_holds_for_all_constructors() {
        let sp = spec(64, 0.5, 30.0).spectrum().unwrap();
        for ms in [
            MleSpec::matched_filter(&sp),
            MleSpec::chebyshev(&sp, 0).unwrap(),
            MleSpec::chebyshev(&sp, 3).unwrap(),
            MleSpec::polynomial(&sp, &[0.3, -0.1, 0.02]).unwrap(),
        ] {
            let traced: f64 = sp
                .sigma()
                .iter()
                .map(|s| {
                    let l = s * s;
                    l * ms.response(l)
                })
                .sum::<f64>()
                / sp.n() as f64;
            assert_abs_diff_eq!(traced, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn matched_filter_on_unitary_system_returns_adjoint_observation() {
        let inst = generate_system(2, &spec(64, 1.0, 1.0), &SignalPrior { rho: 0.5 }, 0.01).unwrap();
        let ms = MleSpec::matched_filter(inst.spectrum());
        let x_t = DVector::zeros(inst.n());
        let r = mle_apply(&ms, &inst, &x_t).unwrap();
        let expected = inst.apply_ah(inst.y()).unwrap();
        assert!((&r - &expected).norm() < 1e-12 * expected.norm());
        // with unit spectrum the output error is exactly the rotated noise
        let err = &r - inst.x_true();
        let var = err.norm_squared() / inst.n() as f64;
        assert!((var / 0.01 - 1.0).abs() < 5.0 / (inst.n() as f64).sqrt() * 10.0);
    }

    #[test]
    fn perfect_noiseless_input_is_a_fixed_point() {
        let inst = generate_system(4, &spec(64, 0.5, 10.0), &SignalPrior { rho: 0.3 }, 0.0).unwrap();
        let ms = MleSpec::matched_filter(inst.spectrum());
        let r = mle_apply(&ms, &inst, inst.x_true()).unwrap();
        assert!((&r - inst.x_true()).norm() < 1e-10 * inst.x_true().norm());
    }

    #[test]
    fn first_iteration_error_is_orthogonal_to_signal() {
        // raw output error against the signal and against the input error
        let n = 512;
        let bound = 5.0 / (n as f64).sqrt();
        for seed in 0..20 {
            let inst =
                generate_system(seed, &spec(n, 0.5, 10.0), &SignalPrior { rho: 0.2 }, 1e-3)
                    .unwrap();
            let ms = MleSpec::matched_filter(inst.spectrum());
            let r = mle_apply(&ms, &inst, &DVector::zeros(n)).unwrap();
            let g = &r - inst.x_true();
            let corr_x = g.dot(inst.x_true()) / n as f64;
            assert!(corr_x.abs() < bound, "seed {seed}: <g,x>/N = {corr_x}");
        }
    }

    #[test]
    fn error_moment_transfer_matches_hand_sums() {
        // unitary system: output error variance is exactly the noise level
        let sp = spec(64, 1.0, 1.0).spectrum().unwrap();
        let tr = MleTransfer::new(&MleSpec::matched_filter(&sp), &sp, 0.04);
        assert_abs_diff_eq!(tr.gamma_cross(1.0), 0.04, epsilon = 1e-14);
        assert_abs_diff_eq!(tr.gamma_cross(0.3), 0.04, epsilon = 1e-14);

        // noiseless with zero input error: zero output error
        let tr0 = MleTransfer::new(&MleSpec::matched_filter(&sp), &sp, 0.0);
        assert_abs_diff_eq!(tr0.gamma_cross(0.0), 0.0, epsilon = 1e-15);

        // two-value spectrum, evaluated by hand:
        // lambda = (400/101, 4/101) plus two zeros, matched filter c0 = 1,
        // signal response = (1/4)[(1-400/101)^2 + (1-4/101)^2 + 2] = 119212/40804
        let sp2 = spec(4, 0.5, 10.0).spectrum().unwrap();
        let tr2 = MleTransfer::new(&MleSpec::matched_filter(&sp2), &sp2, 0.1);
        assert_abs_diff_eq!(tr2.signal_response(), 119212.0 / 40804.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tr2.noise_response(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            tr2.gamma_cross(1.0),
            119212.0 / 40804.0 + 0.1,
            epsilon = 1e-12
        );
        // signal response identity: E[(l P)^2] - 1 under trace normalization
        let second: f64 = sp2
            .sigma()
            .iter()
            .map(|s| {
                let l = s * s;
                (l * MleSpec::matched_filter(&sp2).response(l)).powi(2)
            })
            .sum::<f64>()
            / 4.0;
        assert_abs_diff_eq!(tr2.signal_response(), second - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn transfer_prediction_matches_empirical_error() {
        let n = 2048;
        let inst = generate_system(8, &spec(n, 0.5, 10.0), &SignalPrior { rho: 0.2 }, 1e-3).unwrap();
        let ms = MleSpec::matched_filter(inst.spectrum());
        let r = mle_apply(&ms, &inst, &DVector::zeros(n)).unwrap();
        let emp = (&r - inst.x_true()).norm_squared() / n as f64;
        let predicted = mle_error_moments(&ms, &inst, 1.0);
        assert!(
            (emp / predicted - 1.0).abs() < 0.1,
            "empirical {emp} vs predicted {predicted}"
        );
    }

    #[test]
    fn chebyshev_filter_reduces_signal_response() {
        let sp = spec(256, 0.5, 100.0).spectrum().unwrap();
        let mf = MleTransfer::new(&MleSpec::matched_filter(&sp), &sp, 0.0);
        let ch = MleTransfer::new(&MleSpec::chebyshev(&sp, 4).unwrap(), &sp, 0.0);
        assert!(
            ch.signal_response() < mf.signal_response(),
            "chebyshev {} vs matched {}",
            ch.signal_response(),
            mf.signal_response()
        );
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let inst = generate_system(1, &spec(16, 1.0, 1.0), &SignalPrior { rho: 0.5 }, 0.0).unwrap();
        let ms = MleSpec::matched_filter(inst.spectrum());
        assert!(matches!(
            mle_apply(&ms, &inst, &DVector::zeros(8)),
            Err(MleError::DimensionMismatch { .. })
        ));
    }
}
