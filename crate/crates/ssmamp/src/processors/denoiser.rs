//! Separable Bernoulli-Gaussian posterior-mean denoiser.
//!
//! Prior: each component is zero with probability `1 - rho` and
//! `N(0, 1/rho)` otherwise (unit signal variance). For an input
//! `r = x + n`, `n ~ N(0, v)`, the posterior mean, its derivative, and the
//! posterior variance all have closed forms; the derivative averaged over
//! components is the divergence used to orthogonalize the output:
//!
//! ```text
//! x_hat = (eta(r) - alpha r) / (1 - alpha),   alpha = mean eta'(r_i),
//! ```
//!
//! which removes the component of the output error along the input noise.
//! The `nle_*` transfer functions integrate the same kernels against the
//! Gaussian noise model by Gauss-Hermite quadrature; state evolution is
//! built on them.

use crate::quadrature::GaussHermite;
use crate::system::SignalPrior;
use nalgebra::DVector;
use thiserror::Error;

/// Divergences this close to one make the orthogonalization blow up.
const DIVERGENCE_LIMIT: f64 = 1.0 - 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DenoiserError {
    #[error("denoiser noise variance must be positive, got {0}")]
    NonpositiveVariance(f64),
    #[error("divergence {alpha} is at one; orthogonalization is degenerate")]
    DivergenceAtOne { alpha: f64 },
    #[error("dimension mismatch: expected length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Scalar posterior kernels for a fixed `(rho, v)` pair.
#[derive(Debug, Clone, Copy)]
pub struct BgKernel {
    gain: f64,      // (1/rho) / (1/rho + v)
    noise_var: f64, // v
    curvature: f64, // 1/v - 1/(1/rho + v)
    log_pref: f64,  // ln((1-rho)/rho) + ln(s/v)/2
}

impl BgKernel {
    pub fn new(noise_var: f64, prior: &SignalPrior) -> Result<Self, DenoiserError> {
        if !(noise_var > 0.0) {
            return Err(DenoiserError::NonpositiveVariance(noise_var));
        }
        let rho = prior.rho;
        let s = 1.0 / rho + noise_var;
        Ok(Self {
            gain: (1.0 / rho) / s,
            noise_var,
            curvature: 1.0 / noise_var - 1.0 / s,
            // rho = 1 gives log_pref = -inf and hence weight 1: the pure
            // Gaussian case falls out without special-casing.
            log_pref: ((1.0 - rho) / rho).ln() + 0.5 * (s / noise_var).ln(),
        })
    }

    /// Posterior probability that the component is nonzero.
    pub fn weight(&self, r: f64) -> f64 {
        let log_l = self.log_pref - 0.5 * r * r * self.curvature;
        if log_l > 0.0 {
            let e = (-log_l).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + log_l.exp())
        }
    }

    /// Posterior mean `E[x | r]`.
    pub fn eta(&self, r: f64) -> f64 {
        self.gain * self.weight(r) * r
    }

    /// Derivative of the posterior mean.
    pub fn eta_prime(&self, r: f64) -> f64 {
        let w = self.weight(r);
        self.gain * w * (1.0 + r * r * (1.0 - w) * self.curvature)
    }

    /// Posterior variance `Var(x | r)`.
    pub fn conditional_var(&self, r: f64) -> f64 {
        let w = self.weight(r);
        let g = self.gain;
        g * self.noise_var * w + g * g * r * r * w * (1.0 - w)
    }
}

/// Componentwise posterior mean with its empirical divergence and average
/// posterior variance.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub estimate: DVector<f64>,
    pub divergence: f64,
    pub posterior_var: f64,
}

pub fn bg_posterior_mean(
    r: &DVector<f64>,
    noise_var: f64,
    prior: &SignalPrior,
) -> Result<DenoiserOutput, DenoiserError> {
    let kernel = BgKernel::new(noise_var, prior)?;
    let n = r.len();
    let mut estimate = DVector::zeros(n);
    let mut div = 0.0;
    let mut pvar = 0.0;
    for i in 0..n {
        let ri = r[i];
        estimate[i] = kernel.eta(ri);
        div += kernel.eta_prime(ri);
        pvar += kernel.conditional_var(ri);
    }
    Ok(DenoiserOutput {
        estimate,
        divergence: div / n as f64,
        posterior_var: pvar / n as f64,
    })
}

/// Divergence correction `(estimate - alpha r) / (1 - alpha)`.
pub fn orthogonalize_nle(
    out: &DenoiserOutput,
    r: &DVector<f64>,
) -> Result<DVector<f64>, DenoiserError> {
    if out.estimate.len() != r.len() {
        return Err(DenoiserError::DimensionMismatch {
            expected: out.estimate.len(),
            got: r.len(),
        });
    }
    let alpha = out.divergence;
    if alpha >= DIVERGENCE_LIMIT {
        return Err(DenoiserError::DivergenceAtOne { alpha });
    }
    Ok((&out.estimate - r * alpha) / (1.0 - alpha))
}

fn expect_over_prior(
    prior: &SignalPrior,
    quad: &GaussHermite,
    mut zero_part: impl FnMut() -> f64,
    mut gauss_part: impl FnMut(f64) -> f64,
) -> f64 {
    let rho = prior.rho;
    let sd = prior.component_variance().sqrt();
    let zero = if rho < 1.0 { zero_part() } else { 0.0 };
    let gauss = quad.expect(|u| gauss_part(sd * u));
    (1.0 - rho) * zero + rho * gauss
}

/// Deterministic divergence `E[eta'(x + n)]`, `n ~ N(0, v)`.
pub fn nle_divergence(noise_var: f64, prior: &SignalPrior, quad: &GaussHermite) -> f64 {
    let kernel = match BgKernel::new(noise_var, prior) {
        Ok(k) => k,
        Err(_) => return 0.0, // zero noise: identity map has divergence... immaterial
    };
    let sd = noise_var.sqrt();
    expect_over_prior(
        prior,
        quad,
        || quad.expect(|z| kernel.eta_prime(sd * z)),
        |x| quad.expect(|z| kernel.eta_prime(x + sd * z)),
    )
}

/// Mean squared error of the raw posterior mean at noise level `v`.
pub fn nle_posterior_mse(noise_var: f64, prior: &SignalPrior, quad: &GaussHermite) -> f64 {
    if noise_var <= 0.0 {
        return 0.0;
    }
    let kernel = BgKernel::new(noise_var, prior).expect("positive variance");
    let sd = noise_var.sqrt();
    expect_over_prior(
        prior,
        quad,
        || quad.expect(|z| kernel.eta(sd * z).powi(2)),
        |x| quad.expect(|z| (kernel.eta(x + sd * z) - x).powi(2)),
    )
}

/// Output error variance of the orthogonalized denoiser at input noise
/// level `v`. Zero noise maps to zero.
pub fn nle_mse_transfer(noise_var: f64, prior: &SignalPrior, quad: &GaussHermite) -> f64 {
    if noise_var <= 0.0 {
        return 0.0;
    }
    let kernel = BgKernel::new(noise_var, prior).expect("positive variance");
    let alpha = nle_divergence(noise_var, prior, quad);
    let scale = (1.0 - alpha).max(1e-12);
    let sd = noise_var.sqrt();
    let err = |x: f64, n: f64| kernel.eta(x + n) - x - alpha * n;
    let e2 = expect_over_prior(
        prior,
        quad,
        || quad.expect(|z| err(0.0, sd * z).powi(2)),
        |x| quad.expect(|z| err(x, sd * z).powi(2)),
    );
    e2 / (scale * scale)
}

/// Cross-covariance of two orthogonalized-denoiser output errors whose
/// input noises are jointly Gaussian with variances `v1`, `v2` and
/// covariance `v12`, applied to the same signal.
pub fn nle_cross_transfer(
    v1: f64,
    v2: f64,
    v12: f64,
    prior: &SignalPrior,
    quad: &GaussHermite,
) -> f64 {
    if v1 <= 0.0 || v2 <= 0.0 {
        return 0.0;
    }
    let k1 = BgKernel::new(v1, prior).expect("positive variance");
    let k2 = BgKernel::new(v2, prior).expect("positive variance");
    let a1 = nle_divergence(v1, prior, quad);
    let a2 = nle_divergence(v2, prior, quad);
    let s1 = (1.0 - a1).max(1e-12);
    let s2 = (1.0 - a2).max(1e-12);
    // n1 = a z1, n2 = b z1 + c z2 realizes the joint law
    let a = v1.sqrt();
    let b = v12 / a;
    let c = (v2 - b * b).max(0.0).sqrt();
    let err1 = |x: f64, n: f64| k1.eta(x + n) - x - a1 * n;
    let err2 = |x: f64, n: f64| k2.eta(x + n) - x - a2 * n;
    let rho = prior.rho;
    let sd = prior.component_variance().sqrt();
    let zero = if rho < 1.0 {
        quad.expect2(|z1, z2| err1(0.0, a * z1) * err2(0.0, b * z1 + c * z2))
    } else {
        0.0
    };
    let gauss = quad.expect3(|u, z1, z2| {
        let x = sd * u;
        err1(x, a * z1) * err2(x, b * z1 + c * z2)
    });
    ((1.0 - rho) * zero + rho * gauss) / (s1 * s2)
}

/// Covariance of an orthogonalized-denoiser output error with the error of
/// the all-zero initial estimate (`f_1 = -x`): `E[f * (-x)]`.
pub fn nle_cross_with_initial(noise_var: f64, prior: &SignalPrior, quad: &GaussHermite) -> f64 {
    if noise_var <= 0.0 {
        return 0.0;
    }
    let kernel = BgKernel::new(noise_var, prior).expect("positive variance");
    let alpha = nle_divergence(noise_var, prior, quad);
    let scale = (1.0 - alpha).max(1e-12);
    let sd = noise_var.sqrt();
    let rho = prior.rho;
    let xsd = prior.component_variance().sqrt();
    // the zero atom contributes nothing to E[f x]
    let gauss = quad.expect2(|u, z| {
        let x = xsd * u;
        let n = sd * z;
        (kernel.eta(x + n) - x - alpha * n) * (-x)
    });
    rho * gauss / scale
}
