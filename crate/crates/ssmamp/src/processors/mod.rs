//! The two local estimators of the memory iteration.
//!
//! [`mle`] holds the memory linear estimator: a trace-normalized polynomial
//! in `A^T A` applied to the matched-filter residual, plus its closed-form
//! error-moment transfer. [`denoiser`] holds the separable
//! Bernoulli-Gaussian posterior-mean denoiser, its analytic divergence, the
//! divergence correction that orthogonalizes its output, and the
//! quadrature-based MSE transfer functions consumed by state evolution.

pub mod denoiser;
pub mod mle;

pub use denoiser::{
    bg_posterior_mean, nle_cross_transfer, nle_cross_with_initial, nle_divergence,
    nle_mse_transfer, orthogonalize_nle, DenoiserError, DenoiserOutput,
};
pub use mle::{mle_apply, mle_error_moments, MleError, MlePolicy, MleSpec, MleTransfer};
