//! Sufficient-statistic memory approximate message passing (SS-MAMP).
//!
//! Recovers an IID signal `x` from noisy linear observations `y = A x + n`
//! where `A` is a large right-rotationally-invariant matrix. A memory AMP
//! iteration alternates a polynomial linear estimator with a separable
//! Bernoulli-Gaussian denoiser; wrapping every iterate in variance-optimal
//! damping makes each iterate a sufficient statistic of its predecessors,
//! which forces the error covariance matrices into L-banded form and makes
//! the iteration monotone and convergent.
//!
//! The crate provides:
//! - [`lbanded`]: exact algebra for L-banded matrices (closed-form
//!   tridiagonal inverse, quadratic-form identities);
//! - [`damping`]: the optimal damping vector `V^-1 1 / (1^T V^-1 1)`, its
//!   damped variance, the sufficient-statistic test, and an independent
//!   KKT oracle;
//! - [`system`]: synthetic instance generation with controlled spectra;
//! - [`processors`]: the trace-normalized polynomial linear estimator and
//!   the divergence-corrected Bernoulli-Gaussian denoiser;
//! - [`engine`]: the iteration itself, in plain and sufficient-statistic
//!   damped modes, with covariance/orthogonality/Gaussianity audits;
//! - [`se`]: the deterministic state-evolution prediction of both modes;
//! - [`experiment`]: a reproducible experiment runner and invariant
//!   verification battery behind a flat config-file format.

pub mod damping;
pub mod engine;
pub mod experiment;
pub mod lbanded;
pub mod processors;
pub mod quadrature;
pub mod report;
pub mod se;
pub mod system;

pub use damping::{optimal_damping, qp_oracle_damping, DampingConfig, DampingVector};
pub use engine::{run_mamp, EngineConfig, IterationHistory, RunMode, RunReport};
pub use lbanded::{is_lbanded, LBandedMatrix, TridiagonalMatrix};
pub use se::{run_se, SeTrajectory};
pub use system::{generate_system, SignalPrior, SpectrumProfile, SpectrumSpec, SystemInstance};
