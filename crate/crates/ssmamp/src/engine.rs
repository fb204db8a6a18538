//! The memory iteration and its sufficient-statistic damping wrapper.
//!
//! One run alternates the polynomial linear estimator with the
//! orthogonalized Bernoulli-Gaussian denoiser, starting from the all-zero
//! estimate. In `SsDamped` mode every new output column is combined with
//! its predecessors by variance-optimal damping computed from the oracle
//! error covariance; a column whose arrival makes that covariance singular
//! is dropped from all later damping and the previous combination carries
//! over. Plain mode passes columns through untouched.
//!
//! All covariances are oracle quantities: errors are measured against the
//! true signal, which is what makes the structural claims (L-banded
//! covariances, monotone variances, preserved orthogonality, Gaussian
//! errors) directly checkable.

use crate::damping::{
    covariance_invertible, optimal_damping, DampingConfig, DampingError, DampingVector,
};
use crate::lbanded::is_lbanded;
use crate::processors::{
    bg_posterior_mean, mle_apply, orthogonalize_nle, DenoiserError, MleError, MleSpec,
};
use crate::system::{SignalPrior, SystemError, SystemInstance};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("iterate became non-finite at iteration {t}")]
    NonFiniteIterate { t: usize },
    #[error("run configurations do not match: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Damping(#[from] DampingError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Mle(#[from] MleError),
    #[error(transparent)]
    System(#[from] SystemError),
}

/// Whether the run wraps each column in sufficient-statistic damping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Plain,
    SsDamped,
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunMode::Plain => write!(f, "plain"),
            RunMode::SsDamped => write!(f, "ss"),
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plain" => Ok(RunMode::Plain),
            "ss" | "ss_damped" | "ssdamped" => Ok(RunMode::SsDamped),
            other => Err(format!("unknown run mode `{other}` (expected plain|ss)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub mode: RunMode,
    pub max_iterations: usize,
    pub damping: DampingConfig,
    /// Damped variance below this counts as exact recovery and stops the run.
    pub variance_floor: f64,
    /// Convergence: |v_phi change| < convergence_rel * v_phi_1 for
    /// `convergence_window` consecutive iterations.
    pub convergence_rel: f64,
    pub convergence_window: usize,
    /// Keep iterating after convergence is detected (full-length
    /// trajectories are needed for mode comparisons).
    pub stop_on_convergence: bool,
}

impl EngineConfig {
    pub fn new(mode: RunMode, max_iterations: usize) -> Self {
        Self {
            mode,
            max_iterations,
            damping: DampingConfig::default(),
            variance_floor: 1e-13,
            convergence_rel: 1e-6,
            convergence_window: 3,
            stop_on_convergence: true,
        }
    }
}

/// Error columns plus their Gram matrix `(1/N) <e_i, e_j>`, grown one
/// column at a time.
#[derive(Debug, Clone)]
pub struct CovarianceTracker {
    n: usize,
    columns: Vec<DVector<f64>>,
    gram: DMatrix<f64>,
}

impl CovarianceTracker {
    pub fn new(n: usize) -> Self {
        Self { n, columns: Vec::new(), gram: DMatrix::zeros(0, 0) }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn push(&mut self, column: DVector<f64>) -> usize {
        assert_eq!(column.len(), self.n);
        let t = self.columns.len();
        let mut gram = DMatrix::zeros(t + 1, t + 1);
        gram.view_mut((0, 0), (t, t)).copy_from(&self.gram);
        for (i, existing) in self.columns.iter().enumerate() {
            let v = existing.dot(&column) / self.n as f64;
            gram[(i, t)] = v;
            gram[(t, i)] = v;
        }
        gram[(t, t)] = column.norm_squared() / self.n as f64;
        self.gram = gram;
        self.columns.push(column);
        t
    }

    pub fn column(&self, i: usize) -> &DVector<f64> {
        &self.columns[i]
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.gram[(i, i)]
    }

    /// Gram submatrix over the given column indices.
    pub fn submatrix(&self, indices: &[usize]) -> DMatrix<f64> {
        let k = indices.len();
        DMatrix::from_fn(k, k, |a, b| self.gram[(indices[a], indices[b])])
    }
}

/// Everything a run leaves behind: raw and damped error columns for both
/// sides, active sets, and the damping vectors actually used. Estimate
/// columns are reconstructed on demand from the stored true signal.
#[derive(Debug, Clone)]
pub struct IterationHistory {
    x_true: DVector<f64>,
    /// Errors of the raw linear-estimator outputs.
    pub g_raw: CovarianceTracker,
    /// Errors of the raw denoiser outputs, starting with `f_1 = -x`.
    pub f_raw: CovarianceTracker,
    /// Errors of the damped linear-estimator outputs.
    pub g: CovarianceTracker,
    /// Errors of the damped signal estimates, starting with `f_1 = -x`.
    pub f: CovarianceTracker,
    /// Raw column indices still eligible for damping, per side.
    pub active_gamma: Vec<usize>,
    pub active_phi: Vec<usize>,
    /// Full-length damping vectors per iteration (zeros at excluded
    /// columns).
    pub zeta_gamma: Vec<Vec<f64>>,
    pub zeta_phi: Vec<Vec<f64>>,
}

impl IterationHistory {
    pub fn iterations(&self) -> usize {
        self.g.len()
    }

    pub fn x_true(&self) -> &DVector<f64> {
        &self.x_true
    }

    /// Damped linear-estimator output `r_t` (1-based `t`).
    pub fn r_column(&self, t: usize) -> DVector<f64> {
        self.g.column(t - 1) + &self.x_true
    }

    /// Damped signal estimate `x_t` (1-based `t`, `x_1 = 0`).
    pub fn x_column(&self, t: usize) -> DVector<f64> {
        self.f.column(t - 1) + &self.x_true
    }
}

/// Per-iteration scalars of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub mse_gamma: f64,
    pub mse_phi: f64,
    pub v_gamma: f64,
    pub v_phi: f64,
    pub lband_dev_gamma: f64,
    pub lband_dev_phi: f64,
    pub orth_max: f64,
    pub zeta_gamma: Vec<f64>,
    pub zeta_phi: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct OrthogonalityAudit {
    /// max over t of |<g_t, x>| / N
    pub max_g_x: f64,
    /// max over t, i <= t of |<g_t, f_i>| / N
    pub max_g_f: f64,
    /// max over t, i <= t of |<f_{t+1}, g_i>| / N
    pub max_f_g: f64,
}

impl OrthogonalityAudit {
    pub fn max(&self) -> f64 {
        self.max_g_x.max(self.max_g_f).max(self.max_f_g)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianityRecord {
    pub t: usize,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// Largest deviation between the rank-implied Gaussian correlation of
    /// `(g_t, g_i)` and the one the covariance tracker predicts.
    pub max_copula_dev: f64,
}

/// Full description of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: RunMode,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub delta: f64,
    pub kappa: f64,
    pub rho: f64,
    pub noise_var: f64,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub converged_at: Option<usize>,
    pub v_gamma_star: f64,
    pub v_phi_star: f64,
    pub orthogonality: OrthogonalityAudit,
    pub gaussianity: Vec<GaussianityRecord>,
    /// 1-based iterations whose raw column was excluded from damping.
    pub excluded_gamma: Vec<usize>,
    pub excluded_phi: Vec<usize>,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn mse_phi_series(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.mse_phi).collect()
    }

    pub fn mse_gamma_series(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.mse_gamma).collect()
    }
}

/// Outcome of damping one new raw column against the active set.
#[derive(Debug, Clone)]
pub struct DampStepResult {
    pub column: DVector<f64>,
    /// Weights over all raw columns so far (zeros at excluded ones).
    pub zeta_full: Vec<f64>,
    pub variance: f64,
    /// True when the new column made the covariance singular and was
    /// excluded.
    pub excluded_new: bool,
}

/// One sufficient-statistic damping step.
///
/// `raw` must already contain the new column as its last entry; `active`
/// lists the raw indices still eligible (not including the new column).
/// On a singular active covariance the new column is excluded, the previous
/// damped column and variance carry over, and the reported weights are the
/// previous ones padded with a zero.
pub fn ss_damp_step(
    raw: &CovarianceTracker,
    active: &mut Vec<usize>,
    prev: Option<(&DVector<f64>, f64, &[f64])>,
    config: &DampingConfig,
) -> Result<DampStepResult, EngineError> {
    let new_idx = raw.len() - 1;
    let mut candidate = active.clone();
    candidate.push(new_idx);

    let cov = raw.submatrix(&candidate);
    let t_active = candidate.len();
    let invertible = t_active == 1 || covariance_invertible(&cov, config);
    if !invertible {
        let (prev_col, prev_var, prev_zeta) = prev.ok_or(DampingError::MissingPrev { t: t_active })?;
        let mut zeta_full = prev_zeta.to_vec();
        zeta_full.push(0.0);
        return Ok(DampStepResult {
            column: prev_col.clone(),
            zeta_full,
            variance: prev_var,
            excluded_new: true,
        });
    }

    let zeta = if t_active == 1 {
        DampingVector::new(vec![1.0])
    } else {
        optimal_damping(&cov, None, config)?
    };
    let mut column = DVector::zeros(raw.column(new_idx).len());
    for (w, &idx) in zeta.weights().iter().zip(&candidate) {
        column.axpy(*w, raw.column(idx), 1.0);
    }
    let z = DVector::from_column_slice(zeta.weights());
    let variance = (z.transpose() * &cov * &z)[(0, 0)];
    let mut zeta_full = vec![0.0; raw.len()];
    for (w, &idx) in zeta.weights().iter().zip(&candidate) {
        zeta_full[idx] = *w;
    }
    active.push(new_idx);
    Ok(DampStepResult { column, zeta_full, variance, excluded_new: false })
}

fn ensure_finite(v: &DVector<f64>, t: usize) -> Result<(), EngineError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(EngineError::NonFiniteIterate { t })
    }
}

/// Runs the memory iteration on one instance.
pub fn run_mamp(
    inst: &SystemInstance,
    mle: &MleSpec,
    prior: &SignalPrior,
    config: &EngineConfig,
) -> Result<(RunReport, IterationHistory), EngineError> {
    let n = inst.n();
    let n_f = n as f64;
    let x_true = inst.x_true().clone();
    let ss = config.mode == RunMode::SsDamped;

    let mut history = IterationHistory {
        x_true: x_true.clone(),
        g_raw: CovarianceTracker::new(n),
        f_raw: CovarianceTracker::new(n),
        g: CovarianceTracker::new(n),
        f: CovarianceTracker::new(n),
        active_gamma: Vec::new(),
        active_phi: Vec::new(),
        zeta_gamma: Vec::new(),
        zeta_phi: Vec::new(),
    };
    // x_1 = 0, so f_1 = -x in both the raw and the damped stacks
    history.f_raw.push(-x_true.clone());
    history.f.push(-x_true.clone());
    history.active_phi.push(0);

    let mut records: Vec<IterationRecord> = Vec::new();
    let mut excluded_gamma = Vec::new();
    let mut excluded_phi = Vec::new();
    let mut notes = Vec::new();
    let mut current_x = DVector::zeros(n);
    let v_phi_ref = history.f.variance(0); // ~1 by the prior normalization
    let mut flat_count = 0usize;
    let mut converged_at: Option<usize> = None;

    for t in 1..=config.max_iterations {
        // ---- linear side ----
        let r_raw = mle_apply(mle, inst, &current_x)?;
        ensure_finite(&r_raw, t)?;
        history.g_raw.push(&r_raw - &x_true);

        let (r_t, zeta_g, v_gamma) = if ss {
            let prev = if t > 1 {
                Some((
                    history.g.column(t - 2),
                    history.g.variance(t - 2),
                    history.zeta_gamma[t - 2].as_slice(),
                ))
            } else {
                None
            };
            let step = ss_damp_step(&history.g_raw, &mut history.active_gamma, prev, &config.damping)?;
            if step.excluded_new {
                excluded_gamma.push(t);
            }
            (step.column + &x_true, step.zeta_full, step.variance)
        } else {
            history.active_gamma.push(t - 1);
            let mut zeta = vec![0.0; t];
            zeta[t - 1] = 1.0;
            (r_raw.clone(), zeta, history.g_raw.variance(t - 1))
        };
        ensure_finite(&r_t, t)?;
        history.g.push(&r_t - &x_true);
        history.zeta_gamma.push(zeta_g);
        if !v_gamma.is_finite() {
            return Err(EngineError::NonFiniteIterate { t });
        }

        let mse_gamma = history.g.variance(t - 1);
        let (_, lband_dev_gamma) = is_lbanded(history.g.gram(), 0.0);

        // ---- nonlinear side ----
        let exact_recovery = v_gamma <= config.variance_floor;
        let x_next_raw = if exact_recovery {
            // nothing left to denoise
            notes.push(format!("iteration {t}: damped variance at floor, exact recovery"));
            r_t.clone()
        } else {
            let den = bg_posterior_mean(&r_t, v_gamma, prior)?;
            orthogonalize_nle(&den, &r_t)?
        };
        ensure_finite(&x_next_raw, t)?;
        history.f_raw.push(&x_next_raw - &x_true);

        let (x_next, zeta_p, v_phi) = if ss {
            let prev_idx = history.f.len() - 1;
            let prev_zeta: Vec<f64> = if t > 1 {
                history.zeta_phi[t - 2].clone()
            } else {
                vec![1.0] // "previous" damped estimate is x_1 itself
            };
            let prev = Some((
                history.f.column(prev_idx),
                history.f.variance(prev_idx),
                prev_zeta.as_slice(),
            ));
            let step = ss_damp_step(&history.f_raw, &mut history.active_phi, prev, &config.damping)?;
            if step.excluded_new {
                excluded_phi.push(t);
            }
            (step.column + &x_true, step.zeta_full, step.variance)
        } else {
            history.active_phi.push(t);
            let mut zeta = vec![0.0; t + 1];
            zeta[t] = 1.0;
            (x_next_raw.clone(), zeta, history.f_raw.variance(t))
        };
        ensure_finite(&x_next, t)?;
        history.f.push(&x_next - &x_true);
        history.zeta_phi.push(zeta_p);

        let mse_phi = history.f.variance(t);
        let (_, lband_dev_phi) = is_lbanded(history.f.gram(), 0.0);

        // orthogonality terms introduced this iteration (damped errors)
        let mut orth_max = (history.g.column(t - 1).dot(&x_true) / n_f).abs();
        for i in 0..t {
            orth_max = orth_max.max((history.g.column(t - 1).dot(history.f.column(i)) / n_f).abs());
            orth_max = orth_max.max((history.f.column(t).dot(history.g.column(i)) / n_f).abs());
        }

        records.push(IterationRecord {
            t,
            mse_gamma,
            mse_phi,
            v_gamma,
            v_phi,
            lband_dev_gamma,
            lband_dev_phi,
            orth_max,
            zeta_gamma: records_zeta(&history.zeta_gamma, t - 1),
            zeta_phi: records_zeta(&history.zeta_phi, t - 1),
        });

        // convergence on the damped variance sequence
        let stalled = if t >= 2 {
            let prev_v = records[t - 2].v_phi;
            (v_phi - prev_v).abs() < config.convergence_rel * v_phi_ref
        } else {
            false
        };
        flat_count = if stalled { flat_count + 1 } else { 0 };
        if exact_recovery {
            converged_at.get_or_insert(t);
            break;
        }
        if flat_count >= config.convergence_window {
            converged_at.get_or_insert(t);
            if config.stop_on_convergence {
                break;
            }
        }
        current_x = x_next;
    }

    let executed = records.len();
    let orthogonality = orthogonality_audit(&history);
    let gaussianity = gaussianity_audit(&history);
    let report = RunReport {
        mode: config.mode,
        seed: inst.seed(),
        n,
        m: inst.m(),
        delta: inst.spec().delta,
        kappa: inst.spec().kappa,
        rho: prior.rho,
        noise_var: inst.noise_var(),
        converged: converged_at.is_some(),
        converged_at,
        v_gamma_star: records.last().map(|r| r.v_gamma).unwrap_or(f64::NAN),
        v_phi_star: records.last().map(|r| r.v_phi).unwrap_or(f64::NAN),
        iterations: records,
        orthogonality,
        gaussianity,
        excluded_gamma,
        excluded_phi,
        notes: {
            let mut ns = notes;
            ns.push("covariances are oracle quantities over active columns".into());
            ns.push(format!("executed {executed} iterations"));
            ns
        },
    };
    Ok((report, history))
}

fn records_zeta(zetas: &[Vec<f64>], idx: usize) -> Vec<f64> {
    zetas.get(idx).cloned().unwrap_or_default()
}

/// Maxima of the three orthogonality inner products over the whole run,
/// computed on post-damping errors.
pub fn orthogonality_audit(history: &IterationHistory) -> OrthogonalityAudit {
    let n_f = history.x_true.len() as f64;
    let mut audit = OrthogonalityAudit::default();
    let t_max = history.g.len();
    for t in 1..=t_max {
        let g_t = history.g.column(t - 1);
        audit.max_g_x = audit.max_g_x.max((g_t.dot(&history.x_true) / n_f).abs());
        for i in 1..=t {
            let f_i = history.f.column(i - 1);
            audit.max_g_f = audit.max_g_f.max((g_t.dot(f_i) / n_f).abs());
        }
        if history.f.len() > t {
            let f_next = history.f.column(t);
            for i in 1..=t {
                let g_i = history.g.column(i - 1);
                audit.max_f_g = audit.max_f_g.max((f_next.dot(g_i) / n_f).abs());
            }
        }
    }
    audit
}

fn spearman_rank_correlation(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let n = a.len();
    let rank = |v: &DVector<f64>| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut ranks = vec![0.0; n];
        for (r, &i) in idx.iter().enumerate() {
            ranks[i] = r as f64;
        }
        ranks
    };
    let ra = rank(a);
    let rb = rank(b);
    let mean = (n as f64 - 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..n {
        let xa = ra[i] - mean;
        let xb = rb[i] - mean;
        num += xa * xb;
        da += xa * xa;
        db += xb * xb;
    }
    num / (da.sqrt() * db.sqrt())
}

/// Per-iteration moment statistics of the standardized post-linear-step
/// errors, plus a rank-based check that pairwise dependence is the Gaussian
/// one implied by the tracked covariance.
pub fn gaussianity_audit(history: &IterationHistory) -> Vec<GaussianityRecord> {
    let n = history.x_true.len();
    let n_f = n as f64;
    let mut out = Vec::new();
    for t in 1..=history.g.len() {
        let g_t = history.g.column(t - 1);
        let v_t = history.g.variance(t - 1);
        if v_t <= 0.0 {
            out.push(GaussianityRecord { t, skewness: 0.0, excess_kurtosis: 0.0, max_copula_dev: 0.0 });
            continue;
        }
        let sd = v_t.sqrt();
        let mut m3 = 0.0;
        let mut m4 = 0.0;
        for &g in g_t.iter() {
            let z = g / sd;
            let z2 = z * z;
            m3 += z2 * z;
            m4 += z2 * z2;
        }
        let skewness = m3 / n_f;
        let excess_kurtosis = m4 / n_f - 3.0;
        let mut max_copula_dev = 0.0_f64;
        for i in 1..t {
            let g_i = history.g.column(i - 1);
            let v_i = history.g.variance(i - 1);
            if v_i <= 0.0 {
                continue;
            }
            let predicted = history.g.gram()[(t - 1, i - 1)] / (v_t * v_i).sqrt();
            let rho_s = spearman_rank_correlation(g_t, g_i);
            let implied = 2.0 * (std::f64::consts::PI * rho_s / 6.0).sin();
            max_copula_dev = max_copula_dev.max((implied - predicted).abs());
        }
        out.push(GaussianityRecord { t, skewness, excess_kurtosis, max_copula_dev });
    }
    out
}

/// Re-damps the already-damped linear-side stack at each iteration where
/// its covariance passes the invertibility gate. Returns the largest
/// deviation of the re-damping weights from `e_t` and the largest MSE
/// change, both of which must be negligible when each iterate is already a
/// sufficient statistic.
pub fn damping_idempotence_audit(
    history: &IterationHistory,
    config: &DampingConfig,
) -> (f64, f64) {
    let n_f = history.x_true.len() as f64;
    let mut max_zeta_dev = 0.0_f64;
    let mut max_mse_delta = 0.0_f64;
    for t in 2..=history.g.len() {
        let idx: Vec<usize> = (0..t).collect();
        let cov = history.g.submatrix(&idx);
        if !covariance_invertible(&cov, config) {
            continue;
        }
        let zeta = match optimal_damping(&cov, None, config) {
            Ok(z) => z,
            Err(_) => continue,
        };
        for (i, w) in zeta.weights().iter().enumerate() {
            let target = if i + 1 == t { 1.0 } else { 0.0 };
            max_zeta_dev = max_zeta_dev.max((w - target).abs());
        }
        let mut redamped = DVector::zeros(history.x_true.len());
        for (w, &i) in zeta.weights().iter().zip(&idx) {
            redamped.axpy(*w, history.g.column(i), 1.0);
        }
        let mse_re = redamped.norm_squared() / n_f;
        let mse_orig = history.g.variance(t - 1);
        max_mse_delta = max_mse_delta.max((mse_re - mse_orig).abs());
    }
    (max_zeta_dev, max_mse_delta)
}

/// Checks that feeding the denoiser any unbiased linear mix of earlier
/// damped outputs instead of the latest one brings no MSE improvement.
/// Returns the largest improvement found (positive = the mix was better).
pub fn memory_uselessness_audit(
    history: &IterationHistory,
    inst: &SystemInstance,
    prior: &SignalPrior,
    combos_per_iteration: usize,
) -> f64 {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    let n = inst.n();
    let n_f = n as f64;
    let x_true = inst.x_true();
    let mut max_improvement = f64::NEG_INFINITY;
    for t in 2..=history.g.len() {
        // baseline: the run's own raw denoiser output error at this step
        if history.f_raw.len() <= t {
            break;
        }
        let base_mse = history.f_raw.variance(t);
        let mut rng = ChaCha20Rng::seed_from_u64(inst.seed().wrapping_mul(1315423911) ^ t as u64);
        for _ in 0..combos_per_iteration {
            let mut w: Vec<f64> = (0..t).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = w.iter().sum();
            for x in &mut w {
                *x /= s;
            }
            let mut mixed_err = DVector::zeros(n);
            for (wi, i) in w.iter().zip(0..t) {
                mixed_err.axpy(*wi, history.g.column(i), 1.0);
            }
            let v_mix = mixed_err.norm_squared() / n_f;
            if v_mix <= 0.0 {
                continue;
            }
            let mixed = &mixed_err + x_true;
            let den = match bg_posterior_mean(&mixed, v_mix, prior) {
                Ok(d) => d,
                Err(_) => continue,
            };
            let x_aug = match orthogonalize_nle(&den, &mixed) {
                Ok(x) => x,
                Err(_) => continue,
            };
            let mse_aug = (&x_aug - x_true).norm_squared() / n_f;
            max_improvement = max_improvement.max(base_mse - mse_aug);
        }
    }
    if max_improvement == f64::NEG_INFINITY {
        0.0
    } else {
        max_improvement
    }
}

/// Per-iteration MSE comparison of a plain and a damped run over the same
/// instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DominanceTable {
    pub rows: Vec<DominanceRow>,
    pub slack: f64,
    pub all_dominated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DominanceRow {
    pub t: usize,
    pub mse_plain: f64,
    pub mse_ss: f64,
    pub dominated: bool,
}

/// Builds the dominance table `mse_ss <= mse_plain + slack` per iteration,
/// with `slack = 3 / sqrt(N)`. Fails when the runs are not comparable.
pub fn compare_runs(plain: &RunReport, ss: &RunReport) -> Result<DominanceTable, EngineError> {
    let slack = 3.0 / (plain.n as f64).sqrt();
    compare_runs_with_slack(plain, ss, slack)
}

/// Same as [`compare_runs`] with an explicit slack.
pub fn compare_runs_with_slack(
    plain: &RunReport,
    ss: &RunReport,
    slack: f64,
) -> Result<DominanceTable, EngineError> {
    if plain.mode != RunMode::Plain || ss.mode != RunMode::SsDamped {
        return Err(EngineError::ConfigMismatch("expected one plain and one ss report".into()));
    }
    let same = plain.seed == ss.seed
        && plain.n == ss.n
        && plain.m == ss.m
        && plain.delta == ss.delta
        && plain.kappa == ss.kappa
        && plain.rho == ss.rho
        && plain.noise_var == ss.noise_var;
    if !same {
        return Err(EngineError::ConfigMismatch(
            "plain and ss reports describe different instances".into(),
        ));
    }
    let len = plain.iterations.len().min(ss.iterations.len());
    let mut rows = Vec::with_capacity(len);
    let mut all = true;
    for i in 0..len {
        let mse_plain = plain.iterations[i].mse_phi;
        let mse_ss = ss.iterations[i].mse_phi;
        let dominated = mse_ss <= mse_plain + slack;
        all &= dominated;
        rows.push(DominanceRow { t: i + 1, mse_plain, mse_ss, dominated });
    }
    Ok(DominanceTable { rows, slack, all_dominated: all })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Columns in R^t with an exact prescribed Gram matrix, via Cholesky.
    fn columns_with_gram(gram: &DMatrix<f64>) -> Vec<DVector<f64>> {
        let t = gram.nrows();
        let n = t;
        let chol = (gram * n as f64).cholesky().expect("PSD gram");
        let l = chol.l();
        (0..t).map(|j| DVector::from_fn(n, |i, _| l[(j, i)])).collect()
    }

    #[test]
    fn damp_step_reproduces_hand_case() {
        let gram = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        let mut tracker = CovarianceTracker::new(2);
        for c in columns_with_gram(&gram) {
            tracker.push(c);
        }
        assert_abs_diff_eq!(tracker.gram().clone(), gram, epsilon = 1e-12);

        // replay: first column alone, then both
        let mut active = vec![0usize];
        let prev_col = tracker.column(0).clone();
        let step = ss_damp_step(
            &tracker,
            &mut active,
            Some((&prev_col, 2.0, &[1.0])),
            &DampingConfig::default(),
        )
        .unwrap();
        assert!(!step.excluded_new);
        assert_abs_diff_eq!(step.zeta_full[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(step.zeta_full[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(step.variance, 1.0, epsilon = 1e-12);
        assert_eq!(active, vec![0, 1]);
    }

    #[test]
    fn damp_step_single_column_is_identity() {
        let mut tracker = CovarianceTracker::new(3);
        tracker.push(DVector::from_vec(vec![1.0, 2.0, -1.0]));
        let mut active = Vec::new();
        let step = ss_damp_step(&tracker, &mut active, None, &DampingConfig::default()).unwrap();
        assert_eq!(step.zeta_full, vec![1.0]);
        assert_eq!(step.column, *tracker.column(0));
        assert_abs_diff_eq!(step.variance, tracker.variance(0), epsilon = 1e-14);
    }

    #[test]
    fn singular_arrival_is_excluded_and_carries_over() {
        // third column duplicates the second: covariance singular
        let gram2 = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        let cols = columns_with_gram(&gram2);
        let mut tracker = CovarianceTracker::new(2);
        tracker.push(cols[0].clone());
        tracker.push(cols[1].clone());
        tracker.push(cols[1].clone());

        let mut active = vec![0usize, 1];
        let prev_col = tracker.column(1).clone(); // pretend previous damped column
        let step = ss_damp_step(
            &tracker,
            &mut active,
            Some((&prev_col, 1.0, &[0.0, 1.0])),
            &DampingConfig::default(),
        )
        .unwrap();
        assert!(step.excluded_new);
        assert_eq!(step.zeta_full, vec![0.0, 1.0, 0.0]);
        assert_abs_diff_eq!(step.variance, 1.0, epsilon = 1e-14);
        assert_eq!(step.column, prev_col);
        assert_eq!(active, vec![0, 1], "excluded column must not enter the active set");
    }

    #[test]
    fn tracker_gram_matches_direct_dots() {
        let mut tracker = CovarianceTracker::new(4);
        let a = DVector::from_vec(vec![1.0, 0.0, -1.0, 2.0]);
        let b = DVector::from_vec(vec![0.5, 0.5, 0.5, 0.5]);
        tracker.push(a.clone());
        tracker.push(b.clone());
        assert_abs_diff_eq!(tracker.gram()[(0, 1)], a.dot(&b) / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tracker.variance(1), b.norm_squared() / 4.0, epsilon = 1e-15);
        let sub = tracker.submatrix(&[1]);
        assert_abs_diff_eq!(sub[(0, 0)], tracker.variance(1), epsilon = 1e-15);
    }
}
