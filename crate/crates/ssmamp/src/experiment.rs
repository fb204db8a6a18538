//! Reproducible experiment runner and invariant verification battery.
//!
//! Configuration is a flat key-value text format with section headers:
//!
//! ```text
//! [system]
//! n = 2048
//! delta = 0.5
//! kappa = 10
//! profile = geometric
//! [prior]
//! rho = 0.1
//! [run]
//! snr_db = 30
//! iterations = 30
//! modes = plain,ss
//! seeds = 0..10
//! [output]
//! dir = out
//! ```
//!
//! `run` executes every seed x mode pair, writes one CSV and one JSON
//! report per run plus one prediction CSV per mode, and a summary.
//! `verify` runs the invariant battery and reports a per-check verdict.

use crate::damping::DampingConfig;
use crate::engine::{
    compare_runs_with_slack, damping_idempotence_audit, memory_uselessness_audit, run_mamp,
    EngineConfig, RunMode, RunReport,
};
use crate::lbanded::LBandedMatrix;
use crate::processors::MlePolicy;
use crate::report::{run_csv_string, run_json_string, se_csv_string};
use crate::se::{run_se, SeConfig, SeTrajectory};
use crate::system::{generate_system, SignalPrior, SpectrumProfile, SpectrumSpec};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Statistical and numerical thresholds, all overridable from the config
/// file. Factors are multiples of `1/sqrt(N)`.
#[derive(Debug, Clone, Serialize)]
pub struct Tolerances {
    pub lband_factor: f64,
    pub mono_factor: f64,
    pub orth_factor: f64,
    pub dominance_factor: f64,
    pub gaussianity_factor: f64,
    pub copula_factor: f64,
    pub memory_factor: f64,
    pub se_agreement_rel: f64,
    pub idempotence_zeta: f64,
    pub idempotence_mse: f64,
    pub eigen_ratio: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            lband_factor: 5.0,
            mono_factor: 3.0,
            orth_factor: 5.0,
            dominance_factor: 3.0,
            gaussianity_factor: 15.0,
            copula_factor: 5.0,
            memory_factor: 3.0,
            se_agreement_rel: 0.10,
            idempotence_zeta: 1e-6,
            idempotence_mse: 1e-8,
            eigen_ratio: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Battery {
    /// Pure-algebra checks only (fast).
    Algebra,
    /// Algebra plus the Monte Carlo battery at the configured scale.
    Full,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub spec: SpectrumSpec,
    pub prior: SignalPrior,
    pub snr_db: f64,
    pub iterations: usize,
    pub modes: Vec<RunMode>,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub mle: MlePolicy,
    pub tolerances: Tolerances,
    pub battery: Battery,
}

impl ExperimentConfig {
    /// Noise variance from the SNR definition
    /// `snr = 10 log10(E||Ax||^2 / (M sigma^2))`; with unit signal variance
    /// and the trace normalization, `E||Ax||^2 = N`, so
    /// `sigma^2 = 10^(-snr/10) / delta`.
    pub fn noise_var(&self) -> f64 {
        10f64.powf(-self.snr_db / 10.0) / self.spec.delta
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.spec
            .validate()
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        self.prior
            .validate()
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        if self.prior.rho >= 1.0 {
            return Err(ExperimentError::InvalidConfig(
                "rho = 1 makes the orthogonalized denoiser degenerate (zero signal gain)".into(),
            ));
        }
        if self.iterations == 0 {
            return Err(ExperimentError::InvalidConfig("iterations must be at least 1".into()));
        }
        if self.modes.is_empty() {
            return Err(ExperimentError::InvalidConfig("at least one mode is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::InvalidConfig("at least one seed is required".into()));
        }
        if self.workers == 0 {
            return Err(ExperimentError::InvalidConfig("workers must be at least 1".into()));
        }
        Ok(())
    }

    fn engine_config(&self, mode: RunMode) -> EngineConfig {
        let mut cfg = EngineConfig::new(mode, self.iterations);
        cfg.damping = DampingConfig { eigen_ratio_threshold: self.tolerances.eigen_ratio };
        cfg
    }

    fn se_config(&self, mode: RunMode) -> SeConfig {
        let mut cfg = SeConfig::new(mode, self.iterations);
        cfg.damping = DampingConfig { eigen_ratio_threshold: self.tolerances.eigen_ratio };
        cfg
    }
}

fn parse_seed_list(value: &str) -> Result<Vec<u64>, ExperimentError> {
    let mut seeds = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        if let Some((a, b)) = part.split_once("..") {
            let lo: u64 = a.trim().parse().map_err(|_| bad_seed(part))?;
            let hi: u64 = b.trim().parse().map_err(|_| bad_seed(part))?;
            if hi <= lo {
                return Err(bad_seed(part));
            }
            seeds.extend(lo..hi);
        } else {
            seeds.push(part.parse().map_err(|_| bad_seed(part))?);
        }
    }
    Ok(seeds)
}

fn bad_seed(part: &str) -> ExperimentError {
    ExperimentError::InvalidConfig(format!("cannot parse seed entry `{part}`"))
}

fn parse_mle(value: &str) -> Result<MlePolicy, ExperimentError> {
    let v = value.trim();
    if v.eq_ignore_ascii_case("matched_filter") || v.eq_ignore_ascii_case("matched") {
        return Ok(MlePolicy::MatchedFilter);
    }
    if let Some(rest) = v.strip_prefix("chebyshev:") {
        let k: usize = rest
            .trim()
            .parse()
            .map_err(|_| ExperimentError::InvalidConfig(format!("bad chebyshev degree `{rest}`")))?;
        return Ok(MlePolicy::Chebyshev(k));
    }
    if let Some(rest) = v.strip_prefix("poly:") {
        let coeffs: Result<Vec<f64>, _> = rest.split(',').map(|c| c.trim().parse()).collect();
        return coeffs
            .map(MlePolicy::Polynomial)
            .map_err(|_| ExperimentError::InvalidConfig(format!("bad polynomial coeffs `{rest}`")));
    }
    Err(ExperimentError::InvalidConfig(format!(
        "unknown mle `{v}` (expected matched_filter | chebyshev:K | poly:c0,c1,...)"
    )))
}

/// Parses the flat config format. Unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ExperimentError> {
    let mut entries: HashMap<String, String> = HashMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_ascii_lowercase();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            ExperimentError::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let full = format!("{section}.{}", key.trim().to_ascii_lowercase());
        if entries.insert(full.clone(), value.trim().to_string()).is_some() {
            return Err(ExperimentError::InvalidConfig(format!("duplicate key `{full}`")));
        }
    }

    let mut take = |key: &str| entries.remove(key);
    let require = |opt: Option<String>, key: &str| {
        opt.ok_or_else(|| ExperimentError::InvalidConfig(format!("missing required key `{key}`")))
    };
    let parse_f64 = |s: String, key: &str| {
        s.parse::<f64>()
            .map_err(|_| ExperimentError::InvalidConfig(format!("bad number for `{key}`: `{s}`")))
    };
    let parse_usize = |s: String, key: &str| {
        s.parse::<usize>()
            .map_err(|_| ExperimentError::InvalidConfig(format!("bad integer for `{key}`: `{s}`")))
    };

    let n = parse_usize(require(take("system.n"), "system.n")?, "system.n")?;
    let delta = parse_f64(require(take("system.delta"), "system.delta")?, "system.delta")?;
    let kappa = parse_f64(require(take("system.kappa"), "system.kappa")?, "system.kappa")?;
    let profile = match take("system.profile") {
        Some(s) => s
            .parse::<SpectrumProfile>()
            .map_err(ExperimentError::InvalidConfig)?,
        None => {
            if kappa == 1.0 {
                SpectrumProfile::Flat
            } else {
                SpectrumProfile::Geometric
            }
        }
    };
    let rho = parse_f64(require(take("prior.rho"), "prior.rho")?, "prior.rho")?;
    let snr_db = parse_f64(require(take("run.snr_db"), "run.snr_db")?, "run.snr_db")?;
    let iterations =
        parse_usize(require(take("run.iterations"), "run.iterations")?, "run.iterations")?;
    let modes: Vec<RunMode> = match take("run.modes") {
        Some(s) => s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.parse::<RunMode>())
            .collect::<Result<_, _>>()
            .map_err(ExperimentError::InvalidConfig)?,
        None => vec![RunMode::SsDamped],
    };
    let seeds = match take("run.seeds") {
        Some(s) => parse_seed_list(&s)?,
        None => vec![0],
    };
    let workers = match take("run.workers") {
        Some(s) => parse_usize(s, "run.workers")?,
        None => std::thread::available_parallelism().map(|p| p.get()).unwrap_or(1),
    };
    let mle = match take("run.mle") {
        Some(s) => parse_mle(&s)?,
        None => MlePolicy::MatchedFilter,
    };
    let battery = match take("run.battery") {
        Some(s) => match s.trim().to_ascii_lowercase().as_str() {
            "algebra" => Battery::Algebra,
            "full" => Battery::Full,
            other => {
                return Err(ExperimentError::InvalidConfig(format!(
                    "unknown battery `{other}` (expected algebra|full)"
                )))
            }
        },
        None => Battery::Full,
    };
    let out_dir = PathBuf::from(take("output.dir").unwrap_or_else(|| "out".to_string()));

    let mut tol = Tolerances::default();
    let mut tol_f = |key: &str, slot: &mut f64| -> Result<(), ExperimentError> {
        if let Some(s) = entries.remove(key) {
            *slot = s.parse::<f64>().map_err(|_| {
                ExperimentError::InvalidConfig(format!("bad number for `{key}`: `{s}`"))
            })?;
        }
        Ok(())
    };
    tol_f("tolerances.lband_factor", &mut tol.lband_factor)?;
    tol_f("tolerances.mono_factor", &mut tol.mono_factor)?;
    tol_f("tolerances.orth_factor", &mut tol.orth_factor)?;
    tol_f("tolerances.dominance_factor", &mut tol.dominance_factor)?;
    tol_f("tolerances.gaussianity_factor", &mut tol.gaussianity_factor)?;
    tol_f("tolerances.copula_factor", &mut tol.copula_factor)?;
    tol_f("tolerances.memory_factor", &mut tol.memory_factor)?;
    tol_f("tolerances.se_agreement_rel", &mut tol.se_agreement_rel)?;
    tol_f("tolerances.idempotence_zeta", &mut tol.idempotence_zeta)?;
    tol_f("tolerances.idempotence_mse", &mut tol.idempotence_mse)?;
    tol_f("tolerances.eigen_ratio", &mut tol.eigen_ratio)?;

    if let Some(key) = entries.keys().next() {
        return Err(ExperimentError::InvalidConfig(format!("unknown key `{key}`")));
    }

    let config = ExperimentConfig {
        spec: SpectrumSpec { n, delta, kappa, profile },
        prior: SignalPrior { rho },
        snr_db,
        iterations,
        modes,
        seeds,
        workers,
        out_dir,
        mle,
        tolerances: tol,
        battery,
    };
    config.validate()?;
    Ok(config)
}

/// Scalar digest of one run, kept in the summary.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub mode: RunMode,
    pub iterations: usize,
    pub converged: bool,
    pub converged_at: Option<usize>,
    pub final_mse_phi: f64,
    pub final_mse_gamma: f64,
    pub max_lband_dev: f64,
    pub orth_max: f64,
    pub diverged: bool,
}

fn summarize_run(report: &RunReport) -> RunSummary {
    let max_lband_dev = report
        .iterations
        .iter()
        .map(|r| r.lband_dev_gamma.max(r.lband_dev_phi))
        .fold(0.0, f64::max);
    let mse = report.mse_phi_series();
    let diverged = match (mse.first(), mse.last()) {
        (Some(first), Some(last)) => {
            let min = mse.iter().cloned().fold(f64::INFINITY, f64::min);
            *last > (10.0 * min).max(*first * 0.999_999) && !report.converged
        }
        _ => false,
    };
    RunSummary {
        seed: report.seed,
        mode: report.mode,
        iterations: report.iterations.len(),
        converged: report.converged,
        converged_at: report.converged_at,
        final_mse_phi: mse.last().copied().unwrap_or(f64::NAN),
        final_mse_gamma: report.mse_gamma_series().last().copied().unwrap_or(f64::NAN),
        max_lband_dev,
        orth_max: report.orthogonality.max(),
        diverged,
    }
}

#[derive(Debug, Serialize)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub runs: Vec<RunSummary>,
    pub violations: Vec<String>,
    pub notes: Vec<String>,
}

struct SeedOutput {
    seed: u64,
    reports: Vec<(RunMode, RunReport)>,
    idempotence: Option<(f64, f64)>,
    memory_improvement: Option<f64>,
}

fn execute_seeds(
    config: &ExperimentConfig,
    with_history_audits: bool,
) -> Result<Vec<SeedOutput>, ExperimentError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    let noise_var = config.noise_var();
    let results: Vec<Result<SeedOutput, ExperimentError>> = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| {
                let inst = generate_system(seed, &config.spec, &config.prior, noise_var)
                    .map_err(|e| ExperimentError::Runtime(format!("seed {seed}: {e}")))?;
                let mle = crate::processors::MleSpec::from_policy(&config.mle, inst.spectrum())
                    .map_err(|e| ExperimentError::Runtime(format!("seed {seed}: {e}")))?;
                let mut reports = Vec::new();
                let mut idempotence = None;
                let mut memory_improvement = None;
                for &mode in &config.modes {
                    let (report, history) = run_mamp(&inst, &mle, &config.prior, &config.engine_config(mode))
                        .map_err(|e| {
                            ExperimentError::Runtime(format!("seed {seed} mode {mode}: {e}"))
                        })?;
                    if with_history_audits && mode == RunMode::SsDamped {
                        idempotence = Some(damping_idempotence_audit(
                            &history,
                            &DampingConfig { eigen_ratio_threshold: config.tolerances.eigen_ratio },
                        ));
                        memory_improvement =
                            Some(memory_uselessness_audit(&history, &inst, &config.prior, 5));
                    }
                    reports.push((mode, report));
                }
                Ok(SeedOutput { seed, reports, idempotence, memory_improvement })
            })
            .collect()
    });
    let mut outputs = Vec::with_capacity(results.len());
    for r in results {
        outputs.push(r?);
    }
    outputs.sort_by_key(|o| {
        config.seeds.iter().position(|&s| s == o.seed).unwrap_or(usize::MAX)
    });
    Ok(outputs)
}

fn se_trajectories(
    config: &ExperimentConfig,
) -> Result<Vec<(RunMode, SeTrajectory)>, ExperimentError> {
    let noise_var = config.noise_var();
    config
        .modes
        .iter()
        .map(|&mode| {
            run_se(&config.spec, &config.prior, noise_var, &config.mle, &config.se_config(mode))
                .map(|t| (mode, t))
                .map_err(|e| ExperimentError::Runtime(format!("state evolution ({mode}): {e}")))
        })
        .collect()
}

/// Checks the structural invariants of one damped run against the
/// configured tolerances; returns human-readable violation strings.
fn structural_violations(report: &RunReport, tol: &Tolerances) -> Vec<String> {
    let mut out = Vec::new();
    let n_f = report.n as f64;
    let lband_tol = tol.lband_factor / n_f.sqrt();
    let mono_slack = tol.mono_factor / n_f.sqrt();
    let orth_tol = tol.orth_factor / n_f.sqrt();
    let seed = report.seed;
    for rec in &report.iterations {
        if rec.lband_dev_gamma > lband_tol || rec.lband_dev_phi > lband_tol {
            out.push(format!(
                "seed {seed} t {}: L-banded deviation {:.3e} exceeds {lband_tol:.3e}",
                rec.t,
                rec.lband_dev_gamma.max(rec.lband_dev_phi)
            ));
        }
    }
    for w in report.iterations.windows(2) {
        if w[1].v_gamma > w[0].v_gamma + mono_slack || w[1].v_phi > w[0].v_phi + mono_slack {
            out.push(format!(
                "seed {seed} t {}: damped variance increased beyond {mono_slack:.3e}",
                w[1].t
            ));
        }
    }
    if report.orthogonality.max() > orth_tol {
        out.push(format!(
            "seed {seed}: orthogonality violation {:.3e} exceeds {orth_tol:.3e}",
            report.orthogonality.max()
        ));
    }
    out
}

/// Compares seed-averaged empirical MSE against the prediction; a
/// deviation counts only when it exceeds both the relative tolerance and
/// three standard errors of the seed average.
fn se_agreement_violations(
    mode: RunMode,
    traj: &SeTrajectory,
    reports: &[&RunReport],
    tol: &Tolerances,
    max_t: usize,
) -> (Vec<String>, f64) {
    let mut out = Vec::new();
    let mut max_rel = 0.0_f64;
    let horizon = traj
        .iterations()
        .min(reports.iter().map(|r| r.iterations.len()).min().unwrap_or(0))
        .min(max_t);
    for t in 1..=horizon {
        let samples: Vec<f64> = reports.iter().map(|r| r.iterations[t - 1].mse_phi).collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>()
            / samples.len().max(1) as f64;
        let sem = (var / samples.len() as f64).sqrt();
        let predicted = traj.v_phi[t];
        let rel = (mean - predicted).abs() / predicted.abs().max(1e-30);
        max_rel = max_rel.max(rel);
        if rel > tol.se_agreement_rel && (mean - predicted).abs() > 3.0 * sem {
            out.push(format!(
                "mode {mode} t {t}: seed-mean mse {mean:.4e} vs predicted {predicted:.4e} ({:.1}% off)",
                rel * 100.0
            ));
        }
    }
    (out, max_rel)
}

/// Runs the configured experiment and writes all artifacts under the
/// output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;

    let se = se_trajectories(config)?;
    for (mode, traj) in &se {
        std::fs::write(config.out_dir.join(format!("se_{mode}.csv")), se_csv_string(traj))?;
    }

    let outputs = execute_seeds(config, false)?;
    let mut run_summaries = Vec::new();
    let mut violations = Vec::new();
    let mut notes = Vec::new();
    for out in &outputs {
        for (mode, report) in &out.reports {
            let base = config.out_dir.join(format!("run_seed{}_{}", out.seed, mode));
            std::fs::write(base.with_extension("csv"), run_csv_string(report))?;
            std::fs::write(
                base.with_extension("json"),
                run_json_string(report).map_err(|e| ExperimentError::Runtime(e.to_string()))?,
            )?;
            let summary = summarize_run(report);
            if summary.diverged {
                // divergence of an undamped run is expected behavior, not an
                // invariant violation
                notes.push(format!(
                    "seed {} mode {}: did not converge (final mse {:.3e})",
                    out.seed, mode, summary.final_mse_phi
                ));
            }
            if *mode == RunMode::SsDamped {
                violations.extend(structural_violations(report, &config.tolerances));
            }
            run_summaries.push(summary);
        }
        // dominance verdict when both modes ran
        let plain = out.reports.iter().find(|(m, _)| *m == RunMode::Plain);
        let ss = out.reports.iter().find(|(m, _)| *m == RunMode::SsDamped);
        if let (Some((_, p)), Some((_, s))) = (plain, ss) {
            let slack = config.tolerances.dominance_factor / (p.n as f64).sqrt();
            match compare_runs_with_slack(p, s, slack) {
                Ok(table) => {
                    if !table.all_dominated {
                        violations.push(format!(
                            "seed {}: damped run worse than plain beyond slack {slack:.3e}",
                            out.seed
                        ));
                    }
                }
                Err(e) => violations.push(format!("seed {}: {e}", out.seed)),
            }
        }
    }

    // prediction agreement per mode (damped runs only; undamped runs may
    // leave the prediction's basin at finite size)
    for (mode, traj) in &se {
        if *mode != RunMode::SsDamped {
            continue;
        }
        let mode_reports: Vec<&RunReport> = outputs
            .iter()
            .flat_map(|o| o.reports.iter())
            .filter(|(m, _)| m == mode)
            .map(|(_, r)| r)
            .collect();
        if mode_reports.is_empty() {
            continue;
        }
        let (v, max_rel) =
            se_agreement_violations(*mode, traj, &mode_reports, &config.tolerances, 20);
        notes.push(format!(
            "mode {mode}: max relative deviation from prediction {:.2}% (t <= 20)",
            max_rel * 100.0
        ));
        violations.extend(v);
    }

    let outcome = ExperimentOutcome {
        out_dir: config.out_dir.clone(),
        runs: run_summaries,
        violations,
        notes,
    };
    std::fs::write(
        config.out_dir.join("summary.json"),
        serde_json::to_string_pretty(&outcome)
            .map_err(|e| ExperimentError::Runtime(e.to_string()))?,
    )?;
    std::fs::write(config.out_dir.join("summary.txt"), render_summary_table(&outcome))?;
    Ok(outcome)
}

fn render_summary_table(outcome: &ExperimentOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>6} {:>6} {:>5} {:>10} {:>12} {:>12} {:>12} {:>9}",
        "seed", "mode", "iters", "converged", "mse_phi", "lband_dev", "orth_max", "diverged"
    );
    for r in &outcome.runs {
        let _ = writeln!(
            s,
            "{:>6} {:>6} {:>5} {:>10} {:>12.4e} {:>12.4e} {:>12.4e} {:>9}",
            r.seed,
            r.mode.to_string(),
            r.iterations,
            r.converged_at.map(|t| t.to_string()).unwrap_or_else(|| "-".into()),
            r.final_mse_phi,
            r.max_lband_dev,
            r.orth_max,
            r.diverged
        );
    }
    if !outcome.notes.is_empty() {
        let _ = writeln!(s, "\nnotes:");
        for n in &outcome.notes {
            let _ = writeln!(s, "  - {n}");
        }
    }
    if outcome.violations.is_empty() {
        let _ = writeln!(s, "\nall invariants satisfied");
    } else {
        let _ = writeln!(s, "\ninvariant violations:");
        for v in &outcome.violations {
            let _ = writeln!(s, "  - {v}");
        }
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyRow {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
    pub all_pass: bool,
}

impl VerifyReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for row in &self.rows {
            let _ = writeln!(
                s,
                "[{}] {:<24} {}",
                if row.pass { "PASS" } else { "FAIL" },
                row.name,
                row.detail
            );
        }
        let _ = writeln!(s, "verdict: {}", if self.all_pass { "PASS" } else { "FAIL" });
        s
    }
}

fn algebra_rows(rows: &mut Vec<VerifyRow>) {
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    // closed-form tridiagonal inverse against dense inversion
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut max_id = 0.0_f64;
    let mut max_rel = 0.0_f64;
    let mut max_total = 0.0_f64;
    for _ in 0..300 {
        let t = rng.gen_range(1..=20);
        let mut diag: Vec<f64> = (0..t).map(|_| rng.gen_range(1e-3..10.0)).collect();
        diag.sort_by(|a, b| b.total_cmp(a));
        diag.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        let m = LBandedMatrix::new(diag.clone()).unwrap();
        let t = m.dim();
        let tri = m.inverse().unwrap().to_dense();
        max_id = max_id.max((m.expand() * &tri - DMatrix::identity(t, t)).abs().max());
        let dense = m.expand().try_inverse().unwrap();
        for i in 0..t {
            for j in 0..t {
                let scale = dense[(i, j)].abs().max(1.0);
                max_rel = max_rel.max((tri[(i, j)] - dense[(i, j)]).abs() / scale);
            }
        }
        let (_, total) = m.quadratic_sums().unwrap();
        let expected = 1.0 / m.diag()[t - 1];
        max_total = max_total.max((total - expected).abs() / expected);
    }
    rows.push(VerifyRow {
        name: "lbanded-inverse".into(),
        pass: max_id < 1e-10 && max_rel < 1e-9 && max_total < 1e-12,
        detail: format!("|VVinv-I| {max_id:.2e}, rel {max_rel:.2e}, sum {max_total:.2e}"),
    });

    // optimal damping against the KKT oracle plus brute-force dominance
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let mut max_gap = 0.0_f64;
    let mut dominance_ok = true;
    for _ in 0..200 {
        let t = rng.gen_range(2..=12);
        let g = DMatrix::<f64>::from_fn(t, t, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        let eigs =
            DVector::from_fn(t, |i, _| if i == 0 { 1.0 } else { (-rng.gen::<f64>() * 13.8).exp() });
        let v = &q * DMatrix::from_diagonal(&eigs) * q.transpose();
        let v = (&v + v.transpose()) * 0.5;
        let z = crate::damping::optimal_damping(&v, None, &DampingConfig::default()).unwrap();
        let zo = crate::damping::qp_oracle_damping(&v).unwrap();
        for (a, b) in z.weights().iter().zip(zo.weights()) {
            max_gap = max_gap.max((a - b).abs());
        }
        let opt = crate::damping::damped_variance(&v, &z).unwrap();
        for _ in 0..100 {
            let mut w: Vec<f64> = (0..t).map(|_| StandardNormal.sample(&mut rng)).collect();
            let s: f64 = w.iter().sum();
            if s.abs() < 0.1 {
                continue;
            }
            for x in &mut w {
                *x /= s;
            }
            let cand = crate::damping::DampingVector::new(w);
            if crate::damping::damped_variance(&v, &cand).unwrap() < opt - 1e-10 {
                dominance_ok = false;
            }
        }
    }
    rows.push(VerifyRow {
        name: "damping-oracle".into(),
        pass: max_gap < 1e-8 && dominance_ok,
        detail: format!("max |closed-form - KKT| {max_gap:.2e}, dominance {dominance_ok}"),
    });

    // sufficient-statistic collapse: optimum attains the corner variance
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut max_obj_gap = 0.0_f64;
    for _ in 0..200 {
        let t = rng.gen_range(1..=12);
        let mut diag: Vec<f64> = (0..t).map(|_| rng.gen_range(0.01..10.0)).collect();
        diag.sort_by(|a, b| b.total_cmp(a));
        diag.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
        let v = LBandedMatrix::new(diag.clone()).unwrap().expand();
        let t = diag.len();
        let z = crate::damping::optimal_damping(&v, None, &DampingConfig::default()).unwrap();
        let opt = crate::damping::damped_variance(&v, &z).unwrap();
        max_obj_gap = max_obj_gap.max((opt - v[(t - 1, t - 1)]).abs());
    }
    rows.push(VerifyRow {
        name: "ss-collapse".into(),
        pass: max_obj_gap < 1e-10,
        detail: format!("max |optimum - corner| {max_obj_gap:.2e}"),
    });
}

/// Runs the invariant battery at the configured scale.
pub fn verify_suite(config: &ExperimentConfig) -> Result<VerifyReport, ExperimentError> {
    config.validate()?;
    let mut rows = Vec::new();
    algebra_rows(&mut rows);

    if config.battery == Battery::Full {
        let tol = &config.tolerances;
        let n_f = config.spec.n as f64;
        let se = se_trajectories(config)?;
        let outputs = execute_seeds(config, true)?;

        let ss_reports: Vec<&RunReport> = outputs
            .iter()
            .flat_map(|o| o.reports.iter())
            .filter(|(m, _)| *m == RunMode::SsDamped)
            .map(|(_, r)| r)
            .collect();

        if !ss_reports.is_empty() {
            let lband_tol = tol.lband_factor / n_f.sqrt();
            let max_dev = ss_reports
                .iter()
                .flat_map(|r| r.iterations.iter())
                .map(|r| r.lband_dev_gamma.max(r.lband_dev_phi))
                .fold(0.0, f64::max);
            rows.push(VerifyRow {
                name: "lband-empirical".into(),
                pass: max_dev <= lband_tol,
                detail: format!("max deviation {max_dev:.3e} vs tol {lband_tol:.3e}"),
            });

            let mono_slack = tol.mono_factor / n_f.sqrt();
            let mut max_increase = 0.0_f64;
            for r in &ss_reports {
                for w in r.iterations.windows(2) {
                    max_increase = max_increase
                        .max(w[1].v_gamma - w[0].v_gamma)
                        .max(w[1].v_phi - w[0].v_phi);
                }
            }
            rows.push(VerifyRow {
                name: "monotonicity".into(),
                pass: max_increase <= mono_slack,
                detail: format!("max variance increase {max_increase:.3e} vs slack {mono_slack:.3e}"),
            });

            let orth_tol = tol.orth_factor / n_f.sqrt();
            let max_orth = ss_reports
                .iter()
                .map(|r| r.orthogonality.max())
                .fold(0.0, f64::max);
            rows.push(VerifyRow {
                name: "orthogonality".into(),
                pass: max_orth <= orth_tol,
                detail: format!("max inner product {max_orth:.3e} vs tol {orth_tol:.3e}"),
            });

            let moment_tol = tol.gaussianity_factor / n_f.sqrt();
            let copula_tol = tol.copula_factor / n_f.sqrt();
            let mut max_moment = 0.0_f64;
            let mut max_copula = 0.0_f64;
            for r in &ss_reports {
                for g in &r.gaussianity {
                    max_moment = max_moment.max(g.skewness.abs()).max(g.excess_kurtosis.abs());
                    max_copula = max_copula.max(g.max_copula_dev);
                }
            }
            rows.push(VerifyRow {
                name: "gaussianity".into(),
                pass: max_moment <= moment_tol && max_copula <= copula_tol,
                detail: format!(
                    "max |moment| {max_moment:.3e} vs {moment_tol:.3e}, copula {max_copula:.3e} vs {copula_tol:.3e}"
                ),
            });

            let mut max_zeta = 0.0_f64;
            let mut max_mse = 0.0_f64;
            for o in &outputs {
                if let Some((z, m)) = o.idempotence {
                    max_zeta = max_zeta.max(z);
                    max_mse = max_mse.max(m);
                }
            }
            rows.push(VerifyRow {
                name: "damping-idempotence".into(),
                pass: max_zeta <= tol.idempotence_zeta && max_mse <= tol.idempotence_mse,
                detail: format!("zeta dev {max_zeta:.3e}, mse delta {max_mse:.3e}"),
            });

            let mem_tol = tol.memory_factor / n_f.sqrt();
            let max_improvement = outputs
                .iter()
                .filter_map(|o| o.memory_improvement)
                .fold(0.0_f64, f64::max);
            rows.push(VerifyRow {
                name: "memory-uselessness".into(),
                pass: max_improvement <= mem_tol,
                detail: format!("best augmentation gain {max_improvement:.3e} vs tol {mem_tol:.3e}"),
            });

            if let Some((_, traj)) = se.iter().find(|(m, _)| *m == RunMode::SsDamped) {
                let (violations, max_rel) =
                    se_agreement_violations(RunMode::SsDamped, traj, &ss_reports, tol, 20);
                rows.push(VerifyRow {
                    name: "se-agreement".into(),
                    pass: violations.is_empty(),
                    detail: format!("max relative deviation {:.2}%", max_rel * 100.0),
                });
            }
        }

        // dominance when both modes are configured
        if config.modes.contains(&RunMode::Plain) && config.modes.contains(&RunMode::SsDamped) {
            let slack = tol.dominance_factor / n_f.sqrt();
            let mut all = true;
            let mut worst = f64::NEG_INFINITY;
            for o in &outputs {
                let p = o.reports.iter().find(|(m, _)| *m == RunMode::Plain).map(|(_, r)| r);
                let s = o.reports.iter().find(|(m, _)| *m == RunMode::SsDamped).map(|(_, r)| r);
                if let (Some(p), Some(s)) = (p, s) {
                    if let Ok(table) = compare_runs_with_slack(p, s, slack) {
                        all &= table.all_dominated;
                        for row in &table.rows {
                            worst = worst.max(row.mse_ss - row.mse_plain);
                        }
                    }
                }
            }
            rows.push(VerifyRow {
                name: "dominance".into(),
                pass: all,
                detail: format!("worst (mse_ss - mse_plain) {worst:.3e} vs slack {slack:.3e}"),
            });
        }
    }

    let all_pass = rows.iter().all(|r| r.pass);
    Ok(VerifyReport { rows, all_pass })
}

/// Writes a diagnostics file for a runtime failure; used by the CLI to
/// satisfy the exit-code contract.
pub fn write_diagnostics(dir: &Path, err: &ExperimentError) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("diagnostics.txt");
    std::fs::write(&path, format!("{err}\n"))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
[system]
n = 512
delta = 0.5
kappa = 10
profile = geometric
[prior]
rho = 0.1
[run]
snr_db = 30
iterations = 5
modes = plain,ss
seeds = 1
workers = 1
";

    #[test]
    fn parses_minimal_config() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.spec.n, 512);
        assert_eq!(cfg.seeds, vec![1]);
        assert_eq!(cfg.modes, vec![RunMode::Plain, RunMode::SsDamped]);
        assert!((cfg.noise_var() - 10f64.powf(-3.0) / 0.5).abs() < 1e-15);
    }

    #[test]
    fn seed_ranges_expand() {
        assert_eq!(parse_seed_list("0..3, 7").unwrap(), vec![0, 1, 2, 7]);
        assert!(parse_seed_list("5..2").is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_degenerate_rho() {
        let bad = format!("{MINIMAL}\ntypo = 1\n");
        assert!(matches!(parse_config(&bad), Err(ExperimentError::InvalidConfig(_))));

        let degenerate = MINIMAL.replace("rho = 0.1", "rho = 1.0");
        assert!(matches!(parse_config(&degenerate), Err(ExperimentError::InvalidConfig(_))));
    }

    #[test]
    fn algebra_battery_is_fast_and_passes() {
        let mut cfg = parse_config(MINIMAL).unwrap();
        cfg.battery = Battery::Algebra;
        let start = std::time::Instant::now();
        let report = verify_suite(&cfg).unwrap();
        assert!(report.all_pass, "{}", report.render());
        assert!(start.elapsed().as_secs_f64() < 1.0, "algebra battery too slow");
    }
}
