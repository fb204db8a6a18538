//! Experiment CLI: `run` executes seeds x modes and writes reports,
//! `verify` runs the invariant battery, `se` computes predictions only.
//!
//! Exit codes: 0 success; 1 invariant violations or failed checks;
//! 2 invalid configuration; 3 runtime failure (diagnostics file written).

use clap::{Args, Parser, Subcommand};
use ssmamp::experiment::{
    parse_config, run_experiment, verify_suite, write_diagnostics, ExperimentConfig,
    ExperimentError,
};
use ssmamp::report::se_csv_string;
use ssmamp::se::run_se;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ssmamp", about = "Sufficient-statistic memory AMP experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the experiment configuration file.
    config: PathBuf,
    /// Override the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the worker count from the config.
    #[arg(long)]
    workers: Option<usize>,
    /// Shift every configured seed by this offset.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment: per-seed CSV/JSON reports, prediction CSVs, summary.
    Run(CommonArgs),
    /// Run the invariant verification battery.
    Verify(CommonArgs),
    /// Compute state-evolution predictions only.
    Se(CommonArgs),
}

const EXIT_VIOLATIONS: u8 = 1;
const EXIT_INVALID_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, ExperimentError> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        ExperimentError::InvalidConfig(format!("cannot read {}: {e}", args.config.display()))
    })?;
    let mut config = parse_config(&text)?;
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    if let Some(workers) = args.workers {
        config.workers = workers;
    }
    if args.seed_offset != 0 {
        for s in &mut config.seeds {
            *s = s.wrapping_add(args.seed_offset);
        }
    }
    config.validate()?;
    Ok(config)
}

fn fail(config_dir: Option<&PathBuf>, err: ExperimentError) -> ExitCode {
    match err {
        ExperimentError::InvalidConfig(msg) => {
            eprintln!("invalid configuration: {msg}");
            ExitCode::from(EXIT_INVALID_CONFIG)
        }
        other => {
            eprintln!("runtime failure: {other}");
            if let Some(dir) = config_dir {
                match write_diagnostics(dir, &other) {
                    Ok(path) => eprintln!("diagnostics written to {}", path.display()),
                    Err(e) => eprintln!("could not write diagnostics: {e}"),
                }
            }
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let config = match load_config(&args) {
                Ok(c) => c,
                Err(e) => return fail(None, e),
            };
            match run_experiment(&config) {
                Ok(outcome) => {
                    println!(
                        "wrote {} run reports to {}",
                        outcome.runs.len(),
                        outcome.out_dir.display()
                    );
                    for note in &outcome.notes {
                        println!("note: {note}");
                    }
                    if outcome.violations.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        eprintln!("invariant violations:");
                        for v in &outcome.violations {
                            eprintln!("  - {v}");
                        }
                        ExitCode::from(EXIT_VIOLATIONS)
                    }
                }
                Err(e) => fail(Some(&config.out_dir), e),
            }
        }
        Command::Verify(args) => {
            let config = match load_config(&args) {
                Ok(c) => c,
                Err(e) => return fail(None, e),
            };
            match verify_suite(&config) {
                Ok(report) => {
                    print!("{}", report.render());
                    if report.all_pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_VIOLATIONS)
                    }
                }
                Err(e) => fail(Some(&config.out_dir), e),
            }
        }
        Command::Se(args) => {
            let config = match load_config(&args) {
                Ok(c) => c,
                Err(e) => return fail(None, e),
            };
            let run = || -> Result<(), ExperimentError> {
                std::fs::create_dir_all(&config.out_dir)?;
                for &mode in &config.modes {
                    let mut se_cfg = ssmamp::se::SeConfig::new(mode, config.iterations);
                    se_cfg.damping.eigen_ratio_threshold = config.tolerances.eigen_ratio;
                    let traj = run_se(
                        &config.spec,
                        &config.prior,
                        config.noise_var(),
                        &config.mle,
                        &se_cfg,
                    )
                    .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
                    let path = config.out_dir.join(format!("se_{mode}.csv"));
                    std::fs::write(&path, se_csv_string(&traj))?;
                    println!(
                        "{}: {} iterations, v_phi_star = {:.6e}",
                        path.display(),
                        traj.iterations(),
                        traj.v_phi.last().copied().unwrap_or(f64::NAN)
                    );
                }
                Ok(())
            };
            match run() {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(Some(&config.out_dir), e),
            }
        }
    }
}
