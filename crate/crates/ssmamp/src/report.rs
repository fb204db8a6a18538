//! Flat-file serialization of run reports and state-evolution trajectories.
//!
//! The CSV schema is shared by empirical runs and predictions so the two
//! can be joined column-for-column:
//!
//! ```text
//! t,mse_phi,mse_gamma,v_gamma_t,v_phi_t,lband_dev_gamma,lband_dev_phi,orth_max,zeta_last
//! ```
//!
//! Trajectory files carry a leading `source` column (`se`). JSON reports
//! mirror the full `RunReport` structure.

use crate::engine::RunReport;
use crate::lbanded::is_lbanded;
use crate::se::SeTrajectory;

pub const RUN_CSV_HEADER: &str =
    "t,mse_phi,mse_gamma,v_gamma_t,v_phi_t,lband_dev_gamma,lband_dev_phi,orth_max,zeta_last";

fn fmt(x: f64) -> String {
    // full round-trip precision keeps reruns bit-comparable
    format!("{x:.17e}")
}

pub fn run_csv_string(report: &RunReport) -> String {
    let mut out = String::from(RUN_CSV_HEADER);
    out.push('\n');
    for rec in &report.iterations {
        let zeta_last = rec.zeta_gamma.last().copied().unwrap_or(1.0);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            rec.t,
            fmt(rec.mse_phi),
            fmt(rec.mse_gamma),
            fmt(rec.v_gamma),
            fmt(rec.v_phi),
            fmt(rec.lband_dev_gamma),
            fmt(rec.lband_dev_phi),
            fmt(rec.orth_max),
            fmt(zeta_last),
        ));
    }
    out
}

pub fn se_csv_string(traj: &SeTrajectory) -> String {
    let mut out = String::from("source,");
    out.push_str(RUN_CSV_HEADER);
    out.push('\n');
    let (_, dev_g) = if traj.cov_gamma.nrows() > 0 {
        is_lbanded(&traj.cov_gamma, 0.0)
    } else {
        (true, 0.0)
    };
    let (_, dev_p) = is_lbanded(&traj.cov_phi, 0.0);
    for t in 1..=traj.iterations() {
        let zeta_last = traj.zeta_last.get(t - 1).copied().unwrap_or(1.0);
        out.push_str(&format!(
            "se,{},{},{},{},{},{},{},{},{}\n",
            t,
            fmt(traj.v_phi[t]),
            fmt(traj.v_gamma[t - 1]),
            fmt(traj.v_gamma[t - 1]),
            fmt(traj.v_phi[t]),
            fmt(dev_g),
            fmt(dev_p),
            fmt(0.0),
            fmt(zeta_last),
        ));
    }
    out
}

pub fn run_json_string(report: &RunReport) -> serde_json::Result<String> {
    serde_json::to_string_pretty(report)
}
