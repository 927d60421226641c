use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::dynamics::TrajectoryLog;
use crate::sim::{ComparisonReport, RunMetrics};

/// Render the trajectory CSV: one header row, then one row per grid point
/// with columns `t, x1..xn, u1..um, s, lambda, theta1..thetap, W1..WL,
/// triggered`. Floats are written with 17 significant digits so identical
/// runs produce byte-identical files.
pub fn trajectory_csv_string(log: &TrajectoryLog) -> String {
    let n = log.states.first().map(|v| v.len()).unwrap_or(0);
    let m = log.controls.first().map(|v| v.len()).unwrap_or(0);
    let p = log.theta_estimates.first().map(|v| v.len()).unwrap_or(0);
    let l = log.critic_weights.first().map(|v| v.len()).unwrap_or(0);

    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.push("s".to_string());
    header.push("lambda".to_string());
    header.extend((1..=p).map(|i| format!("theta{i}")));
    header.extend((1..=l).map(|i| format!("W{i}")));
    header.push("triggered".to_string());

    let mut out = String::with_capacity(64 * (log.len() + 1));
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..log.len() {
        let mut fields: Vec<String> = Vec::with_capacity(header.len());
        fields.push(format!("{:.16e}", log.times[i]));
        fields.extend(log.states[i].iter().map(|v| format!("{v:.16e}")));
        fields.extend(log.controls[i].iter().map(|v| format!("{v:.16e}")));
        fields.push(format!("{:.16e}", log.barrier_values[i]));
        fields.push(format!("{:.16e}", log.multiplier_values[i]));
        fields.extend(log.theta_estimates[i].iter().map(|v| format!("{v:.16e}")));
        fields.extend(log.critic_weights[i].iter().map(|v| format!("{v:.16e}")));
        fields.push(if log.triggered[i] { "1" } else { "0" }.to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Write the trajectory CSV to a file.
pub fn write_trajectory_csv(path: &Path, log: &TrajectoryLog) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(trajectory_csv_string(log).as_bytes())?;
    w.flush()
}

/// Write the run metrics as pretty JSON.
pub fn write_metrics_json(path: &Path, metrics: &RunMetrics) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, metrics)?;
    w.write_all(b"\n")?;
    w.flush()
}

/// Write a comparison report as pretty JSON.
pub fn write_comparison_json(path: &Path, report: &ComparisonReport) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n")?;
    w.flush()
}
