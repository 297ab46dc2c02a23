//! CSV output. Floats use Rust's shortest round-trip formatting; rows end in
//! `\n`.

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{RecoveryCurve, TrialRecord};

pub const RECOVERY_FILE: &str = "recovery.csv";
pub const TRIALS_FILE: &str = "trials.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.csv";

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates `dir` and writes the resolved config there.
pub fn prepare_output(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, config.to_toml()).map_err(|e| Error::io(path, e))
}

/// Writes `recovery.csv` (`t,recovery_rate,stderr`) and `trials.csv`
/// (`trial,measurements_to_recovery`, `-1` when never recovered).
pub fn emit_csv(curve: &RecoveryCurve, records: &[TrialRecord], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let recovery = dir.join(RECOVERY_FILE);
    let mut w = writer(&recovery)?;
    w.write_record(["t", "recovery_rate", "stderr"])
        .map_err(|e| csv_error(&recovery, e))?;
    for (i, (p, se)) in curve.rate.iter().zip(&curve.stderr).enumerate() {
        w.write_record([(i + 1).to_string(), p.to_string(), se.to_string()])
            .map_err(|e| csv_error(&recovery, e))?;
    }
    w.flush().map_err(|e| Error::io(&recovery, e))?;

    let trials = dir.join(TRIALS_FILE);
    let mut w = writer(&trials)?;
    w.write_record(["trial", "measurements_to_recovery"])
        .map_err(|e| csv_error(&trials, e))?;
    for r in records {
        let m = r.measurements_to_recovery.map_or(-1, |m| m as i64);
        w.write_record([r.trial.to_string(), m.to_string()])
            .map_err(|e| csv_error(&trials, e))?;
    }
    w.flush().map_err(|e| Error::io(&trials, e))?;
    Ok((recovery, trials))
}

/// One row of a sweep summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub agents: usize,
    pub k: usize,
    pub trials: usize,
    pub recovered: usize,
    pub mean_per_agent: Option<f64>,
    pub stderr_per_agent: Option<f64>,
}

pub fn emit_summary(rows: &[SweepRow], dir: &Path) -> Result<PathBuf> {
    let path = dir.join(SUMMARY_FILE);
    let mut w = writer(&path)?;
    w.write_record([
        "agents",
        "k",
        "trials",
        "recovered",
        "mean_measurements_per_agent",
        "stderr",
    ])
    .map_err(|e| csv_error(&path, e))?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        w.write_record([
            r.agents.to_string(),
            r.k.to_string(),
            r.trials.to_string(),
            r.recovered.to_string(),
            opt(r.mean_per_agent),
            opt(r.stderr_per_agent),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
