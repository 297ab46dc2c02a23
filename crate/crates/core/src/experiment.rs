//! Batches of independent trials and their aggregate metrics.

use std::path::Path;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::policy::ActionSpace;
use crate::report;
use crate::runtime::{run_episode, TrialTrace};

/// Fraction of trials recovered by each team measurement count `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryCurve {
    pub rate: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl RecoveryCurve {
    /// `recovered_at[i]` is trial `i`'s first recovery count, if any.
    pub fn from_recovery_times(recovered_at: &[Option<usize>], budget: usize) -> Self {
        let n = recovered_at.len();
        let mut rate = Vec::with_capacity(budget);
        let mut stderr = Vec::with_capacity(budget);
        for t in 1..=budget {
            let hits = recovered_at.iter().filter(|r| r.is_some_and(|s| s <= t)).count();
            let p = if n == 0 { 0.0 } else { hits as f64 / n as f64 };
            // sample sd of a 0/1 indicator: sqrt(n p (1 - p) / (n - 1))
            let se = if n > 1 {
                (n as f64 * p * (1.0 - p) / (n as f64 - 1.0)).sqrt() / (n as f64).sqrt()
            } else {
                0.0
            };
            rate.push(p);
            stderr.push(se);
        }
        Self { rate, stderr }
    }

    pub fn final_rate(&self) -> f64 {
        self.rate.last().copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    /// Team measurements until first recovery.
    pub measurements_to_recovery: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub curve: RecoveryCurve,
    pub records: Vec<TrialRecord>,
    pub traces: Vec<TrialTrace>,
}

impl ExperimentResult {
    /// Mean and standard error of measurements per agent over recovered
    /// trials only; `None` if no trial recovered.
    pub fn per_agent_mean(&self, agents: usize) -> Option<(f64, f64)> {
        let xs: Vec<f64> = self
            .records
            .iter()
            .filter_map(|r| r.measurements_to_recovery)
            .map(|m| m as f64 / agents as f64)
            .collect();
        mean_and_stderr(&xs)
    }

    pub fn recovered(&self) -> usize {
        self.records.iter().filter(|r| r.measurements_to_recovery.is_some()).count()
    }
}

pub fn mean_and_stderr(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

/// Seed of trial `i`. Every method run with the same master seed sees the
/// same per-trial seeds.
pub fn trial_seed(master_seed: u64, trial: usize) -> u64 {
    master_seed.wrapping_add(trial as u64)
}

/// Runs all trials in memory.
pub fn run_trials(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let grid = config.grid()?;
    let space = ActionSpace::new(grid, config.max_range, &config.noise);
    if space.is_empty() {
        return Err(Error::config("no feasible sensing actions on this grid"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    let traces = pool.install(|| {
        (0..config.trials)
            .into_par_iter()
            .map(|i| run_episode(config, &space, trial_seed(config.master_seed, i)))
            .collect::<Result<Vec<_>>>()
    })?;
    let times: Vec<Option<usize>> = traces.iter().map(|t| t.recovered_at).collect();
    let records = times
        .iter()
        .enumerate()
        .map(|(trial, &m)| TrialRecord {
            trial,
            measurements_to_recovery: m,
        })
        .collect();
    Ok(ExperimentResult {
        curve: RecoveryCurve::from_recovery_times(&times, config.budget),
        records,
        traces,
    })
}

/// Runs the trials and writes `recovery.csv`, `trials.csv` and the resolved
/// `config.toml` into `out_dir`. The directory is created and written to
/// before any simulation so a bad path fails fast.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentResult> {
    config.validate()?;
    let resolved = config.clone().resolved();
    report::prepare_output(out_dir, &resolved)?;
    log::info!(
        "{} trials, J = {}, k = {}, {:?}/{:?} -> {}",
        config.trials,
        config.agents,
        config.k,
        config.policy,
        config.inference,
        out_dir.display()
    );
    let result = run_trials(&resolved)?;
    report::emit_csv(&result.curve, &result.records, out_dir)?;
    log::info!("recovered {}/{} trials", result.recovered(), config.trials);
    Ok(result)
}
