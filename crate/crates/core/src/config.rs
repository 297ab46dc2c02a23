//! Experiment configuration: a TOML document with per-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::default_c_lu;
use crate::environment::NoiseParams;
use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::policy::RewardMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    #[default]
    Random,
    Ts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceKind {
    #[default]
    Unik,
    Lu,
}

/// How long a sensing action takes, in simulated time units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DurationModel {
    Fixed { value: f64 },
    Uniform { low: f64, high: f64 },
    Exponential { mean: f64 },
}

impl Default for DurationModel {
    fn default() -> Self {
        DurationModel::Fixed { value: 1.0 }
    }
}

impl DurationModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DurationModel::Fixed { value } => value.is_finite() && value > 0.0,
            DurationModel::Uniform { low, high } => low.is_finite() && high.is_finite() && low > 0.0 && high >= low,
            DurationModel::Exponential { mean } => mean.is_finite() && mean > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid action duration {self:?}")))
        }
    }
}

/// Unreliable broadcast channel between teammates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommModel {
    pub delivery_prob: f64,
    /// Fixed delivery delay in simulated time units.
    pub delay: f64,
}

impl Default for CommModel {
    fn default() -> Self {
        Self {
            delivery_prob: 1.0,
            delay: 0.0,
        }
    }
}

impl CommModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delivery_prob) {
            return Err(Error::config(format!(
                "comm.delivery_prob must lie in [0, 1], got {}",
                self.delivery_prob
            )));
        }
        if !(self.delay.is_finite() && self.delay >= 0.0) {
            return Err(Error::config(format!("comm.delay must be nonnegative, got {}", self.delay)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rows: usize,
    pub cols: usize,
    /// Number of targets.
    pub k: usize,
    /// Team size.
    pub agents: usize,
    pub policy: PolicyKind,
    pub inference: InferenceKind,
    pub reward_mode: RewardMode,
    /// Total measurements collected by the team per trial.
    pub budget: usize,
    pub trials: usize,
    pub master_seed: u64,
    pub lambda: f64,
    pub prior_var: f64,
    pub max_range: u32,
    /// Posterior mean at or above which a cell is declared a target.
    pub decision_threshold: f64,
    /// LU detection threshold; defaults by `k` when absent.
    pub c_lu: Option<f64>,
    /// LU declares a cell a target when its density reaches this fraction of
    /// a unit-variance track's peak.
    pub lu_density_fraction: f64,
    /// Stop a trial once some agent recovers the support.
    pub early_stop: bool,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    pub output: PathBuf,
    pub noise: NoiseParams,
    pub comm: CommModel,
    pub duration: DurationModel,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rows: 16,
            cols: 16,
            k: 5,
            agents: 1,
            policy: PolicyKind::Random,
            inference: InferenceKind::Unik,
            reward_mode: RewardMode::Printed,
            budget: 500,
            trials: 50,
            master_seed: 0,
            lambda: 1.0,
            prior_var: 1.0,
            max_range: 5,
            decision_threshold: 0.65,
            c_lu: None,
            lu_density_fraction: 0.5,
            early_stop: true,
            workers: 0,
            output: PathBuf::from("results"),
            noise: NoiseParams::default(),
            comm: CommModel::default(),
            duration: DurationModel::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.rows, self.cols)
    }

    pub fn c_lu(&self) -> f64 {
        self.c_lu.unwrap_or_else(|| default_c_lu(self.k))
    }

    /// Fills in defaults that depend on other fields.
    pub fn resolved(mut self) -> Self {
        self.c_lu = Some(self.c_lu());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        if self.k > grid.len() {
            return Err(Error::config(format!("k = {} exceeds the {} grid cells", self.k, grid.len())));
        }
        if self.agents == 0 {
            return Err(Error::config("agents must be at least 1"));
        }
        if self.budget == 0 {
            return Err(Error::config("budget must be at least 1"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if self.max_range == 0 {
            return Err(Error::config("max_range must be at least 1"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.prior_var.is_finite() && self.prior_var > 0.0) {
            return Err(Error::config(format!("prior_var must be positive, got {}", self.prior_var)));
        }
        if !self.decision_threshold.is_finite() {
            return Err(Error::config("decision_threshold must be finite"));
        }
        let c_lu = self.c_lu();
        if !(c_lu > 0.0 && c_lu < 1.0) {
            return Err(Error::config(format!("c_lu must lie in (0, 1), got {c_lu}")));
        }
        if !(self.lu_density_fraction.is_finite() && self.lu_density_fraction > 0.0) {
            return Err(Error::config("lu_density_fraction must be positive"));
        }
        if self.policy == PolicyKind::Ts && self.inference == InferenceKind::Lu {
            return Err(Error::config("the ts policy needs a Gaussian posterior and requires inference = \"unik\""));
        }
        self.noise.validate()?;
        self.comm.validate()?;
        self.duration.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::config(format!("{e}")))?;
        Self::from_table(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Loads `path` (or the defaults) and applies `key=value` overrides.
    /// Keys may be dotted (`noise.location_var=0.2`); values are parsed as
    /// TOML, falling back to a bare string.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let config = Self::from_table(table)?;
        config.validate()?;
        Ok(config)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{item}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override `{item}` has an empty key")));
    }
    let (last, parents) = path.split_last().expect("nonempty");
    let mut cur = table;
    for part in parents {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{item}`: `{part}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}
