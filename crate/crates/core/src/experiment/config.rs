use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compressor::CompressionConfig;
use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::netsim::{make_schedule, BandwidthSchedule, LinkConfig};
use crate::trainer::{StrategyKind, TaskConfig, TrainingConfig};

/// How summaries are computed from record streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Rows per sliding throughput window.
    pub throughput_window: usize,
    /// Slack below the target accuracy that still counts as converged.
    pub convergence_band: f64,
    /// Consecutive evaluations inside the band.
    pub convergence_evals: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            throughput_window: 10,
            convergence_band: 0.005,
            convergence_evals: 20,
        }
    }
}

/// A complete experiment: one model, a run matrix of strategies by
/// bandwidth schedules, and everything each cell needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub strategies: Vec<StrategyKind>,
    pub task: TaskConfig,
    pub training: TrainingConfig,
    pub controller: ControllerConfig,
    pub compression: CompressionConfig,
    pub link: LinkConfig,
    pub report: ReportConfig,
    pub bandwidths: Vec<BandwidthSchedule>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            seed: 0,
            strategies: StrategyKind::ALL.to_vec(),
            task: TaskConfig::default(),
            training: TrainingConfig::default(),
            controller: ControllerConfig::default(),
            compression: CompressionConfig::default(),
            link: LinkConfig::default(),
            report: ReportConfig::default(),
            bandwidths: vec![BandwidthSchedule::Static { level_bps: 500e6 }],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::config("strategies must not be empty"));
        }
        let mut seen = self.strategies.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.strategies.len() {
            return Err(Error::config("strategies must not repeat"));
        }
        if self.bandwidths.is_empty() {
            return Err(Error::config("bandwidths must not be empty"));
        }
        let mut labels: Vec<String> = self.bandwidths.iter().map(BandwidthSchedule::label).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.bandwidths.len() {
            return Err(Error::config("bandwidth schedules must be distinct"));
        }
        for b in &self.bandwidths {
            make_schedule(b)?;
        }
        self.task.validate()?;
        self.training.validate()?;
        self.controller.validate()?;
        self.compression.validate()?;
        self.link.validate()?;
        if self.report.throughput_window == 0 || self.report.convergence_evals == 0 {
            return Err(Error::config("report windows must be positive"));
        }
        if !(self.report.convergence_band >= 0.0) {
            return Err(Error::config("report.convergence_band must be non-negative"));
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order. Keys are dotted paths (array
    /// elements by index, e.g. `bandwidths.0.level_bps`); values are TOML
    /// literals, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let text = self.to_toml_string()?;
        let mut root: toml::Table = toml::from_str(&text).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o.as_ref())?;
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key `{key}` is malformed")));
    }
    let value = parse_value(raw.trim());
    let bad = || Error::config(format!("override key `{key}` does not name a setting"));

    let (last, parents) = parts.split_last().ok_or_else(bad)?;
    let mut slot: &mut toml::Value = root
        .entry(parents.first().copied().unwrap_or(*last))
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    if parents.is_empty() {
        *slot = value;
        return Ok(());
    }
    for part in &parents[1..] {
        slot = step_into(slot, part).ok_or_else(bad)?;
    }
    match slot {
        toml::Value::Table(t) => {
            t.insert((*last).to_string(), value);
        }
        toml::Value::Array(a) => {
            let i: usize = last.parse().map_err(|_| bad())?;
            *a.get_mut(i).ok_or_else(bad)? = value;
        }
        _ => return Err(bad()),
    }
    Ok(())
}

fn step_into<'a>(v: &'a mut toml::Value, part: &str) -> Option<&'a mut toml::Value> {
    match v {
        toml::Value::Table(t) => Some(
            t.entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
        ),
        toml::Value::Array(a) => a.get_mut(part.parse::<usize>().ok()?),
        _ => None,
    }
}
