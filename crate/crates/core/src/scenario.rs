//! Scenario configuration: the structured file the simulator and CLI share.
//!
//! The file is JSON with optional `//` line comments and five sections:
//! `cells`, `converter`, `charger`, `controller` and `run`. Every field has a
//! default, so `{}` is a complete configuration describing the four-cell
//! reference stack at 60/50/45/40 % SOC.

use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::charger::ChargerConfig;
use crate::controller::{ControllerConfig, PredictionSource, MIN_CELLS};
use crate::ecm::{CellParams, CellState};
use crate::flyback::ConverterParams;

/// Initial SOCs of the reference stack.
pub const REFERENCE_SOCS: [f64; 4] = [0.60, 0.50, 0.45, 0.40];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("bad override `{0}`: {1}")]
    Override(String, String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Adaptive model predictive selection over the 16 switch schedules.
    Ampc,
    /// Discharge only the highest cell.
    Greedy,
    /// Never balance.
    None,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Ampc => "ampc",
            Policy::Greedy => "greedy",
            Policy::None => "none",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ampc" => Ok(Policy::Ampc),
            "greedy" => Ok(Policy::Greedy),
            "none" => Ok(Policy::None),
            other => Err(format!("unknown policy `{other}` (expected ampc, greedy or none)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellSetup {
    pub soc: f64,
    pub v1: f64,
    pub v2: f64,
    pub params: CellParams,
}

impl Default for CellSetup {
    fn default() -> Self {
        Self { soc: 0.5, v1: 0.0, v2: 0.0, params: CellParams::default() }
    }
}

impl CellSetup {
    pub fn at_soc(soc: f64) -> Self {
        Self { soc, ..Self::default() }
    }

    pub fn state(&self) -> CellState {
        CellState { soc: self.soc, v1: self.v1, v2: self.v2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSettings {
    pub policy: Policy,
    pub gap_threshold: f64,
    pub prediction: PredictionSource,
    pub include_charger_current: bool,
    pub forgetting_factor: f64,
    pub p0_scale: f64,
    /// Start each estimator from the nominal cell linearisation instead of zeros.
    pub warm_start: bool,
    /// Upper bound on the RLS covariance trace; `null` disables it.
    pub covariance_trace_limit: Option<f64>,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        let base = ControllerConfig::default();
        Self {
            policy: Policy::Ampc,
            gap_threshold: base.gap_threshold,
            prediction: base.prediction,
            include_charger_current: base.include_charger_current,
            forgetting_factor: 0.995,
            p0_scale: 1.0e6,
            warm_start: true,
            covariance_trace_limit: Some(1.0e7),
        }
    }
}

impl ControllerSettings {
    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig {
            gap_threshold: self.gap_threshold,
            prediction: self.prediction,
            include_charger_current: self.include_charger_current,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    /// Simulated time limit, seconds.
    pub max_time: f64,
    pub seed: u64,
    /// Standard deviation of the Gaussian voltage measurement noise, volts.
    pub noise_std: f64,
    /// Time step taken when no balancing cycle runs, seconds.
    pub idle_interval: f64,
    /// Record one trace row every this many control steps.
    pub decimation: u64,
    /// Policies compared by `sweep`.
    pub policies: Vec<Policy>,
    /// Seeds used by `sweep`; empty means `[seed]`.
    pub seeds: Vec<u64>,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            max_time: 10_000.0,
            seed: 0,
            noise_std: 0.0,
            idle_interval: 1.0,
            decimation: 1,
            policies: Vec::new(),
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub cells: Vec<CellSetup>,
    pub converter: ConverterParams,
    pub charger: ChargerConfig,
    pub controller: ControllerSettings,
    pub run: RunSettings,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            cells: REFERENCE_SOCS.iter().map(|&s| CellSetup::at_soc(s)).collect(),
            converter: ConverterParams::default(),
            charger: ChargerConfig::default(),
            controller: ControllerSettings::default(),
            run: RunSettings::default(),
        }
    }
}

impl ScenarioConfig {
    /// The reference four-cell scenario under the given policy.
    pub fn reference(policy: Policy) -> Self {
        let mut cfg = Self::default();
        cfg.controller.policy = policy;
        cfg
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if self.cells.len() < MIN_CELLS {
            return invalid(format!("need at least {MIN_CELLS} cells, got {}", self.cells.len()));
        }
        for (j, cell) in self.cells.iter().enumerate() {
            cell.params
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("cells[{j}].params: {e}")))?;
            cell.state()
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("cells[{j}]: {e}")))?;
        }
        self.converter
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("converter: {e}")))?;
        if !(self.converter.peak_current > 0.0) {
            return invalid("converter.peak_current must be positive".into());
        }
        self.charger
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("charger: {e}")))?;
        let c = &self.controller;
        if !(c.gap_threshold.is_finite() && c.gap_threshold > 0.0) {
            return invalid(format!("controller.gap_threshold must be positive, got {}", c.gap_threshold));
        }
        if !(c.forgetting_factor > 0.0 && c.forgetting_factor <= 1.0) {
            return invalid(format!(
                "controller.forgetting_factor must lie in (0, 1], got {}",
                c.forgetting_factor
            ));
        }
        if !(c.p0_scale.is_finite() && c.p0_scale > 0.0) {
            return invalid(format!("controller.p0_scale must be positive, got {}", c.p0_scale));
        }
        if let Some(limit) = c.covariance_trace_limit {
            if !(limit.is_finite() && limit > 0.0) {
                return invalid(format!("controller.covariance_trace_limit must be positive, got {limit}"));
            }
        }
        let r = &self.run;
        if !(r.max_time.is_finite() && r.max_time >= 0.0) {
            return invalid(format!("run.max_time must be non-negative, got {}", r.max_time));
        }
        if !(r.noise_std.is_finite() && r.noise_std >= 0.0) {
            return invalid(format!("run.noise_std must be non-negative, got {}", r.noise_std));
        }
        if !(r.idle_interval.is_finite() && r.idle_interval > 0.0) {
            return invalid(format!("run.idle_interval must be positive, got {}", r.idle_interval));
        }
        if r.decimation == 0 {
            return invalid("run.decimation must be at least 1".into());
        }
        Ok(())
    }

    /// Parses a config document (JSON with `//` comments), applies `key=value`
    /// overrides and validates the result.
    pub fn from_str_with_overrides(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut stripped = String::new();
        json_comments::StripComments::new(text.as_bytes()).read_to_string(&mut stripped)?;
        let mut value: Value = if stripped.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(&stripped)?
        };
        for entry in overrides {
            apply_override(&mut value, entry)?;
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_with_overrides(&text, overrides)
    }

    /// The effective configuration as pretty JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Applies `path=value` to a JSON document. `path` is dot-separated, array
/// elements are addressed by index, and a bare key is looked up in the
/// section that defines it. `value` is parsed as JSON, falling back to a
/// plain string.
pub fn apply_override(doc: &mut Value, entry: &str) -> Result<(), ConfigError> {
    let err = |msg: &str| ConfigError::Override(entry.to_string(), msg.to_string());
    let (key, raw) = entry.split_once('=').ok_or_else(|| err("expected key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(err("empty key"));
    }
    let value: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));

    let mut path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.len() == 1 {
        let defaults = serde_json::to_value(ScenarioConfig::default()).expect("defaults serialize");
        let sections: Vec<&String> = defaults
            .as_object()
            .expect("object")
            .iter()
            .filter(|(_, v)| v.get(&path[0]).is_some())
            .map(|(k, _)| k)
            .collect();
        match sections.as_slice() {
            [] if defaults.get(&path[0]).is_some() => {}
            [] => return Err(err("unknown key")),
            [section] => path.insert(0, (*section).clone()),
            _ => return Err(err("ambiguous key; qualify it with its section")),
        }
    }

    // Keys missing from the document are filled in from the defaults so
    // that e.g. `cells.1.soc` works on a file without a `cells` section.
    let defaults = serde_json::to_value(ScenarioConfig::default()).expect("defaults serialize");
    let mut node = doc;
    for (depth, part) in path.iter().enumerate() {
        let last = depth + 1 == path.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.clone(), value);
                    return Ok(());
                }
                map.entry(part.clone()).or_insert_with(|| {
                    let pointer: String = path[..=depth].iter().map(|p| format!("/{p}")).collect();
                    defaults
                        .pointer(&pointer)
                        .cloned()
                        .unwrap_or_else(|| Value::Object(Default::default()))
                })
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| err("expected an array index"))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| err(&format!("index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(err("path goes through a scalar")),
        };
    }
    unreachable!("loop returns on the last path element")
}
