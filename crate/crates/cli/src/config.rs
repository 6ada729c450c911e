//! JSON scenario files.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize};
use smpc_core::coordination::{ConflictTopology, Path2D, PriorityMap};
use smpc_core::linmodel::{DriverUncertaintyBounds, VehicleParams};
use smpc_core::ocp::{CcpConfig, CostWeights, OcpLimits};
use smpc_core::sim::DriverMode;
use smpc_core::stability::GainSearchConfig;

pub const FOURWAY: &str = include_str!("../scenarios/fourway.json");
pub const TRACKING: &str = include_str!("../scenarios/tracking.json");

#[derive(Debug)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "line {l}, column {c}: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn positive<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(serde::de::Error::custom(format!("expected a positive number, got {v}")))
    }
}

fn non_negative<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(serde::de::Error::custom(format!("expected a non-negative number, got {v}")))
    }
}

fn injective<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u32>, D::Error> {
    let v = Vec::<u32>::deserialize(d)?;
    PriorityMap::new(v.clone()).map_err(|e| serde::de::Error::custom(format!("priorities {v:?}: {e}")))?;
    Ok(v)
}

fn non_empty<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<AgentSection>, D::Error> {
    let v = Vec::<AgentSection>::deserialize(d)?;
    if v.is_empty() {
        return Err(serde::de::Error::custom("agents: at least one agent is required"));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

/// Prestabilizing gain: a number or `"auto"` (midpoint of the certified
/// interval).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainSetting {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    #[serde(deserialize_with = "positive")]
    pub sample_time: f64,
    pub horizon: usize,
    pub scenarios: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub kv: GainSetting,
    #[serde(default = "default_activation", deserialize_with = "non_negative")]
    pub activation_distance: f64,
    #[serde(default = "default_margin", deserialize_with = "non_negative")]
    pub d_safe_margin: f64,
    #[serde(default)]
    pub ccp: CcpConfig,
}

fn default_seed() -> u64 {
    1
}
fn default_activation() -> f64 {
    40.0
}
fn default_margin() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_fine_step", deserialize_with = "positive")]
    pub fine_step: f64,
    #[serde(default = "default_duration", deserialize_with = "positive")]
    pub duration: f64,
    /// Period of the stepwise speed-offset variation, s.
    #[serde(default = "default_dv_period", deserialize_with = "positive")]
    pub dv_period: f64,
    #[serde(default = "default_dv_amplitude", deserialize_with = "non_negative")]
    pub dv_amplitude: f64,
    #[serde(default = "default_dv_amplitude", deserialize_with = "non_negative")]
    pub dv_bound: f64,
    #[serde(default = "default_mode")]
    pub mode: DriverMode,
    /// Seed of the speed-offset schedules; `--seed` does not change it.
    #[serde(default = "default_dv_seed")]
    pub dv_seed: u64,
}

fn default_fine_step() -> f64 {
    0.01
}
fn default_duration() -> f64 {
    20.0
}
fn default_dv_period() -> f64 {
    2.0
}
fn default_dv_amplitude() -> f64 {
    0.2
}
fn default_dv_seed() -> u64 {
    1
}
fn default_mode() -> DriverMode {
    DriverMode::ContinuousDelay
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            fine_step: default_fine_step(),
            duration: default_duration(),
            dv_period: default_dv_period(),
            dv_amplitude: default_dv_amplitude(),
            dv_bound: default_dv_amplitude(),
            dv_seed: default_dv_seed(),
            mode: default_mode(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSection {
    #[serde(deserialize_with = "positive")]
    pub length: f64,
    #[serde(deserialize_with = "positive")]
    pub width: f64,
    #[serde(deserialize_with = "positive")]
    pub drivetrain_time_constant: f64,
}

impl VehicleSection {
    pub fn params(&self) -> VehicleParams {
        VehicleParams {
            length: self.length,
            width: self.width,
            drivetrain_time_constant: self.drivetrain_time_constant,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsSection {
    #[serde(deserialize_with = "non_negative")]
    pub v_set: f64,
    #[serde(deserialize_with = "positive")]
    pub v_upper: f64,
    pub a_min: f64,
    pub a_max: f64,
    #[serde(default = "default_v_mean_min", deserialize_with = "non_negative")]
    pub v_mean_min: f64,
}

fn default_v_mean_min() -> f64 {
    5.0
}

impl LimitsSection {
    pub fn limits(&self) -> OcpLimits {
        OcpLimits {
            v_set: self.v_set,
            v_upper: self.v_upper,
            a_min: self.a_min,
            a_max: self.a_max,
            v_mean_min: self.v_mean_min,
            mean_v_active: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSection {
    #[serde(deserialize_with = "positive")]
    pub kd: f64,
    #[serde(deserialize_with = "non_negative")]
    pub tau: f64,
    /// Constant part of the speed offset, m/s.
    #[serde(default)]
    pub dv: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSection {
    pub name: String,
    pub vehicle: VehicleSection,
    #[serde(default)]
    pub path: Option<Path2D>,
    pub s0: f64,
    #[serde(deserialize_with = "non_negative")]
    pub v0: f64,
    pub limits: LimitsSection,
    pub weights: CostWeights,
    pub bounds: DriverUncertaintyBounds,
    /// Driver used by the simulator.
    pub truth: DriverSection,
    /// Realization assumed by the certainty-equivalent baseline controller.
    pub baseline: DriverSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    #[serde(default = "default_certify_agent")]
    pub agent: usize,
    #[serde(default)]
    pub search: GainSearchConfig,
    /// Draws for the spectral-radius scatter at the configured gain.
    #[serde(default = "default_radius_samples")]
    pub radius_samples: usize,
    #[serde(default = "default_radius_seed")]
    pub radius_seed: u64,
    #[serde(default = "default_settling_samples")]
    pub settling_samples: usize,
    #[serde(default = "default_settling_band", deserialize_with = "positive")]
    pub settling_band: f64,
}

fn default_certify_agent() -> usize {
    0
}
fn default_radius_samples() -> usize {
    2000
}
fn default_radius_seed() -> u64 {
    11
}
fn default_settling_samples() -> usize {
    5000
}
fn default_settling_band() -> f64 {
    0.02
}

impl Default for CertifySection {
    fn default() -> Self {
        Self {
            agent: default_certify_agent(),
            search: GainSearchConfig::default(),
            radius_samples: default_radius_samples(),
            radius_seed: default_radius_seed(),
            settling_samples: default_settling_samples(),
            settling_band: default_settling_band(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_mc_scenarios")]
    pub scenarios: usize,
    #[serde(default = "default_mc_duration", deserialize_with = "positive")]
    pub duration: f64,
}

fn default_runs() -> usize {
    200
}
fn default_mc_scenarios() -> usize {
    19
}
fn default_mc_duration() -> f64 {
    10.0
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        Self {
            runs: default_runs(),
            scenarios: default_mc_scenarios(),
            duration: default_mc_duration(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: String,
    pub controller: ControllerSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(deserialize_with = "injective")]
    pub priorities: Vec<u32>,
    /// `collision_points[i][l]` in agent i's path coordinate, `null` when the
    /// paths do not cross. Derived from the agent paths when absent.
    #[serde(default)]
    pub collision_points: Option<Vec<Vec<Option<f64>>>>,
    #[serde(deserialize_with = "non_empty")]
    pub agents: Vec<AgentSection>,
    #[serde(default)]
    pub certify: CertifySection,
    #[serde(default)]
    pub montecarlo: MonteCarloSection,
}

/// 1-based line of the first occurrence of `"key"` in `text`.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

/// A rejected value is reported once the parser has looked past it, which can
/// be the next line. Move back to the end of the value itself.
fn value_end(text: &str, line: usize, column: usize) -> (usize, usize) {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    let at = (start + column.saturating_sub(1)).min(text.len());
    let Some(before) = text.get(..at) else {
        return (line, column);
    };
    let before = before.trim_end();
    let l = before.matches('\n').count() + 1;
    let c = before.len() - before.rfind('\n').map_or(0, |i| i + 1);
    (l, c)
}

fn semantic(text: &str, key: &str, message: String) -> ConfigError {
    ConfigError {
        line: line_of(text, key),
        column: None,
        message,
    }
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let file: ScenarioFile = serde_json::from_str(text).map_err(|e| {
            let (line, column) = if e.classify() == serde_json::error::Category::Data {
                value_end(text, e.line(), e.column())
            } else {
                (e.line(), e.column())
            };
            ConfigError {
                line: Some(line),
                column: Some(column),
                message: e.to_string(),
            }
        })?;
        file.check(text)?;
        Ok(file)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            column: None,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    fn check(&self, text: &str) -> Result<(), ConfigError> {
        let m = self.agents.len();
        if self.priorities.len() != m {
            return Err(semantic(
                text,
                "priorities",
                format!("priorities has {} entries for {m} agents", self.priorities.len()),
            ));
        }
        if self.controller.horizon == 0 || self.controller.scenarios == 0 {
            return Err(semantic(text, "controller", "controller.horizon and controller.scenarios must be >= 1".into()));
        }
        if let GainSetting::Fixed(kv) = self.controller.kv {
            if !(kv <= 0.0 && kv.is_finite()) {
                return Err(semantic(text, "kv", format!("controller.kv must be <= 0, got {kv}")));
            }
        }
        for (i, a) in self.agents.iter().enumerate() {
            let at = |msg: String| semantic(text, "agents", format!("agents[{i}] ({}): {msg}", a.name));
            a.vehicle.params().validate().map_err(|e| at(e.to_string()))?;
            a.bounds.validate().map_err(|e| at(format!("bounds: {e}")))?;
            a.limits.limits().validate().map_err(|e| at(format!("limits: {e}")))?;
            a.weights.validate().map_err(|e| at(format!("weights: {e}")))?;
            if self.collision_points.is_none() && a.path.is_none() {
                return Err(at("path is required when collision_points is absent".into()));
            }
        }
        if self.certify.agent >= m {
            return Err(semantic(text, "certify", format!("certify.agent {} out of range", self.certify.agent)));
        }
        self.topology().map_err(|e| semantic(text, "collision_points", e.to_string()))?;
        Ok(())
    }

    pub fn topology(&self) -> smpc_core::Result<ConflictTopology> {
        match &self.collision_points {
            Some(rows) => ConflictTopology::new(
                rows.iter()
                    .map(|r| r.iter().map(|v| v.unwrap_or(f64::INFINITY)).collect())
                    .collect(),
            ),
            None => {
                let paths: Vec<Path2D> = self.agents.iter().map(|a| a.path.expect("checked")).collect();
                ConflictTopology::from_paths(&paths)
            }
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.agents.iter().map(|a| a.name.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_files_parse() {
        let f = ScenarioFile::parse(FOURWAY).unwrap();
        assert_eq!(f.agents.len(), 4);
        assert_eq!(f.priorities, vec![1, 2, 4, 3]);
        ScenarioFile::parse(TRACKING).unwrap();
    }

    #[test]
    fn empty_agents_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(FOURWAY).unwrap();
        v["agents"] = serde_json::json!([]);
        v["priorities"] = serde_json::json!([]);
        let text = serde_json::to_string_pretty(&v).unwrap();
        let err = ScenarioFile::parse(&text).unwrap_err();
        assert!(err.message.contains("at least one agent"), "{err}");
        assert!(err.line.is_some());
    }

    #[test]
    fn duplicate_priorities_point_at_line() {
        let text = FOURWAY.replace("\"priorities\": [1, 2, 4, 3]", "\"priorities\": [1, 2, 2, 3]");
        assert_ne!(text, FOURWAY);
        let err = ScenarioFile::parse(&text).unwrap_err();
        let expect = line_of(&text, "priorities").unwrap();
        assert_eq!(err.line, Some(expect), "{err}");
        assert!(err.message.contains("injective"), "{err}");
    }

    #[test]
    fn negative_time_constant_points_at_line() {
        let text = FOURWAY.replacen("\"drivetrain_time_constant\": 0.3", "\"drivetrain_time_constant\": -0.3", 1);
        assert_ne!(text, FOURWAY);
        let err = ScenarioFile::parse(&text).unwrap_err();
        assert_eq!(err.line, line_of(&text, "drivetrain_time_constant"), "{err}");
        assert!(err.message.contains("positive"), "{err}");
    }

    #[test]
    fn priority_count_mismatch() {
        let text = FOURWAY.replace("\"priorities\": [1, 2, 4, 3]", "\"priorities\": [1, 2, 4]");
        let err = ScenarioFile::parse(&text).unwrap_err();
        assert!(err.message.contains("3 entries for 4 agents"), "{err}");
    }
}
