//! Run configuration: a TOML file, then `KERR_DPT_<SECTION>__<KEY>`
//! environment overrides, then command-line flags.
//!
//! Every field has a default, so an empty file (or none) is a valid config.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use kerr_dpt::critical::Threshold;
use kerr_dpt::dynamics::{Direction, Engine, ProtocolKind};
use kerr_dpt::geometry::ChiMethod;
use kerr_dpt::{ModelParams, SweepParameter};

pub const ENV_PREFIX: &str = "KERR_DPT_";

/// Marks errors caused by the configuration rather than the numerics.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub cutoff: CutoffConfig,
    pub scan: ScanConfig,
    pub spectrum: SpectrumConfig,
    pub sweep: SweepConfig,
    pub geometry: GeometryConfig,
    pub hysteresis: HysteresisConfig,
    pub extract: ExtractConfig,
    pub fsweep: FsweepConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kappa: f64,
    pub detuning: f64,
    pub interaction: f64,
    pub drive: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            detuning: -10.0,
            interaction: -0.5,
            drive: 4.0,
        }
    }
}

/// Fock cutoff: `value` is a number or "auto".
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CutoffConfig {
    #[serde(deserialize_with = "string_or_number")]
    pub value: String,
    /// First cutoff tried by "auto".
    pub start: usize,
    /// Increment for the convergence check and the adaptive search.
    pub step: usize,
    pub max: usize,
    /// Allowed |Δn_st| between d and d + step.
    pub tol: f64,
}

impl Default for CutoffConfig {
    fn default() -> Self {
        Self {
            value: "70".into(),
            start: 30,
            step: 10,
            max: 150,
            tol: 1e-3,
        }
    }
}

fn string_or_number<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Text(String),
        Number(i64),
    }
    Ok(match Raw::deserialize(d)? {
        Raw::Text(s) => s,
        Raw::Number(n) => n.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutoffPolicy {
    Fixed(usize),
    Auto,
}

impl CutoffConfig {
    pub fn policy(&self) -> Result<CutoffPolicy> {
        parse_cutoff(&self.value)
    }
}

pub fn parse_cutoff(s: &str) -> Result<CutoffPolicy> {
    if s.trim() == "auto" {
        return Ok(CutoffPolicy::Auto);
    }
    match s.trim().parse::<usize>() {
        Ok(d) if d >= 2 => Ok(CutoffPolicy::Fixed(d)),
        _ => Err(config_error(format!("cutoff: expected an integer ≥ 2 or 'auto', got '{s}'"))),
    }
}

/// Parameter scan used by `spectrum`, `steady`, `meanfield` and to locate
/// the critical region.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub parameter: String,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    /// half-kappa | dwell:T | rate:G
    pub threshold: String,
    pub tol: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            parameter: "detuning".into(),
            lo: -40.0,
            hi: 0.0,
            step: 0.5,
            threshold: "half-kappa".into(),
            tol: 1e-3,
        }
    }
}

impl ScanConfig {
    pub fn parameter(&self) -> Result<SweepParameter> {
        parse_parameter(&self.parameter)
    }

    pub fn threshold(&self) -> Result<Threshold> {
        self.threshold
            .parse()
            .map_err(|e: kerr_dpt::Error| config_error(format!("scan.threshold: {e}")))
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !(self.hi > self.lo) {
            bail!(config_error(format!(
                "scan: need lo < hi and step > 0, got [{}, {}] step {}",
                self.lo, self.hi, self.step
            )));
        }
        let n = ((self.hi - self.lo) / self.step).round() as usize;
        Ok((0..=n).map(|i| self.lo + i as f64 * self.step).collect())
    }
}

pub fn parse_parameter(s: &str) -> Result<SweepParameter> {
    match s {
        "detuning" | "delta" => Ok(SweepParameter::Detuning),
        "drive" | "F" => Ok(SweepParameter::Drive),
        other => Err(config_error(format!("unknown sweep parameter '{other}' (detuning | drive)"))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    /// Modes per point, including the steady state.
    pub modes: usize,
    /// axis | auto
    pub window: String,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            modes: 4,
            window: "auto".into(),
        }
    }
}

/// A sweep across [start, end]; missing ends default to the critical region.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub engine: String,
    pub protocol: String,
    pub direction: String,
    pub steps: usize,
    pub dwell: f64,
    pub lead_in: usize,
    pub start: Option<f64>,
    pub end: Option<f64>,
    pub dt: Option<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            engine: "metastable".into(),
            protocol: "staircase".into(),
            direction: "cycle".into(),
            steps: 11,
            dwell: 10.0,
            lead_in: 1,
            start: None,
            end: None,
            dt: None,
        }
    }
}

impl SweepConfig {
    pub fn engine(&self) -> Result<Engine> {
        self.engine
            .parse()
            .map_err(|e: kerr_dpt::Error| config_error(format!("sweep.engine: {e}")))
    }

    pub fn kind(&self) -> Result<ProtocolKind> {
        match self.protocol.as_str() {
            "staircase" => Ok(ProtocolKind::Staircase),
            "linear" | "ramp" => Ok(ProtocolKind::Linear),
            other => Err(config_error(format!("sweep.protocol: unknown '{other}' (staircase | linear)"))),
        }
    }

    pub fn direction(&self) -> Result<Direction> {
        match self.direction.as_str() {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            "cycle" => Ok(Direction::Cycle),
            other => Err(config_error(format!("sweep.direction: unknown '{other}' (forward | backward | cycle)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Grid points spanning the critical region.
    pub points: usize,
    /// Extra points beyond each end.
    pub margin: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { points: 641, margin: 0 }
    }
}

/// Sweep velocities are given as step counts N at dwell t_c:
/// v = width / (N t_c).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HysteresisConfig {
    pub steps: Vec<f64>,
    pub dwell: f64,
    /// quadrature | stepping
    pub method: String,
    pub panels: usize,
    /// Optional connection table from a previous `geometry` run.
    pub table: Option<String>,
}

impl Default for HysteresisConfig {
    fn default() -> Self {
        Self {
            steps: vec![1.4e2, 1.4e3, 1.4e4, 1.4e5, 2.4e6],
            dwell: 10.0,
            method: "quadrature".into(),
            panels: 4000,
            table: None,
        }
    }
}

impl HysteresisConfig {
    pub fn method(&self) -> Result<ChiMethod> {
        self.method
            .parse()
            .map_err(|e: kerr_dpt::Error| config_error(format!("hysteresis.method: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    /// Exactly three step counts.
    pub steps: Vec<f64>,
    pub dwell: f64,
    /// Measurement points across the critical region.
    pub points: usize,
    /// Gaussian noise on every synthetic n.
    pub noise: f64,
    /// Savitzky–Golay half-width and order; half-width 0 disables.
    pub smoothing_half: usize,
    pub smoothing_order: usize,
    /// Fraction of the region, centred, used for the comparison.
    pub interior: f64,
    /// Three sweep CSVs (columns r, n, branch), slowest last, in place of
    /// synthetic data; their velocities are taken from `steps`.
    pub inputs: Vec<String>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            steps: vec![1.4e3, 1.2e4, 1.2e5],
            dwell: 10.0,
            points: 401,
            noise: 0.0,
            smoothing_half: 0,
            smoothing_order: 3,
            interior: 0.8,
            inputs: Vec::new(),
        }
    }
}

/// Drive sweep at fixed detuning, compared with the detuning sweep at the
/// same step count.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FsweepConfig {
    pub detuning: f64,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    pub steps: f64,
    pub dwell: f64,
    pub points: usize,
    /// Critical-region threshold on the drive axis.
    pub threshold: String,
}

impl Default for FsweepConfig {
    fn default() -> Self {
        Self {
            detuning: -2.0,
            lo: 0.5,
            hi: 8.0,
            step: 0.05,
            steps: 1.4e3,
            dwell: 10.0,
            points: 121,
            threshold: "dwell:10".into(),
        }
    }
}

impl FsweepConfig {
    pub fn threshold(&self) -> Result<Threshold> {
        self.threshold
            .parse()
            .map_err(|e: kerr_dpt::Error| config_error(format!("fsweep.threshold: {e}")))
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| config_error(format!("reading {}", p.display())))?,
            None => String::new(),
        };
        let env: Vec<(String, String)> = std::env::vars().collect();
        Self::from_sources(&text, &env)
    }

    /// Parses `text` and applies the `KERR_DPT_SECTION__KEY=value` overrides
    /// found in `env`.
    pub fn from_sources(text: &str, env: &[(String, String)]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e| config_error(format!("config: {e}")))?;
        for (name, value) in env {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let Some((section, key)) = rest.split_once("__") else {
                continue;
            };
            let (section, key) = (section.to_lowercase(), key.to_lowercase());
            let entry = doc
                .entry(section.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(t) = entry else {
                bail!(config_error(format!("{name}: '{section}' is not a section")));
            };
            t.insert(key, env_value(value));
        }
        toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| config_error(format!("config: {}", e.message())))
    }

    pub fn params(&self, cutoff: usize) -> ModelParams {
        ModelParams {
            kappa: self.model.kappa,
            detuning: self.model.detuning,
            interaction: self.model.interaction,
            drive: self.model.drive,
            cutoff,
        }
    }
}

/// A TOML literal if the value parses as one, else a string.
fn env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = RunConfig::from_sources("", &[]).unwrap();
        assert_eq!(c.model.drive, 4.0);
        assert_eq!(c.sweep.steps, 11);
        assert_eq!(c.cutoff.policy().unwrap(), CutoffPolicy::Fixed(70));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_sources("[model]\ndrvie = 3.0\n", &[]).unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
        assert!(err.to_string().contains("drvie"), "{err}");
    }

    #[test]
    fn environment_overrides_file() {
        let env = vec![
            ("KERR_DPT_MODEL__DRIVE".to_string(), "2.5".to_string()),
            ("KERR_DPT_SWEEP__ENGINE".to_string(), "exact".to_string()),
            ("KERR_DPT_CUTOFF__VALUE".to_string(), "auto".to_string()),
            ("KERR_DPT_ACCEPTANCE".to_string(), "smoke".to_string()),
            ("UNRELATED".to_string(), "1".to_string()),
        ];
        let c = RunConfig::from_sources("[model]\ndrive = 3.0\n", &env).unwrap();
        assert_eq!(c.model.drive, 2.5);
        assert_eq!(c.sweep.engine().unwrap(), Engine::Exact);
        assert_eq!(c.cutoff.policy().unwrap(), CutoffPolicy::Auto);
        let env = vec![("KERR_DPT_CUTOFF__VALUE".to_string(), "55".to_string())];
        let c = RunConfig::from_sources("", &env).unwrap();
        assert_eq!(c.cutoff.policy().unwrap(), CutoffPolicy::Fixed(55));
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(parse_cutoff("1").is_err());
        assert!(parse_parameter("phase").is_err());
        let c = RunConfig::from_sources("[scan]\nthreshold = \"sideways\"\n", &[]).unwrap();
        assert!(c.scan.threshold().unwrap_err().downcast_ref::<ConfigError>().is_some());
    }
}
