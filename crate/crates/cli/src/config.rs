//! Scenario configuration: a single JSON document with per-section defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_EPS: f64 = 2e-2;
pub const DEFAULT_N_PATHS: usize = 10_000;
pub const DEFAULT_T_END: f64 = 4.0;
pub const DEFAULT_CONFIDENCE: f64 = 0.99;
pub const DEFAULT_N_MODES: usize = 32;
pub const DEFAULT_NOISE_EXPONENT: f64 = 3.0;
pub const DEFAULT_CERTIFY_HALF_WIDTH: f64 = 5.0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    FiniteDim,
    SecondOrderExample,
    SpdeHeat,
    SpdeCoupled,
}

impl Kind {
    pub fn is_spde(self) -> bool {
        matches!(self, Kind::SpdeHeat | Kind::SpdeCoupled)
    }
}

/// A constant or an expression in the state variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Term {
    Number(f64),
    Text(String),
}

/// One expression or one per state component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Terms {
    One(Term),
    Many(Vec<Term>),
}

impl Terms {
    pub fn to_vec(&self) -> Vec<Term> {
        match self {
            Terms::One(t) => vec![t.clone()],
            Terms::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthConfig {
    pub a1: f64,
    pub a2: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<Term>,
    /// Branch on `g > 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<Terms>,
    /// Branch on `g < 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f2: Option<Terms>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<String>,
    /// Diffusion matrix, one row per state component.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<Term>>>,
    /// Noise coefficient(s) of the heat-equation kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Terms>,
    /// Initial state; sine coefficients for the heat-equation kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Sine coefficients of the second field of `spde_coupled`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth: Option<GrowthConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_lipschitz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_n_modes")]
    pub n_modes: usize,
    /// Collocation points; 0 means `4 · n_modes`.
    #[serde(default)]
    pub n_grid: usize,
    #[serde(default = "default_length")]
    pub length: f64,
    /// Reaching band; absent means the documented default for the kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<f64>,
    #[serde(default = "default_noise_exponent")]
    pub noise_exponent: f64,
    #[serde(default)]
    pub allow_divergent_noise: bool,
    /// Tabulated switching profile for affine drifts.
    #[serde(default = "yes")]
    pub drift_table: bool,
}

impl Default for Numerics {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    /// Empty means `t_end · {1/8, 1/4, 1/2}`.
    #[serde(default)]
    pub t_grid: Vec<f64>,
    #[serde(default = "default_occupation_paths")]
    pub occupation_paths: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    /// The certified region is `[−h, h]^n`.
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    #[serde(default = "default_certify_samples")]
    pub n_samples: usize,
    #[serde(default = "default_c1")]
    pub c1: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
    /// Number of paths written by `simulate`.
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: Kind,
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Use `|g(x)|₂²` instead of `|g(x)|₂` in the heat-equation bound.
    #[serde(default)]
    pub bound_squared_norm: bool,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}
fn default_dt() -> f64 {
    DEFAULT_DT
}
fn default_t_end() -> f64 {
    DEFAULT_T_END
}
fn default_n_modes() -> usize {
    DEFAULT_N_MODES
}
fn default_length() -> f64 {
    std::f64::consts::PI
}
fn default_noise_exponent() -> f64 {
    DEFAULT_NOISE_EXPONENT
}
fn yes() -> bool {
    true
}
fn default_n_paths() -> usize {
    DEFAULT_N_PATHS
}
fn default_confidence() -> f64 {
    DEFAULT_CONFIDENCE
}
fn default_occupation_paths() -> usize {
    slide_core::reaching::DEFAULT_OCCUPATION_PATHS
}
fn default_half_width() -> f64 {
    DEFAULT_CERTIFY_HALF_WIDTH
}
fn default_certify_samples() -> usize {
    slide_core::systems::DEFAULT_CERTIFY_SAMPLES
}
fn default_c1() -> f64 {
    slide_core::systems::DEFAULT_C1
}
fn default_directory() -> PathBuf {
    PathBuf::from("out")
}
fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Report]
}
fn default_trajectories() -> usize {
    1
}

pub fn parse_scenario(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario_str(&text)
}

pub fn parse_scenario_str(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let mut cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.line(),
        column: e.column(),
        message: strip_location(&e.to_string()),
    })?;
    cfg.fill_defaults();
    cfg.validate()?;
    Ok(cfg)
}

fn strip_location(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::invalid(
            field,
            format!("must be positive and finite, got {v}"),
        ))
    }
}

impl ScenarioConfig {
    /// Makes implicit defaults explicit so the echoed config is complete.
    pub fn fill_defaults(&mut self) {
        if self.numerics.n_grid == 0 {
            self.numerics.n_grid = 4 * self.numerics.n_modes;
        }
        if self.mc.t_grid.is_empty() {
            let t = self.numerics.t_end;
            self.mc.t_grid = vec![t / 8.0, t / 4.0, t / 2.0];
        }
        if self.kind == Kind::SecondOrderExample && self.system.sigma0.is_none() {
            self.system.sigma0 = Some(Term::Number(0.0));
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = &self.numerics;
        positive("numerics.eps", n.eps)?;
        positive("numerics.dt", n.dt)?;
        positive("numerics.t_end", n.t_end)?;
        if n.dt > n.t_end {
            return Err(ConfigError::invalid("numerics.dt", "must not exceed t_end"));
        }
        if let Some(b) = n.band {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(ConfigError::invalid(
                    "numerics.band",
                    "must be finite and nonnegative",
                ));
            }
        }
        if self.kind.is_spde() {
            if n.n_modes == 0 {
                return Err(ConfigError::invalid("numerics.n_modes", "must be at least 1"));
            }
            if n.n_grid < 4 * n.n_modes {
                return Err(ConfigError::invalid(
                    "numerics.n_grid",
                    "must be at least 4 · n_modes",
                ));
            }
            positive("numerics.length", n.length)?;
            if !n.noise_exponent.is_finite() {
                return Err(ConfigError::invalid("numerics.noise_exponent", "must be finite"));
            }
        }
        let mc = &self.mc;
        if mc.n_paths == 0 {
            return Err(ConfigError::invalid("mc.n_paths", "must be at least 1"));
        }
        if !(mc.confidence > 0.0 && mc.confidence < 1.0) {
            return Err(ConfigError::invalid("mc.confidence", "must lie in (0, 1)"));
        }
        for &t in &mc.t_grid {
            if !(t > 0.0) || t > n.t_end {
                return Err(ConfigError::invalid(
                    "mc.t_grid",
                    format!("{t} lies outside (0, t_end]"),
                ));
            }
        }
        let c = &self.certify;
        positive("certify.half_width", c.half_width)?;
        positive("certify.c1", c.c1)?;
        if c.n_samples == 0 {
            return Err(ConfigError::invalid("certify.n_samples", "must be at least 1"));
        }
        if self.output.trajectories == 0 {
            return Err(ConfigError::invalid("output.trajectories", "must be at least 1"));
        }
        let s = &self.system;
        if let Some(a) = s.alpha {
            positive("system.alpha", a)?;
        }
        for (name, v) in [("system.a1", s.a1), ("system.a2", s.a2)] {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(ConfigError::invalid(name, "must be finite"));
                }
            }
        }
        for (k, v) in &s.params {
            if !v.is_finite() {
                return Err(ConfigError::invalid(
                    format!("system.params.{k}"),
                    "must be finite",
                ));
            }
        }
        if let Some(x0) = &s.x0 {
            if x0.iter().any(|v| !v.is_finite()) {
                return Err(ConfigError::invalid("system.x0", "must be finite"));
            }
        }
        Ok(())
    }

    /// The effective config as pretty JSON, for echoing into reports.
    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_second_order_config_gets_defaults() {
        let cfg = parse_scenario_str(
            r#"{"kind": "second_order_example",
                "system": {"a1": 1, "a2": 1, "alpha": 2, "x0": [0.3, 0.2]}}"#,
        )
        .unwrap();
        assert_eq!(cfg.numerics.dt, 1e-3);
        assert_eq!(cfg.numerics.eps, 2e-2);
        assert_eq!(cfg.mc.n_paths, 10_000);
        assert_eq!(cfg.mc.t_grid, vec![0.5, 1.0, 2.0]);
        assert_eq!(cfg.system.sigma0, Some(Term::Number(0.0)));
        assert!(cfg.numerics.drift_table);
        // the echo round-trips to the same effective config
        assert_eq!(parse_scenario_str(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn zero_dt_names_the_field() {
        let err = parse_scenario_str(r#"{"kind": "finite_dim", "numerics": {"dt": 0}}"#).unwrap_err();
        match err {
            ConfigError::Invalid { field, .. } => assert_eq!(field, "numerics.dt"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn parse_errors_carry_a_location() {
        let err =
            parse_scenario_str("{\n  \"kind\": \"finite_dim\",\n  \"numerics\": {\"dt\": }\n}").unwrap_err();
        match err {
            ConfigError::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert!(column > 0);
            }
            e => panic!("{e}"),
        }
        let err = parse_scenario_str(r#"{"kind": "finite_dim", "numerics": {"dtt": 1}}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }), "{err}");
    }

    #[test]
    fn bounds_are_enforced() {
        for (text, field) in [
            (
                r#"{"kind": "finite_dim", "mc": {"t_grid": [0.0, 1.0]}}"#,
                "mc.t_grid",
            ),
            (r#"{"kind": "finite_dim", "mc": {"n_paths": 0}}"#, "mc.n_paths"),
            (
                r#"{"kind": "finite_dim", "mc": {"confidence": 1.0}}"#,
                "mc.confidence",
            ),
            (
                r#"{"kind": "finite_dim", "numerics": {"eps": -1}}"#,
                "numerics.eps",
            ),
            (
                r#"{"kind": "spde_heat", "numerics": {"n_modes": 8, "n_grid": 16}}"#,
                "numerics.n_grid",
            ),
            (
                r#"{"kind": "finite_dim", "system": {"alpha": 0}}"#,
                "system.alpha",
            ),
        ] {
            match parse_scenario_str(text) {
                Err(ConfigError::Invalid { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }
}
