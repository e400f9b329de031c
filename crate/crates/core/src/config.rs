//! Experiment configuration: TOML (or JSON) with nested sections, every key
//! optional and filled from the defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bsde::BsdeTrainConfig;
use crate::control::{ControlTrainConfig, SurfaceSpec};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Scheme, TimeGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorConfig {
    /// Number of equidistant thresholds on `[a_min, a_max]`.
    pub points: usize,
    /// Value thresholds by Monte Carlo instead of the BSDE solver.
    pub oracle_mode: bool,
    pub oracle_paths: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            points: 20,
            oracle_mode: false,
            oracle_paths: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub paths: usize,
    pub threshold: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            paths: 1_000_000,
            threshold: 1.58,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub paths: usize,
    pub threshold: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            paths: 20,
            threshold: 1.58,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Multiplier on epoch counts and the compensator batch, in `(0, 1]`.
    pub scale: f64,
    pub out_dir: PathBuf,
    pub scheme: Scheme,
    /// Number of time steps on `[0, T]`.
    pub steps: usize,
    pub model: ModelParams,
    pub bsde: BsdeTrainConfig,
    pub control: ControlTrainConfig,
    pub selector: SelectorConfig,
    pub oracle: OracleConfig,
    pub simulate: SimulateConfig,
    pub surface: SurfaceSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scale: 1.0,
            out_dir: PathBuf::from("out"),
            scheme: Scheme::Euler,
            steps: 50,
            model: ModelParams::default(),
            bsde: BsdeTrainConfig::default(),
            control: ControlTrainConfig::default(),
            selector: SelectorConfig::default(),
            oracle: OracleConfig::default(),
            simulate: SimulateConfig::default(),
            surface: SurfaceSpec::default(),
        }
    }
}

/// Input syntax of a configuration file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key` inside `[section]` (or at top level), by a plain scan.
fn locate(text: &str, format: Format, section: Option<&str>, key: &str) -> Option<usize> {
    let mut in_section = section.is_none();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        match format {
            Format::Toml => {
                if line.starts_with('[') {
                    let name = line.trim_matches(|c| c == '[' || c == ']').trim();
                    in_section = section == Some(name);
                    continue;
                }
                if in_section {
                    let lhs = line.split('=').next().unwrap_or("").trim().trim_matches('"');
                    if line.contains('=') && lhs == key {
                        return Some(i + 1);
                    }
                }
            }
            Format::Json => {
                if line.contains(&format!("\"{key}\"")) {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

/// Walks `user` against `defaults`: unknown keys are errors, missing keys
/// are collected.
fn compare_keys(
    user: &serde_json::Value,
    defaults: &serde_json::Value,
    prefix: &str,
    missing: &mut Vec<String>,
) -> std::result::Result<(), String> {
    let (Some(user), Some(defaults)) = (user.as_object(), defaults.as_object()) else {
        return Ok(());
    };
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match defaults.get(key) {
            None => return Err(path),
            Some(default) => compare_keys(value, default, &path, missing)?,
        }
    }
    for key in defaults.keys() {
        if !user.contains_key(key) {
            missing.push(if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") });
        }
    }
    Ok(())
}

fn config_error(key: impl Into<String>, line: Option<usize>, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        line,
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    /// Parses, fills missing keys from the defaults and validates.
    pub fn parse(text: &str, format: Format) -> Result<Self> {
        let user: serde_json::Value = match format {
            Format::Toml => {
                let table: toml::Table = toml::from_str(text).map_err(|e| {
                    let line = e.span().map(|s| line_of_offset(text, s.start));
                    config_error("<document>", line, e.message().to_string())
                })?;
                serde_json::to_value(table)?
            }
            Format::Json => {
                if text.trim().is_empty() {
                    serde_json::Value::Object(Default::default())
                } else {
                    serde_json::from_str(text)
                        .map_err(|e| config_error("<document>", Some(e.line()), e.to_string()))?
                }
            }
        };
        if !user.is_object() {
            return Err(config_error("<document>", None, "top level must be a table"));
        }
        let defaults = serde_json::to_value(ExperimentConfig::default())?;
        let mut missing = Vec::new();
        compare_keys(&user, &defaults, "", &mut missing).map_err(|path| {
            let (section, leaf) = match path.rsplit_once('.') {
                Some((s, l)) => (Some(s), l),
                None => (None, path.as_str()),
            };
            config_error(&path, locate(text, format, section, leaf), "unknown key")
        })?;
        if !missing.is_empty() {
            log::info!("using defaults for unset config keys: {}", missing.join(", "));
        }
        let config: ExperimentConfig = match format {
            Format::Toml => toml::from_str(text).map_err(|e| {
                let line = e.span().map(|s| line_of_offset(text, s.start));
                config_error("<document>", line, e.message().to_string())
            })?,
            Format::Json => serde_json::from_value(user).map_err(|e| config_error("<document>", None, e.to_string()))?,
        };
        config.validate().map_err(|e| match e {
            Error::Config { key, reason, .. } => {
                let (section, leaf) = match key.rsplit_once('.') {
                    Some((s, l)) => (Some(s.to_string()), l.to_string()),
                    None => (None, key.clone()),
                };
                let line = locate(text, format, section.as_deref(), &leaf);
                Error::Config { key, line, reason }
            }
            other => other,
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, Format::from_path(path))
    }

    pub fn validate(&self) -> Result<()> {
        fn section(name: &str, result: Result<()>) -> Result<()> {
            result.map_err(|e| match e {
                Error::InvalidParameter { name: key, reason } => config_error(format!("{name}.{key}"), None, reason),
                other => other,
            })
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(config_error("scale", None, format!("must lie in (0, 1], got {}", self.scale)));
        }
        if self.steps == 0 {
            return Err(config_error("steps", None, "must be positive"));
        }
        section("model", self.model.validate())?;
        section("bsde", self.bsde.validate())?;
        section("control", self.control.validate())?;
        if self.selector.points == 0 {
            return Err(config_error("selector.points", None, "must be positive"));
        }
        if self.selector.oracle_paths < 2 {
            return Err(config_error("selector.oracle_paths", None, "need at least 2 paths"));
        }
        if self.oracle.paths < 2 {
            return Err(config_error("oracle.paths", None, "need at least 2 paths"));
        }
        for (key, a) in [("oracle.threshold", self.oracle.threshold), ("simulate.threshold", self.simulate.threshold)] {
            if !(a.is_finite() && a >= 0.0) {
                return Err(config_error(key, None, format!("must be finite and >= 0, got {a}")));
            }
        }
        if self.simulate.paths == 0 {
            return Err(config_error("simulate.paths", None, "must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_error("<document>", None, e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.model.horizon, self.steps)
    }

    /// BSDE training settings after applying `scale`.
    pub fn effective_bsde(&self) -> BsdeTrainConfig {
        self.bsde.scaled(self.scale)
    }

    /// Control training settings after applying `scale`.
    pub fn effective_control(&self) -> ControlTrainConfig {
        self.control.scaled(self.scale)
    }
}
