//! Experiment configuration: one TOML document drives every command. All
//! defaults are materialized at load time and the resolved config is written
//! into each artifact, so a run is reproducible from its outputs alone.

use maryland_core::{MarylandParams, DEFAULT_MODE_CAP};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("anchor {0} has no amplitude `a`")]
    MissingAnchorAmplitude(usize),
    #[error("anchor {0} amplitude {1} outside [1, 2]")]
    AmplitudeOutOfRange(usize, f64),
    #[error("anchors are not pairwise distinct")]
    AnchorsNotDistinct,
    #[error("cap exceeded: {0}")]
    CapExceeded(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
}

impl ConfigError {
    /// Stable machine-readable code, one per documented constraint class.
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::Io(_) => "io",
            ConfigError::Parse(_) => "parse",
            ConfigError::DimensionMismatch(_) => "dimension-mismatch",
            ConfigError::MissingAnchorAmplitude(_) => "missing-anchor-amplitude",
            ConfigError::AmplitudeOutOfRange(..) => "amplitude-out-of-range",
            ConfigError::AnchorsNotDistinct => "anchors-not-distinct",
            ConfigError::CapExceeded(_) => "cap-exceeded",
            ConfigError::InvalidValue(_) => "invalid-value",
        }
    }
}

fn default_gamma() -> f64 {
    0.2
}
fn default_radius() -> i64 {
    8
}
fn default_grid_points() -> usize {
    400
}

/// Model section: the operator and its box truncation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub eps: f64,
    pub theta: f64,
    /// Frequency vector; omitted entries default to scaled golden ratios.
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Diophantine exponent; defaults to d + 1.
    #[serde(default)]
    pub tau: Option<f64>,
    /// Spatial box radius of the truncation.
    #[serde(default = "default_radius")]
    pub radius: i64,
    /// Points of the theta grid used by spectrum profiles.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSection {
    pub beta: Vec<i64>,
    /// Amplitude in [1, 2]; required per anchor.
    #[serde(default)]
    pub a: Option<f64>,
}

fn default_m() -> usize {
    3
}
fn default_tol() -> f64 {
    1e-10
}
fn default_max_r() -> usize {
    12
}
fn default_p() -> usize {
    1
}

/// Solver section: the resonant set and Newton controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    /// Number of base frequencies; must equal the anchor count.
    pub b: usize,
    #[serde(default = "default_p")]
    pub p: usize,
    pub anchors: Vec<AnchorSection>,
    pub delta: f64,
    /// Block growth factor M; scale after step r is M^(r+1).
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_r")]
    pub max_r: usize,
}

fn default_scales() -> Vec<i64> {
    vec![3]
}
fn default_sigma_samples() -> usize {
    400
}
fn default_seed() -> u64 {
    11
}
fn default_sampled_columns() -> usize {
    24
}
fn default_mc_samples() -> usize {
    200
}

/// Probe section: scales and sampling budgets of the Green's-function and
/// Monte Carlo probes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbesSection {
    #[serde(default = "default_scales")]
    pub scales: Vec<i64>,
    #[serde(default = "default_sigma_samples")]
    pub sigma_samples: usize,
    /// Master seed; every random stream is a labelled substream of it.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_sampled_columns")]
    pub sampled_columns: usize,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
}

impl Default for ProbesSection {
    fn default() -> Self {
        ProbesSection {
            scales: default_scales(),
            sigma_samples: default_sigma_samples(),
            seed: default_seed(),
            sampled_columns: default_sampled_columns(),
            mc_samples: default_mc_samples(),
        }
    }
}

fn default_directory() -> String {
    "runs/default".into()
}
fn default_formats() -> Vec<String> {
    vec!["json".into(), "csv".into(), "markdown".into()]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: default_directory(),
            formats: default_formats(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub solver: Option<SolverSection>,
    #[serde(default)]
    pub probes: ProbesSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validate every documented constraint before any computation starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if m.d == 0 {
            return Err(ConfigError::InvalidValue("model.d must be >= 1".into()));
        }
        if m.eps < 0.0 {
            return Err(ConfigError::InvalidValue("model.eps must be >= 0".into()));
        }
        if m.gamma <= 0.0 {
            return Err(ConfigError::InvalidValue("model.gamma must be > 0".into()));
        }
        if let Some(tau) = m.tau {
            if tau <= m.d as f64 {
                return Err(ConfigError::InvalidValue(format!(
                    "model.tau must exceed d = {}",
                    m.d
                )));
            }
        }
        if let Some(alpha) = &m.alpha {
            if alpha.len() != m.d {
                return Err(ConfigError::DimensionMismatch(format!(
                    "model.alpha has {} entries for d = {}",
                    alpha.len(),
                    m.d
                )));
            }
        }
        if m.radius < 1 {
            return Err(ConfigError::InvalidValue("model.radius must be >= 1".into()));
        }
        if m.grid_points == 0 {
            return Err(ConfigError::InvalidValue(
                "model.grid_points must be >= 1".into(),
            ));
        }
        let site_count = (2 * m.radius + 1).pow(m.d as u32);
        if site_count as usize > DEFAULT_MODE_CAP {
            return Err(ConfigError::CapExceeded(format!(
                "box has {site_count} sites, cap is {DEFAULT_MODE_CAP}"
            )));
        }

        if let Some(s) = &self.solver {
            if s.p == 0 {
                return Err(ConfigError::InvalidValue("solver.p must be >= 1".into()));
            }
            if s.anchors.is_empty() {
                return Err(ConfigError::InvalidValue(
                    "solver.anchors must be nonempty".into(),
                ));
            }
            if s.b != s.anchors.len() {
                return Err(ConfigError::DimensionMismatch(format!(
                    "solver.b = {} but {} anchors given",
                    s.b,
                    s.anchors.len()
                )));
            }
            let mut seen: BTreeSet<Vec<i64>> = BTreeSet::new();
            for (k, anchor) in s.anchors.iter().enumerate() {
                if anchor.beta.len() != m.d {
                    return Err(ConfigError::DimensionMismatch(format!(
                        "anchor {k} beta has {} entries for d = {}",
                        anchor.beta.len(),
                        m.d
                    )));
                }
                let a = anchor.a.ok_or(ConfigError::MissingAnchorAmplitude(k))?;
                if !(1.0..=2.0).contains(&a) {
                    return Err(ConfigError::AmplitudeOutOfRange(k, a));
                }
                if anchor.beta.iter().any(|x| x.abs() > m.radius) {
                    return Err(ConfigError::CapExceeded(format!(
                        "anchor {k} beta {:?} lies outside the box radius {}",
                        anchor.beta, m.radius
                    )));
                }
                if !seen.insert(anchor.beta.clone()) {
                    return Err(ConfigError::AnchorsNotDistinct);
                }
            }
            if s.delta < 0.0 {
                return Err(ConfigError::InvalidValue("solver.delta must be >= 0".into()));
            }
            if s.m < 2 {
                return Err(ConfigError::InvalidValue("solver.m must be >= 2".into()));
            }
            if s.tol <= 0.0 {
                return Err(ConfigError::InvalidValue("solver.tol must be > 0".into()));
            }
            if s.max_r == 0 {
                return Err(ConfigError::InvalidValue("solver.max_r must be >= 1".into()));
            }
        }

        let p = &self.probes;
        if p.sigma_samples == 0 {
            return Err(ConfigError::InvalidValue(
                "probes.sigma_samples must be >= 1".into(),
            ));
        }
        for &scale in &p.scales {
            if scale < 2 {
                return Err(ConfigError::InvalidValue(
                    "probes.scales entries must be >= 2".into(),
                ));
            }
            if scale > m.radius {
                return Err(ConfigError::CapExceeded(format!(
                    "probe scale {scale} exceeds the box radius {}",
                    m.radius
                )));
            }
        }
        if p.sampled_columns == 0 {
            return Err(ConfigError::InvalidValue(
                "probes.sampled_columns must be >= 1".into(),
            ));
        }

        for f in &self.output.formats {
            if !matches!(f.as_str(), "json" | "csv" | "markdown") {
                return Err(ConfigError::InvalidValue(format!(
                    "unknown output format {f:?}"
                )));
            }
        }
        Ok(())
    }

    /// Maryland parameters with defaults resolved.
    pub fn params(&self) -> MarylandParams {
        let m = &self.model;
        let mut p = MarylandParams::golden(m.d, m.eps, m.theta);
        if let Some(alpha) = &m.alpha {
            p.alpha = alpha.clone();
        }
        p.gamma = m.gamma;
        if let Some(tau) = m.tau {
            p.tau = tau;
        }
        p
    }

    /// The solver section, required by solve-family commands.
    pub fn solver_section(&self) -> Result<&SolverSection, ConfigError> {
        self.solver.as_ref().ok_or_else(|| {
            ConfigError::InvalidValue("this command needs a [solver] section".into())
        })
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = r#"
        [model]
        d = 1
        eps = 0.02
        theta = 0.3

        [solver]
        b = 1
        delta = 1e-3
        anchors = [{ beta = [0], a = 1.3 }]

        [probes]
        scales = [3, 6]

        [output]
        directory = "runs/desk"
    "#;

    #[test]
    fn desk_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(DESK).unwrap();
        let s = cfg.solver.as_ref().unwrap();
        assert_eq!(s.m, 3);
        assert_eq!(s.p, 1);
        assert_eq!(s.tol, 1e-10);
        assert_eq!(cfg.probes.seed, 11);
        assert_eq!(cfg.model.radius, 8);
        let params = cfg.params();
        assert_eq!(params.d, 1);
        assert!(params.tau > 1.0);
    }

    #[test]
    fn missing_amplitude_is_distinct_error() {
        let text = DESK.replace(", a = 1.3", "");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.code(), "missing-anchor-amplitude");
    }

    #[test]
    fn duplicate_anchor_rejected() {
        let text = DESK.replace(
            "anchors = [{ beta = [0], a = 1.3 }]",
            "anchors = [{ beta = [0], a = 1.3 }, { beta = [0], a = 1.5 }]",
        );
        let text = text.replace("b = 1", "b = 2");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.code(), "anchors-not-distinct");
    }

    #[test]
    fn anchor_count_mismatch_rejected() {
        let text = DESK.replace("b = 1", "b = 2");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.code(), "dimension-mismatch");
    }

    #[test]
    fn probe_scale_beyond_radius_rejected() {
        let text = DESK.replace("scales = [3, 6]", "scales = [9]");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.code(), "cap-exceeded");
    }

    #[test]
    fn amplitude_range_enforced() {
        let text = DESK.replace("a = 1.3", "a = 2.7");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.code(), "amplitude-out-of-range");
    }

    #[test]
    fn unknown_key_rejected_at_parse() {
        let text = format!("{DESK}\n[model.extra]\nx = 1\n");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.code(), "parse");
    }
}
