//! Experiment configuration files.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use salab_core::markov::FiniteChain;
use salab_core::qlearning::{BehaviorPolicy, FiniteMdp};
use salab_core::sa::{BallProjection, ErrorMetric, RecordGrid, StepSchedule};
use salab_core::scbcd::{GradientNoise, ObjectiveSpec};
use salab_core::td::TdSpec;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config at `{pointer}`: {message}")]
    Schema { pointer: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    TdLambda,
    Qlearning,
    Scbcd,
    CustomSa,
}

/// Union of the listed grid pieces; a 50-per-decade geometric grid if none
/// is given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_decade: Option<usize>,
    /// `[lo, hi, count]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<(u64, u64, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<u64>>,
}

impl GridSpec {
    pub fn build(&self, steps: u64) -> RecordGrid {
        let mut grid = RecordGrid::from_indices(Vec::new());
        if self.per_decade.is_none() && self.linear.is_none() && self.indices.is_none() {
            return RecordGrid::geometric(steps, 50);
        }
        if let Some(n) = self.per_decade {
            grid = grid.union(&RecordGrid::geometric(steps, n));
        }
        if let Some((lo, hi, count)) = self.linear {
            grid = grid.union(&RecordGrid::linear(lo, hi, count));
        }
        if let Some(idx) = &self.indices {
            grid = grid.union(&RecordGrid::from_indices(idx.clone()));
        }
        grid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Kind-specific problem block, validated by [`ExperimentConfig::problem`].
    pub problem: serde_json::Value,
    pub schedule: StepSchedule,
    /// Defaults to a ball of the model's default radius for TD(lambda) and
    /// to no projection otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<BallProjection>,
    pub steps: u64,
    pub n_seeds: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub grid: GridSpec,
    /// Defaults to squared sup-norm for Q-learning and squared Euclidean
    /// otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<ErrorMetric>,
    /// Starting iterate; zero if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QConfig {
    pub mdp: FiniteMdp,
    /// Uniform if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<BehaviorPolicy>,
}

/// `F(x, y) = A x + b_y` driven by a finite chain, plus uniform martingale
/// noise of half-width `noise_scale`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearConfig {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub payload: Vec<Vec<f64>>,
    pub chain: FiniteChain,
    #[serde(default)]
    pub noise_scale: f64,
}

/// A validated problem block.
#[derive(Debug, Clone)]
pub enum Problem {
    Td(Box<TdSpec>),
    Q(Box<QConfig>),
    Scbcd(ObjectiveSpec),
    Linear(Box<LinearConfig>),
}

fn from_value<T: DeserializeOwned>(v: &serde_json::Value, prefix: &str) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(v).map_err(|e| ConfigError::Schema {
        pointer: format!("{prefix}.{}", e.path()),
        message: e.inner().to_string(),
    })
}

/// Body of the `quadratic` objective. Deserialized on its own because a
/// tagged enum buffers its input and loses the path to a bad field.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QuadraticFields {
    spectrum: Vec<f64>,
    seed: u64,
    #[serde(default)]
    blocks: Option<Vec<usize>>,
    #[serde(default)]
    noise: GradientNoise,
}

fn objective_spec(v: &serde_json::Value) -> Result<ObjectiveSpec, ConfigError> {
    let schema = |pointer: &str, message: String| ConfigError::Schema { pointer: pointer.into(), message };
    let mut body = v.as_object().ok_or_else(|| schema("problem", "expected an object".into()))?.clone();
    let tag = body.remove("type").ok_or_else(|| schema("problem", "missing field `type`".into()))?;
    match tag.as_str() {
        Some("quadratic") => {
            let q: QuadraticFields = from_value(&serde_json::Value::Object(body), "problem")?;
            Ok(ObjectiveSpec::Quadratic { spectrum: q.spectrum, seed: q.seed, blocks: q.blocks, noise: q.noise })
        }
        _ => Err(schema("problem.type", format!("unknown objective {tag}, expected `quadratic`"))),
    }
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Schema {
            pointer: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.problem()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        text.parse()
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.schedule.validate().map_err(|e| ConfigError::Invalid(format!("schedule: {e}")))?;
        if self.n_seeds == 0 {
            return Err(ConfigError::Invalid("n_seeds must be positive".into()));
        }
        let grid = self.grid.build(self.steps);
        if grid.indices().last().is_some_and(|&k| k > self.steps) {
            return Err(ConfigError::Invalid(format!("grid extends past steps = {}", self.steps)));
        }
        Ok(())
    }

    pub fn problem(&self) -> Result<Problem, ConfigError> {
        Ok(match self.kind {
            ExperimentKind::TdLambda => Problem::Td(Box::new(from_value(&self.problem, "problem")?)),
            ExperimentKind::Qlearning => Problem::Q(Box::new(from_value(&self.problem, "problem")?)),
            ExperimentKind::Scbcd => Problem::Scbcd(objective_spec(&self.problem)?),
            ExperimentKind::CustomSa => Problem::Linear(Box::new(from_value(&self.problem, "problem")?)),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "kind": "scbcd",
        "problem": {"type": "quadratic", "spectrum": [1, 2], "seed": 1, "blocks": [1, 1]},
        "schedule": {"alpha": 0.1, "K": 2, "xi": 0},
        "steps": 100, "n_seeds": 2, "base_seed": 5
    }"#;

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::from_str(MINIMAL).unwrap();
        let again = ExperimentConfig::from_str(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn missing_field_is_named() {
        let text = MINIMAL.replace(r#""n_seeds": 2,"#, "");
        let err = ExperimentConfig::from_str(&text).unwrap_err().to_string();
        assert!(err.contains("n_seeds"), "{err}");
    }

    #[test]
    fn problem_errors_carry_a_pointer() {
        let text = MINIMAL.replace(r#""spectrum": [1, 2]"#, r#""spectrum": "wide""#);
        match ExperimentConfig::from_str(&text).unwrap_err() {
            ConfigError::Schema { pointer, .. } => assert_eq!(pointer, "problem.spectrum"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn grid_union() {
        let g = GridSpec { per_decade: Some(1), linear: Some((50, 100, 6)), indices: Some(vec![7]) };
        assert_eq!(g.build(100).indices(), &[0, 1, 7, 10, 50, 60, 70, 80, 90, 100]);
        assert_eq!(GridSpec::default().build(1000), RecordGrid::geometric(1000, 50));
    }
}
