//! Runs a configured experiment and writes its result files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use salab_core::bounds::{
    fit_rate, last_decade, q_bound_constants, scbcd_bound_constants, BoundComparison, BoundConstants, BoundError,
    RateFit,
};
use salab_core::qlearning::{BehaviorPolicy, QProblem};
use salab_core::sa::{run_ensemble, EnsembleCurve, ErrorMetric, LinearMarkovProblem, RunSpec, SaError, SaProblem};
use salab_core::scbcd::SmoothObjective;
use salab_core::td::TdModel;
use salab_core::BallProjection;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, Problem};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("model construction failed: {0}")]
    Model(String),
    #[error(transparent)]
    Divergence(SaError),
    #[error("bound evaluation failed: {0}")]
    Bound(#[from] BoundError),
    #[error("cannot write {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 3 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Model(_) => 2,
            RunError::Divergence(_) => 3,
            RunError::Bound(_) | RunError::Io { .. } => 1,
        }
    }
}

impl From<SaError> for RunError {
    fn from(e: SaError) -> Self {
        match e {
            SaError::Divergence { .. } => RunError::Divergence(e),
            other => RunError::Config(ConfigError::Invalid(other.to_string())),
        }
    }
}

/// Bound constants and the comparison against the empirical curve.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub theorem: &'static str,
    pub constants: BoundConstants,
    pub comparison: BoundComparison,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub curve: EnsembleCurve,
    pub fit: Option<RateFit>,
    pub bound: Option<BoundReport>,
    pub x_star: Vec<f64>,
    /// Why no bound was evaluated, if none was.
    pub bound_note: Option<&'static str>,
}

fn ensemble<P: SaProblem>(
    problem: &P,
    cfg: &ExperimentConfig,
    default_projection: BallProjection,
    default_metric: ErrorMetric,
    y0: P::State,
) -> Result<(EnsembleCurve, Vec<f64>), RunError> {
    let x0 = match &cfg.x0 {
        Some(x) if x.len() != problem.dim() => {
            return Err(ConfigError::Invalid(format!("x0 has length {}, expected {}", x.len(), problem.dim())).into())
        }
        Some(x) => x.clone(),
        None => vec![0.0; problem.dim()],
    };
    let spec = RunSpec::new(cfg.schedule, cfg.projection.unwrap_or(default_projection), cfg.steps)
        .with_grid(cfg.grid.build(cfg.steps))
        .with_metric(cfg.metric.unwrap_or(default_metric));
    Ok((run_ensemble(problem, &spec, &x0, &y0, cfg.n_seeds, cfg.base_seed)?, x0))
}

fn compare(theorem: &'static str, c: BoundConstants, cfg: &ExperimentConfig, curve: &EnsembleCurve) -> BoundReport {
    BoundReport { theorem, constants: c, comparison: BoundComparison::new(&c, &cfg.schedule, curve, 3.0) }
}

/// Runs the ensemble described by `cfg` without touching the file system.
pub fn execute(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let (curve, bound, x_star, bound_note) = match cfg.problem()? {
        Problem::Td(spec) => {
            let model = TdModel::new(*spec).map_err(|e| RunError::Model(e.to_string()))?;
            let ball = BallProjection::ball(model.default_radius())?;
            let y0 = model.initial_state(0);
            let (curve, _) = ensemble(&model, cfg, ball, ErrorMetric::SquaredL2, y0)?;
            let note = "TD(lambda) runs on an unbounded-noise analysis; rate checked only";
            (curve, None, model.x_star().to_vec(), Some(note))
        }
        Problem::Q(q) => {
            let policy = q.policy.clone().unwrap_or_else(|| BehaviorPolicy::uniform(&q.mdp));
            let problem = QProblem::new(q.mdp, &policy).map_err(|e| RunError::Model(e.to_string()))?;
            let (curve, x0) = ensemble(&problem, cfg, BallProjection::None, ErrorMetric::SquaredLinf, 0)?;
            let metric = cfg.metric.unwrap_or(ErrorMetric::SquaredLinf);
            let c = q_bound_constants(&problem, &x0)?;
            // The bound controls the sup-norm error; under another metric it is not comparable.
            let bound = (metric == ErrorMetric::SquaredLinf).then(|| compare("q_learning", c, cfg, &curve));
            let note = bound.is_none().then_some("Q-learning bound is stated for the squared sup-norm metric");
            (curve, bound, problem.q_star.values.clone(), note)
        }
        Problem::Scbcd(spec) => {
            let problem = spec.build().map_err(|e| RunError::Model(e.to_string()))?;
            let (curve, x0) = ensemble(&problem, cfg, BallProjection::None, ErrorMetric::SquaredL2, 0)?;
            let xs = problem.objective.minimizer().expect("quadratics know their minimizer").to_vec();
            let d0: f64 = x0.iter().zip(&xs).map(|(a, b)| (a - b).powi(2)).sum();
            let obj = &problem.objective;
            let c = scbcd_bound_constants(obj.mu(), obj.lipschitz(), problem.p(), problem.noise.c1, problem.noise.c2, d0)?;
            let metric = cfg.metric.unwrap_or(ErrorMetric::SquaredL2);
            let bound = (metric == ErrorMetric::SquaredL2).then(|| compare("scbcd", c, cfg, &curve));
            let note = bound.is_none().then_some("SCBCD bound is stated for the squared Euclidean metric");
            (curve, bound, xs, note)
        }
        Problem::Linear(lin) => {
            let d = lin.a.len();
            let n = lin.chain.n_states();
            if lin.a.iter().any(|r| r.len() != d) || lin.payload.len() != n || lin.payload.iter().any(|r| r.len() != d) {
                return Err(ConfigError::Invalid("problem.A must be square and problem.payload n_states x d".into()).into());
            }
            let a = nalgebra_from_rows(&lin.a);
            let problem = LinearMarkovProblem::new(a, lin.payload.clone(), lin.chain.clone(), lin.noise_scale);
            let xs = problem.x_star().map(|x| x.to_vec()).unwrap_or_default();
            let (curve, _) = ensemble(&problem, cfg, BallProjection::None, ErrorMetric::SquaredL2, 0)?;
            (curve, None, xs, Some("no computable constants for a user-supplied problem"))
        }
    };
    let fit = fit_rate(&curve.k, &curve.mean, last_decade(&curve.k)).ok();
    Ok(Outcome { curve, fit, bound, x_star, bound_note })
}

fn nalgebra_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.len();
    DMatrix::from_fn(d, d, |i, j| rows[i][j])
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub salab_version: &'static str,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub base_seed: u64,
    pub seed_derivation: &'static str,
    pub grid_points: usize,
    pub wall_time_seconds: f64,
    pub x_star: Vec<f64>,
    pub fit: Option<RateFit>,
    pub bound: Option<BoundSummary>,
    pub bound_note: Option<&'static str>,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundSummary {
    pub theorem: &'static str,
    pub case: salab_core::bounds::BoundCase,
    pub in_regime: bool,
    pub all_hold: bool,
    pub min_ratio: f64,
    pub constants: BoundConstants,
    pub rho0: f64,
    pub rho1: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<FileEntry, RunError> {
    fs::write(path, bytes).map_err(|e| RunError::Io { path: path.into(), message: e.to_string() })?;
    Ok(FileEntry {
        name: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        sha256: sha256_hex(bytes),
    })
}

/// Runs `cfg` and writes `results.csv`, `bounds.csv` (when the constants
/// are computable) and `manifest.json` into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Manifest, RunError> {
    let start = Instant::now();
    let outcome = execute(cfg)?;
    let wall = start.elapsed().as_secs_f64();
    fs::create_dir_all(out_dir).map_err(|e| RunError::Io { path: out_dir.into(), message: e.to_string() })?;

    let io = |p: &Path, e: csv::Error| RunError::Io { path: p.into(), message: e.to_string() };
    let mut files = Vec::new();
    let results = out_dir.join("results.csv");
    let mut buf = Vec::new();
    outcome.curve.write_csv(&mut buf).map_err(|e| io(&results, e))?;
    files.push(write(&results, &buf)?);

    let bound = match &outcome.bound {
        Some(report) => {
            let path = out_dir.join("bounds.csv");
            let mut buf = Vec::new();
            report.comparison.write_csv(&mut buf).map_err(|e| io(&path, e))?;
            files.push(write(&path, &buf)?);
            let cmp = &report.comparison;
            Some(BoundSummary {
                theorem: report.theorem,
                case: cmp.case,
                in_regime: cmp.in_regime,
                all_hold: cmp.all_hold(),
                min_ratio: cmp.min_ratio(),
                constants: report.constants,
                rho0: report.constants.rho0(),
                rho1: report.constants.rho1(),
            })
        }
        None => None,
    };

    let canonical = serde_json::to_vec(cfg).expect("config serializes");
    let manifest = Manifest {
        salab_version: env!("CARGO_PKG_VERSION"),
        config_sha256: sha256_hex(&canonical),
        config: cfg.clone(),
        base_seed: cfg.base_seed,
        seed_derivation: "trajectory i draws from ChaCha8 stream i of the generator seeded with base_seed",
        grid_points: outcome.curve.k.len(),
        wall_time_seconds: wall,
        x_star: outcome.x_star.clone(),
        fit: outcome.fit,
        bound,
        bound_note: outcome.bound_note,
        files,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| RunError::Io { path, message: e.to_string() })?;
    Ok(manifest)
}
