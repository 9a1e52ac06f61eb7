//! Projected stochastic approximation driven by Markovian noise.
//!
//! The engine iterates `x_{k+1} = proj(x_k + a_k (F(x_k, Y_k) + M_k))` and
//! records an error metric on a sparse grid of iteration indices.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::markov::FiniteChain;
use crate::rng::{stream_rng, SaRng};

/// Any coordinate beyond this magnitude counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SaError {
    #[error("step size alpha must be positive and finite, got {0}")]
    Alpha(f64),
    #[error("schedule offset K must be at least 2, got {0}")]
    Offset(f64),
    #[error("schedule exponent xi must lie in [0, 1], got {0}")]
    Exponent(f64),
    #[error("projection radius must be positive and finite, got {0}")]
    Radius(f64),
    #[error("iterate diverged at step {step} (seed {seed})")]
    Divergence { step: u64, seed: u64 },
    #[error("initial point has dimension {got}, problem has {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("initial point is not finite")]
    NonFiniteStart,
    #[error("record grid must be strictly increasing within [0, {steps}]")]
    Grid { steps: u64 },
    #[error("ensemble needs at least one seed")]
    NoSeeds,
}

/// Step sizes `alpha / (k + K)^xi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub alpha: f64,
    #[serde(rename = "K")]
    pub k0: f64,
    pub xi: f64,
}

impl StepSchedule {
    pub fn new(alpha: f64, k0: f64, xi: f64) -> Result<Self, SaError> {
        let s = StepSchedule { alpha, k0, xi };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(alpha: f64) -> Result<Self, SaError> {
        Self::new(alpha, 2.0, 0.0)
    }

    pub fn validate(&self) -> Result<(), SaError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(SaError::Alpha(self.alpha));
        }
        if !(self.k0 >= 2.0 && self.k0.is_finite()) {
            return Err(SaError::Offset(self.k0));
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(SaError::Exponent(self.xi));
        }
        Ok(())
    }

    pub fn step(&self, k: u64) -> f64 {
        if self.xi == 0.0 {
            self.alpha
        } else if self.xi == 1.0 {
            self.alpha / (k as f64 + self.k0)
        } else {
            self.alpha / (k as f64 + self.k0).powf(self.xi)
        }
    }
}

/// Projection onto an origin-centred Euclidean ball, or the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProjectionJson", into = "ProjectionJson")]
pub enum BallProjection {
    None,
    Ball { radius: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ProjectionJson {
    Tag(String),
    Ball { radius: f64 },
}

impl TryFrom<ProjectionJson> for BallProjection {
    type Error = String;

    fn try_from(j: ProjectionJson) -> Result<Self, String> {
        match j {
            ProjectionJson::Tag(t) if t == "none" => Ok(BallProjection::None),
            ProjectionJson::Tag(t) => Err(format!("unknown projection \"{t}\"")),
            ProjectionJson::Ball { radius } => BallProjection::ball(radius).map_err(|e| e.to_string()),
        }
    }
}

impl From<BallProjection> for ProjectionJson {
    fn from(p: BallProjection) -> Self {
        match p {
            BallProjection::None => ProjectionJson::Tag("none".into()),
            BallProjection::Ball { radius } => ProjectionJson::Ball { radius },
        }
    }
}

impl BallProjection {
    pub fn ball(radius: f64) -> Result<Self, SaError> {
        if radius > 0.0 && radius.is_finite() {
            Ok(BallProjection::Ball { radius })
        } else {
            Err(SaError::Radius(radius))
        }
    }

    /// Rescales `x` in place by `radius / |x|` when it lies outside the ball.
    pub fn project(&self, x: &mut [f64]) {
        if let BallProjection::Ball { radius } = *self {
            let norm = linalg::l2_norm(x);
            if norm > radius {
                let s = radius / norm;
                x.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    pub fn projected(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        self.project(&mut v);
        v
    }
}

/// A root-finding problem `E_mu[F(x, Y)] = 0` with Markovian noise `Y`.
pub trait SaProblem: Sync {
    type State: Clone + Send + Sync;

    fn dim(&self) -> usize;

    /// Known root used for error recording.
    fn x_star(&self) -> Option<&[f64]>;

    /// Writes `F(x, y) + M` into `out` and advances `y` to the next noise state.
    fn increment<R: Rng + ?Sized>(&self, x: &[f64], y: &mut Self::State, rng: &mut R, out: &mut [f64]);

    /// Applies `x += step * increment`. Problems with sparse updates override
    /// this to avoid touching the full vector.
    fn advance<R: Rng + ?Sized>(&self, x: &mut [f64], y: &mut Self::State, step: f64, rng: &mut R, buf: &mut [f64]) {
        self.increment(x, y, rng, buf);
        x.iter_mut().zip(buf.iter()).for_each(|(xi, b)| *xi += step * b);
    }
}

/// Error recorded along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    #[default]
    SquaredL2,
    SquaredLinf,
}

impl ErrorMetric {
    pub fn eval(&self, x: &[f64], x_star: Option<&[f64]>) -> f64 {
        let diff = |i: usize| x[i] - x_star.map_or(0.0, |s| s[i]);
        match self {
            ErrorMetric::SquaredL2 => (0..x.len()).map(|i| diff(i).powi(2)).sum(),
            ErrorMetric::SquaredLinf => (0..x.len()).fold(0.0f64, |m, i| m.max(diff(i).abs())).powi(2),
        }
    }
}

/// Strictly increasing iteration indices at which the metric is recorded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecordGrid(Vec<u64>);

impl RecordGrid {
    pub fn from_indices(mut idx: Vec<u64>) -> Self {
        idx.sort_unstable();
        idx.dedup();
        RecordGrid(idx)
    }

    /// `per_decade` log-spaced points over `[1, steps]` plus 0 and `steps`.
    pub fn geometric(steps: u64, per_decade: usize) -> Self {
        let mut idx = vec![0, steps];
        if steps >= 1 {
            let decades = (steps as f64).log10();
            let n = (decades * per_decade as f64).ceil() as usize;
            for i in 0..=n {
                let k = 10f64.powf(i as f64 / per_decade as f64).round() as u64;
                if k <= steps {
                    idx.push(k);
                }
            }
        }
        Self::from_indices(idx)
    }

    /// `count` evenly spaced points over `[lo, hi]`.
    pub fn linear(lo: u64, hi: u64, count: usize) -> Self {
        let count = count.max(2);
        let idx = (0..count)
            .map(|i| lo + ((hi - lo) as f64 * i as f64 / (count - 1) as f64).round() as u64)
            .collect();
        Self::from_indices(idx)
    }

    pub fn union(&self, other: &RecordGrid) -> Self {
        Self::from_indices(self.0.iter().chain(&other.0).copied().collect())
    }

    pub fn indices(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check(&self, steps: u64) -> Result<(), SaError> {
        let ok = self.0.windows(2).all(|w| w[0] < w[1]) && self.0.last().is_none_or(|&k| k <= steps);
        if ok {
            Ok(())
        } else {
            Err(SaError::Grid { steps })
        }
    }
}

/// Everything about a run except the problem, the start and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub schedule: StepSchedule,
    pub projection: BallProjection,
    pub steps: u64,
    pub grid: RecordGrid,
    #[serde(default)]
    pub metric: ErrorMetric,
}

impl RunSpec {
    pub fn new(schedule: StepSchedule, projection: BallProjection, steps: u64) -> Self {
        RunSpec {
            schedule,
            projection,
            steps,
            grid: RecordGrid::geometric(steps, 50),
            metric: ErrorMetric::SquaredL2,
        }
    }

    pub fn with_grid(mut self, grid: RecordGrid) -> Self {
        self.grid = grid;
        self
    }

    pub fn with_metric(mut self, metric: ErrorMetric) -> Self {
        self.metric = metric;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub k: Vec<u64>,
    pub errors: Vec<f64>,
    pub seed: u64,
    pub final_x: Vec<f64>,
    pub schedule: StepSchedule,
    pub projection: BallProjection,
    pub metric: ErrorMetric,
}

/// Runs one trajectory with generator `seeded_rng(seed)`.
pub fn run<P: SaProblem>(
    problem: &P,
    spec: &RunSpec,
    x0: &[f64],
    y0: P::State,
    seed: u64,
) -> Result<Trajectory, SaError> {
    run_observed(problem, spec, x0, y0, stream_rng(seed, 0), seed, |_, _| {})
}

/// Like [`run`] with an explicit generator and an observer called with every
/// recorded `(k, x_k)`.
pub fn run_observed<P, F>(
    problem: &P,
    spec: &RunSpec,
    x0: &[f64],
    mut y: P::State,
    mut rng: SaRng,
    seed: u64,
    mut observe: F,
) -> Result<Trajectory, SaError>
where
    P: SaProblem,
    F: FnMut(u64, &[f64]),
{
    spec.schedule.validate()?;
    spec.grid.check(spec.steps)?;
    if x0.len() != problem.dim() {
        return Err(SaError::Dimension { got: x0.len(), expected: problem.dim() });
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(SaError::NonFiniteStart);
    }
    let x_star = problem.x_star();
    let mut x = x0.to_vec();
    let mut buf = vec![0.0; x.len()];
    let grid = spec.grid.indices();
    let mut errors = Vec::with_capacity(grid.len());
    let mut next = 0;
    if grid.first() == Some(&0) {
        errors.push(spec.metric.eval(&x, x_star));
        observe(0, &x);
        next = 1;
    }
    for k in 0..spec.steps {
        let a = spec.schedule.step(k);
        problem.advance(&mut x, &mut y, a, &mut rng, &mut buf);
        spec.projection.project(&mut x);
        if next < grid.len() && grid[next] == k + 1 {
            if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
                return Err(SaError::Divergence { step: k + 1, seed });
            }
            errors.push(spec.metric.eval(&x, x_star));
            observe(k + 1, &x);
            next += 1;
        } else if (k & 0xff) == 0xff && x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(SaError::Divergence { step: k + 1, seed });
        }
    }
    if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
        return Err(SaError::Divergence { step: spec.steps, seed });
    }
    Ok(Trajectory {
        k: grid.to_vec(),
        errors,
        seed,
        final_x: x,
        schedule: spec.schedule,
        projection: spec.projection,
        metric: spec.metric,
    })
}

/// Pointwise mean and sample variance of error curves over an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCurve {
    pub k: Vec<u64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub n_seeds: usize,
}

#[derive(Serialize, Deserialize)]
struct CurveRow {
    k: u64,
    mean_error: f64,
    var_error: f64,
    n_seeds: usize,
}

impl EnsembleCurve {
    pub fn from_trajectories(trajs: &[Trajectory]) -> Self {
        let n = trajs.len();
        let k = trajs[0].k.clone();
        let mut mean = vec![0.0; k.len()];
        let mut var = vec![0.0; k.len()];
        let mut col = vec![0.0; n];
        for i in 0..k.len() {
            for (c, t) in col.iter_mut().zip(trajs) {
                *c = t.errors[i];
            }
            (mean[i], var[i]) = crate::stats::mean_var(&col);
        }
        EnsembleCurve { k, mean, var, n_seeds: n }
    }

    /// Standard error of the mean at each grid point.
    pub fn std_err(&self) -> Vec<f64> {
        self.var.iter().map(|v| (v / self.n_seeds as f64).sqrt()).collect()
    }

    /// Points with `lo <= k <= hi`.
    pub fn window(&self, lo: u64, hi: u64) -> (Vec<f64>, Vec<f64>) {
        self.k
            .iter()
            .zip(&self.mean)
            .filter(|(&k, _)| k >= lo && k <= hi)
            .map(|(&k, &m)| (k as f64, m))
            .unzip()
    }

    /// Average of the mean curve over grid points in `[lo, hi]`.
    pub fn tail_average(&self, lo: u64, hi: u64) -> f64 {
        let (_, m) = self.window(lo, hi);
        m.iter().sum::<f64>() / m.len() as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for i in 0..self.k.len() {
            wr.serialize(CurveRow {
                k: self.k[i],
                mean_error: self.mean[i],
                var_error: self.var[i],
                n_seeds: self.n_seeds,
            })?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> csv::Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut c = EnsembleCurve { k: vec![], mean: vec![], var: vec![], n_seeds: 0 };
        for row in rd.deserialize() {
            let row: CurveRow = row?;
            c.k.push(row.k);
            c.mean.push(row.mean_error);
            c.var.push(row.var_error);
            c.n_seeds = row.n_seeds;
        }
        Ok(c)
    }
}

/// Runs `n_seeds` independent trajectories in parallel; trajectory `i` uses
/// stream `i` of `base_seed`.
pub fn run_ensemble<P: SaProblem>(
    problem: &P,
    spec: &RunSpec,
    x0: &[f64],
    y0: &P::State,
    n_seeds: usize,
    base_seed: u64,
) -> Result<EnsembleCurve, SaError> {
    let trajs = run_trajectories(problem, spec, x0, y0, n_seeds, base_seed)?;
    Ok(EnsembleCurve::from_trajectories(&trajs))
}

/// The individual trajectories behind [`run_ensemble`]. A divergence error
/// carries the stream index as its seed.
pub fn run_trajectories<P: SaProblem>(
    problem: &P,
    spec: &RunSpec,
    x0: &[f64],
    y0: &P::State,
    n_seeds: usize,
    base_seed: u64,
) -> Result<Vec<Trajectory>, SaError> {
    if n_seeds == 0 {
        return Err(SaError::NoSeeds);
    }
    (0..n_seeds as u64)
        .into_par_iter()
        .map(|i| run_observed(problem, spec, x0, y0.clone(), stream_rng(base_seed, i), i, |_, _| {}))
        .collect()
}

/// `F(x, y) = A x + b_y` with `y` from a finite chain, plus optional
/// martingale noise uniform on `[-sigma, sigma]^d`.
#[derive(Debug, Clone)]
pub struct LinearMarkovProblem {
    pub a: DMatrix<f64>,
    pub payload: Vec<Vec<f64>>,
    pub chain: FiniteChain,
    pub noise_scale: f64,
    x_star: Option<Vec<f64>>,
}

impl LinearMarkovProblem {
    /// Computes the root `-A^{-1} E_mu[b_Y]` when `A` is invertible.
    pub fn new(a: DMatrix<f64>, payload: Vec<Vec<f64>>, chain: FiniteChain, noise_scale: f64) -> Self {
        let d = a.nrows();
        let x_star = chain.stationary_distribution().ok().and_then(|mu| {
            let mut bbar = DVector::zeros(d);
            for (m, b) in mu.mu.iter().zip(&payload) {
                bbar += DVector::from_column_slice(b) * *m;
            }
            linalg::solve_vec(&a, &(-bbar)).map(|x| x.iter().copied().collect())
        });
        LinearMarkovProblem { a, payload, chain, noise_scale, x_star }
    }

    pub fn martingale<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        if self.noise_scale > 0.0 {
            for o in out.iter_mut() {
                *o = rng.random_range(-self.noise_scale..=self.noise_scale);
            }
        } else {
            out.fill(0.0);
        }
    }
}

impl SaProblem for LinearMarkovProblem {
    type State = usize;

    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn x_star(&self) -> Option<&[f64]> {
        self.x_star.as_deref()
    }

    fn increment<R: Rng + ?Sized>(&self, x: &[f64], y: &mut usize, rng: &mut R, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.payload[*y][i] + x.iter().enumerate().map(|(j, xj)| self.a[(i, j)] * xj).sum::<f64>();
        }
        if self.noise_scale > 0.0 {
            for o in out.iter_mut() {
                *o += rng.random_range(-self.noise_scale..=self.noise_scale);
            }
        }
        *y = self.chain.step(*y, rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn ar1(noise: f64) -> LinearMarkovProblem {
        let chain = FiniteChain::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        LinearMarkovProblem::new(DMatrix::from_element(1, 1, -1.0), vec![vec![1.0], vec![-1.0]], chain, noise)
    }

    #[test]
    fn step_size_examples() {
        assert_eq!(StepSchedule::new(1.0, 2.0, 1.0).unwrap().step(0), 0.5);
        let c = StepSchedule::new(1.0, 2.0, 0.0).unwrap();
        assert_eq!(c.step(0), 1.0);
        assert_eq!(c.step(12345), 1.0);
        let h = StepSchedule::new(2.0, 4.0, 0.5).unwrap();
        assert!((h.step(5) - 2.0 / 3.0).abs() < 1e-15);
        assert!(StepSchedule::new(1.0, 1.5, 0.0).is_err());
        assert!(StepSchedule::new(-1.0, 2.0, 0.0).is_err());
        assert!(StepSchedule::new(1.0, 2.0, 1.5).is_err());
    }

    #[test]
    fn projection_examples() {
        let p = BallProjection::ball(5.0).unwrap();
        assert_eq!(p.projected(&[3.0, 4.0]), vec![3.0, 4.0]);
        let v = p.projected(&[6.0, 8.0]);
        assert!((v[0] - 3.0).abs() < 1e-15 && (v[1] - 4.0).abs() < 1e-15);
        assert_eq!(BallProjection::None.projected(&[1e9, -3.0]), vec![1e9, -3.0]);
    }

    #[test]
    fn projection_json() {
        let p: BallProjection = serde_json::from_str(r#"{"radius": 2.5}"#).unwrap();
        assert_eq!(p, BallProjection::Ball { radius: 2.5 });
        let n: BallProjection = serde_json::from_str(r#""none""#).unwrap();
        assert_eq!(n, BallProjection::None);
        assert!(serde_json::from_str::<BallProjection>(r#"{"radius": -1}"#).is_err());
        assert_eq!(serde_json::to_string(&n).unwrap(), r#""none""#);
    }

    struct Decay;

    impl SaProblem for Decay {
        type State = ();
        fn dim(&self) -> usize {
            1
        }
        fn x_star(&self) -> Option<&[f64]> {
            Some(&[0.0])
        }
        fn increment<R: Rng + ?Sized>(&self, x: &[f64], _: &mut (), _: &mut R, out: &mut [f64]) {
            out[0] = -x[0];
        }
    }

    #[test]
    fn deterministic_halving() {
        let spec = RunSpec::new(StepSchedule::constant(0.5).unwrap(), BallProjection::None, 10)
            .with_grid(RecordGrid::linear(0, 10, 11));
        let t = run(&Decay, &spec, &[1.0], (), 0).unwrap();
        for (k, e) in t.k.iter().zip(&t.errors) {
            assert_eq!(*e, 0.25f64.powi(*k as i32));
        }
    }

    #[test]
    fn zero_steps_records_start() {
        let spec = RunSpec::new(StepSchedule::constant(0.5).unwrap(), BallProjection::None, 0);
        let t = run(&Decay, &spec, &[3.0], (), 0).unwrap();
        assert_eq!(t.k, vec![0]);
        assert_eq!(t.errors, vec![9.0]);
    }

    #[test]
    fn deterministic_ensemble_has_zero_variance() {
        let spec = RunSpec::new(StepSchedule::constant(0.1).unwrap(), BallProjection::None, 100);
        let c = run_ensemble(&Decay, &spec, &[1.0], &(), 8, 5).unwrap();
        assert!(c.var.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_seed_ensemble_equals_run() {
        let p = ar1(0.0);
        let spec = RunSpec::new(StepSchedule::constant(0.1).unwrap(), BallProjection::None, 1000);
        let c = run_ensemble(&p, &spec, &[0.0], &0, 1, 42).unwrap();
        let t = run(&p, &spec, &[0.0], 0, 42).unwrap();
        assert_eq!(c.mean, t.errors);
    }

    #[test]
    fn divergence_is_reported() {
        let spec = RunSpec::new(StepSchedule::constant(3.0).unwrap(), BallProjection::None, 10_000);
        match run(&Decay, &spec, &[1.0], (), 7) {
            Err(SaError::Divergence { step, seed: 7 }) => assert!(step <= 10_000),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ar1_time_average_is_order_alpha() {
        let p = ar1(0.0);
        let alpha = 0.01;
        let spec = RunSpec::new(StepSchedule::constant(alpha).unwrap(), BallProjection::None, 200_000)
            .with_grid(RecordGrid::linear(100_000, 200_000, 10_001));
        let t = run(&p, &spec, &[0.0], 0, 1).unwrap();
        let avg = t.errors.iter().sum::<f64>() / t.errors.len() as f64;
        assert!(avg > 0.0 && avg < 5.0 * alpha, "{avg}");
    }

    #[test]
    fn ar1_ensemble_matches_stationary_variance() {
        let p = ar1(0.0);
        let alpha = 0.01;
        let spec = RunSpec::new(StepSchedule::constant(alpha).unwrap(), BallProjection::None, 5_000);
        let c = run_ensemble(&p, &spec, &[0.0], &0, 100, 3).unwrap();
        let last = c.k.len() - 1;
        let oracle = alpha / (2.0 - alpha);
        let se = c.std_err()[last];
        assert!((c.mean[last] - oracle).abs() < 3.0 * se, "{} vs {oracle} (se {se})", c.mean[last]);
    }

    #[test]
    fn ensemble_is_reproducible() {
        let p = ar1(0.2);
        let spec = RunSpec::new(StepSchedule::new(1.0, 2.0, 1.0).unwrap(), BallProjection::ball(3.0).unwrap(), 2000);
        let a = run_ensemble(&p, &spec, &[0.5], &1, 6, 9).unwrap();
        let b = run_ensemble(&p, &spec, &[0.5], &1, 6, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projected_iterates_stay_in_ball() {
        let chain = FiniteChain::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let p = LinearMarkovProblem::new(DMatrix::from_element(2, 2, 0.3), vec![vec![5.0, 1.0], vec![-1.0, 4.0]], chain, 1.0);
        let spec = RunSpec::new(StepSchedule::constant(0.5).unwrap(), BallProjection::ball(2.0).unwrap(), 5000);
        let mut worst: f64 = 0.0;
        run_observed(&p, &spec, &[0.0, 0.0], 0, seeded_rng(4), 4, |_, x| {
            worst = worst.max(linalg::l2_norm(x));
        })
        .unwrap();
        assert!(worst <= 2.0 + 1e-12);
    }

    #[test]
    fn martingale_has_zero_conditional_mean() {
        // Bin by the sign of x and the noise state; M must average to zero in
        // every bin.
        let p = ar1(0.7);
        let mut rng = seeded_rng(8);
        let mut bins: Vec<Vec<f64>> = vec![Vec::new(); 4];
        let mut y = 0usize;
        let mut x = [0.0];
        let mut m = [0.0];
        for _ in 0..100_000 {
            p.martingale(&mut rng, &mut m);
            let bin = 2 * y + (x[0] > 0.0) as usize;
            bins[bin].push(m[0]);
            x[0] += 0.05 * (-x[0] + p.payload[y][0] + m[0]);
            y = p.chain.step(y, &mut rng);
        }
        for b in bins.iter().filter(|b| b.len() > 100) {
            let (mean, var) = crate::stats::mean_var(b);
            assert!(mean.abs() < 4.0 * (var / b.len() as f64).sqrt());
        }
    }

    #[test]
    fn grid_shapes() {
        let g = RecordGrid::geometric(1_000_000, 50);
        assert_eq!(g.indices()[0], 0);
        assert_eq!(*g.indices().last().unwrap(), 1_000_000);
        assert!(g.indices().windows(2).all(|w| w[0] < w[1]));
        let l = RecordGrid::linear(10, 20, 11);
        assert_eq!(l.indices(), &[10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20]);
        let spec = RunSpec::new(StepSchedule::constant(0.5).unwrap(), BallProjection::None, 5)
            .with_grid(RecordGrid::from_indices(vec![0, 9]));
        assert!(matches!(run(&Decay, &spec, &[1.0], (), 0), Err(SaError::Grid { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let c = EnsembleCurve { k: vec![0, 1, 10], mean: vec![1.0, 0.5, 0.125], var: vec![0.0, 0.1, 0.2], n_seeds: 4 };
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("k,mean_error,var_error,n_seeds\n"));
        assert_eq!(EnsembleCurve::read_csv(&buf[..]).unwrap(), c);
    }

    proptest! {
        #[test]
        fn projection_is_nonexpansive_and_idempotent(
            x in prop::collection::vec(-20.0f64..20.0, 3),
            y in prop::collection::vec(-20.0f64..20.0, 3),
            r in 0.1f64..10.0,
        ) {
            let p = BallProjection::ball(r).unwrap();
            let px = p.projected(&x);
            let py = p.projected(&y);
            let d = |a: &[f64], b: &[f64]| linalg::l2_norm(&a.iter().zip(b).map(|(u, v)| u - v).collect::<Vec<_>>());
            prop_assert!(d(&px, &py) <= d(&x, &y) + 1e-12);
            prop_assert!(linalg::l2_norm(&px) <= r + 1e-12);
            prop_assert!(d(&p.projected(&px), &px) < 1e-12);
        }
    }
}
