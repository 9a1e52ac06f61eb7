//! Stochastic cyclic block coordinate descent as stochastic approximation
//! driven by the deterministic cyclic chain over block indices.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::rng::seeded_rng;
use crate::sa::{run_ensemble, EnsembleCurve, RunSpec, SaError, SaProblem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScbcdError {
    #[error("block sizes must be positive and sum to the dimension {d}")]
    Partition { d: usize },
    #[error("spectrum must be nonempty and strictly positive")]
    Spectrum,
    #[error("vector of length {got}, expected {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("step size must be positive, got {0}")]
    Step(f64),
    #[error("non-finite iterate after step {k}")]
    Divergence { k: u64 },
    #[error("noise constants must be nonnegative and finite")]
    Noise,
    #[error("state-dependent noise needs a known minimizer")]
    NeedMinimizer,
    #[error(transparent)]
    Sa(#[from] SaError),
}

/// Split of `0..d` into consecutive blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct BlockPartition {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl TryFrom<Vec<usize>> for BlockPartition {
    type Error = ScbcdError;

    fn try_from(sizes: Vec<usize>) -> Result<Self, ScbcdError> {
        let d = sizes.iter().sum();
        BlockPartition::new(sizes, d)
    }
}

impl From<BlockPartition> for Vec<usize> {
    fn from(p: BlockPartition) -> Self {
        p.sizes
    }
}

impl BlockPartition {
    pub fn new(sizes: Vec<usize>, d: usize) -> Result<Self, ScbcdError> {
        if sizes.is_empty() || sizes.contains(&0) || sizes.iter().sum::<usize>() != d {
            return Err(ScbcdError::Partition { d });
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for s in &sizes {
            acc += s;
            offsets.push(acc);
        }
        Ok(BlockPartition { sizes, offsets })
    }

    /// `p` nearly equal blocks; the first `d mod p` get one extra coordinate.
    pub fn equal(d: usize, p: usize) -> Result<Self, ScbcdError> {
        if p == 0 || p > d {
            return Err(ScbcdError::Partition { d });
        }
        let sizes = (0..p).map(|i| d / p + usize::from(i < d % p)).collect();
        BlockPartition::new(sizes, d)
    }

    pub fn n_blocks(&self) -> usize {
        self.sizes.len()
    }

    pub fn dim(&self) -> usize {
        self.offsets[self.sizes.len()]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Block updated at iteration `k`.
    pub fn block_at(&self, k: u64) -> usize {
        (k % self.sizes.len() as u64) as usize
    }
}

/// A mu-strongly convex, L-smooth objective.
pub trait SmoothObjective: Sync {
    fn dim(&self) -> usize;
    fn mu(&self) -> f64;
    fn lipschitz(&self) -> f64;
    fn minimizer(&self) -> Option<&[f64]>;
    fn gradient(&self, x: &[f64], out: &mut [f64]);

    /// Coordinates `range` of the gradient.
    fn partial(&self, x: &[f64], range: Range<usize>, out: &mut [f64]) {
        let mut g = vec![0.0; self.dim()];
        self.gradient(x, &mut g);
        out.copy_from_slice(&g[range]);
    }
}

/// `f(x) = x'Ax/2 - b'x` with `A` symmetric positive definite.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    mu: f64,
    l: f64,
    x_star: Vec<f64>,
}

impl QuadraticObjective {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self, ScbcdError> {
        let d = a.nrows();
        if d == 0 || a.ncols() != d {
            return Err(ScbcdError::Spectrum);
        }
        if b.len() != d {
            return Err(ScbcdError::Dimension { got: b.len(), expected: d });
        }
        let sym = (&a + a.transpose()) * 0.5;
        let eig = sym.symmetric_eigenvalues();
        let mu = eig.min();
        if mu <= 0.0 {
            return Err(ScbcdError::Spectrum);
        }
        let x_star = linalg::solve_vec(&sym, &b).ok_or(ScbcdError::Spectrum)?;
        Ok(QuadraticObjective { a: sym, b, mu, l: eig.max(), x_star: x_star.iter().copied().collect() })
    }

    /// `A = Q diag(spectrum) Q'` with `Q` a random orthogonal matrix and `b`
    /// standard Gaussian.
    pub fn from_spectrum<R: Rng + ?Sized>(spectrum: &[f64], rng: &mut R) -> Result<Self, ScbcdError> {
        if spectrum.is_empty() || spectrum.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(ScbcdError::Spectrum);
        }
        let d = spectrum.len();
        let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let a = &q * DMatrix::from_diagonal(&DVector::from_column_slice(spectrum)) * q.transpose();
        let b = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut obj = QuadraticObjective::new(a, b)?;
        // The prescribed spectrum is exact; the eigen-solver's is not.
        obj.mu = spectrum.iter().copied().fold(f64::INFINITY, f64::min);
        obj.l = spectrum.iter().copied().fold(0.0, f64::max);
        Ok(obj)
    }
}

impl SmoothObjective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn mu(&self) -> f64 {
        self.mu
    }

    fn lipschitz(&self) -> f64 {
        self.l
    }

    fn minimizer(&self) -> Option<&[f64]> {
        Some(&self.x_star)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        self.partial(x, 0..self.dim(), out);
    }

    fn partial(&self, x: &[f64], range: Range<usize>, out: &mut [f64]) {
        for (o, r) in out.iter_mut().zip(range) {
            *o = self.a.row(r).iter().zip(x).map(|(a, x)| a * x).sum::<f64>() - self.b[r];
        }
    }
}

/// Zero-mean block noise with `|w| <= c1 |x - x*| + c2`. A Gaussian with
/// standard deviation `sigma * r` per coordinate is radially clipped to
/// norm `r = c1 |x - x*| + c2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientNoise {
    #[serde(default)]
    pub c1: f64,
    #[serde(default)]
    pub c2: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_sigma() -> f64 {
    0.5
}

impl Default for GradientNoise {
    fn default() -> Self {
        GradientNoise::none()
    }
}

impl GradientNoise {
    pub fn none() -> Self {
        GradientNoise { c1: 0.0, c2: 0.0, sigma: default_sigma() }
    }

    pub fn bounded(c2: f64) -> Self {
        GradientNoise { c1: 0.0, c2, sigma: default_sigma() }
    }

    pub fn is_zero(&self) -> bool {
        self.c1 == 0.0 && self.c2 == 0.0
    }

    fn validate(&self) -> Result<(), ScbcdError> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if ok(self.c1) && ok(self.c2) && ok(self.sigma) {
            Ok(())
        } else {
            Err(ScbcdError::Noise)
        }
    }

    /// Radius `c1 |x - x*| + c2` that bounds every sample at `x`.
    pub fn radius(&self, x: &[f64], x_star: Option<&[f64]>) -> f64 {
        if self.c1 == 0.0 {
            return self.c2;
        }
        let dist = match x_star {
            Some(xs) => x.iter().zip(xs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
            None => linalg::l2_norm(x),
        };
        self.c1 * dist + self.c2
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], x_star: Option<&[f64]>, rng: &mut R, out: &mut [f64]) {
        let r = self.radius(x, x_star);
        if r == 0.0 {
            out.fill(0.0);
            return;
        }
        for o in out.iter_mut() {
            *o = self.sigma * r * rng.sample::<f64, _>(StandardNormal);
        }
        let norm = linalg::l2_norm(out);
        if norm > r {
            out.iter_mut().for_each(|o| *o *= r / norm);
        }
    }
}

/// One iteration: only block `k mod p` moves, along its negative partial
/// gradient plus noise.
pub fn scbcd_step<O: SmoothObjective, R: Rng + ?Sized>(
    obj: &O,
    part: &BlockPartition,
    x: &[f64],
    k: u64,
    alpha: f64,
    noise: &GradientNoise,
    rng: &mut R,
) -> Result<Vec<f64>, ScbcdError> {
    if x.len() != part.dim() || x.len() != obj.dim() {
        return Err(ScbcdError::Dimension { got: x.len(), expected: obj.dim() });
    }
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(ScbcdError::Step(alpha));
    }
    let mut out = x.to_vec();
    let mut buf = vec![0.0; 2 * part.dim()];
    block_update(obj, part, noise, &mut out, part.block_at(k), alpha, rng, &mut buf);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(ScbcdError::Divergence { k });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn block_update<O: SmoothObjective, R: Rng + ?Sized>(
    obj: &O,
    part: &BlockPartition,
    noise: &GradientNoise,
    x: &mut [f64],
    block: usize,
    alpha: f64,
    rng: &mut R,
    buf: &mut [f64],
) {
    let range = part.range(block);
    let n = range.len();
    let (grad, w) = buf.split_at_mut(n);
    let w = &mut w[..n];
    obj.partial(x, range.clone(), grad);
    if noise.is_zero() {
        w.fill(0.0);
    } else {
        noise.sample(x, obj.minimizer(), rng, w);
    }
    for ((xi, g), wi) in x[range].iter_mut().zip(grad.iter()).zip(w.iter()) {
        *xi += alpha * (-g + wi);
    }
}

/// Poisson solution for the cyclic chain with `g(i) = -U_i grad_i f(x)`,
/// normalized so `V(0) = 0`: `V(i) = sum_{j < i} (U_j grad_j f(x) - grad f(x) / p)`.
pub fn poisson_closed_form<O: SmoothObjective>(obj: &O, part: &BlockPartition, x: &[f64]) -> Vec<Vec<f64>> {
    let d = obj.dim();
    let p = part.n_blocks();
    let mut grad = vec![0.0; d];
    obj.gradient(x, &mut grad);
    let mut v = vec![vec![0.0; d]; p];
    for i in 1..p {
        let mut next = v[i - 1].clone();
        for (n, g) in next.iter_mut().zip(&grad) {
            *n -= g / p as f64;
        }
        for j in part.range(i - 1) {
            next[j] += grad[j];
        }
        v[i] = next;
    }
    v
}

/// Driving function of the Poisson equation, one row per block index.
pub fn poisson_driver<O: SmoothObjective>(obj: &O, part: &BlockPartition, x: &[f64]) -> DMatrix<f64> {
    let mut grad = vec![0.0; obj.dim()];
    obj.gradient(x, &mut grad);
    DMatrix::from_fn(part.n_blocks(), obj.dim(), |i, j| if part.range(i).contains(&j) { -grad[j] } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport {
    /// `max{L, 1}`.
    pub bound: f64,
    /// Largest observed `|V_x(i) - V_y(i)| / |x - y|`.
    pub max_ratio: f64,
    pub pairs: usize,
    /// First pair and block index that broke the bound.
    pub violation: Option<(Vec<f64>, Vec<f64>, usize)>,
}

/// Samples `pairs` Gaussian pairs around the minimizer and compares the
/// Poisson solutions against `max{L, 1} |x - y|`.
pub fn lipschitz_check<O: SmoothObjective, R: Rng + ?Sized>(
    obj: &O,
    part: &BlockPartition,
    pairs: usize,
    rng: &mut R,
) -> LipschitzReport {
    let d = obj.dim();
    let bound = obj.lipschitz().max(1.0);
    let centre = obj.minimizer().map(|c| c.to_vec()).unwrap_or_else(|| vec![0.0; d]);
    let mut report = LipschitzReport { bound, max_ratio: 0.0, pairs, violation: None };
    for _ in 0..pairs {
        let x: Vec<f64> = centre.iter().map(|c| c + rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = centre.iter().map(|c| c + rng.sample::<f64, _>(StandardNormal)).collect();
        let dist = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let (vx, vy) = (poisson_closed_form(obj, part, &x), poisson_closed_form(obj, part, &y));
        for i in 0..part.n_blocks() {
            let diff = vx[i].iter().zip(&vy[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dist > 0.0 {
                report.max_ratio = report.max_ratio.max(diff / dist);
            }
            if diff > bound * dist * (1.0 + 1e-12) && report.violation.is_none() {
                report.violation = Some((x.clone(), y.clone(), i));
            }
        }
    }
    report
}

/// SCBCD as an [`SaProblem`]. The noise state is the block index to update.
#[derive(Debug, Clone)]
pub struct ScbcdProblem<O> {
    pub objective: O,
    pub partition: BlockPartition,
    pub noise: GradientNoise,
}

impl<O: SmoothObjective> ScbcdProblem<O> {
    pub fn new(objective: O, partition: BlockPartition, noise: GradientNoise) -> Result<Self, ScbcdError> {
        if partition.dim() != objective.dim() {
            return Err(ScbcdError::Dimension { got: partition.dim(), expected: objective.dim() });
        }
        noise.validate()?;
        if noise.c1 > 0.0 && objective.minimizer().is_none() {
            return Err(ScbcdError::NeedMinimizer);
        }
        Ok(ScbcdProblem { objective, partition, noise })
    }

    pub fn p(&self) -> usize {
        self.partition.n_blocks()
    }
}

impl<O: SmoothObjective> SaProblem for ScbcdProblem<O> {
    type State = usize;

    fn dim(&self) -> usize {
        self.objective.dim()
    }

    fn x_star(&self) -> Option<&[f64]> {
        self.objective.minimizer()
    }

    fn increment<R: Rng + ?Sized>(&self, x: &[f64], y: &mut usize, rng: &mut R, out: &mut [f64]) {
        let mut moved = x.to_vec();
        let mut buf = vec![0.0; 2 * x.len()];
        block_update(&self.objective, &self.partition, &self.noise, &mut moved, *y, 1.0, rng, &mut buf);
        out.iter_mut().zip(moved.iter().zip(x)).for_each(|(o, (m, x))| *o = m - x);
        *y = (*y + 1) % self.p();
    }

    fn advance<R: Rng + ?Sized>(&self, x: &mut [f64], y: &mut usize, step: f64, rng: &mut R, buf: &mut [f64]) {
        let mut local = [0.0; 64];
        let need = 2 * self.partition.sizes()[*y];
        if need <= local.len() {
            block_update(&self.objective, &self.partition, &self.noise, x, *y, step, rng, &mut local[..need]);
        } else if need <= buf.len() {
            block_update(&self.objective, &self.partition, &self.noise, x, *y, step, rng, &mut buf[..need]);
        } else {
            let mut big = vec![0.0; need];
            block_update(&self.objective, &self.partition, &self.noise, x, *y, step, rng, &mut big);
        }
        *y = (*y + 1) % self.p();
    }
}

/// Ensemble of squared-error curves starting from block 0.
pub fn run_scbcd<O: SmoothObjective>(
    problem: &ScbcdProblem<O>,
    spec: &RunSpec,
    x0: &[f64],
    n_seeds: usize,
    base_seed: u64,
) -> Result<EnsembleCurve, ScbcdError> {
    Ok(run_ensemble(problem, spec, x0, &0, n_seeds, base_seed)?)
}

/// Objective description used in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    Quadratic {
        spectrum: Vec<f64>,
        seed: u64,
        /// Block sizes; defaults to five nearly equal blocks (or `d` if smaller).
        #[serde(default)]
        blocks: Option<Vec<usize>>,
        #[serde(default)]
        noise: GradientNoise,
    },
}

impl ObjectiveSpec {
    pub fn build(&self) -> Result<ScbcdProblem<QuadraticObjective>, ScbcdError> {
        match self {
            ObjectiveSpec::Quadratic { spectrum, seed, blocks, noise } => {
                let obj = QuadraticObjective::from_spectrum(spectrum, &mut seeded_rng(*seed))?;
                let d = spectrum.len();
                let part = match blocks {
                    Some(b) => BlockPartition::new(b.clone(), d)?,
                    None => BlockPartition::equal(d, d.min(5))?,
                };
                ScbcdProblem::new(obj, part, *noise)
            }
        }
    }
}

/// Evenly spaced spectrum on `[mu, l]`.
pub fn linear_spectrum(d: usize, mu: f64, l: f64) -> Vec<f64> {
    if d == 1 {
        return vec![mu];
    }
    (0..d).map(|i| mu + (l - mu) * i as f64 / (d - 1) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::cyclic_chain;
    use crate::sa::{run, RecordGrid, StepSchedule};
    use crate::BallProjection;
    use proptest::prelude::{any, prop_assert, proptest};

    fn half_norm(d: usize) -> QuadraticObjective {
        QuadraticObjective::new(DMatrix::identity(d, d), DVector::zeros(d)).unwrap()
    }

    fn random_quadratic(seed: u64) -> QuadraticObjective {
        QuadraticObjective::from_spectrum(&linear_spectrum(10, 0.5, 1.0), &mut seeded_rng(seed)).unwrap()
    }

    /// Objective with a prescribed gradient at every point.
    struct FixedGradient(Vec<f64>);

    impl SmoothObjective for FixedGradient {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn mu(&self) -> f64 {
            1.0
        }
        fn lipschitz(&self) -> f64 {
            1.0
        }
        fn minimizer(&self) -> Option<&[f64]> {
            None
        }
        fn gradient(&self, _: &[f64], out: &mut [f64]) {
            out.copy_from_slice(&self.0);
        }
    }

    #[test]
    fn partition_defaults() {
        let p = BlockPartition::equal(10, 3).unwrap();
        assert_eq!(p.sizes(), &[4, 3, 3]);
        assert_eq!(p.range(1), 4..7);
        assert!(BlockPartition::new(vec![2, 0, 3], 5).is_err());
        assert!(BlockPartition::new(vec![2, 2], 5).is_err());
    }

    #[test]
    fn arithmetic_example() {
        let obj = half_norm(2);
        let part = BlockPartition::equal(2, 2).unwrap();
        let noise = GradientNoise::none();
        let mut rng = seeded_rng(0);
        let x1 = scbcd_step(&obj, &part, &[1.0, 1.0], 0, 0.5, &noise, &mut rng).unwrap();
        assert_eq!(x1, vec![0.5, 1.0]);
        let x2 = scbcd_step(&obj, &part, &x1, 1, 0.5, &noise, &mut rng).unwrap();
        assert_eq!(x2, vec![0.5, 0.5]);
    }

    #[test]
    fn fixed_point_and_single_block() {
        let obj = random_quadratic(1);
        let part = BlockPartition::equal(10, 5).unwrap();
        let xs = obj.minimizer().unwrap().to_vec();
        let mut rng = seeded_rng(2);
        let next = scbcd_step(&obj, &part, &xs, 3, 0.7, &GradientNoise::none(), &mut rng).unwrap();
        assert!(next.iter().zip(&xs).all(|(a, b)| (a - b).abs() < 1e-10));

        let one = BlockPartition::equal(10, 1).unwrap();
        let x = vec![1.0; 10];
        let next = scbcd_step(&obj, &one, &x, 0, 0.1, &GradientNoise::none(), &mut rng).unwrap();
        let mut g = vec![0.0; 10];
        obj.gradient(&x, &mut g);
        for j in 0..10 {
            assert!((next[j] - (x[j] - 0.1 * g[j])).abs() < 1e-14);
        }
    }

    #[test]
    fn divergence_detected() {
        let obj = half_norm(1);
        let part = BlockPartition::equal(1, 1).unwrap();
        let r = scbcd_step(&obj, &part, &[f64::MAX], 4, 3.0, &GradientNoise::none(), &mut seeded_rng(0));
        assert_eq!(r, Err(ScbcdError::Divergence { k: 4 }));
    }

    #[test]
    fn quadratic_invariants() {
        let obj = random_quadratic(3);
        assert!((obj.mu() - 0.5).abs() < 1e-15 && (obj.lipschitz() - 1.0).abs() < 1e-15);
        let eig = obj.a.symmetric_eigenvalues();
        assert!((eig.min() - 0.5).abs() < 1e-10 && (eig.max() - 1.0).abs() < 1e-10);
        let mut g = vec![0.0; 10];
        obj.gradient(obj.minimizer().unwrap(), &mut g);
        assert!(linalg::l2_norm(&g) < 1e-10);
    }

    #[test]
    fn one_block_per_step_and_full_sweeps() {
        let prob = ScbcdProblem::new(random_quadratic(4), BlockPartition::equal(10, 4).unwrap(), GradientNoise::bounded(1.0))
            .unwrap();
        let mut rng = seeded_rng(5);
        let mut x = vec![1.0; 10];
        let mut y = 0;
        let mut buf = vec![0.0; 10];
        let mut touched = Vec::new();
        for _ in 0..40 {
            let before = x.clone();
            prob.advance(&mut x, &mut y, 0.1, &mut rng, &mut buf);
            let changed: Vec<usize> = (0..4)
                .filter(|&i| prob.partition.range(i).any(|j| x[j] != before[j]))
                .collect();
            assert_eq!(changed.len(), 1);
            touched.push(changed[0]);
        }
        for w in touched.windows(4) {
            let mut s = w.to_vec();
            s.sort();
            assert_eq!(s, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn cyclic_average_is_scaled_gradient() {
        let obj = random_quadratic(6);
        let part = BlockPartition::equal(10, 5).unwrap();
        let mut rng = seeded_rng(7);
        for _ in 0..20 {
            let x: Vec<f64> = (0..10).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let drv = poisson_driver(&obj, &part, &x);
            let mut g = vec![0.0; 10];
            obj.gradient(&x, &mut g);
            for (j, gj) in g.iter().enumerate() {
                let avg = drv.column(j).sum() / 5.0;
                assert!((avg + gj / 5.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn poisson_closed_form_examples() {
        let g = FixedGradient(vec![3.0, 6.0, 9.0]);
        let part = BlockPartition::equal(3, 3).unwrap();
        let v = poisson_closed_form(&g, &part, &[0.0; 3]);
        let g_bar = [-1.0, -2.0, -3.0];
        for i in 0..3 {
            let gi: Vec<f64> = (0..3).map(|j| if j == i { -g.0[j] } else { 0.0 }).collect();
            for j in 0..3 {
                let rhs = gi[j] + v[(i + 1) % 3][j] - g_bar[j];
                assert!((v[i][j] - rhs).abs() < 1e-12);
            }
        }
        let obj = random_quadratic(8);
        let v = poisson_closed_form(&obj, &BlockPartition::equal(10, 5).unwrap(), obj.minimizer().unwrap());
        assert!(v.iter().flatten().all(|x| x.abs() < 1e-10));
        let v = poisson_closed_form(&obj, &BlockPartition::equal(10, 1).unwrap(), &[1.0; 10]);
        assert!(v.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn closed_form_matches_linear_solve() {
        let mut rng = seeded_rng(9);
        for p in 1..=8 {
            let d = p + rng.random_range(0..5);
            let part = BlockPartition::equal(d, p).unwrap();
            let obj = QuadraticObjective::from_spectrum(&linear_spectrum(d, 0.3, 2.0), &mut rng).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let v = poisson_closed_form(&obj, &part, &x);
            let sol = cyclic_chain(p).unwrap().solve_poisson_matrix(&poisson_driver(&obj, &part, &x), 0).unwrap();
            for (i, row) in v.iter().enumerate() {
                for (j, vij) in row.iter().enumerate() {
                    assert!((vij - sol.v[(i, j)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn lipschitz_bounds() {
        let obj = random_quadratic(10);
        let part = BlockPartition::equal(10, 5).unwrap();
        let rep = lipschitz_check(&obj, &part, 500, &mut seeded_rng(11));
        assert!(rep.violation.is_none());
        assert!(rep.max_ratio <= rep.bound);

        let l = 3.0;
        let scaled = QuadraticObjective::new(DMatrix::identity(6, 6) * l, DVector::zeros(6)).unwrap();
        let part = BlockPartition::equal(6, 3).unwrap();
        let rep = lipschitz_check(&scaled, &part, 200, &mut seeded_rng(12));
        assert!(rep.violation.is_none());
        assert!(rep.max_ratio <= l * 2.0 / 3.0 + 1e-12);
        assert!(rep.max_ratio > 0.9 * l * 2.0 / 3.0);
    }

    #[test]
    fn noise_contract() {
        let obj = random_quadratic(13);
        let xs = obj.minimizer().unwrap().to_vec();
        let mut rng = seeded_rng(14);
        for noise in [GradientNoise::bounded(1.0), GradientNoise { c1: 0.5, c2: 0.2, sigma: 2.0 }] {
            let mut worst: f64 = 0.0;
            for _ in 0..2000 {
                let x: Vec<f64> = xs.iter().map(|c| c + rng.sample::<f64, _>(StandardNormal)).collect();
                let mut w = vec![0.0; 3];
                noise.sample(&x, Some(&xs), &mut rng, &mut w);
                worst = worst.max(linalg::l2_norm(&w) / noise.radius(&x, Some(&xs)));
            }
            assert!(worst <= 1.0 + 1e-12, "margin {worst}");
        }
    }

    #[test]
    fn noiseless_limit_is_linear_solve() {
        let obj = random_quadratic(15);
        let a = obj.a.clone();
        let b = obj.b.clone();
        let prob = ScbcdProblem::new(obj, BlockPartition::equal(10, 5).unwrap(), GradientNoise::none()).unwrap();
        let spec = RunSpec::new(StepSchedule::constant(0.5).unwrap(), BallProjection::None, 20_000)
            .with_grid(RecordGrid::from_indices(vec![20_000]));
        let t = run(&prob, &spec, &[0.0; 10], 0, 0).unwrap();
        let oracle = a.lu().solve(&b).unwrap();
        for j in 0..10 {
            assert!((t.final_x[j] - oracle[j]).abs() < 1e-8);
        }
        let xs = prob.objective.minimizer().unwrap().to_vec();
        let t = run(&prob, &spec, &xs, 0, 0).unwrap();
        assert!(t.errors[0] < 1e-24);
    }

    #[test]
    fn increment_matches_advance() {
        let prob = ScbcdProblem::new(random_quadratic(16), BlockPartition::equal(10, 3).unwrap(), GradientNoise::bounded(0.5))
            .unwrap();
        let (mut r1, mut r2) = (seeded_rng(17), seeded_rng(17));
        let mut x1 = vec![0.3; 10];
        let mut x2 = x1.clone();
        let (mut y1, mut y2) = (0, 0);
        let mut buf = vec![0.0; 10];
        for _ in 0..30 {
            prob.advance(&mut x1, &mut y1, 0.2, &mut r1, &mut buf);
            prob.increment(&x2.clone(), &mut y2, &mut r2, &mut buf);
            x2.iter_mut().zip(&buf).for_each(|(x, b)| *x += 0.2 * b);
        }
        assert_eq!(y1, y2);
        assert!(x1.iter().zip(&x2).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn spec_json() {
        let s = r#"{"type":"quadratic","spectrum":[1,2,3,4],"seed":3,"blocks":[2,2]}"#;
        let spec: ObjectiveSpec = serde_json::from_str(s).unwrap();
        let prob = spec.build().unwrap();
        assert_eq!(prob.p(), 2);
        assert!((prob.objective.lipschitz() - 4.0).abs() < 1e-15);
        assert!(serde_json::from_str::<ObjectiveSpec>(r#"{"type":"quadratic","spectrum":[1],"seed":1,"x":2}"#).is_err());
        let bad: ObjectiveSpec = serde_json::from_str(r#"{"type":"quadratic","spectrum":[1,-1],"seed":1}"#).unwrap();
        assert_eq!(bad.build().err(), Some(ScbcdError::Spectrum));
    }

    proptest! {
        #[test]
        fn poisson_residual_random(seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let p = rng.random_range(1..=8);
            let d = p + rng.random_range(0..6);
            let sizes = {
                let mut s = vec![1; p];
                for _ in 0..d - p {
                    s[rng.random_range(0..p)] += 1;
                }
                s
            };
            let part = BlockPartition::new(sizes, d).unwrap();
            let obj = QuadraticObjective::from_spectrum(&linear_spectrum(d, 0.2, 3.0), &mut rng).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let v = poisson_closed_form(&obj, &part, &x);
            let drv = poisson_driver(&obj, &part, &x);
            let mut g = vec![0.0; d];
            obj.gradient(&x, &mut g);
            for i in 0..p {
                for j in 0..d {
                    let r = v[i][j] - drv[(i, j)] - v[(i + 1) % p][j] - g[j] / p as f64;
                    prop_assert!(r.abs() < 1e-12);
                }
            }
        }
    }
}
