//! Finite Markov chains: construction, stationary analysis, Poisson equation
//! and hitting times.

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::rng::seeded_rng;

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("chain must have at least one state")]
    Empty,
    #[error("transition matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("row {row} sums to {sum}, expected 1")]
    RowSum { row: usize, sum: f64 },
    #[error("entry P[{row}][{col}] = {value} is outside [0, 1]")]
    Entry { row: usize, col: usize, value: f64 },
    #[error("{got} labels given for {n} states")]
    Labels { got: usize, n: usize },
    #[error("chain is reducible: states {a} and {b} do not communicate")]
    Reducible { a: usize, b: usize },
    #[error("state {state} out of range for a chain with {n} states")]
    State { state: usize, n: usize },
    #[error("driving function has {got} rows, chain has {n} states")]
    Dimension { got: usize, n: usize },
    #[error("linear system is singular beyond the expected rank deficiency")]
    Singular,
    #[error("birth-death parameter p = {0} must lie in (0, 1/2)")]
    BirthDeathP(f64),
    #[error("birth-death truncation {0} must be at least 2")]
    Truncation(usize),
}

/// Row-stochastic transition matrix on `n` states.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ChainJson", into = "ChainJson")]
pub struct FiniteChain {
    p: DMatrix<f64>,
    labels: Option<Vec<String>>,
    // nonzero entries of each row as (column, cumulative probability)
    cdf: Vec<Vec<(usize, f64)>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainJson {
    n: usize,
    #[serde(rename = "P")]
    p: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

impl TryFrom<ChainJson> for FiniteChain {
    type Error = MarkovError;

    fn try_from(j: ChainJson) -> Result<Self, MarkovError> {
        if j.p.len() != j.n {
            return Err(MarkovError::NotSquare { rows: j.p.len(), cols: j.n });
        }
        for row in &j.p {
            if row.len() != j.n {
                return Err(MarkovError::NotSquare { rows: j.n, cols: row.len() });
            }
        }
        let flat: Vec<f64> = j.p.iter().flatten().copied().collect();
        let chain = FiniteChain::new(DMatrix::from_row_slice(j.n, j.n, &flat))?;
        match j.labels {
            Some(l) => chain.with_labels(l),
            None => Ok(chain),
        }
    }
}

impl From<FiniteChain> for ChainJson {
    fn from(c: FiniteChain) -> Self {
        let n = c.n_states();
        ChainJson {
            n,
            p: (0..n).map(|i| c.p.row(i).iter().copied().collect()).collect(),
            labels: c.labels,
        }
    }
}

/// Unique invariant distribution of an irreducible chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryDist {
    pub mu: Vec<f64>,
}

impl StationaryDist {
    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mu)
    }

    pub fn mean(&self, g: &[f64]) -> f64 {
        linalg::dot(&self.mu, g)
    }
}

/// Solution of `V = g + P V - g_bar` with `V(anchor) = 0`. One column per
/// output dimension of `g`.
#[derive(Debug, Clone)]
pub struct PoissonSolution {
    pub v: DMatrix<f64>,
    pub g_bar: DVector<f64>,
    pub anchor: usize,
}

impl PoissonSolution {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.v.column(j).iter().copied().collect()
    }

    /// `max |V - g - P V + g_bar|` over all entries.
    pub fn residual(&self, chain: &FiniteChain, g: &DMatrix<f64>) -> f64 {
        let mut r = &self.v - g - &chain.p * &self.v;
        for mut row in r.row_iter_mut() {
            row += self.g_bar.transpose();
        }
        r.amax()
    }
}

impl FiniteChain {
    pub fn new(p: DMatrix<f64>) -> Result<Self, MarkovError> {
        let (rows, cols) = p.shape();
        if rows != cols {
            return Err(MarkovError::NotSquare { rows, cols });
        }
        if rows == 0 {
            return Err(MarkovError::Empty);
        }
        for i in 0..rows {
            for j in 0..cols {
                let v = p[(i, j)];
                if !(0.0..=1.0).contains(&v) {
                    return Err(MarkovError::Entry { row: i, col: j, value: v });
                }
            }
            let sum: f64 = p.row(i).sum();
            if (sum - 1.0).abs() > ROW_TOL {
                return Err(MarkovError::RowSum { row: i, sum });
            }
        }
        let cdf = (0..rows)
            .map(|i| {
                let mut acc = 0.0;
                let mut row: Vec<(usize, f64)> = (0..cols)
                    .filter(|&j| p[(i, j)] > 0.0)
                    .map(|j| {
                        acc += p[(i, j)];
                        (j, acc)
                    })
                    .collect();
                if let Some(last) = row.last_mut() {
                    last.1 = f64::INFINITY;
                }
                row
            })
            .collect();
        Ok(FiniteChain { p, labels: None, cdf })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MarkovError> {
        let n = rows.len();
        if n == 0 {
            return Err(MarkovError::Empty);
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(MarkovError::NotSquare { rows: n, cols: bad.len() });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(n, n, &flat))
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self, MarkovError> {
        if labels.len() != self.n_states() {
            return Err(MarkovError::Labels { got: labels.len(), n: self.n_states() });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.p.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.p[(from, to)]
    }

    fn check_state(&self, s: usize) -> Result<(), MarkovError> {
        if s >= self.n_states() {
            Err(MarkovError::State { state: s, n: self.n_states() })
        } else {
            Ok(())
        }
    }

    /// Structural irreducibility via strongly connected components of the
    /// support graph.
    pub fn check_irreducible(&self) -> Result<(), MarkovError> {
        let n = self.n_states();
        let mut g = DiGraph::<(), ()>::with_capacity(n, 0);
        let nodes: Vec<_> = (0..n).map(|_| g.add_node(())).collect();
        for (i, row) in self.cdf.iter().enumerate() {
            for &(j, _) in row {
                g.add_edge(nodes[i], nodes[j], ());
            }
        }
        let sccs = tarjan_scc(&g);
        if sccs.len() > 1 {
            let a = sccs[0][0].index();
            let b = sccs[1][0].index();
            return Err(MarkovError::Reducible { a: a.min(b), b: a.max(b) });
        }
        Ok(())
    }

    pub fn is_irreducible(&self) -> bool {
        self.check_irreducible().is_ok()
    }

    /// Period of an irreducible chain (gcd of cycle lengths through any state).
    pub fn period(&self) -> usize {
        let n = self.n_states();
        let mut level = vec![usize::MAX; n];
        let mut queue = std::collections::VecDeque::from([0usize]);
        level[0] = 0;
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &self.cdf[u] {
                if level[v] == usize::MAX {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        let mut g = 0usize;
        for u in 0..n {
            if level[u] == usize::MAX {
                continue;
            }
            for &(v, _) in &self.cdf[u] {
                if level[v] == usize::MAX {
                    continue;
                }
                let diff = (level[u] + 1).abs_diff(level[v]);
                g = gcd(g, diff);
            }
        }
        g.max(1)
    }

    pub fn is_aperiodic(&self) -> bool {
        self.period() == 1
    }

    pub fn stationary_distribution(&self) -> Result<StationaryDist, MarkovError> {
        self.check_irreducible()?;
        let n = self.n_states();
        let mut a = DMatrix::<f64>::identity(n, n) - self.p.transpose();
        let mut rhs = DVector::<f64>::zeros(n);
        a.row_mut(n - 1).fill(1.0);
        rhs[n - 1] = 1.0;
        let mu = linalg::solve_vec(&a, &rhs).ok_or(MarkovError::Singular)?;
        // Round-off can leave entries of order -1e-17 in far tails.
        let mut mu: Vec<f64> = mu.iter().map(|&x| x.max(0.0)).collect();
        let total: f64 = mu.iter().sum();
        mu.iter_mut().for_each(|x| *x /= total);
        Ok(StationaryDist { mu })
    }

    /// Solves the Poisson equation for a vector-valued driving function given
    /// as an `n x m` matrix, anchored at `anchor`.
    pub fn solve_poisson_matrix(
        &self,
        g: &DMatrix<f64>,
        anchor: usize,
    ) -> Result<PoissonSolution, MarkovError> {
        let n = self.n_states();
        if g.nrows() != n {
            return Err(MarkovError::Dimension { got: g.nrows(), n });
        }
        self.check_state(anchor)?;
        let mu = self.stationary_distribution()?.as_vector();
        let g_bar: DVector<f64> = g.transpose() * &mu;
        let mut rhs = g.clone();
        for mut row in rhs.row_iter_mut() {
            row -= g_bar.transpose();
        }
        let mut a = DMatrix::<f64>::identity(n, n) - &self.p;
        a.row_mut(anchor).fill(0.0);
        a[(anchor, anchor)] = 1.0;
        rhs.row_mut(anchor).fill(0.0);
        let mut v = linalg::solve(&a, &rhs).ok_or(MarkovError::Singular)?;
        v.row_mut(anchor).fill(0.0);
        Ok(PoissonSolution { v, g_bar, anchor })
    }

    pub fn solve_poisson_anchored(
        &self,
        g: &[f64],
        anchor: usize,
    ) -> Result<PoissonSolution, MarkovError> {
        self.solve_poisson_matrix(&DMatrix::from_column_slice(g.len(), 1, g), anchor)
    }

    /// Poisson solution anchored at state 0.
    pub fn solve_poisson(&self, g: &[f64]) -> Result<PoissonSolution, MarkovError> {
        self.solve_poisson_anchored(g, 0)
    }

    /// Expected first hitting times of `target` from every state (0 at the
    /// target itself).
    pub fn hitting_times(&self, target: usize) -> Result<Vec<f64>, MarkovError> {
        self.check_state(target)?;
        self.check_irreducible()?;
        let n = self.n_states();
        if n == 1 {
            return Ok(vec![0.0]);
        }
        let others: Vec<usize> = (0..n).filter(|&i| i != target).collect();
        let m = others.len();
        let a = DMatrix::from_fn(m, m, |r, c| {
            let id = if r == c { 1.0 } else { 0.0 };
            id - self.p[(others[r], others[c])]
        });
        let h = linalg::solve_vec(&a, &DVector::from_element(m, 1.0)).ok_or(MarkovError::Singular)?;
        let mut out = vec![0.0; n];
        for (r, &s) in others.iter().enumerate() {
            out[s] = h[r];
        }
        Ok(out)
    }

    pub fn max_expected_hitting_time(&self, target: usize) -> Result<f64, MarkovError> {
        Ok(self.hitting_times(target)?.into_iter().fold(0.0, f64::max))
    }

    /// Draws the successor of `state`.
    pub fn step<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        let row = &self.cdf[state];
        if row.len() == 1 {
            return row[0].0;
        }
        let u: f64 = rng.random();
        let idx = row.partition_point(|&(_, c)| c <= u);
        row[idx].0
    }

    /// Path of `steps` states beginning with `start`.
    pub fn sample_path(&self, start: usize, steps: usize, seed: u64) -> Result<Vec<usize>, MarkovError> {
        self.check_state(start)?;
        let mut rng = seeded_rng(seed);
        let mut path = Vec::with_capacity(steps);
        let mut s = start;
        for _ in 0..steps {
            path.push(s);
            s = self.step(s, &mut rng);
        }
        Ok(path)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Deterministic cycle `i -> i + 1 mod p`.
pub fn cyclic_chain(p: usize) -> Result<FiniteChain, MarkovError> {
    if p == 0 {
        return Err(MarkovError::Empty);
    }
    FiniteChain::new(DMatrix::from_fn(p, p, |i, j| if j == (i + 1) % p { 1.0 } else { 0.0 }))
}

/// Birth-death chain truncated to `truncation` states. The last state keeps its
/// up-probability as a self-loop.
pub fn birth_death_chain(p: f64, truncation: usize) -> Result<FiniteChain, MarkovError> {
    if !(p > 0.0 && p < 0.5) {
        return Err(MarkovError::BirthDeathP(p));
    }
    if truncation < 2 {
        return Err(MarkovError::Truncation(truncation));
    }
    let n = truncation;
    let mut m = DMatrix::zeros(n, n);
    m[(0, 0)] = 1.0 - p;
    m[(0, 1)] = p;
    for i in 1..n - 1 {
        m[(i, i - 1)] = 1.0 - p;
        m[(i, i + 1)] = p;
    }
    m[(n - 1, n - 2)] = 1.0 - p;
    m[(n - 1, n - 1)] = p;
    FiniteChain::new(m)
}

/// Stationary mass of state `i` in the untruncated birth-death chain.
pub fn birth_death_closed_form(p: f64, i: usize) -> f64 {
    (1.0 - 2.0 * p) * p.powi(i as i32) / (1.0 - p).powi(i as i32 + 1)
}

/// Total variation between a truncated chain's stationary law and the
/// untruncated closed form, counting the closed form's tail mass.
pub fn birth_death_tv(p: f64, mu: &[f64]) -> f64 {
    let n = mu.len();
    let head: f64 = mu
        .iter()
        .enumerate()
        .map(|(i, &m)| (m - birth_death_closed_form(p, i)).abs())
        .sum();
    let tail = (p / (1.0 - p)).powi(n as i32);
    0.5 * (head + tail)
}

/// Random irreducible chain: a sparse random kernel plus a guaranteed cycle
/// through all states. May be periodic.
pub fn random_irreducible_chain<R: Rng + ?Sized>(n: usize, rng: &mut R) -> FiniteChain {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if j == (i + 1) % n || rng.random_bool(0.4) {
                let w: f64 = Exp1.sample(rng);
                m[(i, j)] = w + 1e-3;
            }
        }
        normalize_row(&mut m, i);
    }
    FiniteChain::new(m).expect("rows normalized")
}

/// Random chain with every transition positive, hence irreducible and
/// aperiodic.
pub fn random_dense_chain<R: Rng + ?Sized>(n: usize, rng: &mut R) -> FiniteChain {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let w: f64 = Exp1.sample(rng);
            m[(i, j)] = w + 0.05;
        }
        normalize_row(&mut m, i);
    }
    FiniteChain::new(m).expect("rows normalized")
}

fn normalize_row(m: &mut DMatrix<f64>, i: usize) {
    let s: f64 = m.row(i).sum();
    m.row_mut(i).iter_mut().for_each(|x| *x /= s);
    // Push the rounding error of the sum into the largest entry.
    let s: f64 = m.row(i).sum();
    let jmax = m.row(i).transpose().iamax();
    m[(i, jmax)] += 1.0 - s;
}
