//! Tabular Q-learning under a behavior policy, with the value-iteration
//! oracle and the constants of its finite-time analysis.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::markov::{FiniteChain, MarkovError};
use crate::sa::SaProblem;

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QError {
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error("MDP needs at least one state and one action")]
    Empty,
    #[error("{what} has the wrong shape")]
    Shape { what: &'static str },
    #[error("P[{s}][{a}] is not a probability vector (sum {sum})")]
    Transition { s: usize, a: usize, sum: f64 },
    #[error("discount must lie in (0, 1), got {0}")]
    Gamma(f64),
    #[error("policy row {s} is not a probability vector")]
    PolicyRow { s: usize },
    #[error("policy gives zero probability to action {a} in state {s}")]
    NotFullSupport { s: usize, a: usize },
    #[error("reward noise must be nonnegative, got {0}")]
    RewardNoise(f64),
    #[error("state-action pair ({s}, {a}) out of range")]
    Pair { s: usize, a: usize },
}

/// Finite discounted MDP. Rewards are expected rewards; `reward_noise` adds
/// uniform noise on `[-reward_noise, reward_noise]` to each observed reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpJson", into = "MdpJson")]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    // P[(s * A + a) * S + s']
    p: Vec<f64>,
    r: Vec<f64>,
    gamma: f64,
    reward_noise: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpJson {
    n_states: usize,
    n_actions: usize,
    #[serde(rename = "P")]
    p: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    gamma: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    reward_noise: f64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

impl TryFrom<MdpJson> for FiniteMdp {
    type Error = QError;

    fn try_from(j: MdpJson) -> Result<Self, QError> {
        let (ns, na) = (j.n_states, j.n_actions);
        if j.p.len() != ns || j.p.iter().any(|pa| pa.len() != na || pa.iter().any(|row| row.len() != ns)) {
            return Err(QError::Shape { what: "P" });
        }
        if j.r.len() != ns || j.r.iter().any(|row| row.len() != na) {
            return Err(QError::Shape { what: "R" });
        }
        let p = j.p.into_iter().flatten().flatten().collect();
        let r = j.r.into_iter().flatten().collect();
        FiniteMdp::new(ns, na, p, r, j.gamma)?.with_reward_noise(j.reward_noise)
    }
}

impl From<FiniteMdp> for MdpJson {
    fn from(m: FiniteMdp) -> Self {
        let (ns, na) = (m.n_states, m.n_actions);
        MdpJson {
            n_states: ns,
            n_actions: na,
            p: (0..ns)
                .map(|s| (0..na).map(|a| m.transition(s, a).to_vec()).collect())
                .collect(),
            r: (0..ns).map(|s| m.r[s * na..(s + 1) * na].to_vec()).collect(),
            gamma: m.gamma,
            reward_noise: m.reward_noise,
        }
    }
}

impl FiniteMdp {
    /// `p` is laid out as `[s][a][s']` and `r` as `[s][a]`, both flattened.
    pub fn new(n_states: usize, n_actions: usize, p: Vec<f64>, r: Vec<f64>, gamma: f64) -> Result<Self, QError> {
        if n_states == 0 || n_actions == 0 {
            return Err(QError::Empty);
        }
        if p.len() != n_states * n_actions * n_states {
            return Err(QError::Shape { what: "P" });
        }
        if r.len() != n_states * n_actions {
            return Err(QError::Shape { what: "R" });
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(QError::Gamma(gamma));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &p[(s * n_actions + a) * n_states..(s * n_actions + a + 1) * n_states];
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (sum - 1.0).abs() > ROW_TOL {
                    return Err(QError::Transition { s, a, sum });
                }
            }
        }
        Ok(FiniteMdp { n_states, n_actions, p, r, gamma, reward_noise: 0.0 })
    }

    pub fn with_reward_noise(mut self, half_width: f64) -> Result<Self, QError> {
        if !(half_width >= 0.0 && half_width.is_finite()) {
            return Err(QError::RewardNoise(half_width));
        }
        self.reward_noise = half_width;
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn reward_noise(&self) -> f64 {
        self.reward_noise
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.r[s * self.n_actions + a]
    }

    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        let ns = self.n_states;
        let i = s * self.n_actions + a;
        &self.p[i * ns..(i + 1) * ns]
    }
}

/// Q-values stored row-major as `[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(mdp: &FiniteMdp) -> Self {
        QTable { n_actions: mdp.n_actions, values: vec![0.0; mdp.n_pairs()] }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn max_at(&self, s: usize) -> f64 {
        max_row(&self.values, s, self.n_actions)
    }

    pub fn greedy(&self, s: usize) -> usize {
        let row = &self.values[s * self.n_actions..(s + 1) * self.n_actions];
        (0..self.n_actions).fold(0, |best, a| if row[a] > row[best] { a } else { best })
    }

    pub fn inf_norm(&self) -> f64 {
        linalg::inf_norm(&self.values)
    }

    pub fn distance(&self, other: &QTable) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

fn max_row(q: &[f64], s: usize, na: usize) -> f64 {
    q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `B(Q)(s, a) = R(s, a) + gamma sum_{s'} P(s'|s, a) max_{a'} Q(s', a')`.
pub fn bellman_optimality(mdp: &FiniteMdp, q: &QTable) -> QTable {
    let na = mdp.n_actions;
    let vmax: Vec<f64> = (0..mdp.n_states).map(|s| max_row(&q.values, s, na)).collect();
    let values = (0..mdp.n_pairs())
        .map(|i| {
            let (s, a) = (i / na, i % na);
            mdp.reward(s, a) + mdp.gamma * linalg::dot(mdp.transition(s, a), &vmax)
        })
        .collect();
    QTable { n_actions: na, values }
}

/// Iterates the Bellman operator until successive iterates differ by less than
/// `tol (1 - gamma) / gamma`, which puts the result within `tol` of `Q*`.
pub fn value_iteration(mdp: &FiniteMdp, tol: f64) -> QTable {
    let stop = tol * (1.0 - mdp.gamma) / mdp.gamma;
    let mut q = QTable::zeros(mdp);
    loop {
        let next = bellman_optimality(mdp, &q);
        let diff = next.distance(&q);
        q = next;
        if diff < stop {
            return q;
        }
    }
}

/// Asynchronous update of the single entry `(s, a)` after observing `s_next`.
pub fn q_step(mdp: &FiniteMdp, q: &mut QTable, s: usize, a: usize, reward: f64, s_next: usize, alpha: f64) {
    let na = mdp.n_actions;
    let i = s * na + a;
    let target = reward + mdp.gamma * max_row(&q.values, s_next, na);
    q.values[i] += alpha * (target - q.values[i]);
}

/// Behavior policy `pi_b(a|s)` with full support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct BehaviorPolicy {
    n_actions: usize,
    pi: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for BehaviorPolicy {
    type Error = QError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, QError> {
        BehaviorPolicy::new(&rows)
    }
}

impl From<BehaviorPolicy> for Vec<Vec<f64>> {
    fn from(p: BehaviorPolicy) -> Self {
        p.pi.chunks(p.n_actions).map(|c| c.to_vec()).collect()
    }
}

impl BehaviorPolicy {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self, QError> {
        let na = rows.first().map_or(0, |r| r.len());
        if na == 0 || rows.iter().any(|r| r.len() != na) {
            return Err(QError::Shape { what: "policy" });
        }
        for (s, row) in rows.iter().enumerate() {
            if (row.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
                return Err(QError::PolicyRow { s });
            }
            if let Some(a) = row.iter().position(|&x| x <= 0.0 || x > 1.0) {
                return Err(QError::NotFullSupport { s, a });
            }
        }
        Ok(BehaviorPolicy { n_actions: na, pi: rows.iter().flatten().copied().collect() })
    }

    pub fn uniform(mdp: &FiniteMdp) -> Self {
        let na = mdp.n_actions;
        BehaviorPolicy { n_actions: na, pi: vec![1.0 / na as f64; mdp.n_pairs()] }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.pi[s * self.n_actions + a]
    }

    fn check(&self, mdp: &FiniteMdp) -> Result<(), QError> {
        if self.n_actions != mdp.n_actions || self.pi.len() != mdp.n_pairs() {
            return Err(QError::Shape { what: "policy" });
        }
        Ok(())
    }
}

/// State-action chain of the behavior policy and its stationary laws.
#[derive(Debug, Clone)]
pub struct BehaviorChain {
    pub chain: FiniteChain,
    /// Stationary law of the state-action pair.
    pub mu_q: Vec<f64>,
    /// Stationary law of the state alone.
    pub mu_b: Vec<f64>,
}

impl BehaviorChain {
    pub fn lambda_min(&self) -> f64 {
        self.mu_q.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Builds `P((s', a') | (s, a)) = P(s'|s, a) pi(a'|s')` and its stationary
/// distribution.
pub fn behavior_chain(mdp: &FiniteMdp, policy: &BehaviorPolicy) -> Result<BehaviorChain, QError> {
    policy.check(mdp)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let n = ns * na;
    let joint = DMatrix::from_fn(n, n, |i, j| {
        let (s, a) = (i / na, i % na);
        let (s2, a2) = (j / na, j % na);
        mdp.transition(s, a)[s2] * policy.prob(s2, a2)
    });
    let chain = FiniteChain::new(joint)?;
    let mu_q = chain.stationary_distribution()?.mu;
    let state_kernel = DMatrix::from_fn(ns, ns, |s, s2| (0..na).map(|a| policy.prob(s, a) * mdp.transition(s, a)[s2]).sum());
    let mu_b = FiniteChain::new(state_kernel)?.stationary_distribution()?.mu;
    Ok(BehaviorChain { chain, mu_q, mu_b })
}

/// Constants of the operator, Poisson-equation and noise bounds for
/// Q-learning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QConstants {
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
    pub a3: f64,
    pub b3: f64,
    /// Maximum expected hitting time of the anchor pair.
    pub tau: f64,
}

/// Operator, Poisson and noise constants for anchor pair `(s, a)`. Reward
/// noise of half-width `w` adds `w` to the noise offset `B3`.
pub fn q_noise_constants(
    mdp: &FiniteMdp,
    behavior: &BehaviorChain,
    anchor: (usize, usize),
    q_star: &QTable,
) -> Result<QConstants, QError> {
    let (s, a) = anchor;
    if s >= mdp.n_states || a >= mdp.n_actions {
        return Err(QError::Pair { s, a });
    }
    let tau = behavior.chain.max_expected_hitting_time(s * mdp.n_actions + a)?;
    let qn = q_star.inf_norm();
    Ok(QConstants {
        a1: 2.0,
        b1: qn,
        a2: 4.0 * tau,
        b2: 0.0,
        a3: 2.0,
        b3: 2.0 * qn + mdp.reward_noise,
        tau,
    })
}

/// Anchor pair with the smallest maximum hitting time.
pub fn best_anchor(mdp: &FiniteMdp, behavior: &BehaviorChain) -> Result<((usize, usize), f64), QError> {
    let na = mdp.n_actions;
    let mut best = ((0, 0), f64::INFINITY);
    for i in 0..mdp.n_pairs() {
        let tau = behavior.chain.max_expected_hitting_time(i)?;
        if tau < best.1 {
            best = ((i / na, i % na), tau);
        }
    }
    Ok(best)
}

/// Parameters of the generalized Moreau envelope used as Lyapunov function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoreauParams {
    pub p: f64,
    pub omega: f64,
    pub lambda_min: f64,
    pub eta: f64,
    pub l: f64,
    pub u: f64,
    /// Smoothness `(p - 1) / omega` with respect to the p-norm.
    pub l_s: f64,
    pub l_cs: f64,
    pub u_cs: f64,
}

/// Moreau parameters for `n_pairs` state-action pairs. `n_pairs` is real so
/// the clamp `p >= 2` can be exercised directly.
pub fn moreau_params_from(n_pairs: f64, gamma: f64, lambda_min: f64) -> MoreauParams {
    let p = (2.0 * n_pairs.ln()).max(2.0);
    let eta = (1.0 - gamma) * lambda_min;
    let omega = (0.5 + 1.0 / (2.0 * (1.0 - eta))).powi(2) - 1.0;
    MoreauParams {
        p,
        omega,
        lambda_min,
        eta,
        l: 2.0 * (1.0 + omega / std::f64::consts::E.sqrt()),
        u: 2.0 * (1.0 + omega),
        l_s: (p - 1.0) / omega,
        l_cs: 1.0,
        u_cs: n_pairs.powf(1.0 / p),
    }
}

pub fn moreau_params(mdp: &FiniteMdp, behavior: &BehaviorChain) -> Result<MoreauParams, QError> {
    let lambda_min = behavior.lambda_min();
    if lambda_min <= 0.0 {
        return Err(QError::NotFullSupport { s: 0, a: 0 });
    }
    Ok(moreau_params_from(mdp.n_pairs() as f64, mdp.gamma, lambda_min))
}

/// Q-learning as a stochastic approximation problem. The noise state is the
/// index `s * A + a` of the current pair.
#[derive(Debug, Clone)]
pub struct QProblem {
    pub mdp: FiniteMdp,
    pub behavior: BehaviorChain,
    pub q_star: QTable,
}

impl QProblem {
    pub fn new(mdp: FiniteMdp, policy: &BehaviorPolicy) -> Result<Self, QError> {
        let behavior = behavior_chain(&mdp, policy)?;
        let q_star = value_iteration(&mdp, 1e-12);
        Ok(QProblem { mdp, behavior, q_star })
    }

    pub fn pair_index(&self, s: usize, a: usize) -> usize {
        s * self.mdp.n_actions + a
    }

    fn observe<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> (f64, usize) {
        let na = self.mdp.n_actions;
        let mut reward = self.mdp.reward(i / na, i % na);
        let w = self.mdp.reward_noise;
        if w > 0.0 {
            reward += rng.random_range(-w..=w);
        }
        (reward, self.behavior.chain.step(i, rng))
    }
}

impl SaProblem for QProblem {
    type State = usize;

    fn dim(&self) -> usize {
        self.mdp.n_pairs()
    }

    fn x_star(&self) -> Option<&[f64]> {
        Some(&self.q_star.values)
    }

    fn increment<R: Rng + ?Sized>(&self, x: &[f64], y: &mut usize, rng: &mut R, out: &mut [f64]) {
        let na = self.mdp.n_actions;
        let (reward, next) = self.observe(*y, rng);
        out.fill(0.0);
        out[*y] = reward + self.mdp.gamma * max_row(x, next / na, na) - x[*y];
        *y = next;
    }

    fn advance<R: Rng + ?Sized>(&self, x: &mut [f64], y: &mut usize, step: f64, rng: &mut R, _buf: &mut [f64]) {
        let na = self.mdp.n_actions;
        let (reward, next) = self.observe(*y, rng);
        let target = reward + self.mdp.gamma * max_row(x, next / na, na);
        x[*y] += step * (target - x[*y]);
        *y = next;
    }
}

/// Random MDP with dense transitions and rewards uniform in `[0, 1]`.
pub fn random_mdp<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> FiniteMdp {
    let mut p = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let w: Vec<f64> = (0..n_states).map(|_| Distribution::<f64>::sample(&Exp1, rng) + 0.05).collect();
        let total: f64 = w.iter().sum();
        let mut row: Vec<f64> = w.iter().map(|x| x / total).collect();
        let s: f64 = row.iter().sum();
        row[0] += 1.0 - s;
        p.extend(row);
    }
    let r = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
    FiniteMdp::new(n_states, n_actions, p, r, gamma).expect("rows normalized")
}

/// Two states that swap on every step whatever the action; two actions with
/// distinct rewards. Under any full-support policy the pair chain has
/// period 2.
pub fn swap_mdp(gamma: f64) -> Result<FiniteMdp, QError> {
    let p = vec![
        0.0, 1.0, 0.0, 1.0, //
        1.0, 0.0, 1.0, 0.0,
    ];
    let r = vec![1.0, 0.0, 0.5, 2.0];
    FiniteMdp::new(2, 2, p, r, gamma)
}

/// Value of a deterministic policy, `(I - gamma P_pi)^{-1} R_pi`.
pub fn policy_value(mdp: &FiniteMdp, actions: &[usize]) -> Vec<f64> {
    let ns = mdp.n_states;
    let a = DMatrix::from_fn(ns, ns, |s, s2| {
        let id = if s == s2 { 1.0 } else { 0.0 };
        id - mdp.gamma * mdp.transition(s, actions[s])[s2]
    });
    let r = DVector::from_fn(ns, |s, _| mdp.reward(s, actions[s]));
    linalg::solve_vec(&a, &r).expect("I - gamma P is invertible").iter().copied().collect()
}
