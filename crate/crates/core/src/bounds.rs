//! Finite-time error bounds for the bounded-noise case, rate fits and
//! bound-versus-empirical comparisons.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qlearning::{best_anchor, moreau_params, q_noise_constants, QError, QProblem};
use crate::sa::{EnsembleCurve, StepSchedule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("constant {name} must be finite and nonnegative, got {value}")]
    Constant { name: &'static str, value: f64 },
    #[error("step schedule outside the bound's regime: {0}")]
    Regime(String),
    #[error("fit window [{lo}, {hi}] holds {n} grid points, need at least {min}")]
    TooFewPoints { lo: u64, hi: u64, n: usize, min: usize },
    #[error("nonpositive value {value} at k = {k}; use the geometric fit for runs that reach zero")]
    Nonpositive { k: u64, value: f64 },
    #[error(transparent)]
    Q(#[from] QError),
}

/// Constants of the drift, Poisson-solution and noise bounds together with
/// the Lyapunov function's smoothness and norm-equivalence constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
    pub a3: f64,
    pub b3: f64,
    pub eta: f64,
    pub l_s: f64,
    pub l: f64,
    pub u: f64,
    pub l_cs: f64,
    pub u_cs: f64,
    /// `|x_0 - x*|_c^2` in the norm the bound is stated in.
    pub init_dist_sq: f64,
}

impl BoundConstants {
    /// Validates every constant. `a2` is raised to at least 1.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a1: f64,
        b1: f64,
        a2: f64,
        b2: f64,
        a3: f64,
        b3: f64,
        eta: f64,
        l_s: f64,
        l: f64,
        u: f64,
        l_cs: f64,
        u_cs: f64,
        init_dist_sq: f64,
    ) -> Result<Self, BoundError> {
        let named = [
            ("A1", a1),
            ("B1", b1),
            ("A2", a2),
            ("B2", b2),
            ("A3", a3),
            ("B3", b3),
            ("eta", eta),
            ("L_s", l_s),
            ("l", l),
            ("u", u),
            ("l_cs", l_cs),
            ("u_cs", u_cs),
            ("init_dist_sq", init_dist_sq),
        ];
        for (name, value) in named {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(BoundError::Constant { name, value });
            }
        }
        for (name, value) in [("eta", eta), ("l", l)] {
            if value == 0.0 {
                return Err(BoundError::Constant { name, value });
            }
        }
        Ok(BoundConstants { a1, b1, a2: a2.max(1.0), b2, a3, b3, eta, l_s, l, u, l_cs, u_cs, init_dist_sq })
    }

    pub fn a(&self) -> f64 {
        (self.a1 + self.a3 + 1.0).powi(2)
    }

    pub fn b(&self) -> f64 {
        (self.b1 + self.b3 + self.b2 / self.a2).powi(2)
    }

    pub fn rho1(&self) -> f64 {
        self.u * self.l_s * self.u_cs * self.u_cs * self.a2
    }

    pub fn rho0(&self) -> f64 {
        2.0 * self.u * (1.0 + 2.0 * self.a() * self.rho1()) / self.l * self.init_dist_sq + 4.0 * self.b() * self.rho1()
    }

    /// Largest constant step covered by the constant-step case.
    pub fn max_constant_step(&self) -> f64 {
        (self.eta / (self.a() * (5.0 + 2.0 * self.eta) * self.rho1())).min(1.0)
    }

    /// Smallest offset `K` covered by the decreasing-step case with exponent `xi`.
    pub fn min_offset(&self, alpha: f64, xi: f64) -> f64 {
        let (a, rho, eta) = (self.a(), self.rho1(), self.eta);
        let k = if xi == 1.0 {
            a * alpha * (5.0 * alpha + 8.0) * rho
        } else {
            let kappa = xi / alpha + eta;
            (2.0 * a * alpha * (5.0 + 2.0 * kappa) * rho / eta).powf(1.0 / xi)
        };
        k.max(2.0)
    }
}

/// Which step-size regime a schedule falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundCase {
    Constant,
    Harmonic,
    Polynomial,
}

impl BoundCase {
    pub fn of(schedule: &StepSchedule) -> Self {
        if schedule.xi == 0.0 {
            BoundCase::Constant
        } else if schedule.xi == 1.0 {
            BoundCase::Harmonic
        } else {
            BoundCase::Polynomial
        }
    }
}

/// Checks the preconditions of the case matching `schedule` and names the
/// first one that fails.
pub fn check_regime(c: &BoundConstants, schedule: &StepSchedule) -> Result<BoundCase, BoundError> {
    let (alpha, k0, xi) = (schedule.alpha, schedule.k0, schedule.xi);
    let case = BoundCase::of(schedule);
    match case {
        BoundCase::Constant => {
            let max = c.max_constant_step();
            if alpha > max {
                return Err(BoundError::Regime(format!(
                    "constant step alpha = {alpha} exceeds min{{1, eta/(A(5+2 eta) rho1)}} = {max:.6e}"
                )));
            }
        }
        BoundCase::Harmonic => {
            if alpha <= 2.0 / c.eta {
                return Err(BoundError::Regime(format!("alpha = {alpha} must exceed 2/eta = {:.6}", 2.0 / c.eta)));
            }
            let min = c.min_offset(alpha, 1.0);
            if k0 < min {
                return Err(BoundError::Regime(format!(
                    "K = {k0} is below max{{A alpha (5 alpha + 8) rho1, 2}} = {min:.6e}"
                )));
            }
        }
        BoundCase::Polynomial => {
            let min = c.min_offset(alpha, xi);
            if k0 < min {
                return Err(BoundError::Regime(format!(
                    "K = {k0} is below max{{(2 A alpha (5 + 2 kappa) rho1 / eta)^(1/xi), 2}} = {min:.6e}"
                )));
            }
        }
    }
    Ok(case)
}

/// Bound on `E|x_{k+1} - x*|_c^2` after checking the regime.
pub fn mse_bound(c: &BoundConstants, schedule: &StepSchedule, k: u64) -> Result<f64, BoundError> {
    check_regime(c, schedule)?;
    Ok(mse_bound_unchecked(c, schedule, k))
}

/// The same expression evaluated without checking its preconditions.
pub fn mse_bound_unchecked(c: &BoundConstants, schedule: &StepSchedule, k: u64) -> f64 {
    let (alpha, k0, xi) = (schedule.alpha, schedule.k0, schedule.xi);
    let (b, rho0, rho1, eta) = (c.b(), c.rho0(), c.rho1(), c.eta);
    let kf = k as f64;
    match BoundCase::of(schedule) {
        BoundCase::Constant => {
            rho0 * (-eta * alpha * kf / 2.0).exp() + 18.0 * b * rho1 * alpha + 40.0 * b * rho1 * alpha / eta
        }
        BoundCase::Harmonic => {
            let t = kf + k0;
            rho0 * (k0 / t).powf(eta * alpha / 2.0)
                + 2.0 * b * rho1 * alpha / t
                + 8.0 * b * (5.0 + 4.0 * eta) * rho1 * std::f64::consts::E * alpha * alpha
                    / ((eta * alpha / 2.0 - 1.0) * t)
        }
        BoundCase::Polynomial => {
            let kappa = xi / alpha + eta;
            let t = kf + k0;
            let decay = (-eta * alpha / (2.0 * (1.0 - xi)) * (t.powf(1.0 - xi) - k0.powf(1.0 - xi))).exp();
            let tx = t.powf(xi);
            rho0 * decay + 2.0 * b * rho1 * alpha / tx + 8.0 * b * (5.0 + 2.0 * kappa) * rho1 * alpha / (eta * tx)
        }
    }
}

/// Bound on the error of iterate `n >= 1` (the expression at `k = n - 1`).
pub fn iterate_bound(c: &BoundConstants, schedule: &StepSchedule, n: u64, checked: bool) -> Result<f64, BoundError> {
    let k = n.saturating_sub(1);
    if checked {
        mse_bound(c, schedule, k)
    } else {
        Ok(mse_bound_unchecked(c, schedule, k))
    }
}

/// Q-learning constants with `A = 25`, `B = 9 |Q*|^2` and the Moreau
/// envelope parameters, for the anchor pair with the smallest hitting time.
pub fn q_bound_constants(problem: &QProblem, q0: &[f64]) -> Result<BoundConstants, BoundError> {
    let (anchor, _) = best_anchor(&problem.mdp, &problem.behavior)?;
    let pc = q_noise_constants(&problem.mdp, &problem.behavior, anchor, &problem.q_star)?;
    let mp = moreau_params(&problem.mdp, &problem.behavior)?;
    let d0 = q0.iter().zip(&problem.q_star.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    BoundConstants::new(
        pc.a1,
        pc.b1,
        pc.a2,
        pc.b2,
        pc.a3,
        pc.b3,
        mp.eta,
        mp.l_s,
        mp.l,
        mp.u,
        mp.l_cs,
        mp.u_cs,
        d0 * d0,
    )
}

/// `32 e tau log(|S||A|) / ((1 - gamma) Lambda_min)`, the closed-form
/// upper bound on `rho1` for Q-learning.
pub fn q_rho1_upper(tau: f64, n_pairs: usize, gamma: f64, lambda_min: f64) -> f64 {
    32.0 * std::f64::consts::E * tau * (n_pairs as f64).ln() / ((1.0 - gamma) * lambda_min)
}

/// The Q-learning bounds in their simplified displayed form, which merges
/// the plateau terms into `58 B rho1 alpha / eta` and the harmonic noise term
/// into `72 B rho1 e alpha^2 / ((eta alpha / 2 - 1)(k + K))`.
pub fn q_display_bound(c: &BoundConstants, schedule: &StepSchedule, k: u64) -> f64 {
    let (alpha, k0) = (schedule.alpha, schedule.k0);
    let (b, rho0, rho1, eta) = (c.b(), c.rho0(), c.rho1(), c.eta);
    let kf = k as f64;
    match BoundCase::of(schedule) {
        BoundCase::Constant => rho0 * (-eta * alpha * kf / 2.0).exp() + 58.0 * b * rho1 * alpha / eta,
        BoundCase::Harmonic => {
            let t = kf + k0;
            rho0 * (k0 / t).powf(eta * alpha / 2.0)
                + 2.0 * b * rho1 * alpha / t
                + 72.0 * b * rho1 * std::f64::consts::E * alpha * alpha / ((eta * alpha / 2.0 - 1.0) * t)
        }
        BoundCase::Polynomial => mse_bound_unchecked(c, schedule, k),
    }
}

/// SCBCD constants: `A = (L + C1 + 1)^2`, `B = C2^2`, `eta = mu / p`,
/// `rho1 = max{L, 1}` with the squared Euclidean norm as Lyapunov function.
pub fn scbcd_bound_constants(
    mu: f64,
    lipschitz: f64,
    p: usize,
    c1: f64,
    c2: f64,
    init_dist_sq: f64,
) -> Result<BoundConstants, BoundError> {
    BoundConstants::new(
        lipschitz,
        0.0,
        lipschitz.max(1.0),
        0.0,
        c1,
        c2,
        mu / p as f64,
        1.0,
        1.0,
        1.0,
        1.0,
        1.0,
        init_dist_sq,
    )
}

/// Least-squares line through `log(error)` against `log(k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (u64, u64),
}

/// Least-squares line through `log(error)` against `k`; `rate` is minus the slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricFit {
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (u64, u64),
}

const MIN_FIT_POINTS: usize = 10;

fn window_points(k: &[u64], err: &[f64], lo: u64, hi: u64) -> Result<(Vec<f64>, Vec<f64>), BoundError> {
    let mut ks = Vec::new();
    let mut logs = Vec::new();
    for (&kk, &e) in k.iter().zip(err) {
        if kk < lo || kk > hi {
            continue;
        }
        if e.is_nan() || e <= 0.0 {
            return Err(BoundError::Nonpositive { k: kk, value: e });
        }
        ks.push(kk as f64);
        logs.push(e.ln());
    }
    if ks.len() < MIN_FIT_POINTS {
        return Err(BoundError::TooFewPoints { lo, hi, n: ks.len(), min: MIN_FIT_POINTS });
    }
    Ok((ks, logs))
}

fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let y0 = y[0];
    // Shift so a constant series has exactly zero spread.
    let y: Vec<f64> = y.iter().map(|v| v - y[0]).collect();
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    (slope, my - slope * mx + y0, r2)
}

/// Power-law fit over grid points with `lo <= k <= hi`.
pub fn fit_rate(k: &[u64], err: &[f64], window: (u64, u64)) -> Result<RateFit, BoundError> {
    let (ks, logs) = window_points(k, err, window.0.max(1), window.1)?;
    let lk: Vec<f64> = ks.iter().map(|v| v.ln()).collect();
    let (slope, intercept, r_squared) = ols(&lk, &logs);
    Ok(RateFit { slope, intercept, r_squared, window })
}

/// Exponential fit over grid points with `lo <= k <= hi`.
pub fn fit_geometric(k: &[u64], err: &[f64], window: (u64, u64)) -> Result<GeometricFit, BoundError> {
    let (ks, logs) = window_points(k, err, window.0, window.1)?;
    let (slope, intercept, r_squared) = ols(&ks, &logs);
    Ok(GeometricFit { rate: -slope, intercept, r_squared, window })
}

/// The last decade `[k_max / 10, k_max]` of a grid.
pub fn last_decade(k: &[u64]) -> (u64, u64) {
    let hi = k.last().copied().unwrap_or(0);
    (hi / 10, hi)
}

/// One row of a bound-versus-empirical table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub k: u64,
    pub empirical_mse: f64,
    pub std_err: f64,
    pub theorem_bound: f64,
    /// `theorem_bound / empirical_mse`.
    pub ratio: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundComparison {
    pub case: BoundCase,
    /// Whether the schedule satisfies the case's preconditions.
    pub in_regime: bool,
    pub slack_se: f64,
    pub rows: Vec<ComparisonRow>,
}

impl BoundComparison {
    /// Compares every grid point past `k = 0`. A point holds when
    /// `mean - slack_se * se <= bound`.
    pub fn new(c: &BoundConstants, schedule: &StepSchedule, curve: &EnsembleCurve, slack_se: f64) -> Self {
        let in_regime = check_regime(c, schedule).is_ok();
        let se = curve.std_err();
        let rows = curve
            .k
            .iter()
            .enumerate()
            .filter(|(_, &k)| k > 0)
            .map(|(i, &k)| {
                let bound = mse_bound_unchecked(c, schedule, k - 1);
                let mean = curve.mean[i];
                ComparisonRow {
                    k,
                    empirical_mse: mean,
                    std_err: se[i],
                    theorem_bound: bound,
                    ratio: bound / mean,
                    holds: mean - slack_se * se[i] <= bound,
                }
            })
            .collect();
        BoundComparison { case: BoundCase::of(schedule), in_regime, slack_se, rows }
    }

    pub fn all_hold(&self) -> bool {
        self.rows.iter().all(|r| r.holds)
    }

    pub fn first_violation(&self) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| !r.holds)
    }

    /// Smallest ratio of bound to empirical mean.
    pub fn min_ratio(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.empirical_mse > 0.0)
            .map(|r| r.ratio)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }
}
