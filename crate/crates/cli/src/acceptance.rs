//! The acceptance criteria as executable checks, with a plain-text and a
//! JUnit-style report.

use std::fmt;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use salab_core::bounds::{check_regime, fit_geometric, fit_rate, last_decade, BoundComparison, BoundConstants};
use salab_core::markov::{cyclic_chain, random_irreducible_chain};
use salab_core::qlearning::{behavior_chain, BehaviorPolicy};
use salab_core::rng::seeded_rng;
use salab_core::sa::{run_ensemble, EnsembleCurve, ErrorMetric, RecordGrid, RunSpec, StepSchedule};
use salab_core::scbcd::{linear_spectrum, poisson_closed_form, poisson_driver, QuadraticObjective, SmoothObjective};
use salab_core::td::{extended_basis, random_model, random_tabular_model, TdModel};
use salab_core::{BallProjection, QProblem};

use crate::config::{ExperimentConfig, Problem};
use crate::experiment::{execute, Outcome};

pub const TD_5STATE: &str = include_str!("../configs/td_5state.json");
pub const Q_PLATEAU: &str = include_str!("../configs/q_plateau.json");
pub const Q_PERIODIC: &str = include_str!("../configs/q_periodic.json");
pub const SCBCD_NOISELESS: &str = include_str!("../configs/scbcd_noiseless.json");
pub const SCBCD_NOISY: &str = include_str!("../configs/scbcd_noisy.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    /// Property checks and small oracles.
    Fast,
    /// Every criterion, including the ensemble rate experiments.
    Full,
}

/// Deliberate faults used to check that the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Flip the sign of every computed drift constant.
    NegateDelta,
}

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub limit: Option<Duration>,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {:>2} {:<22} {}  {} [{:.1} s]",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

/// Bound comparison gathered from the bounded-noise experiments.
#[derive(Debug, Clone)]
struct BoundCheck {
    label: String,
    in_regime: bool,
    comparison: BoundComparison,
}

#[derive(Default)]
struct Context {
    bounds: Vec<BoundCheck>,
}

impl Context {
    fn record(&mut self, label: impl Into<String>, c: &BoundConstants, schedule: &StepSchedule, curve: &EnsembleCurve) {
        self.bounds.push(BoundCheck {
            label: label.into(),
            in_regime: check_regime(c, schedule).is_ok(),
            comparison: BoundComparison::new(c, schedule, curve, 3.0),
        });
    }

    fn record_outcome(&mut self, label: impl Into<String>, schedule: &StepSchedule, out: &Outcome) {
        if let Some(b) = &out.bound {
            self.record(label, &b.constants, schedule, &out.curve);
        }
    }
}

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn load(text: &str) -> Result<ExperimentConfig, String> {
    text.parse::<ExperimentConfig>().map_err(|e| e.to_string())
}

fn run(cfg: &ExperimentConfig) -> Result<Outcome, String> {
    execute(cfg).map_err(|e| e.to_string())
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(f64::MIN_POSITIVE)
}

/// Poisson residuals on random chains, and the cyclic closed form against
/// the linear solve.
fn poisson(_: &mut Context, _: &Options) -> Check {
    let mut rng = seeded_rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=20);
        let chain = random_irreducible_chain(n, &mut rng);
        let g = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let sol = chain.solve_poisson_matrix(&g, rng.random_range(0..n)).map_err(|e| e.to_string())?;
        worst = worst.max(sol.residual(&chain, &g));
    }
    ensure(worst < 1e-10, || format!("Poisson residual {worst:.2e} >= 1e-10"))?;

    let mut spread: f64 = 0.0;
    for p in 1..=8 {
        let d = p + rng.random_range(0..4);
        let part = salab_core::BlockPartition::equal(d, p).map_err(|e| e.to_string())?;
        let obj = QuadraticObjective::from_spectrum(&linear_spectrum(d, 0.5, 2.0), &mut rng).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let closed = poisson_closed_form(&obj, &part, &x);
        let sol = cyclic_chain(p)
            .and_then(|c| c.solve_poisson_matrix(&poisson_driver(&obj, &part, &x), rng.random_range(0..p)))
            .map_err(|e| e.to_string())?;
        for j in 0..d {
            let diffs: Vec<f64> = closed.iter().enumerate().map(|(i, row)| row[j] - sol.v[(i, j)]).collect();
            let (lo, hi) = diffs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            spread = spread.max(hi - lo);
        }
    }
    ensure(spread < 1e-10, || format!("cyclic closed form differs by a non-constant {spread:.2e}"))?;
    Ok(format!("max residual {worst:.1e}; cyclic closed form spread {spread:.1e}"))
}

/// Projected Bellman residual on random models and the tabular oracle.
fn fixed_point(_: &mut Context, _: &Options) -> Check {
    let mut rng = seeded_rng(202);
    let lambdas = [0.0, 0.5, 0.9];
    let mut worst_pbe: f64 = 0.0;
    for i in 0..5 {
        let n = rng.random_range(2..=10);
        let d = rng.random_range(1..=3usize.min(n));
        let m = random_model(n, d, lambdas[i % 3], &mut rng).map_err(|e| e.to_string())?;
        worst_pbe = worst_pbe.max(m.bellman_residual().map_err(|e| e.to_string())?);
    }
    ensure(worst_pbe < 1e-8, || format!("projected Bellman residual {worst_pbe:.2e}"))?;

    let mut worst_tab: f64 = 0.0;
    for (i, &lambda) in lambdas.iter().cycle().take(5).enumerate() {
        let n = 2 + (i * 2) % 9;
        let m = random_tabular_model(n, lambda, &mut rng).map_err(|e| e.to_string())?;
        let v = m.chain.solve_poisson(&m.rewards).map_err(|e| e.to_string())?.column(0);
        let mean = v.iter().sum::<f64>() / n as f64;
        for (t, vv) in m.theta_star.iter().zip(&v) {
            worst_tab = worst_tab.max((t - (vv - mean)).abs());
        }
    }
    ensure(worst_tab < 1e-8, || format!("tabular fixed point off the centred value function by {worst_tab:.2e}"))?;
    Ok(format!("PBE residual {worst_pbe:.1e}; tabular oracle gap {worst_tab:.1e}"))
}

fn td_rate(_: &mut Context, _: &Options) -> Check {
    let cfg = load(TD_5STATE)?;
    let Problem::Td(spec) = cfg.problem().map_err(|e| e.to_string())? else {
        return Err("td_5state is not a TD(lambda) config".into());
    };
    ensure(spec.c_alpha.is_none(), || "c_alpha must come from the threshold".into())?;
    let model = TdModel::new(*spec).map_err(|e| e.to_string())?;
    let alpha = 4.0 / model.delta;
    let s = cfg.schedule;
    ensure(model.chain.n_states() == 5 && model.chain.is_aperiodic(), || "need a 5-state aperiodic chain".into())?;
    ensure(s.xi == 1.0 && rel_close(s.alpha, alpha, 1e-9) && rel_close(s.k0, alpha.max(2.0), 1e-9), || {
        format!("schedule must be alpha = 4/delta = {alpha}, K = max(alpha, 2), xi = 1")
    })?;
    ensure(cfg.n_seeds >= 100 && cfg.steps == 1_000_000, || "need >= 100 seeds and 1e6 steps".into())?;
    let out = run(&cfg)?;
    let f = fit_rate(&out.curve.k, &out.curve.mean, last_decade(&out.curve.k)).map_err(|e| e.to_string())?;
    let msg = format!("slope {:.3}, r^2 {:.3} (delta {:.3}, c_alpha {:.3})", f.slope, f.r_squared, model.delta, model.c_alpha);
    ensure((-1.3..=-0.7).contains(&f.slope) && f.r_squared >= 0.9, || msg.clone())?;
    Ok(msg)
}

fn q_problem(cfg: &ExperimentConfig) -> Result<QProblem, String> {
    let Problem::Q(q) = cfg.problem().map_err(|e| e.to_string())? else {
        return Err("not a Q-learning config".into());
    };
    let policy = q.policy.clone().unwrap_or_else(|| BehaviorPolicy::uniform(&q.mdp));
    QProblem::new(q.mdp, &policy).map_err(|e| e.to_string())
}

/// Runs a short in-regime companion of a Q-learning experiment so the
/// bound is also compared where its preconditions hold.
fn q_companion(
    ctx: &mut Context,
    label: &str,
    cfg: &ExperimentConfig,
    out: &Outcome,
    schedule: StepSchedule,
    steps: u64,
    n_seeds: usize,
) -> Result<(), String> {
    let c = out.bound.as_ref().ok_or("no bound constants")?.constants;
    let problem = q_problem(cfg)?;
    let x0 = vec![0.0; problem.mdp.n_pairs()];
    let spec = RunSpec::new(schedule, BallProjection::None, steps)
        .with_grid(RecordGrid::geometric(steps, 20))
        .with_metric(ErrorMetric::SquaredLinf);
    let curve = run_ensemble(&problem, &spec, &x0, &0, n_seeds, cfg.base_seed + 1).map_err(|e| e.to_string())?;
    ensure(check_regime(&c, &schedule).is_ok(), || format!("{label}: companion schedule not in regime"))?;
    ctx.record(label, &c, &schedule, &curve);
    Ok(())
}

fn q_plateau(ctx: &mut Context, _: &Options) -> Check {
    let cfg = load(Q_PLATEAU)?;
    let problem = q_problem(&cfg)?;
    let m = &problem.mdp;
    ensure(m.n_states() == 5 && m.n_actions() == 2 && m.gamma() == 0.8, || "need a 5x2 MDP with gamma 0.8".into())?;
    ensure(cfg.n_seeds == 200, || "need 200 seeds".into())?;
    let (lo, hi) = (cfg.steps / 2, cfg.steps);
    let mut tails = Vec::new();
    let mut last = None;
    for alpha in [0.1, 0.05] {
        let mut c = cfg.clone();
        c.schedule = StepSchedule::constant(alpha).map_err(|e| e.to_string())?;
        let out = run(&c)?;
        tails.push(out.curve.tail_average(lo, hi));
        ctx.record_outcome(format!("Q plateau alpha={alpha}"), &c.schedule, &out);
        last = Some((c, out));
    }
    let (c, out) = last.expect("two runs");
    let bound = out.bound.as_ref().ok_or("no bound constants")?;
    let companion = StepSchedule::constant(bound.constants.max_constant_step()).map_err(|e| e.to_string())?;
    q_companion(ctx, "Q plateau, in-regime step", &c, &out, companion, cfg.steps, 50)?;
    let ratio = tails[0] / tails[1];
    let msg = format!("tail ratio {ratio:.3} (tails {:.3e}, {:.3e})", tails[0], tails[1]);
    ensure((1.5..=3.0).contains(&ratio), || msg.clone())?;
    Ok(msg)
}

fn q_periodic(ctx: &mut Context, _: &Options) -> Check {
    let cfg = load(Q_PERIODIC)?;
    let problem = q_problem(&cfg)?;
    let Problem::Q(q) = cfg.problem().map_err(|e| e.to_string())? else { unreachable!() };
    let policy = q.policy.clone().unwrap_or_else(|| BehaviorPolicy::uniform(&q.mdp));
    let period = behavior_chain(&problem.mdp, &policy).map_err(|e| e.to_string())?.chain.period();
    ensure(period == 2, || format!("behavior chain has period {period}, expected 2"))?;
    let eta = (1.0 - problem.mdp.gamma()) * problem.behavior.lambda_min();
    let s = cfg.schedule;
    ensure(s.xi == 1.0 && s.alpha > 2.0 / eta, || format!("need xi = 1 and alpha > 2/eta_Q = {}", 2.0 / eta))?;
    let out = run(&cfg)?;
    ctx.record_outcome("Q periodic", &s, &out);
    let c = out.bound.as_ref().ok_or("no bound constants")?.constants;
    let companion = StepSchedule::new(s.alpha, c.min_offset(s.alpha, 1.0), 1.0).map_err(|e| e.to_string())?;
    q_companion(ctx, "Q periodic, in-regime offset", &cfg, &out, companion, cfg.steps, 20)?;
    let f = fit_rate(&out.curve.k, &out.curve.mean, last_decade(&out.curve.k)).map_err(|e| e.to_string())?;
    let tail = *out.curve.mean.last().ok_or("empty curve")?;
    let msg = format!("MSE at k=1e6 {tail:.2e}, slope {:.3}, r^2 {:.3}", f.slope, f.r_squared);
    ensure(tail < 1e-3 && (-1.3..=-0.7).contains(&f.slope) && out.curve.k.last() == Some(&1_000_000), || msg.clone())?;
    Ok(msg)
}

fn scbcd_problem(cfg: &ExperimentConfig) -> Result<salab_core::ScbcdProblem<QuadraticObjective>, String> {
    let Problem::Scbcd(spec) = cfg.problem().map_err(|e| e.to_string())? else {
        return Err("not an SCBCD config".into());
    };
    spec.build().map_err(|e| e.to_string())
}

fn scbcd_noiseless(ctx: &mut Context, _: &Options) -> Check {
    let cfg = load(SCBCD_NOISELESS)?;
    let prob = scbcd_problem(&cfg)?;
    let (mu, l, p) = (prob.objective.mu(), prob.objective.lipschitz(), prob.p());
    ensure(prob.objective.dim() == 10 && p == 5 && l / mu <= 10.0, || "need d = 10, p = 5, condition number <= 10".into())?;
    ensure(prob.noise.is_zero(), || "noise must be off".into())?;
    let out = run(&cfg)?;
    let bound = out.bound.as_ref().ok_or("no bound constants")?;
    let alpha = cfg.schedule.alpha;
    ensure(cfg.schedule.xi == 0.0 && rel_close(alpha, bound.constants.max_constant_step(), 1e-12), || {
        format!("step must be the largest admissible constant {}", bound.constants.max_constant_step())
    })?;
    ctx.record_outcome("SCBCD noiseless", &cfg.schedule, &out);
    let reach = out.curve.k.iter().zip(&out.curve.mean).find(|(_, e)| **e < 1e-8).map(|(k, _)| *k);
    let g = fit_geometric(&out.curve.k, &out.curve.mean, (0, 40_000)).map_err(|e| e.to_string())?;
    let theory = mu * alpha / (2.0 * p as f64);
    let reached = reach.map_or("never".to_string(), |k| format!("k = {k}"));
    let msg = format!("error < 1e-8 at {reached}; rate {:.3e} vs theorem {:.3e}", g.rate, theory);
    ensure(reach.is_some_and(|k| k <= 1_000_000) && g.rate >= 0.95 * theory, || msg.clone())?;
    Ok(msg)
}

fn scbcd_noisy(ctx: &mut Context, _: &Options) -> Check {
    let cfg = load(SCBCD_NOISY)?;
    let prob = scbcd_problem(&cfg)?;
    let (mu, p) = (prob.objective.mu(), prob.p() as f64);
    ensure(prob.noise.c1 == 0.0 && prob.noise.c2 == 1.0, || "need C1 = 0, C2 = 1".into())?;
    let s = cfg.schedule;
    ensure(s.xi == 1.0 && rel_close(s.alpha, 4.0 * p / mu, 1e-12), || "need xi = 1 and alpha = 4p/mu".into())?;
    ensure(cfg.n_seeds >= 100, || "need 100 seeds".into())?;
    let out = run(&cfg)?;
    ctx.record_outcome("SCBCD noisy", &s, &out);
    let f = fit_rate(&out.curve.k, &out.curve.mean, last_decade(&out.curve.k)).map_err(|e| e.to_string())?;
    let msg = format!("slope {:.3}, r^2 {:.3}, K = {}", f.slope, f.r_squared, s.k0);
    ensure((-1.3..=-0.7).contains(&f.slope), || msg.clone())?;
    Ok(msg)
}

fn bound_validity(ctx: &mut Context, _: &Options) -> Check {
    ensure(!ctx.bounds.is_empty(), || "no bound comparisons were recorded".into())?;
    let mut parts = Vec::new();
    let mut failed = Vec::new();
    for b in &ctx.bounds {
        let tag = if b.in_regime { "in regime" } else { "outside regime" };
        parts.push(format!("{} ({tag}, min ratio {:.2e})", b.label, b.comparison.min_ratio()));
        if let Some(v) = b.comparison.first_violation() {
            failed.push(format!("{} at k = {}: mean {:.3e} > bound {:.3e}", b.label, v.k, v.empirical_mse, v.theorem_bound));
        }
    }
    ensure(failed.is_empty(), || failed.join("; "))?;
    Ok(parts.join("; "))
}

fn step_sizes(_: &mut Context, _: &Options) -> Check {
    let mut rng = seeded_rng(909);
    for i in 0..1000 {
        let alpha = 10f64.powf(rng.random_range(-2.0..2.0));
        let k0 = if i % 10 == 0 { 2.0 } else { rng.random_range(2.0..1000.0) };
        let xi = match i % 4 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        };
        let s = StepSchedule::new(alpha, k0, xi).map_err(|e| e.to_string())?;
        let mut prev = s.step(0);
        for k in 1..=10_000u64 {
            let cur = s.step(k);
            let ok = cur <= prev && prev <= 2.0 * cur && prev - cur <= 2.0 * xi / alpha * cur * cur;
            ensure(ok, || format!("alpha {alpha}, K {k0}, xi {xi} fails at k = {k}"))?;
            prev = cur;
        }
    }
    Ok("1000 schedules, k in [1, 1e4]".into())
}

fn drift(_: &mut Context, opts: &Options) -> Check {
    let mut rng = seeded_rng(1010);
    let lambdas = [0.0, 0.3, 0.6, 0.9];
    let mut worst_margin = f64::INFINITY;
    for i in 0..20 {
        let n = rng.random_range(3..=8);
        let d = rng.random_range(1..=3);
        let m = random_model(n, d, lambdas[i % 4], &mut rng).map_err(|e| e.to_string())?;
        let delta = if opts.fault == Some(Fault::NegateDelta) { -m.delta } else { m.delta };
        ensure(delta > 0.0, || format!("model {i}: delta = {delta:.3e} is not positive"))?;
        let basis = extended_basis(&m.subspace, d);
        for _ in 0..50 {
            let y = DVector::from_fn(basis.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &basis * y;
            let x = &x / x.norm();
            let q = -(x.transpose() * &m.t_bar * &x)[(0, 0)];
            worst_margin = worst_margin.min(q - delta / 2.0);
            ensure(q >= delta / 2.0 - 1e-12, || format!("model {i}: -x'Tx = {q:.3e} < delta/2 = {:.3e}", delta / 2.0))?;
        }
    }
    Ok(format!("20 models x 50 directions; smallest margin {worst_margin:.2e}"))
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<u64>,
    run: fn(&mut Context, &Options) -> Check,
}

const CRITERIA: [Criterion; 10] = [
    Criterion { id: 1, name: "poisson", limit: Some(10), run: poisson },
    Criterion { id: 2, name: "td_fixed_point", limit: Some(30), run: fixed_point },
    Criterion { id: 3, name: "td_rate", limit: Some(1800), run: td_rate },
    Criterion { id: 4, name: "q_plateau", limit: Some(1200), run: q_plateau },
    Criterion { id: 5, name: "q_periodic", limit: Some(900), run: q_periodic },
    Criterion { id: 6, name: "scbcd_noiseless", limit: Some(120), run: scbcd_noiseless },
    Criterion { id: 7, name: "scbcd_noisy", limit: Some(1200), run: scbcd_noisy },
    Criterion { id: 8, name: "bound_validity", limit: None, run: bound_validity },
    Criterion { id: 9, name: "step_sizes", limit: Some(5), run: step_sizes },
    Criterion { id: 10, name: "drift", limit: Some(60), run: drift },
];

pub fn suite_ids(suite: Suite) -> Vec<u32> {
    match suite {
        Suite::Fast => vec![1, 2, 9, 10],
        Suite::Full => (1..=10).collect(),
    }
}

/// Runs the listed criteria in order, calling `on_result` after each.
pub fn run_criteria(ids: &[u32], opts: &Options, mut on_result: impl FnMut(&CriterionResult)) -> Vec<CriterionResult> {
    let mut ctx = Context::default();
    let mut results = Vec::new();
    for c in CRITERIA.iter().filter(|c| ids.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)(&mut ctx, opts);
        let elapsed = start.elapsed();
        let limit = c.limit.map(Duration::from_secs);
        let (mut passed, mut detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        if let Some(lim) = limit {
            if elapsed > lim {
                passed = false;
                detail = format!("{detail}; exceeded the {} s limit", lim.as_secs());
            }
        }
        let r = CriterionResult { id: c.id, name: c.name, passed, detail, elapsed, limit };
        on_result(&r);
        results.push(r);
    }
    results
}

pub fn run_suite(suite: Suite, opts: &Options, on_result: impl FnMut(&CriterionResult)) -> Vec<CriterionResult> {
    run_criteria(&suite_ids(suite), opts, on_result)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// JUnit-style XML with one test case per criterion.
pub fn junit_xml(suite_name: &str, results: &[CriterionResult]) -> String {
    let failures = results.iter().filter(|r| !r.passed).count();
    let total: f64 = results.iter().map(|r| r.elapsed.as_secs_f64()).sum();
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out += &format!(
        "<testsuite name=\"{}\" tests=\"{}\" failures=\"{failures}\" time=\"{total:.3}\">\n",
        xml_escape(suite_name),
        results.len()
    );
    for r in results {
        out += &format!(
            "  <testcase classname=\"acceptance\" name=\"criterion_{:02}_{}\" time=\"{:.3}\">\n",
            r.id,
            r.name,
            r.elapsed.as_secs_f64()
        );
        if !r.passed {
            out += &format!("    <failure message=\"{}\"/>\n", xml_escape(&r.detail));
        }
        out += &format!("    <system-out>{}</system-out>\n  </testcase>\n", xml_escape(&r.detail));
    }
    out += "</testsuite>\n";
    out
}
