//! Projected stochastic approximation under Markovian noise.
//!
//! The [`sa`] engine runs `x_{k+1} = proj(x_k + a_k (F(x_k, Y_k) + M_k))` for any
//! [`sa::SaProblem`]. Three instances ship with the crate: average-reward
//! TD(lambda) with linear features ([`td`]), tabular Q-learning
//! ([`qlearning`]) and stochastic cyclic block coordinate descent
//! ([`scbcd`]). [`markov`] supplies the chain analysis they rest on and
//! [`bounds`] evaluates finite-time error bounds and fits empirical rates.

pub mod bounds;
pub mod linalg;
pub mod markov;
pub mod qlearning;
pub mod rng;
pub mod sa;
pub mod scbcd;
pub mod stats;
pub mod td;

pub use bounds::{BoundConstants, BoundError, RateFit};
pub use markov::{FiniteChain, MarkovError, PoissonSolution, StationaryDist};
pub use qlearning::{BehaviorPolicy, FiniteMdp, QProblem, QTable};
pub use rng::{seeded_rng, stream_rng, SaRng};
pub use sa::{
    run, run_ensemble, BallProjection, EnsembleCurve, ErrorMetric, RecordGrid, RunSpec, SaError, SaProblem,
    StepSchedule, Trajectory,
};
pub use scbcd::{BlockPartition, GradientNoise, QuadraticObjective, ScbcdProblem};
pub use td::{FeatureMap, TdModel, TdSpec};
