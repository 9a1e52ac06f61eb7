//! Benchmarks live in `benches/`; this library only provides fixtures.

use salab_core::rng::seeded_rng;
use salab_core::scbcd::{linear_spectrum, BlockPartition, GradientNoise, QuadraticObjective, ScbcdProblem};
use salab_core::td::{random_model, TdModel};
use salab_core::{BehaviorPolicy, QProblem};

pub fn td_fixture(n: usize, d: usize) -> TdModel {
    random_model(n, d, 0.5, &mut seeded_rng(1)).expect("random model")
}

pub fn q_fixture(n_states: usize, n_actions: usize) -> QProblem {
    let mdp = salab_core::qlearning::random_mdp(n_states, n_actions, 0.9, &mut seeded_rng(2));
    let policy = BehaviorPolicy::uniform(&mdp);
    QProblem::new(mdp, &policy).expect("Q problem")
}

pub fn scbcd_fixture(d: usize, p: usize) -> ScbcdProblem<QuadraticObjective> {
    let obj = QuadraticObjective::from_spectrum(&linear_spectrum(d, 0.5, 1.0), &mut seeded_rng(3)).expect("objective");
    let part = BlockPartition::equal(d, p).expect("partition");
    ScbcdProblem::new(obj, part, GradientNoise::bounded(0.5)).expect("problem")
}
