//! Shared fixtures for the pipeline benchmarks.

use fimpp::hawkes::{sample_instance_at, EventSequence, HawkesInstance, PriorConfig};
use fimpp::model::ContextBatch;
use fimpp::simulator::{simulate_dataset, SimulationConfig};

/// A fixed three-mark instance from the default prior.
pub fn instance(seed: u64) -> HawkesInstance {
    let prior = PriorConfig {
        num_marks_range: (3, 3),
        seed,
        ..PriorConfig::default()
    };
    sample_instance_at(&prior, 0).expect("default prior samples")
}

pub fn sequences(inst: &HawkesInstance, count: usize, seed: u64) -> Vec<EventSequence> {
    let cfg = SimulationConfig {
        seed,
        ..SimulationConfig::default()
    };
    simulate_dataset(inst, count, &cfg, 0, 1).expect("stable instance")
}

/// Context of `m` sequences plus one target from the same instance.
pub fn batch(m: usize, seed: u64) -> ContextBatch {
    let mut seqs = sequences(&instance(seed), m + 1, seed);
    let target = seqs.pop().unwrap();
    ContextBatch::new(seqs, target).expect("consistent marks")
}
