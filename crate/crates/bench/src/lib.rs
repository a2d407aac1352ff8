//! Shared fixtures for the benchmark targets.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use deltadeno_core::evalkit::{SweepScenario, ToyScenario};
use deltadeno_core::grid::LatentGrid;
use deltadeno_core::pipeline::DeltaDenoConfig;

/// The standard rectangle scenario used by the end-to-end benchmarks.
pub fn bench_scenario() -> (DeltaDenoConfig, SweepScenario) {
    let scenario = ToyScenario::rectangle(17, 0.05).expect("scenario builds");
    let mut cfg = DeltaDenoConfig::default();
    cfg.prompts.normal_template = scenario.normal_prompt.clone();
    cfg.prompts.anomaly_template = scenario.anomaly_prompt.clone();
    cfg.seed = 17;
    let bundle = scenario.bundle().expect("bundle builds");
    (cfg, bundle)
}

pub fn seeded_latent(shape: (usize, usize, usize), seed: u64) -> LatentGrid {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    LatentGrid::standard_normal(shape, &mut rng)
}
