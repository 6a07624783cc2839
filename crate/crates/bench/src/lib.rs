//! Shared fixtures for the benchmarks.

use afafed_core::harness::{build, ExperimentConfig};
use afafed_core::rng::{stream, Purpose};
use afafed_core::{SimulationParams, TrainingExample};
use rand::Rng;

/// Random regression examples of dimension `dim`.
pub fn examples(n: usize, dim: usize, seed: u64) -> Vec<TrainingExample> {
    let mut rng = stream(seed, 0, Purpose::Data);
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            TrainingExample::scalar(x, rng.random_range(-1.0..1.0))
        })
        .collect()
}

/// Simulation parameters for the small preset stopped after `t` aggregations.
pub fn small_sim(t: u64) -> SimulationParams {
    let text = format!("preset = \"table_a1_small\"\n[sim]\nt = {t}\n");
    let cfg = ExperimentConfig::from_toml_str(&text, std::path::Path::new(".")).expect("preset parses");
    build(&cfg).expect("preset builds").params
}
