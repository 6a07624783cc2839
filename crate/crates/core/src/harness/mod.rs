//! Config-driven experiments: data generation, runs, sweeps and artifacts.

pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;

pub use config::{preset, ExperimentConfig};
pub use data::{generate_data, read_trace, GeneratedData};
pub use experiment::{build, run_built, run_experiment, run_sweep, write_artifacts, Experiment, RunArtifacts, SweepCell};
pub use metrics::{CoworkerSummary, MetricsRow, RunSummary, METRICS_HEADER};
