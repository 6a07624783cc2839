//! Asynchronous fair adaptive federated learning: protocol state machines,
//! a deterministic discrete-event simulator, an online parameter profiler
//! and a convergence-bound calculator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod coworker;
pub mod error;
pub mod harness;
pub mod model;
pub mod network;
pub mod profiler;
pub mod rng;
pub mod server;
pub mod stream;

pub use bounds::BoundInputs;
pub use coworker::{AdaptiveConfig, CoworkerState, UplinkPayload};
pub use error::{Error, Result};
pub use model::{FairnessWeights, LossKind, LossModel, ModelVector, TrainingExample};
pub use network::{RunOutcome, Simulation, SimulationParams};
pub use profiler::{ParameterEstimates, ProfilingLog};
pub use server::{MixingConfig, Phi, ServerState};
pub use stream::StreamBuffer;
