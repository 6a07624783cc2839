//! Deterministic per-(coworker, purpose) random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the master seed and
//! positioned on its own stream id, so draws on one stream never shift
//! another regardless of event interleaving.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    /// Mini-batch sampling inside the local processor.
    Compute = 0,
    /// Uplink loss and rate draws.
    Link = 1,
    /// Data arrival times and example picks.
    Arrivals = 2,
    /// Mini-batches drawn during the synchronized profiling phase.
    Profiling = 3,
    /// Synthetic data generation.
    Data = 4,
}

const GLOBAL: u64 = u32::MAX as u64;

/// Stream owned by `coworker` for `purpose`.
pub fn stream(seed: u64, coworker: usize, purpose: Purpose) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((coworker as u64) << 8) | purpose as u64);
    rng
}

/// Stream not tied to any coworker (e.g. global data generation).
pub fn global_stream(seed: u64, purpose: Purpose) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((GLOBAL << 8) | purpose as u64);
    rng
}
