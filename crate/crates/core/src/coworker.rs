//! Coworker-side protocol state: clusters of primal/dual SGD iterations
//! with adaptive multiplier averages, cluster sizes, step sizes and
//! tolerance thresholds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{minibatch_gradient, LossModel, ModelVector};
use crate::stream::{NotReady, StreamBuffer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveConfig {
    pub iter_max: u32,
    /// Base `a` of the max-log Ω function.
    pub omega_a: f64,
    /// Exponent scale `c` of the max-log Ω function.
    pub omega_c: f64,
    pub b0: f64,
    pub gamma: f64,
    pub eta_min: f64,
    pub eta_max: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            iter_max: 30,
            omega_a: 2.0,
            omega_c: 1.0,
            b0: 1.0,
            gamma: 0.1,
            eta_min: 0.01,
            eta_max: 0.5,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iter_max < 1 {
            return Err(Error::config("adaptive.iter_max", "must be at least 1"));
        }
        if !(self.omega_a > 1.0) {
            return Err(Error::config("adaptive.omega_a", "must exceed 1"));
        }
        if !(self.omega_c > 0.0) {
            return Err(Error::config("adaptive.omega_c", "must be positive"));
        }
        if !(self.b0 > 0.0) {
            return Err(Error::config("adaptive.b0", "must be positive"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("adaptive.gamma", "must be non-negative"));
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_max && self.eta_max.is_finite()) {
            return Err(Error::config(
                "adaptive.eta_min",
                "need 0 < eta_min <= eta_max < inf",
            ));
        }
        Ok(())
    }
}

/// Max-log Ω: `max{1, min{Iter_MAX, a^(c·μ̄)}}`.
pub fn omega(cfg: &AdaptiveConfig, mu_bar: f64) -> f64 {
    let raw = cfg.omega_a.powf(cfg.omega_c * mu_bar);
    raw.min(cfg.iter_max as f64).max(1.0)
}

/// `max{1, ⌈Iter_MAX / Ω⌉}`.
pub fn iter_count(cfg: &AdaptiveConfig, mu_bar: f64) -> u32 {
    let n = (cfg.iter_max as f64 / omega(cfg, mu_bar)).ceil();
    (n as u32).clamp(1, cfg.iter_max)
}

/// `B₀·μ̄^γ`, with `B = 0` at `μ̄ = 0`.
pub fn tolerance(cfg: &AdaptiveConfig, mu_bar: f64) -> f64 {
    if mu_bar <= 0.0 {
        0.0
    } else {
        cfg.b0 * mu_bar.powf(cfg.gamma)
    }
}

fn clamp_step(cfg: &AdaptiveConfig, raw: f64) -> f64 {
    if raw.is_nan() {
        cfg.eta_max
    } else {
        raw.clamp(cfg.eta_min, cfg.eta_max)
    }
}

/// Message a coworker sends after finishing an iteration cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkPayload {
    pub sender: usize,
    pub w: ModelVector,
    pub mu_bar: f64,
    pub timestamp: u64,
    /// Local clock at send time; distinguishes successive payloads.
    pub local_time: u64,
    /// Number of iterations in the cluster that produced this payload.
    pub iterations: u32,
    /// Stochastic gradient of the cluster's final iteration.
    pub last_grad: Option<ModelVector>,
}

/// What a single local iteration did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterationOutcome {
    /// The cluster still has iterations left.
    Continue,
    /// This iteration closed the cluster.
    ClusterDone,
}

#[derive(Debug, Clone)]
pub struct CoworkerState {
    pub id: usize,
    pub w: ModelVector,
    pub mu: f64,
    pub mu_sum: f64,
    pub mu_count: u64,
    pub mu_bar: f64,
    pub b: f64,
    pub lambda_last: f64,
    pub w_global_last: ModelVector,
    pub timestamp: u64,
    pub local_clock: u64,
    pub iter: u32,
    pub buffer: StreamBuffer,
    pub timer_deadline: Option<f64>,
    pub eta0: f64,
    pub eta1: f64,
    /// Iterations completed in the current cluster.
    pub cluster_progress: u32,
    /// Most recent stochastic gradient (used by the profiler).
    pub last_grad: Option<ModelVector>,
}

impl CoworkerState {
    pub fn new(
        id: usize,
        w0: ModelVector,
        k: usize,
        cfg: &AdaptiveConfig,
        buffer: StreamBuffer,
    ) -> Self {
        CoworkerState {
            id,
            w_global_last: w0.clone(),
            w: w0,
            mu: 0.0,
            mu_sum: 0.0,
            mu_count: 1,
            mu_bar: 0.0,
            b: 0.0,
            lambda_last: 1.0 / k as f64,
            timestamp: 0,
            local_clock: 0,
            iter: iter_count(cfg, 0.0),
            buffer,
            timer_deadline: None,
            eta0: cfg.eta_min,
            eta1: cfg.eta_min,
            cluster_progress: 0,
            last_grad: None,
        }
    }

    pub fn sq_deviation(&self) -> f64 {
        self.w.sq_dist(&self.w_global_last)
    }

    /// Candidate primal iterate `w − η⁰[λ·g + μ(w − w̄)]`; state untouched.
    pub fn primal_update(&self, grad: &ModelVector) -> ModelVector {
        let w = self.w.as_slice();
        let bar = self.w_global_last.as_slice();
        let g = grad.as_slice();
        ModelVector::from_vec(
            (0..w.len())
                .map(|j| w[j] - self.eta0 * (self.lambda_last * g[j] + self.mu * (w[j] - bar[j])))
                .collect(),
        )
    }

    /// Candidate multiplier `max{0, μ + η¹(‖w − w̄‖² − B)}`; state untouched.
    pub fn dual_update(&self) -> f64 {
        (self.mu + self.eta1 * (self.sq_deviation() - self.b)).max(0.0)
    }

    pub fn primal_step(&mut self, grad: &ModelVector, now: f64) -> Result<&ModelVector> {
        self.w.ensure_dim(grad)?;
        let next = self.primal_update(grad);
        if !next.is_finite() {
            return Err(self.divergence(now));
        }
        self.w = next;
        Ok(&self.w)
    }

    pub fn dual_step(&mut self, now: f64) -> Result<f64> {
        let next = self.dual_update();
        if !next.is_finite() {
            return Err(self.divergence(now));
        }
        self.mu = next;
        Ok(self.mu)
    }

    fn divergence(&self, now: f64) -> Error {
        Error::NumericDivergence {
            coworker: self.id,
            time: now,
        }
    }

    /// Folds the current `μ` into the running average `μ̄`.
    pub fn update_mu_average(&mut self) -> f64 {
        self.mu_sum += self.mu;
        self.mu_count += 1;
        self.mu_bar = self.mu_sum / self.mu_count as f64;
        self.mu_bar
    }

    pub fn update_iter_count(&mut self, cfg: &AdaptiveConfig) -> u32 {
        self.iter = iter_count(cfg, self.mu_bar);
        self.iter
    }

    pub fn update_step_sizes(&mut self, cfg: &AdaptiveConfig, grad: &ModelVector) -> (f64, f64) {
        let om = omega(cfg, self.mu_bar);
        self.eta0 = clamp_step(cfg, om * grad.norm());
        self.eta1 = clamp_step(cfg, om * (self.sq_deviation() - self.b).abs());
        (self.eta0, self.eta1)
    }

    pub fn update_tolerance(&mut self, cfg: &AdaptiveConfig) -> f64 {
        self.b = tolerance(cfg, self.mu_bar);
        self.b
    }

    /// One local iteration: sample, adapt step sizes, primal and dual
    /// steps (both driven by the pre-step iterate), multiplier average,
    /// buffer control eviction.
    pub fn run_iteration<R: Rng + ?Sized>(
        &mut self,
        cfg: &AdaptiveConfig,
        model: &LossModel,
        rng: &mut R,
        now: f64,
    ) -> Result<std::result::Result<IterationOutcome, NotReady>> {
        let batch = match self.buffer.sample_minibatch(rng) {
            Ok(b) => b,
            Err(nr) => return Ok(Err(nr)),
        };
        let grad = minibatch_gradient(model, &self.w, &batch)?;
        self.update_step_sizes(cfg, &grad);
        let w_next = self.primal_update(&grad);
        let mu_next = self.dual_update();
        if !w_next.is_finite() || !mu_next.is_finite() {
            return Err(self.divergence(now));
        }
        self.w = w_next;
        self.mu = mu_next;
        self.update_mu_average();
        self.buffer.evict_oldest_if_surplus();
        self.last_grad = Some(grad);
        self.local_clock += 1;
        self.cluster_progress += 1;
        if self.cluster_progress >= self.iter {
            Ok(Ok(IterationOutcome::ClusterDone))
        } else {
            Ok(Ok(IterationOutcome::Continue))
        }
    }

    /// Closes the current cluster: builds the payload, then refreshes `B`
    /// and `Iter` for the next cluster.
    pub fn finish_cluster(&mut self, cfg: &AdaptiveConfig) -> UplinkPayload {
        let payload = UplinkPayload {
            sender: self.id,
            w: self.w.clone(),
            mu_bar: self.mu_bar,
            timestamp: self.timestamp,
            local_time: self.local_clock,
            iterations: self.cluster_progress,
            last_grad: self.last_grad.clone(),
        };
        self.update_tolerance(cfg);
        self.update_iter_count(cfg);
        self.cluster_progress = 0;
        payload
    }

    /// Runs a whole cluster back to back. Fails if the buffer runs dry.
    pub fn run_iteration_cluster<R: Rng + ?Sized>(
        &mut self,
        cfg: &AdaptiveConfig,
        model: &LossModel,
        rng: &mut R,
        now: f64,
    ) -> Result<UplinkPayload> {
        self.cluster_progress = 0;
        loop {
            match self.run_iteration(cfg, model, rng, now)? {
                Ok(IterationOutcome::Continue) => {}
                Ok(IterationOutcome::ClusterDone) => return Ok(self.finish_cluster(cfg)),
                Err(nr) => {
                    return Err(Error::Protocol(format!(
                        "coworker {} buffer not ready ({} of {} entries)",
                        self.id, nr.count, nr.needed
                    )))
                }
            }
        }
    }

    pub fn handle_downlink(&mut self, global: &ModelVector, stamp: u64) -> Result<()> {
        self.w.ensure_dim(global)?;
        self.timestamp = stamp;
        self.w_global_last = global.clone();
        self.w = global.clone();
        self.timer_deadline = None;
        self.cluster_progress = 0;
        Ok(())
    }

    /// The pending payload is presumed lost; nothing is re-sent.
    pub fn handle_timer_expiry(&mut self) {
        self.timer_deadline = None;
        self.cluster_progress = 0;
    }

    pub fn handle_fairness_broadcast(&mut self, lambda: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Protocol(format!(
                "fairness coefficient {lambda} outside [0, 1]"
            )));
        }
        self.lambda_last = lambda;
        Ok(())
    }
}
