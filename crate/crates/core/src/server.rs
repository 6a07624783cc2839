//! Server-side protocol state: fairness statistics and thresholds,
//! fairness-coefficient scaling, staleness-aware mixing and aggregation.

use serde::{Deserialize, Serialize};

use crate::coworker::UplinkPayload;
use crate::error::{Error, Result};
use crate::model::{FairnessWeights, ModelVector};

pub const DEFAULT_SAFETY_MARGIN: f64 = 4.0;

/// Staleness weighting `Φ(age)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Phi {
    Power { alpha: f64 },
    Exponential { alpha: f64 },
    Hinge { alpha: f64, b: f64 },
}

impl Phi {
    pub fn eval(&self, age: u64) -> f64 {
        let a = age as f64;
        match *self {
            Phi::Power { alpha } => (1.0 + a).powf(-alpha),
            Phi::Exponential { alpha } => (-alpha * a).exp(),
            Phi::Hinge { alpha, b } => {
                if a <= b {
                    1.0
                } else {
                    (1.0 + a).powf(-alpha)
                }
            }
        }
    }

    fn alpha(&self) -> f64 {
        match *self {
            Phi::Power { alpha } | Phi::Exponential { alpha } | Phi::Hinge { alpha, .. } => alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingConfig {
    pub beta_min: f64,
    pub beta_max: f64,
    pub de: f64,
    pub phi: Phi,
}

impl Default for MixingConfig {
    fn default() -> Self {
        MixingConfig {
            beta_min: 0.01,
            beta_max: 0.9,
            de: 0.3,
            phi: Phi::Power { alpha: 0.5 },
        }
    }
}

impl MixingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max <= 1.0) {
            return Err(Error::config(
                "mixing.beta_min",
                "need 0 < beta_min <= beta_max <= 1",
            ));
        }
        if !(self.de >= 0.0 && self.de.is_finite()) {
            return Err(Error::config("mixing.de", "must be non-negative"));
        }
        if !(self.phi.alpha() > 0.0) {
            return Err(Error::config("mixing.phi.alpha", "must be positive"));
        }
        if let Phi::Hinge { b, .. } = self.phi {
            if !(b >= 0.0) {
                return Err(Error::config("mixing.phi.b", "must be non-negative"));
            }
        }
        Ok(())
    }
}

pub fn phi(cfg: &MixingConfig, age: u64) -> f64 {
    cfg.phi.eval(age)
}

/// `Ψ = 1 + ln(1 + |μ̄ − μ̃|/(1 + μ̃))` and `V = 1/Ψ`.
pub fn scaling_functions(mu_bar: f64, mu_tilde: f64) -> (f64, f64) {
    let psi = 1.0 + ((mu_bar - mu_tilde).abs() / (1.0 + mu_tilde)).ln_1p();
    (psi, 1.0 / psi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FairnessChange {
    ScaledUp,
    ScaledDown,
    Unchanged,
}

/// Everything the server decided for one accepted uplink.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationRecord {
    /// Global clock after the aggregation.
    pub t: u64,
    pub sender: usize,
    pub age: u64,
    pub beta: f64,
    pub fairness: FairnessChange,
    /// Thresholds the received `μ̄` was tested against.
    pub th_upper: f64,
    pub th_lower: f64,
    /// Timestamp to attach to the downlink copy of the global model.
    pub downlink_stamp: u64,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub w_global: ModelVector,
    pub t: u64,
    pub lambdas: FairnessWeights,
    pub mu_tilde_sum: f64,
    pub count: u64,
    pub sigma_tilde_sum: f64,
    pub mu_tilde: f64,
    pub sigma_tilde: f64,
    pub th_upper: f64,
    pub th_lower: f64,
    pub beta_cfg: MixingConfig,
    pub safety_margin: f64,
}

impl ServerState {
    pub fn new(w0: ModelVector, k: usize, beta_cfg: MixingConfig) -> Self {
        ServerState {
            w_global: w0,
            t: 0,
            lambdas: FairnessWeights::uniform(k),
            mu_tilde_sum: 0.0,
            count: 0,
            sigma_tilde_sum: 0.0,
            mu_tilde: 0.0,
            sigma_tilde: 0.0,
            th_upper: 0.0,
            th_lower: 0.0,
            beta_cfg,
            safety_margin: DEFAULT_SAFETY_MARGIN,
        }
    }

    pub fn k(&self) -> usize {
        self.lambdas.len()
    }

    /// Folds one received `μ̄` into the running mean `μ̃` and the running
    /// mean absolute deviation `σ_μ̃`.
    pub fn update_fairness_stats(&mut self, mu_bar: f64) -> (f64, f64) {
        self.count += 1;
        self.mu_tilde_sum += mu_bar;
        self.mu_tilde = self.mu_tilde_sum / self.count as f64;
        self.sigma_tilde_sum += (self.mu_tilde - mu_bar).abs();
        self.sigma_tilde = self.sigma_tilde_sum / self.count as f64;
        (self.mu_tilde, self.sigma_tilde)
    }

    pub fn update_thresholds(&mut self) -> (f64, f64) {
        self.th_upper = (self.mu_tilde + self.safety_margin * self.sigma_tilde).abs();
        self.th_lower = (self.mu_tilde - self.safety_margin * self.sigma_tilde).abs();
        if self.th_lower > self.th_upper {
            std::mem::swap(&mut self.th_lower, &mut self.th_upper);
        }
        (self.th_upper, self.th_lower)
    }

    /// Scales `λ_k` up or down depending on where `μ̄` falls relative to
    /// the current thresholds, then renormalizes.
    pub fn apply_fairness_update(&mut self, k: usize, mu_bar: f64) -> Result<FairnessChange> {
        if k >= self.k() {
            return Err(Error::Protocol(format!("unknown coworker {k}")));
        }
        let (psi, v) = scaling_functions(mu_bar, self.mu_tilde);
        if mu_bar > self.th_upper {
            self.lambdas.scale_and_renormalize(k, psi)?;
            Ok(FairnessChange::ScaledUp)
        } else if mu_bar < self.th_lower {
            self.lambdas.scale_and_renormalize(k, v)?;
            Ok(FairnessChange::ScaledDown)
        } else {
            Ok(FairnessChange::Unchanged)
        }
    }

    /// Age of an update accepted at global time `t + 1`.
    pub fn compute_age(&self, payload_timestamp: u64) -> Result<u64> {
        (self.t + 1)
            .checked_sub(payload_timestamp)
            .and_then(|v| v.checked_sub(1))
            .ok_or_else(|| {
                Error::Protocol(format!(
                    "timestamp {payload_timestamp} is from the future (t = {})",
                    self.t
                ))
            })
    }

    pub fn compute_beta(&self, k: usize, age: u64) -> f64 {
        let cfg = &self.beta_cfg;
        let raw = self.lambdas.get(k) * phi(cfg, age) / (1.0 + self.t as f64).powf(cfg.de);
        raw.clamp(cfg.beta_min, cfg.beta_max)
    }

    /// `w̄ ← (1−β)w̄ + β·w_k`, then advances the global clock.
    pub fn aggregate(&mut self, w_k: &ModelVector, beta: f64) -> Result<&ModelVector> {
        self.w_global.ensure_dim(w_k)?;
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Protocol(format!("mixing parameter {beta} outside [0, 1]")));
        }
        for (g, l) in self.w_global.as_mut_slice().iter_mut().zip(w_k.as_slice()) {
            *g = (1.0 - beta) * *g + beta * l;
        }
        self.t += 1;
        Ok(&self.w_global)
    }

    /// Full server handler for one accepted uplink.
    ///
    /// The received `μ̄` is tested against thresholds built from the
    /// statistics as they stood before this sample; the sample is folded
    /// into the statistics afterwards.
    pub fn accept_uplink(&mut self, payload: &UplinkPayload) -> Result<AggregationRecord> {
        let k = payload.sender;
        if !(payload.mu_bar >= 0.0 && payload.mu_bar.is_finite()) {
            return Err(Error::Protocol(format!(
                "coworker {k} sent invalid multiplier average {}",
                payload.mu_bar
            )));
        }
        let age = self.compute_age(payload.timestamp)?;
        let (th_upper, th_lower) = self.update_thresholds();
        let fairness = self.apply_fairness_update(k, payload.mu_bar)?;
        self.update_fairness_stats(payload.mu_bar);
        let beta = self.compute_beta(k, age);
        self.aggregate(&payload.w, beta)?;
        Ok(AggregationRecord {
            t: self.t,
            sender: k,
            age,
            beta,
            fairness,
            th_upper,
            th_lower,
            downlink_stamp: self.t,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn server(k: usize) -> ServerState {
        ServerState::new(ModelVector::zeros(1), k, MixingConfig::default())
    }

    #[test]
    fn stats_examples() {
        let mut s = server(2);
        assert_eq!(s.update_fairness_stats(5.0), (5.0, 0.0));
        let mut s = server(2);
        for _ in 0..5 {
            s.update_fairness_stats(1.5);
        }
        assert_eq!((s.mu_tilde, s.sigma_tilde), (1.5, 0.0));
        let mut s = server(2);
        s.update_fairness_stats(2.0);
        assert_eq!(s.update_fairness_stats(4.0), (3.0, 0.5));
    }

    #[test]
    fn threshold_examples() {
        let mut s = server(2);
        s.mu_tilde = 1.3;
        assert_eq!(s.update_thresholds(), (1.3, 1.3));
        s.mu_tilde = 1.0;
        s.sigma_tilde = 0.5;
        assert_eq!(s.update_thresholds(), (3.0, 1.0));
        s.mu_tilde = 0.0;
        s.sigma_tilde = 0.0;
        assert_eq!(s.update_thresholds(), (0.0, 0.0));
        assert_eq!(s.apply_fairness_update(0, 1e-9).unwrap(), FairnessChange::ScaledUp);
    }

    #[test]
    fn scaling_examples() {
        assert_eq!(scaling_functions(2.0, 2.0), (1.0, 1.0));
        assert_relative_eq!(scaling_functions(3.0, 1.0).0, 1.0 + 2f64.ln(), epsilon = 1e-15);
        let (p, v) = scaling_functions(10.0, 0.3);
        assert_relative_eq!(p * v, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn fairness_update_examples() {
        let mut s = server(3);
        s.mu_tilde = 1.0;
        s.sigma_tilde = 0.5;
        s.update_thresholds();
        let before = s.lambdas.clone();
        assert_eq!(s.apply_fairness_update(1, 2.0).unwrap(), FairnessChange::Unchanged);
        assert_eq!(s.lambdas, before);
        assert_eq!(s.apply_fairness_update(1, 0.5).unwrap(), FairnessChange::ScaledDown);
        assert!(s.lambdas.get(1) < before.get(1));

        // Ψ = 3 needs |μ̄ − μ̃|/(1 + μ̃) = e² − 1.
        let mut s = server(2);
        let mu_bar = 2f64.exp() - 1.0;
        assert_eq!(s.apply_fairness_update(0, mu_bar).unwrap(), FairnessChange::ScaledUp);
        assert_relative_eq!(s.lambdas.get(0), 0.75, epsilon = 1e-12);
        assert_relative_eq!(s.lambdas.get(1), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn age_examples() {
        let mut s = server(2);
        s.t = 6;
        assert_eq!(s.compute_age(6).unwrap(), 0);
        s.t = 9;
        assert_eq!(s.compute_age(4).unwrap(), 5);
        assert!(s.compute_age(10).is_err());
    }

    #[test]
    fn alternating_coworkers_ages() {
        let mut s = server(2);
        let mut stamps = [0u64, 0u64];
        let mut ages = Vec::new();
        for i in 0..6 {
            let k = i % 2;
            let p = UplinkPayload {
                sender: k,
                w: ModelVector::zeros(1),
                mu_bar: 0.0,
                timestamp: stamps[k],
                local_time: 0,
                iterations: 1,
                last_grad: None,
            };
            let rec = s.accept_uplink(&p).unwrap();
            stamps[k] = rec.downlink_stamp;
            ages.push(rec.age);
        }
        assert_eq!(ages, vec![0, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn phi_examples() {
        let p = MixingConfig { phi: Phi::Power { alpha: 1.0 }, ..Default::default() };
        assert_eq!(phi(&p, 0), 1.0);
        assert_eq!(phi(&p, 3), 0.25);
        let h = MixingConfig { phi: Phi::Hinge { alpha: 1.0, b: 2.0 }, ..Default::default() };
        assert_eq!(phi(&h, 2), 1.0);
        assert_eq!(phi(&h, 3), 0.25);
        let e = MixingConfig { phi: Phi::Exponential { alpha: 0.5 }, ..Default::default() };
        assert_relative_eq!(phi(&e, 2), (-1f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn beta_examples() {
        let mut s = server(2);
        s.beta_cfg = MixingConfig { beta_min: 0.01, beta_max: 0.9, de: 0.0, phi: Phi::Power { alpha: 1.0 } };
        assert_eq!(s.compute_beta(0, 0), 0.5);
        assert_eq!(s.compute_beta(0, 1000), 0.01);
        s.beta_cfg.de = 0.5;
        let mut last = f64::INFINITY;
        for t in 0..50 {
            s.t = t;
            let raw = s.lambdas.get(0) * phi(&s.beta_cfg, 1) / (1.0 + t as f64).powf(0.5);
            assert!(raw <= last);
            last = raw;
        }
    }

    #[test]
    fn aggregate_examples() {
        let mut s = server(1);
        s.w_global = ModelVector::from_vec(vec![2.0]);
        s.aggregate(&ModelVector::from_vec(vec![9.0]), 0.0).unwrap();
        assert_eq!(s.w_global[0], 2.0);
        s.aggregate(&ModelVector::from_vec(vec![9.0]), 1.0).unwrap();
        assert_eq!(s.w_global[0], 9.0);
        s.w_global = ModelVector::from_vec(vec![0.0]);
        s.aggregate(&ModelVector::from_vec(vec![4.0]), 0.25).unwrap();
        assert_eq!(s.w_global[0], 1.0);
        assert_eq!(s.t, 3);
    }

    #[test]
    fn config_validation() {
        assert!(MixingConfig::default().validate().is_ok());
        assert!(MixingConfig { beta_min: 0.0, ..Default::default() }.validate().is_err());
        assert!(MixingConfig { beta_min: 0.5, beta_max: 0.4, ..Default::default() }.validate().is_err());
    }
}
