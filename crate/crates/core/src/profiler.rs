//! Online profiling of the gradient-coherence constants and the
//! synchronized end-of-run phase producing `F̂*`, `F̂(0)` and `ζ̂`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{local_risk, minibatch_gradient, FairnessWeights, LossModel, ModelVector, TrainingExample};

/// What one coworker reports in the synchronized profiling phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoworkerProfile {
    pub f0: f64,
    pub f_t: f64,
    /// `None` when the global model did not move.
    pub zeta_hat: Option<f64>,
}

/// Running sums collected by the server during a run.
#[derive(Debug, Clone)]
pub struct ProfilingLog {
    pub g_hat_sum: ModelVector,
    pub g_hat_norm_sum: f64,
    pub g_hat_sqnorm_sum: f64,
    pub local_grad_sum: ModelVector,
    pub samples: u64,
    pub w0: ModelVector,
    pub w_t: Option<ModelVector>,
    pub coworkers: Vec<CoworkerProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimates {
    pub samples: u64,
    pub c_hat: Option<f64>,
    pub gamma_hat: Option<f64>,
    pub a_hat: Option<f64>,
    pub k0: Option<f64>,
    pub zeta_hat: Option<f64>,
    pub f_star_hat: f64,
    pub f0_hat: f64,
    /// `⟨Ḡ, ∇F̂⟩ > 0`.
    pub feasible_inner_product: bool,
    /// `k₀ ≥ 0`.
    pub feasible_k0: bool,
    /// Non-negative variance surplus.
    pub feasible_variance: bool,
    pub g_bar_dot_grad: f64,
    pub g_bar_norm: f64,
    pub grad_hat_sqnorm: f64,
    pub g_hat_norm_mean: f64,
    pub g_hat_sqnorm_mean: f64,
}

impl ParameterEstimates {
    pub fn feasible(&self) -> bool {
        self.feasible_inner_product && self.feasible_k0 && self.feasible_variance
    }
}

impl ProfilingLog {
    pub fn new(w0: ModelVector) -> Self {
        let dim = w0.dim();
        ProfilingLog {
            g_hat_sum: ModelVector::zeros(dim),
            g_hat_norm_sum: 0.0,
            g_hat_sqnorm_sum: 0.0,
            local_grad_sum: ModelVector::zeros(dim),
            samples: 0,
            w0,
            w_t: None,
            coworkers: Vec::new(),
        }
    }

    /// `g_hat = w̄(t) − w_k(t+1)`; `local_grad` is the sender's last stochastic gradient.
    pub fn record_aggregation(&mut self, g_hat: &ModelVector, local_grad: &ModelVector) -> Result<()> {
        self.g_hat_sum.ensure_dim(g_hat)?;
        self.local_grad_sum.ensure_dim(local_grad)?;
        if !g_hat.is_finite() || !local_grad.is_finite() {
            return Err(Error::domain("non-finite profiling sample"));
        }
        self.g_hat_sum.axpy(1.0, g_hat);
        let sq = g_hat.sq_norm();
        self.g_hat_norm_sum += sq.sqrt();
        self.g_hat_sqnorm_sum += sq;
        self.local_grad_sum.axpy(1.0, local_grad);
        self.samples += 1;
        Ok(())
    }

    pub fn g_hat_mean(&self) -> ModelVector {
        self.g_hat_sum.scale(1.0 / self.samples.max(1) as f64)
    }

    pub fn g_hat_norm_mean(&self) -> f64 {
        self.g_hat_norm_sum / self.samples.max(1) as f64
    }

    pub fn g_hat_sqnorm_mean(&self) -> f64 {
        self.g_hat_sqnorm_sum / self.samples.max(1) as f64
    }

    pub fn grad_hat(&self) -> ModelVector {
        self.local_grad_sum.scale(1.0 / self.samples.max(1) as f64)
    }

    /// Runs the synchronized phase for one coworker: risks at `w̄(0)` and
    /// `w̄(T)` over its data, and the secant ratio of stochastic gradients
    /// at `w_k(T)` and `w̄(0)` evaluated on the same mini-batch.
    pub fn profile_coworker(
        &mut self,
        model: &LossModel,
        w_t: &ModelVector,
        w_k_t: &ModelVector,
        data: &[TrainingExample],
        batch: &[TrainingExample],
    ) -> Result<CoworkerProfile> {
        let f0 = local_risk(model, &self.w0, data)?;
        let f_t = local_risk(model, w_t, data)?;
        let denom = w_t.sub(&self.w0).norm();
        let zeta_hat = if denom > 0.0 {
            let g_t = minibatch_gradient(model, w_k_t, batch)?;
            let g_0 = minibatch_gradient(model, &self.w0, batch)?;
            Some(g_t.sub(&g_0).norm() / denom)
        } else {
            None
        };
        let p = CoworkerProfile { f0, f_t, zeta_hat };
        self.w_t = Some(w_t.clone());
        self.coworkers.push(p);
        Ok(p)
    }

    pub fn finalize(&self, lambdas_final: &FairnessWeights) -> Result<ParameterEstimates> {
        if self.samples == 0 {
            return Err(Error::domain("no aggregations were recorded"));
        }
        if self.coworkers.len() != lambdas_final.len() {
            return Err(Error::domain(format!(
                "{} coworker profiles for {} fairness weights",
                self.coworkers.len(),
                lambdas_final.len()
            )));
        }
        let lam = lambdas_final.as_slice();
        let f_star_hat = self.coworkers.iter().zip(lam).map(|(p, l)| l * p.f_t).sum();
        let f0_hat = self.coworkers.iter().zip(lam).map(|(p, l)| l * p.f0).sum();
        let zeta_hat = self
            .coworkers
            .iter()
            .map(|p| p.zeta_hat)
            .try_fold(0.0f64, |acc, z| z.map(|z| acc.max(z)));

        let g_bar = self.g_hat_mean();
        let grad = self.grad_hat();
        let dot = g_bar.dot(&grad);
        let grad_sq = grad.sq_norm();
        let g_bar_norm = g_bar.norm();
        let norm_mean = self.g_hat_norm_mean();
        let sq_mean = self.g_hat_sqnorm_mean();
        let surplus = sq_mean - norm_mean * norm_mean - grad_sq;

        let feasible_inner_product = dot > 0.0 && grad_sq > 0.0;
        let k0 = feasible_inner_product.then(|| (g_bar_norm * grad_sq.sqrt() / dot - 1.0).max(0.0));
        // Cauchy-Schwarz makes k₀ ≥ 0 up to rounding; rounding is clipped above.
        let feasible_k0 = feasible_inner_product
            && g_bar_norm * grad_sq.sqrt() / dot - 1.0 >= -1e-12;
        let feasible_variance = surplus >= 0.0;
        let coherent = feasible_inner_product && feasible_k0;
        let all = coherent && feasible_variance;

        let c_hat = coherent.then(|| dot / grad_sq);
        let gamma_hat = match (c_hat, k0) {
            (Some(c), Some(k0)) => Some((1.0 + k0) * c),
            _ => None,
        };
        Ok(ParameterEstimates {
            samples: self.samples,
            c_hat,
            gamma_hat,
            a_hat: all.then_some(surplus),
            k0: if coherent { k0 } else { None },
            zeta_hat,
            f_star_hat,
            f0_hat,
            feasible_inner_product,
            feasible_k0,
            feasible_variance,
            g_bar_dot_grad: dot,
            g_bar_norm,
            grad_hat_sqnorm: grad_sq,
            g_hat_norm_mean: norm_mean,
            g_hat_sqnorm_mean: sq_mean,
        })
    }
}
