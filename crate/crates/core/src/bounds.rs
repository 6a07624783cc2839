//! Convergence-bound calculator: admissible mixing parameter, constant,
//! clipped and scaled bounds, ensemble averages and the loss scaling law.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    pub c: f64,
    pub gamma: f64,
    pub a: f64,
    pub zeta: f64,
    pub f0: f64,
    pub f_star: f64,
    pub epsilon: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub t: u64,
    #[serde(default = "one")]
    pub sigma2_bar: f64,
    #[serde(default = "one")]
    pub i_bar: f64,
    #[serde(default = "one")]
    pub i2_bar: f64,
    #[serde(default)]
    pub p_loss_bar: f64,
    #[serde(default = "one")]
    pub c0: f64,
    #[serde(default = "one")]
    pub gamma0: f64,
    #[serde(default)]
    pub a0: f64,
}

/// Scaled bound and the admissible `β_MAX` under the scaled constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledBound {
    pub bound: f64,
    pub beta_max_admissible: f64,
}

fn check_core(c: f64, gamma: f64, a: f64, zeta: f64, epsilon: f64) -> Result<()> {
    if !(zeta > 0.0 && zeta.is_finite()) {
        return Err(Error::domain(format!("zeta must be positive, got {zeta}")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::domain(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::domain(format!("C must be positive, got {c}")));
    }
    if !(gamma >= c) {
        return Err(Error::domain(format!("Gamma ({gamma}) must be at least C ({c})")));
    }
    if !(a >= 0.0) {
        return Err(Error::domain(format!("A must be non-negative, got {a}")));
    }
    Ok(())
}

impl BoundInputs {
    fn check_gap(&self) -> Result<f64> {
        if self.t < 1 {
            return Err(Error::domain("T must be at least 1"));
        }
        let gap = self.f0 - self.f_star;
        if !(gap >= 0.0) {
            return Err(Error::domain(format!("F0 ({}) is below F* ({})", self.f0, self.f_star)));
        }
        Ok(gap)
    }
}

fn admissible(c: f64, gamma: f64, zeta: f64, epsilon: f64) -> f64 {
    2.0 * c * epsilon / (zeta * (1.0 + gamma * gamma))
}

/// `2Cε / (ζ(1 + Γ²))`.
pub fn beta_max_admissible(inp: &BoundInputs) -> Result<f64> {
    check_core(inp.c, inp.gamma, inp.a, inp.zeta, inp.epsilon)?;
    Ok(admissible(inp.c, inp.gamma, inp.zeta, inp.epsilon))
}

#[allow(clippy::too_many_arguments)]
fn two_term(gap: f64, c: f64, eps: f64, t: u64, beta_lo: f64, a: f64, zeta: f64, beta_hi: f64) -> f64 {
    let denom = c * (1.0 - eps);
    gap / (denom * beta_lo * t as f64) + a * zeta * beta_hi * beta_hi / (2.0 * denom * beta_lo)
}

/// Constant-β bound; refuses inadmissible β.
pub fn bound_constant_beta(inp: &BoundInputs, beta: f64) -> Result<f64> {
    let adm = beta_max_admissible(inp)?;
    let gap = inp.check_gap()?;
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::domain(format!("beta must lie in (0, 1], got {beta}")));
    }
    if beta > adm * (1.0 + 1e-12) {
        return Err(Error::domain(format!(
            "beta = {beta} exceeds the admissible maximum {adm}"
        )));
    }
    Ok(two_term(gap, inp.c, inp.epsilon, inp.t, beta, inp.a, inp.zeta, beta))
}

/// Bound for β clipped to `[β_MIN, β_MAX]` with `β_MIN > 0`.
pub fn bound_clipped_beta(inp: &BoundInputs) -> Result<f64> {
    check_core(inp.c, inp.gamma, inp.a, inp.zeta, inp.epsilon)?;
    let gap = inp.check_gap()?;
    if !(inp.beta_min > 0.0) {
        return Err(Error::domain("beta_min must be positive"));
    }
    if !(inp.beta_min <= inp.beta_max) {
        return Err(Error::domain("beta_min exceeds beta_max"));
    }
    Ok(two_term(gap, inp.c, inp.epsilon, inp.t, inp.beta_min, inp.a, inp.zeta, inp.beta_max))
}

/// Clipped bound after substituting `C = C₀Ī`, `Γ = Γ₀Ī`, `A = A₀Σ̄²Ī²`.
pub fn bound_scaled(inp: &BoundInputs) -> Result<ScaledBound> {
    if !(inp.i_bar > 0.0) {
        return Err(Error::domain("I_bar must be positive"));
    }
    if !(inp.sigma2_bar >= 0.0) {
        return Err(Error::domain("sigma2_bar must be non-negative"));
    }
    if inp.i2_bar < inp.i_bar * inp.i_bar * (1.0 - 1e-12) {
        return Err(Error::domain(format!(
            "second moment {} below squared mean {} (violates Jensen)",
            inp.i2_bar,
            inp.i_bar * inp.i_bar
        )));
    }
    let scaled = BoundInputs {
        c: inp.c0 * inp.i_bar,
        gamma: inp.gamma0 * inp.i_bar,
        a: inp.a0 * inp.sigma2_bar * inp.i2_bar,
        ..*inp
    };
    let bound = bound_clipped_beta(&scaled)?;
    Ok(ScaledBound {
        bound,
        beta_max_admissible: admissible(scaled.c, scaled.gamma, scaled.zeta, scaled.epsilon),
    })
}

/// Per-coworker `(P_k, Σ_k², E{Iter_k}, E{Iter_k²})` to `(Σ̄², Ī, Ī²)`.
pub fn ensemble_averages(per_coworker: &[(f64, f64, f64, f64)]) -> Result<(f64, f64, f64)> {
    let p_sum: f64 = per_coworker.iter().map(|c| c.0).sum();
    if (p_sum - 1.0).abs() > 1e-9 || per_coworker.iter().any(|c| c.0 < 0.0) {
        return Err(Error::domain(format!("access probabilities sum to {p_sum}, not 1")));
    }
    let mut out = (0.0, 0.0, 0.0);
    for &(p, s2, m, m2) in per_coworker {
        out.0 += p * s2;
        out.1 += p * m;
        out.2 += p * m2;
    }
    Ok(out)
}

/// `(1 − P̄_loss)·N`.
pub fn effective_t(p_loss_bar: f64, n_total: u64) -> f64 {
    (1.0 - p_loss_bar) * n_total as f64
}

/// `σ₁²/|MB| + σ₂²`.
pub fn variance_bound_sigma_k(sigma1_sq: f64, mb_size: u64, sigma2_sq: f64) -> Result<f64> {
    if mb_size < 1 {
        return Err(Error::domain("mini-batch size must be at least 1"));
    }
    Ok(sigma1_sq / mb_size as f64 + sigma2_sq)
}
