#![allow(dead_code)]

use afafed_core::model::{local_gradient, local_risk};
use afafed_core::{LossModel, ModelVector, TrainingExample};

/// Central differences with step `1e-6·(1+|w_j|)`.
pub fn fd_gradient(model: &LossModel, w: &ModelVector, data: &[TrainingExample]) -> ModelVector {
    let mut g = vec![0.0; w.dim()];
    for j in 0..w.dim() {
        let h = 1e-6 * (1.0 + w[j].abs());
        let mut plus = w.clone();
        plus.as_mut_slice()[j] += h;
        let mut minus = w.clone();
        minus.as_mut_slice()[j] -= h;
        let fp = local_risk(model, &plus, data).unwrap();
        let fm = local_risk(model, &minus, data).unwrap();
        g[j] = (fp - fm) / ((w[j] + h) - (w[j] - h));
    }
    ModelVector::from_vec(g)
}

/// `‖g − g_fd‖ / max(‖g‖, 1e-3)`.
pub fn fd_relative_error(model: &LossModel, w: &ModelVector, data: &[TrainingExample]) -> f64 {
    let g = local_gradient(model, w, data).unwrap();
    let fd = fd_gradient(model, w, data);
    g.sub(&fd).norm() / g.norm().max(1e-3)
}
