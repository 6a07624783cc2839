//! Loss models, empirical risks and fairness coefficients.
//!
//! Every function here is pure. Risks and gradients are empirical averages
//! over a slice of [`TrainingExample`]s; the global risk is the
//! fairness-weighted mixture of per-coworker risks.

use std::fmt;
use std::ops::Index;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense model weight vector of fixed dimension.
#[derive(Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelVector(Vec<f64>);

impl fmt::Debug for ModelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl ModelVector {
    pub fn zeros(dim: usize) -> Self {
        ModelVector(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ModelVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn ensure_dim(&self, other: &ModelVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }

    pub fn dot(&self, other: &ModelVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ModelVector) -> ModelVector {
        debug_assert_eq!(self.dim(), other.dim());
        ModelVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &ModelVector) -> ModelVector {
        debug_assert_eq!(self.dim(), other.dim());
        ModelVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, factor: f64) -> ModelVector {
        ModelVector(self.0.iter().map(|v| v * factor).collect())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelVector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    /// Squared Euclidean distance to `other`.
    pub fn sq_dist(&self, other: &ModelVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl Index<usize> for ModelVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<Vec<f64>> for ModelVector {
    fn from(v: Vec<f64>) -> Self {
        ModelVector(v)
    }
}

/// One labelled example `(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl TrainingExample {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        TrainingExample { x, y }
    }

    /// Scalar label shortcut for single-output models.
    pub fn scalar(x: Vec<f64>, y: f64) -> Self {
        TrainingExample { x, y: vec![y] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `½(y − wᵀx)²`
    QuadraticRegression,
    /// Cross-entropy of `σ(wᵀx)` against a label in `{0, 1}`.
    LogisticBinary,
}

/// A linear model paired with a per-example loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub kind: LossKind,
    pub dim: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl LossModel {
    pub fn new(kind: LossKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("model dimension must be positive"));
        }
        Ok(LossModel { kind, dim })
    }

    pub fn quadratic(dim: usize) -> Self {
        LossModel {
            kind: LossKind::QuadraticRegression,
            dim,
        }
    }

    pub fn logistic(dim: usize) -> Self {
        LossModel {
            kind: LossKind::LogisticBinary,
            dim,
        }
    }

    fn check(&self, w: &ModelVector, data: &[TrainingExample]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::domain("empty data set"));
        }
        if w.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: w.dim(),
            });
        }
        for ex in data {
            if ex.x.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: ex.x.len(),
                });
            }
            if ex.y.len() != 1 {
                return Err(Error::DimensionMismatch {
                    expected: 1,
                    got: ex.y.len(),
                });
            }
        }
        Ok(())
    }

    fn linear(w: &ModelVector, x: &[f64]) -> f64 {
        w.as_slice().iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Per-example loss; inputs are assumed validated.
    pub fn example_loss(&self, w: &ModelVector, ex: &TrainingExample) -> f64 {
        let z = Self::linear(w, &ex.x);
        let y = ex.y[0];
        match self.kind {
            LossKind::QuadraticRegression => 0.5 * (y - z) * (y - z),
            LossKind::LogisticBinary => softplus(z) - y * z,
        }
    }

    /// Adds `scale * ∇ℓ(ex, w)` to `out`.
    fn accumulate_gradient(&self, w: &ModelVector, ex: &TrainingExample, scale: f64, out: &mut [f64]) {
        let z = Self::linear(w, &ex.x);
        let y = ex.y[0];
        let residual = match self.kind {
            LossKind::QuadraticRegression => z - y,
            LossKind::LogisticBinary => sigmoid(z) - y,
        };
        let coeff = scale * residual;
        for (o, xi) in out.iter_mut().zip(&ex.x) {
            *o += coeff * xi;
        }
    }
}

/// Empirical risk `F_k(w)` of one data set.
pub fn local_risk(model: &LossModel, w: &ModelVector, data: &[TrainingExample]) -> Result<f64> {
    model.check(w, data)?;
    let sum: f64 = data.iter().map(|ex| model.example_loss(w, ex)).sum();
    let risk = sum / data.len() as f64;
    if !risk.is_finite() {
        return Err(Error::domain("risk is not finite"));
    }
    Ok(risk)
}

/// Gradient of [`local_risk`] with respect to `w`.
pub fn local_gradient(
    model: &LossModel,
    w: &ModelVector,
    data: &[TrainingExample],
) -> Result<ModelVector> {
    model.check(w, data)?;
    let mut out = vec![0.0; model.dim];
    let scale = 1.0 / data.len() as f64;
    for ex in data {
        model.accumulate_gradient(w, ex, scale, &mut out);
    }
    let g = ModelVector(out);
    if !g.is_finite() {
        return Err(Error::domain("gradient is not finite"));
    }
    Ok(g)
}

/// Stochastic gradient over a sampled mini-batch. Same computation as
/// [`local_gradient`], restricted to the batch.
pub fn minibatch_gradient(
    model: &LossModel,
    w: &ModelVector,
    batch: &[TrainingExample],
) -> Result<ModelVector> {
    local_gradient(model, w, batch)
}

fn check_weights<S: AsRef<[TrainingExample]>>(shards: &[S], weights: &FairnessWeights) -> Result<()> {
    if shards.len() != weights.len() {
        return Err(Error::domain(format!(
            "{} shards but {} fairness weights",
            shards.len(),
            weights.len()
        )));
    }
    Ok(())
}

/// `F(w) = Σ_k λ_k F_k(w)`.
pub fn global_risk<S: AsRef<[TrainingExample]>>(
    model: &LossModel,
    w: &ModelVector,
    shards: &[S],
    weights: &FairnessWeights,
) -> Result<f64> {
    check_weights(shards, weights)?;
    let mut total = 0.0;
    for (shard, &lambda) in shards.iter().zip(weights.as_slice()) {
        total += lambda * local_risk(model, w, shard.as_ref())?;
    }
    Ok(total)
}

/// `∇F(w) = Σ_k λ_k ∇F_k(w)`.
pub fn global_gradient<S: AsRef<[TrainingExample]>>(
    model: &LossModel,
    w: &ModelVector,
    shards: &[S],
    weights: &FairnessWeights,
) -> Result<ModelVector> {
    check_weights(shards, weights)?;
    let mut total = ModelVector::zeros(model.dim);
    for (shard, &lambda) in shards.iter().zip(weights.as_slice()) {
        total.axpy(lambda, &local_gradient(model, w, shard.as_ref())?);
    }
    Ok(total)
}

/// Jain's fairness index `(Σλ)² / (K Σλ²)`; lies in `[1/K, 1]` for non-negative input.
pub fn jain_fairness_index(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::domain("no fairness weights"));
    }
    if weights.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::domain("fairness weights must be finite and non-negative"));
    }
    let sum: f64 = weights.iter().sum();
    let sq: f64 = weights.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        return Err(Error::domain("all fairness weights are zero"));
    }
    Ok(sum * sum / (weights.len() as f64 * sq))
}

/// Fairness coefficients `{λ_k}` on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FairnessWeights(Vec<f64>);

impl FairnessWeights {
    pub fn uniform(k: usize) -> Self {
        FairnessWeights(vec![1.0 / k as f64; k])
    }

    /// Normalizes arbitrary non-negative weights to unit sum.
    pub fn normalized(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::domain("no fairness weights"));
        }
        if raw.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::domain("fairness weights must be finite and non-negative"));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::domain("fairness weights sum to zero"));
        }
        Ok(FairnessWeights(raw.into_iter().map(|v| v / sum).collect()))
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut v = vec![0.0; k];
        v[index] = 1.0;
        FairnessWeights(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }

    /// Multiplies `λ_k` by `factor` and renormalizes the whole set.
    pub fn scale_and_renormalize(&mut self, k: usize, factor: f64) -> Result<()> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::domain(format!("invalid fairness scaling factor {factor}")));
        }
        self.0[k] *= factor;
        let sum: f64 = self.0.iter().sum();
        for v in &mut self.0 {
            *v /= sum;
        }
        Ok(())
    }

    pub fn fairness_index(&self) -> f64 {
        jain_fairness_index(&self.0).expect("simplex weights are never all zero")
    }

    /// Order-sensitive digest used in metrics rows.
    pub fn checksum(&self) -> f64 {
        self.0
            .iter()
            .enumerate()
            .map(|(i, v)| (i + 1) as f64 * v)
            .sum()
    }
}

/// Closed-form quantities for the quadratic-regression loss.
pub mod quadratic {
    use super::*;

    fn gram(data: &[TrainingExample], dim: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        let n = data.len() as f64;
        for ex in data {
            let x = DVector::from_column_slice(&ex.x);
            h += &x * x.transpose() / n;
            b += &x * (ex.y[0] / n);
        }
        (h, b)
    }

    /// Hessian `(1/n) Σ x xᵀ` of the local quadratic risk.
    pub fn hessian(data: &[TrainingExample], dim: usize) -> DMatrix<f64> {
        gram(data, dim).0
    }

    fn lambda_max(h: DMatrix<f64>) -> f64 {
        h.symmetric_eigenvalues().iter().cloned().fold(0.0, f64::max)
    }

    /// Smoothness constant of one shard: largest Hessian eigenvalue.
    pub fn smoothness(data: &[TrainingExample], dim: usize) -> f64 {
        lambda_max(hessian(data, dim))
    }

    /// A common smoothness constant valid for every shard.
    pub fn smoothness_all<S: AsRef<[TrainingExample]>>(shards: &[S], dim: usize) -> f64 {
        shards
            .iter()
            .map(|s| smoothness(s.as_ref(), dim))
            .fold(0.0, f64::max)
    }

    /// Exact minimizer and minimum of the weighted global quadratic risk.
    pub fn global_minimum<S: AsRef<[TrainingExample]>>(
        model: &LossModel,
        shards: &[S],
        weights: &FairnessWeights,
    ) -> Result<(ModelVector, f64)> {
        if model.kind != LossKind::QuadraticRegression {
            return Err(Error::domain("closed-form minimum requires the quadratic loss"));
        }
        check_weights(shards, weights)?;
        let dim = model.dim;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        for (shard, &lambda) in shards.iter().zip(weights.as_slice()) {
            let (hk, bk) = gram(shard.as_ref(), dim);
            h += hk * lambda;
            b += bk * lambda;
        }
        let solution = h
            .clone()
            .cholesky()
            .map(|c| c.solve(&b))
            .or_else(|| h.lu().solve(&b))
            .ok_or_else(|| Error::domain("singular Hessian; minimizer is not unique"))?;
        let w_star = ModelVector::from_vec(solution.iter().cloned().collect());
        let f_star = global_risk(model, &w_star, shards, weights)?;
        Ok((w_star, f_star))
    }
}
