//! Metrics rows, per-run summaries and their on-disk formats.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiler::ParameterEstimates;

pub const METRICS_HEADER: [&str; 9] = [
    "t",
    "time",
    "sender",
    "age",
    "beta",
    "fi",
    "lambda_checksum",
    "global_risk",
    "grad_sqnorm",
];

/// One accepted aggregation. Risk columns are empty when not evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub t: u64,
    pub time: f64,
    pub sender: usize,
    pub age: u64,
    pub beta: f64,
    pub fi: f64,
    pub lambda_checksum: f64,
    pub global_risk: Option<f64>,
    pub grad_sqnorm: Option<f64>,
}

impl MetricsRow {
    fn fields(&self) -> [String; 9] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.t.to_string(),
            self.time.to_string(),
            self.sender.to_string(),
            self.age.to_string(),
            self.beta.to_string(),
            self.fi.to_string(),
            self.lambda_checksum.to_string(),
            opt(self.global_risk),
            opt(self.grad_sqnorm),
        ]
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoworkerSummary {
    pub k: usize,
    pub attempts: u64,
    pub drops: u64,
    pub accepted: u64,
    pub p_k: f64,
    pub iterations: u64,
    pub clusters: u64,
    pub stalls_pre_warmup: u64,
    pub stalls_post_warmup: u64,
    pub timer_expiries: u64,
    pub lambda: f64,
    pub mu: f64,
    pub mu_bar: f64,
}

pub fn write_coworkers_csv(path: &Path, rows: &[CoworkerSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-run summary written as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub termination: String,
    pub aggregations: u64,
    pub uplink_attempts: u64,
    pub drops: u64,
    pub events: u64,
    pub final_time: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub initial_risk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_risk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub initial_grad_sqnorm: Option<f64>,
    /// Average of `‖∇F(w̄(t))‖²` over `t = 0..T-1` (evaluated points only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_grad_sqnorm: Option<f64>,
    pub access_probabilities: Vec<f64>,
    pub i_bar: f64,
    pub i2_bar: f64,
    pub stalls_pre_warmup: u64,
    pub stalls_post_warmup: u64,
    pub fairness_index: f64,
    pub lambdas: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub estimates: Option<ParameterEstimates>,
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}
