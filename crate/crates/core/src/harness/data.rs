//! Synthetic data shards and arrival-trace files.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::config::{ExperimentConfig, PartitionKind};
use crate::error::{Error, Result};
use crate::model::{LossKind, ModelVector, TrainingExample};
use crate::rng::{global_stream, stream, Purpose, SimRng};

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub shards: Vec<Vec<TrainingExample>>,
    /// Class index of every example, parallel to `shards`.
    pub classes: Vec<Vec<usize>>,
    /// Ground-truth regression weights (quadratic models only).
    pub w_true: Option<ModelVector>,
}

fn gaussian_vec(rng: &mut SimRng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| { let z: f64 = StandardNormal.sample(rng); std * z })
        .collect::<Vec<f64>>()
}

/// Classes coworker `k` may draw from under the configured partition.
pub fn allowed_classes(partition: PartitionKind, classes: usize, per: usize, k: usize) -> Result<Vec<usize>> {
    match partition {
        PartitionKind::Iid => Ok((0..classes).collect()),
        PartitionKind::LabelSkew => {
            if per == 0 || per > classes {
                return Err(Error::config(
                    "data.classes_per_coworker",
                    format!("{per} classes per coworker but only {classes} classes"),
                ));
            }
            Ok((0..per).map(|j| (k * per + j) % classes).collect())
        }
    }
}

pub fn generate_data(cfg: &ExperimentConfig) -> Result<GeneratedData> {
    let d = &cfg.data;
    let dim = cfg.model.dim;
    let seed = d.seed.unwrap_or(cfg.sim.seed);
    let counts = cfg.per(&d.examples_per_coworker, "data.examples_per_coworker")?;
    let mut global = global_stream(seed, Purpose::Data);
    let noise = Normal::new(0.0, d.noise_std).map_err(|e| Error::config("data.noise_std", e.to_string()))?;

    let (centers, w_true) = match cfg.model.kind {
        LossKind::QuadraticRegression => {
            let centers: Vec<Vec<f64>> =
                (0..d.classes).map(|_| gaussian_vec(&mut global, dim, d.cluster_spread)).collect();
            let w_true = ModelVector::from_vec(gaussian_vec(&mut global, dim, 1.0));
            (centers, Some(w_true))
        }
        LossKind::LogisticBinary => {
            let mut u = gaussian_vec(&mut global, dim, 1.0);
            let n = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            u.iter_mut().for_each(|v| *v *= d.cluster_spread / n);
            let neg: Vec<f64> = u.iter().map(|v| -v).collect();
            (vec![neg, u], None)
        }
    };

    let mut shards = Vec::with_capacity(cfg.k());
    let mut classes = Vec::with_capacity(cfg.k());
    for (k, &n) in counts.iter().enumerate() {
        let allowed = allowed_classes(d.partition, d.classes, d.classes_per_coworker, k)?;
        let mut rng = stream(seed, k, Purpose::Data);
        let mut shard = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let class = allowed[rng.random_range(0..allowed.len())];
            let jitter = gaussian_vec(&mut rng, dim, d.feature_std);
            let x: Vec<f64> = centers[class].iter().zip(&jitter).map(|(c, j)| c + j).collect();
            let y = match &w_true {
                Some(w) => {
                    let clean: f64 = x.iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
                    clean + noise.sample(&mut rng)
                }
                None => class as f64,
            };
            shard.push(TrainingExample::scalar(x, y));
            labels.push(class);
        }
        shards.push(shard);
        classes.push(labels);
    }
    Ok(GeneratedData { shards, classes, w_true })
}

/// Reads `time,x1..xd,y` records without a header row.
pub fn read_trace(path: &Path, dim: usize) -> Result<Vec<(f64, TrainingExample)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != dim + 2 {
            return Err(Error::Parse(format!(
                "{}:{}: expected {} fields, got {}",
                path.display(),
                line + 1,
                dim + 2,
                rec.len()
            )));
        }
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| {
                    Error::Parse(format!("{}:{}: `{f}`: {e}", path.display(), line + 1))
                })
            })
            .collect::<Result<_>>()?;
        out.push((vals[0], TrainingExample::scalar(vals[1..=dim].to_vec(), vals[dim + 1])));
    }
    Ok(out)
}
