//! Experiment configuration: TOML sections, presets, per-coworker values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::coworker::AdaptiveConfig;
use crate::error::{Error, Result};
use crate::model::LossKind;
use crate::server::{MixingConfig, DEFAULT_SAFETY_MARGIN};

/// A scalar applied to every coworker, or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerCoworker<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> PerCoworker<T> {
    /// Expands to exactly `k` values. A list may have length 1 (broadcast),
    /// `k`, or the number of categories (each entry repeated per category).
    pub fn resolve(&self, k: usize, categories: Option<&[usize]>, key: &str) -> Result<Vec<T>> {
        match self {
            PerCoworker::One(v) => Ok(vec![v.clone(); k]),
            PerCoworker::Many(vs) if vs.len() == 1 => Ok(vec![vs[0].clone(); k]),
            PerCoworker::Many(vs) if vs.len() == k => Ok(vs.clone()),
            PerCoworker::Many(vs) => match categories {
                Some(cats) if cats.len() == vs.len() => Ok(cats
                    .iter()
                    .zip(vs)
                    .flat_map(|(&n, v)| std::iter::repeat_n(v.clone(), n))
                    .collect()),
                _ => Err(Error::config(
                    key,
                    format!("expected 1, {k} or one-per-category values, got {}", vs.len()),
                )),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub k: usize,
    /// Coworker counts per category, in order; must sum to `k`.
    #[serde(default)]
    pub categories: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: LossKind,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    Iid,
    LabelSkew,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub examples_per_coworker: PerCoworker<usize>,
    pub partition: PartitionKind,
    /// Number of label classes (Gaussian clusters for regression).
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_one")]
    pub classes_per_coworker: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_f64_one")]
    pub feature_std: f64,
    /// Spread of cluster centers (regression) or class separation (logistic).
    #[serde(default = "default_f64_one")]
    pub cluster_spread: f64,
    /// Seed for data generation; defaults to the simulation seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_classes() -> usize {
    4
}
fn default_one() -> usize {
    1
}
fn default_noise() -> f64 {
    0.1
}
fn default_f64_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub p_loss: PerCoworker<f64>,
    /// Nominal uplink rate in bits per virtual-time unit.
    pub rate: PerCoworker<f64>,
    /// Relative half-width of a uniform rate law; 0 keeps rates constant.
    #[serde(default)]
    pub rate_spread: f64,
    #[serde(default)]
    pub payload_bits: Option<u64>,
    #[serde(default)]
    pub downlink_delay: f64,
    /// Timer duration; defaults to three mean round trips.
    #[serde(default)]
    pub timer: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeConfig {
    /// CPU cycles per virtual-time unit.
    pub speed: PerCoworker<f64>,
    pub cycles_per_iteration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalsKindConfig {
    Preload,
    Poisson,
    Periodic,
    Trace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalsConfig {
    pub kind: ArrivalsKindConfig,
    #[serde(default)]
    pub rate: Option<PerCoworker<f64>>,
    #[serde(default)]
    pub interval: Option<PerCoworker<f64>>,
    /// One CSV file per coworker: `time,x1..xd,y`.
    #[serde(default)]
    pub trace_files: Option<Vec<PathBuf>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferConfig {
    pub capacity: PerCoworker<usize>,
    pub minibatch_size: PerCoworker<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Stop after `t` aggregations.
    #[serde(default)]
    pub t: Option<u64>,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default = "default_max_events")]
    pub max_events: u64,
    #[serde(default = "default_margin")]
    pub safety_margin: f64,
    /// Initial global model; zeros when absent.
    #[serde(default)]
    pub w0: Option<Vec<f64>>,
}

fn default_max_events() -> u64 {
    50_000_000
}
fn default_margin() -> f64 {
    DEFAULT_SAFETY_MARGIN
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate risk and gradient every `every` aggregations; 0 disables.
    #[serde(default = "default_one")]
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { every: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology: TopologyConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub link: LinkConfig,
    pub compute: ComputeConfig,
    pub arrivals: ArrivalsConfig,
    pub buffer: BufferConfig,
    #[serde(default)]
    pub adaptive: AdaptiveConfig,
    #[serde(default)]
    pub mixing: MixingConfig,
    pub sim: SimConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Directory relative paths in the config resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub const PRESET_NAMES: [&str; 2] = ["table_a1_small", "table_a1_full"];

const PRESET_COMMON: &str = r#"
[model]
kind = "quadratic-regression"
dim = 4

[data]
examples_per_coworker = 64
partition = "iid"
classes = 4
classes_per_coworker = 1
noise_std = 0.1
feature_std = 1.0
cluster_spread = 1.0

[link]
p_loss = 0.0
rate = [100e4, 50e4, 2e4]
rate_spread = 0.0
downlink_delay = 0.0

[compute]
speed = [50e7, 25e7, 1e7]
cycles_per_iteration = 1e7

[arrivals]
kind = "poisson"
rate = [50.0, 25.0, 1.0]

[buffer]
capacity = 64
minibatch_size = 16

[adaptive]
iter_max = 30
omega_a = 2.0
omega_c = 1.0
b0 = 1.0
gamma = 0.1
eta_min = 0.01
eta_max = 0.1

[mixing]
beta_min = 0.01
beta_max = 0.5
de = 0.3
phi = { kind = "power", alpha = 0.5 }

[sim]
seed = 1
t = 500

[eval]
every = 1
"#;

/// The named preset as a TOML value.
pub fn preset(name: &str) -> Result<Value> {
    let topology = match name {
        "table_a1_small" => "[topology]\nk = 8\ncategories = [3, 3, 2]\n",
        "table_a1_full" => "[topology]\nk = 100\ncategories = [30, 40, 30]\n",
        other => {
            return Err(Error::config(
                "preset",
                format!("unknown preset `{other}`; known: {}", PRESET_NAMES.join(", ")),
            ))
        }
    };
    let text = format!("{topology}{PRESET_COMMON}");
    toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
pub fn deep_merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) => deep_merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `a.b.c = value`, creating intermediate tables.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(key, "path crosses a non-table value"))?;
        if i + 1 == parts.len() {
            table.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = table
            .entry((*part).to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    Err(Error::config(key, "empty key"))
}

/// Parses config text, applying a `preset = "..."` base if present.
pub fn resolve_value(text: &str) -> Result<Value> {
    let mut user: Value = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let preset_name = user
        .as_table_mut()
        .and_then(|t| t.remove("preset"))
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::config("preset", "must be a string"))
        })
        .transpose()?;
    match preset_name {
        Some(name) => {
            let mut base = preset(&name)?;
            deep_merge(&mut base, user);
            Ok(base)
        }
        None => Ok(user),
    }
}

impl ExperimentConfig {
    /// Deserializes and validates a resolved value (the `sweep` table is ignored).
    pub fn from_value(mut value: Value, base_dir: &Path) -> Result<Self> {
        if let Some(t) = value.as_table_mut() {
            t.remove("sweep");
        }
        let mut cfg: ExperimentConfig =
            value.try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        Self::from_value(resolve_value(text)?, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::from_value(preset(name)?, Path::new("."))
    }

    pub fn k(&self) -> usize {
        self.topology.k
    }

    pub fn categories(&self) -> Option<&[usize]> {
        self.topology.categories.as_deref()
    }

    pub fn per<T: Clone>(&self, v: &PerCoworker<T>, key: &str) -> Result<Vec<T>> {
        v.resolve(self.k(), self.categories(), key)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::config("topology.k", "must be positive"));
        }
        if let Some(cats) = self.categories() {
            if cats.iter().sum::<usize>() != k {
                return Err(Error::config("topology.categories", format!("counts must sum to k = {k}")));
            }
        }
        if self.model.dim == 0 {
            return Err(Error::config("model.dim", "must be positive"));
        }
        let d = &self.data;
        if d.classes == 0 {
            return Err(Error::config("data.classes", "must be positive"));
        }
        if self.model.kind == LossKind::LogisticBinary && d.classes != 2 {
            return Err(Error::config("data.classes", "logistic models need exactly 2 classes"));
        }
        if d.partition == PartitionKind::LabelSkew
            && (d.classes_per_coworker == 0 || d.classes_per_coworker > d.classes)
        {
            return Err(Error::config(
                "data.classes_per_coworker",
                format!("must lie in 1..={}", d.classes),
            ));
        }
        if !(d.noise_std >= 0.0 && d.feature_std >= 0.0 && d.cluster_spread >= 0.0) {
            return Err(Error::config("data", "standard deviations must be non-negative"));
        }
        for (i, n) in self.per(&d.examples_per_coworker, "data.examples_per_coworker")?.iter().enumerate() {
            if *n == 0 && self.arrivals.kind != ArrivalsKindConfig::Trace {
                return Err(Error::config("data.examples_per_coworker", format!("coworker {i} has no data")));
            }
        }
        for p in self.per(&self.link.p_loss, "link.p_loss")? {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("link.p_loss", "must lie in [0, 1]"));
            }
        }
        for r in self.per(&self.link.rate, "link.rate")? {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::config("link.rate", "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.link.rate_spread) {
            return Err(Error::config("link.rate_spread", "must lie in [0, 1)"));
        }
        for s in self.per(&self.compute.speed, "compute.speed")? {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("compute.speed", "must be positive"));
            }
        }
        if !(self.compute.cycles_per_iteration > 0.0) {
            return Err(Error::config("compute.cycles_per_iteration", "must be positive"));
        }
        match self.arrivals.kind {
            ArrivalsKindConfig::Poisson => {
                let r = self.arrivals.rate.as_ref().ok_or_else(|| Error::config("arrivals.rate", "required for poisson arrivals"))?;
                if self.per(r, "arrivals.rate")?.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::config("arrivals.rate", "must be positive"));
                }
            }
            ArrivalsKindConfig::Periodic => {
                let r = self.arrivals.interval.as_ref().ok_or_else(|| Error::config("arrivals.interval", "required for periodic arrivals"))?;
                if self.per(r, "arrivals.interval")?.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::config("arrivals.interval", "must be positive"));
                }
            }
            ArrivalsKindConfig::Trace => {
                let files = self.arrivals.trace_files.as_ref().ok_or_else(|| Error::config("arrivals.trace_files", "required for trace arrivals"))?;
                if files.len() != k {
                    return Err(Error::config("arrivals.trace_files", format!("need one file per coworker ({k})")));
                }
            }
            ArrivalsKindConfig::Preload => {}
        }
        let caps = self.per(&self.buffer.capacity, "buffer.capacity")?;
        let mbs = self.per(&self.buffer.minibatch_size, "buffer.minibatch_size")?;
        for (c, m) in caps.iter().zip(&mbs) {
            if *m == 0 || c < m {
                return Err(Error::config("buffer.capacity", "need 1 <= minibatch_size <= capacity"));
            }
        }
        self.adaptive.validate()?;
        self.mixing.validate()?;
        if !(self.sim.safety_margin >= 0.0) {
            return Err(Error::config("sim.safety_margin", "must be non-negative"));
        }
        if self.sim.t.is_none() && self.sim.horizon.is_none() {
            return Err(Error::config("sim.t", "set sim.t or sim.horizon"));
        }
        if let Some(w0) = &self.sim.w0 {
            if w0.len() != self.model.dim {
                return Err(Error::config("sim.w0", format!("expected {} entries", self.model.dim)));
            }
        }
        Ok(())
    }
}
