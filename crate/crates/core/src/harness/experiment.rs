//! Building simulations from configs, running them, and writing artifacts.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use toml::Value;

use super::config::{resolve_value, set_dotted, ArrivalsKindConfig, ExperimentConfig};
use super::data::{generate_data, read_trace, GeneratedData};
use super::metrics::{
    write_coworkers_csv, write_metrics_csv, write_toml, CoworkerSummary, MetricsRow, RunSummary,
};
use crate::error::{Error, Result};
use crate::model::{global_gradient, global_risk, jain_fairness_index, LossModel, ModelVector, TrainingExample};
use crate::network::{
    check_outcome, ArrivalKind, ComputeModel, CoworkerSetup, LinkModel, RateDist, RunOutcome,
    Simulation, SimulationParams,
};
use crate::profiler::{ParameterEstimates, ProfilingLog};
use crate::rng::{stream, Purpose};

/// A config turned into concrete shards and simulation parameters.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub data: GeneratedData,
    pub params: SimulationParams,
    pub eval_every: usize,
}

pub fn build(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let k = cfg.k();
    let dim = cfg.model.dim;
    let model = LossModel::new(cfg.model.kind, dim)?;
    let mut data = generate_data(cfg)?;

    let p_loss = cfg.per(&cfg.link.p_loss, "link.p_loss")?;
    let rates = cfg.per(&cfg.link.rate, "link.rate")?;
    let speeds = cfg.per(&cfg.compute.speed, "compute.speed")?;
    let caps = cfg.per(&cfg.buffer.capacity, "buffer.capacity")?;
    let mbs = cfg.per(&cfg.buffer.minibatch_size, "buffer.minibatch_size")?;
    let payload_bits = cfg.link.payload_bits.unwrap_or_else(|| LinkModel::default_payload_bits(dim));

    let arrivals: Vec<ArrivalKind> = match cfg.arrivals.kind {
        ArrivalsKindConfig::Preload => vec![ArrivalKind::Preload; k],
        ArrivalsKindConfig::Poisson => {
            let r = cfg.arrivals.rate.as_ref().expect("validated");
            cfg.per(r, "arrivals.rate")?.into_iter().map(|rate| ArrivalKind::Poisson { rate }).collect()
        }
        ArrivalsKindConfig::Periodic => {
            let r = cfg.arrivals.interval.as_ref().expect("validated");
            cfg.per(r, "arrivals.interval")?
                .into_iter()
                .map(|interval| ArrivalKind::Periodic { interval })
                .collect()
        }
        ArrivalsKindConfig::Trace => {
            let files = cfg.arrivals.trace_files.as_ref().expect("validated");
            let mut out = Vec::with_capacity(k);
            for (i, f) in files.iter().enumerate() {
                let path = if f.is_absolute() { f.clone() } else { cfg.base_dir.join(f) };
                let records = read_trace(&path, dim)?;
                data.shards[i] = records.iter().map(|(_, e)| e.clone()).collect();
                data.classes[i] = Vec::new();
                out.push(ArrivalKind::Trace { records });
            }
            out
        }
    };

    let rate = |r: f64| {
        if cfg.link.rate_spread > 0.0 {
            RateDist::Uniform { rate: r, spread: cfg.link.rate_spread }
        } else {
            RateDist::Constant { rate: r }
        }
    };
    let coworkers = (0..k)
        .map(|i| CoworkerSetup {
            link: LinkModel { p_loss: p_loss[i], rate: rate(rates[i]), payload_bits },
            compute: ComputeModel { speed: speeds[i], cycles_per_iteration: cfg.compute.cycles_per_iteration },
            arrivals: arrivals[i].clone(),
            shard: data.shards[i].clone(),
            buffer_capacity: caps[i],
            minibatch_size: mbs[i],
        })
        .collect();
    let w0 = cfg.sim.w0.clone().map(ModelVector::from_vec).unwrap_or_else(|| ModelVector::zeros(dim));
    let params = SimulationParams {
        model,
        adaptive: cfg.adaptive,
        mixing: cfg.mixing,
        seed: cfg.sim.seed,
        w0,
        coworkers,
        max_aggregations: cfg.sim.t,
        horizon: cfg.sim.horizon,
        max_events: cfg.sim.max_events,
        timer: cfg.link.timer,
        downlink_delay: cfg.link.downlink_delay,
        safety_margin: cfg.sim.safety_margin,
    };
    Ok(Experiment { data, params, eval_every: cfg.eval.every })
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
    pub coworkers: Vec<CoworkerSummary>,
    pub estimates: Option<ParameterEstimates>,
    pub final_model: ModelVector,
    pub outcome: RunOutcome,
}

fn nonempty(shards: &[Vec<TrainingExample>]) -> bool {
    shards.iter().all(|s| !s.is_empty())
}

/// Runs a built experiment; with `profile` the server also collects the
/// profiling log and the synchronized phase runs after the engine halts.
pub fn run_built(exp: &Experiment, profile: bool) -> Result<RunArtifacts> {
    let mut sim = Simulation::new(exp.params.clone())?;
    let model = exp.params.model;
    let shards = &exp.data.shards;
    let evaluate = exp.eval_every > 0 && nonempty(shards);
    let w0 = exp.params.w0.clone();
    let (initial_risk, initial_grad) = if evaluate {
        let lam = sim.server().lambdas.clone();
        (
            Some(global_risk(&model, &w0, shards, &lam)?),
            Some(global_gradient(&model, &w0, shards, &lam)?.sq_norm()),
        )
    } else {
        (None, None)
    };

    let mut log = profile.then(|| ProfilingLog::new(w0.clone()));
    let mut rows = Vec::new();
    let mut observer = |e: &crate::network::AggregationEvent<'_>| -> Result<()> {
        let server = e.server;
        let t = e.record.t;
        let (risk, grad) = if evaluate && t.is_multiple_of(exp.eval_every as u64) {
            (
                Some(global_risk(&model, &server.w_global, shards, &server.lambdas)?),
                Some(global_gradient(&model, &server.w_global, shards, &server.lambdas)?.sq_norm()),
            )
        } else {
            (None, None)
        };
        rows.push(MetricsRow {
            t,
            time: e.time,
            sender: e.record.sender,
            age: e.record.age,
            beta: e.record.beta,
            fi: jain_fairness_index(server.lambdas.as_slice())?,
            lambda_checksum: server.lambdas.checksum(),
            global_risk: risk,
            grad_sqnorm: grad,
        });
        if let Some(log) = log.as_mut() {
            let g_hat = e.w_before.sub(&e.payload.w);
            let local = e.payload.last_grad.as_ref().ok_or_else(|| {
                Error::Engine(format!("payload from coworker {} carries no gradient", e.record.sender))
            })?;
            log.record_aggregation(&g_hat, local)?;
        }
        Ok(())
    };
    let outcome = sim.run(&mut observer)?;
    check_outcome(&outcome)?;

    let estimates = match log.as_mut() {
        Some(log) if outcome.aggregations > 0 => {
            let w_t = sim.server().w_global.clone();
            for (k, shard_k) in shards.iter().enumerate().take(sim.k()) {
                let cw = sim.coworker(k);
                let mut rng = stream(exp.params.seed, k, Purpose::Profiling);
                let batch = match cw.buffer.sample_minibatch(&mut rng) {
                    Ok(b) => b,
                    Err(_) => {
                        let shard = sim.shard(k);
                        let m = cw.buffer.minibatch_size().min(shard.len());
                        rand::seq::index::sample(&mut rng, shard.len(), m)
                            .iter()
                            .map(|i| shard[i].clone())
                            .collect()
                    }
                };
                log.profile_coworker(&model, &w_t, &cw.w, shard_k, &batch)?;
            }
            Some(log.finalize(&sim.server().lambdas)?)
        }
        _ => None,
    };

    let total = outcome.aggregations;
    let mean_grad_sqnorm = if evaluate && total > 0 {
        let mut vals: Vec<f64> = initial_grad.into_iter().collect();
        vals.extend(rows.iter().filter(|r| r.t < total).filter_map(|r| r.grad_sqnorm));
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    } else {
        None
    };
    let final_risk = if evaluate {
        Some(global_risk(&model, &sim.server().w_global, shards, &sim.server().lambdas)?)
    } else {
        None
    };
    let (i_bar, i2_bar) = outcome.iter_moments();
    let p = outcome.access_probabilities();
    let lambdas = sim.server().lambdas.as_slice().to_vec();
    let coworkers = outcome
        .stats
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let cw = sim.coworker(k);
            CoworkerSummary {
                k,
                attempts: s.attempts,
                drops: s.drops,
                accepted: s.accepted,
                p_k: p[k],
                iterations: s.iterations,
                clusters: s.clusters,
                stalls_pre_warmup: s.stalls_pre_warmup,
                stalls_post_warmup: s.stalls_post_warmup,
                timer_expiries: s.timer_expiries,
                lambda: lambdas[k],
                mu: cw.mu,
                mu_bar: cw.mu_bar,
            }
        })
        .collect();
    let summary = RunSummary {
        seed: exp.params.seed,
        termination: format!("{:?}", outcome.termination),
        aggregations: total,
        uplink_attempts: outcome.attempts(),
        drops: outcome.drops(),
        events: outcome.events,
        final_time: outcome.final_time,
        initial_risk,
        final_risk,
        initial_grad_sqnorm: initial_grad,
        mean_grad_sqnorm,
        access_probabilities: p,
        i_bar,
        i2_bar,
        stalls_pre_warmup: outcome.stats.iter().map(|s| s.stalls_pre_warmup).sum(),
        stalls_post_warmup: outcome.stats.iter().map(|s| s.stalls_post_warmup).sum(),
        fairness_index: jain_fairness_index(&lambdas)?,
        lambdas,
        estimates: estimates.clone(),
    };
    Ok(RunArtifacts {
        rows,
        summary,
        coworkers,
        estimates,
        final_model: sim.server().w_global.clone(),
        outcome,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig, profile: bool) -> Result<RunArtifacts> {
    run_built(&build(cfg)?, profile)
}

/// Writes `metrics.csv`, `summary.toml`, `coworkers.csv` and, when
/// present, `estimates.toml` into `out_dir`.
pub fn write_artifacts(art: &RunArtifacts, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &art.rows)?;
    write_toml(&out_dir.join("summary.toml"), &art.summary)?;
    write_coworkers_csv(&out_dir.join("coworkers.csv"), &art.coworkers)?;
    if let Some(est) = &art.estimates {
        write_toml(&out_dir.join("estimates.toml"), est)?;
    }
    Ok(())
}

/// One cell of a sweep grid.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub name: String,
    pub seed: u64,
    pub overrides: Vec<(String, Value)>,
    pub summary: RunSummary,
    pub dir: PathBuf,
}

fn sanitize(v: &Value) -> String {
    let s = match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Expands `[sweep]` (`seeds` plus a `grid` of dotted keys) into cells and
/// runs them in parallel, writing each cell's artifacts under `out_dir`.
pub fn run_sweep(text: &str, base_dir: &Path, out_dir: &Path, profile: bool) -> Result<Vec<SweepCell>> {
    let value = resolve_value(text)?;
    let sweep = value
        .get("sweep")
        .and_then(Value::as_table)
        .ok_or_else(|| Error::config("sweep", "missing [sweep] table"))?;
    let seeds: Vec<u64> = match sweep.get("seeds") {
        Some(Value::Array(a)) => a
            .iter()
            .map(|v| v.as_integer().filter(|i| *i >= 0).map(|i| i as u64))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::config("sweep.seeds", "must be non-negative integers"))?,
        None => vec![value
            .get("sim")
            .and_then(|s| s.get("seed"))
            .and_then(Value::as_integer)
            .unwrap_or(1) as u64],
        _ => return Err(Error::config("sweep.seeds", "must be an array")),
    };
    let mut axes: Vec<(String, Vec<Value>)> = Vec::new();
    if let Some(grid) = sweep.get("grid") {
        let grid = grid.as_table().ok_or_else(|| Error::config("sweep.grid", "must be a table"))?;
        for (key, vals) in grid {
            let vals = vals
                .as_array()
                .ok_or_else(|| Error::config(format!("sweep.grid.{key}"), "must be an array"))?;
            axes.push((key.clone(), vals.clone()));
        }
    }
    axes.sort_by(|a, b| a.0.cmp(&b.0));

    let mut combos: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for (key, vals) in &axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                vals.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    let mut cells = Vec::new();
    for combo in &combos {
        for &seed in &seeds {
            let mut name = format!("seed{seed}");
            for (k, v) in combo {
                name.push_str(&format!("__{k}={}", sanitize(v)));
            }
            cells.push((name, seed, combo.clone()));
        }
    }

    cells
        .into_par_iter()
        .map(|(name, seed, overrides)| {
            let mut v = value.clone();
            for (k, val) in &overrides {
                set_dotted(&mut v, k, val.clone())?;
            }
            set_dotted(&mut v, "sim.seed", Value::Integer(seed as i64))?;
            let cfg = ExperimentConfig::from_value(v, base_dir)?;
            let art = run_experiment(&cfg, profile)?;
            let dir = out_dir.join(&name);
            write_artifacts(&art, &dir)?;
            Ok(SweepCell { name, seed, overrides, summary: art.summary, dir })
        })
        .collect()
}
