//! The discrete-event loop wiring coworkers, links and the server.

use rand::Rng;

use super::{
    transmit_uplink, ArrivalKind, ArrivalProcess, ComputeModel, EventKind, EventQueue, LinkModel,
};
use crate::coworker::{AdaptiveConfig, CoworkerState, UplinkPayload};
use crate::error::{Error, Result};
use crate::model::{LossModel, ModelVector, TrainingExample};
use crate::rng::{stream, Purpose, SimRng};
use crate::server::{AggregationRecord, FairnessChange, MixingConfig, ServerState};
use crate::stream::StreamBuffer;

/// Static description of one coworker.
#[derive(Debug, Clone)]
pub struct CoworkerSetup {
    pub link: LinkModel,
    pub compute: ComputeModel,
    pub arrivals: ArrivalKind,
    /// Examples synthetic arrivals draw from (and the preload content).
    pub shard: Vec<TrainingExample>,
    pub buffer_capacity: usize,
    pub minibatch_size: usize,
}

#[derive(Debug, Clone)]
pub struct SimulationParams {
    pub model: LossModel,
    pub adaptive: AdaptiveConfig,
    pub mixing: MixingConfig,
    pub seed: u64,
    pub w0: ModelVector,
    pub coworkers: Vec<CoworkerSetup>,
    /// Stop after this many accepted aggregations.
    pub max_aggregations: Option<u64>,
    /// Stop before processing any event later than this virtual time.
    pub horizon: Option<f64>,
    pub max_events: u64,
    /// Timer duration; `None` means three mean round trips.
    pub timer: Option<f64>,
    pub downlink_delay: f64,
    pub safety_margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Aggregations,
    Horizon,
    EventBudget,
    QueueEmpty,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoworkerStats {
    pub attempts: u64,
    pub drops: u64,
    pub accepted: u64,
    pub iterations: u64,
    pub clusters: u64,
    pub stalls_pre_warmup: u64,
    pub stalls_post_warmup: u64,
    pub timer_expiries: u64,
    pub abandoned_clusters: u64,
    /// Sum of cluster sizes over accepted uplinks.
    pub iter_sum: f64,
    /// Sum of squared cluster sizes over accepted uplinks.
    pub iter_sq_sum: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub termination: Termination,
    pub events: u64,
    pub final_time: f64,
    pub aggregations: u64,
    pub stats: Vec<CoworkerStats>,
}

impl RunOutcome {
    pub fn attempts(&self) -> u64 {
        self.stats.iter().map(|s| s.attempts).sum()
    }

    pub fn drops(&self) -> u64 {
        self.stats.iter().map(|s| s.drops).sum()
    }

    /// Empirical access probabilities `P_k`.
    pub fn access_probabilities(&self) -> Vec<f64> {
        let total = self.aggregations.max(1) as f64;
        self.stats.iter().map(|s| s.accepted as f64 / total).collect()
    }

    /// Empirical `(Ī, Ī²)` over accepted uplinks.
    pub fn iter_moments(&self) -> (f64, f64) {
        let total = self.aggregations.max(1) as f64;
        let s: f64 = self.stats.iter().map(|s| s.iter_sum).sum();
        let s2: f64 = self.stats.iter().map(|s| s.iter_sq_sum).sum();
        (s / total, s2 / total)
    }
}

/// Data handed to the observer after each accepted uplink.
pub struct AggregationEvent<'a> {
    pub time: f64,
    pub record: &'a AggregationRecord,
    pub payload: &'a UplinkPayload,
    /// Global model before this aggregation.
    pub w_before: &'a ModelVector,
    pub server: &'a ServerState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activity {
    Computing,
    Stalled,
    Waiting,
}

struct Node {
    state: CoworkerState,
    setup: CoworkerSetup,
    arrivals: ArrivalProcess,
    compute_rng: SimRng,
    link_rng: SimRng,
    arrival_rng: SimRng,
    activity: Activity,
    epoch: u64,
    timer_epoch: u64,
    timer: f64,
    stats: CoworkerStats,
}

pub struct Simulation {
    model: LossModel,
    adaptive: AdaptiveConfig,
    nodes: Vec<Node>,
    server: ServerState,
    queue: EventQueue,
    w0: ModelVector,
    max_aggregations: Option<u64>,
    horizon: Option<f64>,
    max_events: u64,
    downlink_delay: f64,
    events: u64,
    started: bool,
}

impl Simulation {
    pub fn new(params: SimulationParams) -> Result<Self> {
        let k = params.coworkers.len();
        if k == 0 {
            return Err(Error::config("topology.k", "need at least one coworker"));
        }
        params.adaptive.validate()?;
        params.mixing.validate()?;
        if params.w0.dim() != params.model.dim {
            return Err(Error::DimensionMismatch { expected: params.model.dim, got: params.w0.dim() });
        }
        if !(params.downlink_delay >= 0.0 && params.downlink_delay.is_finite()) {
            return Err(Error::config("link.downlink_delay", "must be non-negative"));
        }
        let mut nodes = Vec::with_capacity(k);
        for (id, setup) in params.coworkers.into_iter().enumerate() {
            setup.link.validate()?;
            setup.compute.validate()?;
            let needs_shard = !matches!(setup.arrivals, ArrivalKind::Trace { .. });
            if needs_shard && setup.shard.is_empty() {
                return Err(Error::config("data", format!("coworker {id} has an empty shard")));
            }
            let mut buffer = StreamBuffer::new(setup.buffer_capacity, setup.minibatch_size)?;
            if matches!(setup.arrivals, ArrivalKind::Preload) {
                for ex in &setup.shard {
                    buffer.admit(ex.clone());
                }
            }
            let timer = match params.timer {
                Some(t) if t > 0.0 && t.is_finite() => t,
                Some(_) => return Err(Error::config("link.timer", "must be positive")),
                None => 3.0 * (setup.link.nominal_delay() + params.downlink_delay),
            };
            let state = CoworkerState::new(id, params.w0.clone(), k, &params.adaptive, buffer);
            nodes.push(Node {
                state,
                arrivals: ArrivalProcess::new(setup.arrivals.clone())?,
                setup,
                compute_rng: stream(params.seed, id, Purpose::Compute),
                link_rng: stream(params.seed, id, Purpose::Link),
                arrival_rng: stream(params.seed, id, Purpose::Arrivals),
                activity: Activity::Waiting,
                epoch: 0,
                timer_epoch: 0,
                timer,
                stats: CoworkerStats::default(),
            });
        }
        let mut server = ServerState::new(params.w0.clone(), k, params.mixing);
        server.safety_margin = params.safety_margin;
        Ok(Simulation {
            model: params.model,
            adaptive: params.adaptive,
            nodes,
            server,
            queue: EventQueue::new(),
            w0: params.w0,
            max_aggregations: params.max_aggregations,
            horizon: params.horizon,
            max_events: params.max_events,
            downlink_delay: params.downlink_delay,
            events: 0,
            started: false,
        })
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn coworker(&self, k: usize) -> &CoworkerState {
        &self.nodes[k].state
    }

    pub fn coworkers(&self) -> impl Iterator<Item = &CoworkerState> {
        self.nodes.iter().map(|n| &n.state)
    }

    pub fn shard(&self, k: usize) -> &[TrainingExample] {
        &self.nodes[k].setup.shard
    }

    pub fn k(&self) -> usize {
        self.nodes.len()
    }

    pub fn model(&self) -> &LossModel {
        &self.model
    }

    pub fn initial_model(&self) -> &ModelVector {
        &self.w0
    }

    pub fn now(&self) -> f64 {
        self.queue.now()
    }

    /// Testing hook: overrides a coworker's state between runs.
    pub fn coworker_mut(&mut self, k: usize) -> &mut CoworkerState {
        &mut self.nodes[k].state
    }

    /// Moves the aggregation stop point; a later `run` call resumes from
    /// where the previous one halted.
    pub fn set_max_aggregations(&mut self, max: Option<u64>) {
        self.max_aggregations = max;
    }

    pub fn set_horizon(&mut self, horizon: Option<f64>) {
        self.horizon = horizon;
    }

    fn schedule_next_arrival(&mut self, k: usize) -> Result<()> {
        let node = &mut self.nodes[k];
        let shard = &node.setup.shard;
        let next = node.arrivals.next(&mut node.arrival_rng, |rng: &mut SimRng| {
            shard[rng.random_range(0..shard.len())].clone()
        });
        if let Some((time, example)) = next {
            let time = time.max(self.queue.now());
            self.queue.schedule(time, EventKind::DataArrival { k, example })?;
        }
        Ok(())
    }

    fn start_cluster(&mut self, k: usize) -> Result<()> {
        let node = &mut self.nodes[k];
        node.epoch += 1;
        node.state.cluster_progress = 0;
        self.start_iteration(k)
    }

    fn start_iteration(&mut self, k: usize) -> Result<()> {
        let now = self.queue.now();
        let node = &mut self.nodes[k];
        match node.state.run_iteration(&self.adaptive, &self.model, &mut node.compute_rng, now)? {
            Ok(_) => {
                node.activity = Activity::Computing;
                node.stats.iterations += 1;
                let done = now + node.setup.compute.iteration_time();
                let epoch = node.epoch;
                self.queue.schedule(done, EventKind::IterationDone { k, epoch })?;
            }
            Err(_) => {
                if node.activity != Activity::Stalled {
                    if node.state.buffer.has_warmed_up() {
                        node.stats.stalls_post_warmup += 1;
                    } else {
                        node.stats.stalls_pre_warmup += 1;
                    }
                }
                node.activity = Activity::Stalled;
            }
        }
        Ok(())
    }

    fn finish_cluster(&mut self, k: usize) -> Result<()> {
        let now = self.queue.now();
        let node = &mut self.nodes[k];
        let payload = node.state.finish_cluster(&self.adaptive);
        node.stats.clusters += 1;
        node.stats.attempts += 1;
        node.activity = Activity::Waiting;
        match transmit_uplink(&node.setup.link, now, &mut node.link_rng) {
            Some(at) => {
                self.queue.schedule(at, EventKind::UplinkDelivery { k, payload })?;
            }
            None => node.stats.drops += 1,
        }
        node.timer_epoch += 1;
        let deadline = now + node.timer;
        node.state.timer_deadline = Some(deadline);
        let epoch = node.timer_epoch;
        self.queue.schedule(deadline, EventKind::TimerExpiry { k, epoch })?;
        Ok(())
    }

    fn deliver_uplink(
        &mut self,
        k: usize,
        payload: UplinkPayload,
        observer: &mut dyn FnMut(&AggregationEvent<'_>) -> Result<()>,
    ) -> Result<()> {
        if payload.sender != k {
            return Err(Error::Engine(format!(
                "uplink on channel {k} carries sender {}",
                payload.sender
            )));
        }
        let now = self.queue.now();
        let w_before = self.server.w_global.clone();
        let t_before = self.server.t;
        let record = self.server.accept_uplink(&payload)?;
        if self.server.t != t_before + 1 {
            return Err(Error::Engine("global clock must advance by one per uplink".into()));
        }
        let stats = &mut self.nodes[k].stats;
        stats.accepted += 1;
        stats.iter_sum += payload.iterations as f64;
        stats.iter_sq_sum += (payload.iterations as f64).powi(2);
        observer(&AggregationEvent {
            time: now,
            record: &record,
            payload: &payload,
            w_before: &w_before,
            server: &self.server,
        })?;
        let at = now + self.downlink_delay;
        self.queue.schedule(
            at,
            EventKind::DownlinkDelivery {
                k,
                w: self.server.w_global.clone(),
                stamp: record.downlink_stamp,
            },
        )?;
        if record.fairness != FairnessChange::Unchanged {
            for j in 0..self.nodes.len() {
                self.queue.schedule(
                    at,
                    EventKind::FairnessBroadcastDelivery { k: j, lambdas: self.server.lambdas.clone() },
                )?;
            }
        }
        Ok(())
    }

    fn seed_initial_events(&mut self) -> Result<()> {
        for k in 0..self.nodes.len() {
            self.schedule_next_arrival(k)?;
        }
        for k in 0..self.nodes.len() {
            self.start_cluster(k)?;
        }
        Ok(())
    }

    /// Runs until a stop condition. The observer sees every accepted
    /// uplink right after the server has aggregated it.
    pub fn run(
        &mut self,
        observer: &mut dyn FnMut(&AggregationEvent<'_>) -> Result<()>,
    ) -> Result<RunOutcome> {
        if !self.started {
            self.started = true;
            self.seed_initial_events()?;
        }
        let termination = loop {
            if let Some(max) = self.max_aggregations {
                if self.server.t >= max {
                    break Termination::Aggregations;
                }
            }
            if self.events >= self.max_events {
                break Termination::EventBudget;
            }
            let Some(next_time) = self.queue.peek_time() else {
                break Termination::QueueEmpty;
            };
            if let Some(h) = self.horizon {
                if next_time > h {
                    break Termination::Horizon;
                }
            }
            let ev = self.queue.pop().expect("peeked event");
            self.events += 1;
            self.dispatch(ev.kind, observer)?;
        };
        Ok(RunOutcome {
            termination,
            events: self.events,
            final_time: self.queue.now(),
            aggregations: self.server.t,
            stats: self.nodes.iter().map(|n| n.stats.clone()).collect(),
        })
    }

    fn dispatch(
        &mut self,
        kind: EventKind,
        observer: &mut dyn FnMut(&AggregationEvent<'_>) -> Result<()>,
    ) -> Result<()> {
        match kind {
            EventKind::DataArrival { k, example } => {
                self.nodes[k].state.buffer.admit(example);
                self.schedule_next_arrival(k)?;
                if self.nodes[k].activity == Activity::Stalled {
                    self.start_iteration(k)?;
                }
            }
            EventKind::IterationDone { k, epoch } => {
                let node = &self.nodes[k];
                if epoch != node.epoch || node.activity != Activity::Computing {
                    return Ok(());
                }
                if node.state.cluster_progress >= node.state.iter {
                    self.finish_cluster(k)?;
                } else {
                    self.start_iteration(k)?;
                }
            }
            EventKind::UplinkDelivery { k, payload } => self.deliver_uplink(k, payload, observer)?,
            EventKind::DownlinkDelivery { k, w, stamp } => {
                let node = &mut self.nodes[k];
                if node.activity == Activity::Computing && node.state.cluster_progress > 0 {
                    node.stats.abandoned_clusters += 1;
                }
                node.state.handle_downlink(&w, stamp)?;
                node.timer_epoch += 1;
                self.start_cluster(k)?;
            }
            EventKind::FairnessBroadcastDelivery { k, lambdas } => {
                self.nodes[k].state.handle_fairness_broadcast(lambdas.get(k))?;
            }
            EventKind::TimerExpiry { k, epoch } => {
                let node = &mut self.nodes[k];
                if epoch != node.timer_epoch || node.activity != Activity::Waiting {
                    return Ok(());
                }
                node.stats.timer_expiries += 1;
                node.state.handle_timer_expiry();
                self.start_cluster(k)?;
            }
        }
        Ok(())
    }
}

/// Checks an outcome is internally consistent; used by tests and the harness.
pub fn check_outcome(outcome: &RunOutcome) -> Result<()> {
    let accepted: u64 = outcome.stats.iter().map(|s| s.accepted).sum();
    if accepted != outcome.aggregations {
        return Err(Error::Engine(format!(
            "{accepted} accepted uplinks but global clock at {}",
            outcome.aggregations
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::RateDist;
    use crate::server::Phi;

    fn setup(p_loss: f64, arrivals: ArrivalKind) -> CoworkerSetup {
        let shard: Vec<TrainingExample> = (0..8)
            .map(|i| TrainingExample::scalar(vec![1.0, i as f64 / 8.0], 0.5 * i as f64))
            .collect();
        CoworkerSetup {
            link: LinkModel { p_loss, rate: RateDist::Constant { rate: 1000.0 }, payload_bits: 256 },
            compute: ComputeModel { speed: 1e7, cycles_per_iteration: 1e6 },
            arrivals,
            shard,
            buffer_capacity: 8,
            minibatch_size: 4,
        }
    }

    fn params(k: usize, p_loss: f64, t: u64) -> SimulationParams {
        SimulationParams {
            model: LossModel::quadratic(2),
            adaptive: AdaptiveConfig { iter_max: 3, ..Default::default() },
            mixing: MixingConfig { beta_min: 0.05, beta_max: 0.9, de: 0.0, phi: Phi::Power { alpha: 0.5 } },
            seed: 42,
            w0: ModelVector::zeros(2),
            coworkers: (0..k).map(|_| setup(p_loss, ArrivalKind::Preload)).collect(),
            max_aggregations: Some(t),
            horizon: None,
            max_events: 1_000_000,
            timer: None,
            downlink_delay: 0.0,
            safety_margin: 4.0,
        }
    }

    fn noop(_: &AggregationEvent<'_>) -> Result<()> {
        Ok(())
    }

    #[test]
    fn single_aggregation_loop_bound() {
        let mut sim = Simulation::new(params(3, 0.0, 1)).unwrap();
        let out = sim.run(&mut noop).unwrap();
        assert_eq!(out.aggregations, 1);
        assert_eq!(out.termination, Termination::Aggregations);
        check_outcome(&out).unwrap();
    }

    #[test]
    fn total_loss_never_aggregates() {
        let mut p = params(2, 1.0, 5);
        p.horizon = Some(50.0);
        let mut sim = Simulation::new(p).unwrap();
        let out = sim.run(&mut noop).unwrap();
        assert_eq!(out.aggregations, 0);
        assert_eq!(out.termination, Termination::Horizon);
        for s in &out.stats {
            assert!(s.attempts > 10);
            assert_eq!(s.drops, s.attempts);
            assert!(s.timer_expiries + 1 >= s.attempts);
        }
    }

    #[test]
    fn stamps_increase_in_loss_free_runs() {
        let mut sim = Simulation::new(params(3, 0.0, 60)).unwrap();
        let mut last = [0u64; 3];
        let mut obs = |e: &AggregationEvent<'_>| {
            let k = e.record.sender;
            assert!(e.record.downlink_stamp > last[k]);
            assert_eq!(e.payload.timestamp, last[k]);
            last[k] = e.record.downlink_stamp;
            Ok(())
        };
        let out = sim.run(&mut obs).unwrap();
        assert_eq!(out.aggregations, 60);
        assert_eq!(out.access_probabilities().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn lost_payloads_are_not_resent() {
        let mut p = params(1, 0.5, 30);
        p.coworkers[0].arrivals = ArrivalKind::Poisson { rate: 50.0 };
        let mut sim = Simulation::new(p).unwrap();
        let mut seen = std::collections::HashSet::new();
        let mut obs = |e: &AggregationEvent<'_>| {
            assert!(seen.insert(e.payload.local_time), "payload delivered twice");
            Ok(())
        };
        let out = sim.run(&mut obs).unwrap();
        assert!(out.drops() > 0);
        // At most one payload can still be in flight when the run stops.
        assert!(out.attempts() - out.aggregations - out.drops() <= 1);
    }

    #[test]
    fn empty_queue_terminates() {
        let mut p = params(1, 0.0, 10);
        p.coworkers[0].arrivals = ArrivalKind::Trace { records: vec![] };
        p.coworkers[0].shard.clear();
        let mut sim = Simulation::new(p).unwrap();
        let out = sim.run(&mut noop).unwrap();
        assert_eq!(out.termination, Termination::QueueEmpty);
        assert_eq!(out.stats[0].stalls_pre_warmup, 1);
    }

    #[test]
    fn event_budget_stops_the_run() {
        let mut p = params(2, 0.0, 1_000_000);
        p.max_events = 100;
        let out = Simulation::new(p).unwrap().run(&mut noop).unwrap();
        assert_eq!(out.termination, Termination::EventBudget);
        assert_eq!(out.events, 100);
    }
}
