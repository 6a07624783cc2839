//! Virtual-time event queue, link/compute models and arrival processes.

mod engine;

pub use engine::{
    check_outcome, AggregationEvent, CoworkerSetup, CoworkerStats, RunOutcome, Simulation,
    SimulationParams, Termination,
};

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::coworker::UplinkPayload;
use crate::error::{Error, Result};
use crate::model::{FairnessWeights, ModelVector, TrainingExample};

/// Per-transmission rate law `R_k` in bits per virtual-time unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RateDist {
    Constant { rate: f64 },
    /// Uniform on `[rate·(1−spread), rate·(1+spread)]`, `0 ≤ spread < 1`.
    Uniform { rate: f64, spread: f64 },
}

impl RateDist {
    pub fn mean(&self) -> f64 {
        match *self {
            RateDist::Constant { rate } | RateDist::Uniform { rate, .. } => rate,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            RateDist::Constant { rate } => rate,
            RateDist::Uniform { rate, spread } => {
                rate * (1.0 - spread + 2.0 * spread * rng.random::<f64>())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub p_loss: f64,
    pub rate: RateDist,
    pub payload_bits: u64,
}

impl LinkModel {
    /// Default payload size: the model plus two scalars at 64 bits each.
    pub fn default_payload_bits(dim: usize) -> u64 {
        64 * (dim as u64 + 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_loss) {
            return Err(Error::config("link.p_loss", "must lie in [0, 1]"));
        }
        let ok = match self.rate {
            RateDist::Constant { rate } => rate > 0.0 && rate.is_finite(),
            RateDist::Uniform { rate, spread } => {
                rate > 0.0 && rate.is_finite() && (0.0..1.0).contains(&spread)
            }
        };
        if !ok {
            return Err(Error::config("link.rate", "rates must be positive and finite, spread in [0, 1)"));
        }
        if self.payload_bits == 0 {
            return Err(Error::config("link.payload_bits", "must be positive"));
        }
        Ok(())
    }

    /// Delay at the nominal (mean) rate.
    pub fn nominal_delay(&self) -> f64 {
        self.payload_bits as f64 / self.rate.mean()
    }
}

/// Delivery time of an uplink sent at `now`, or `None` when the channel drops it.
/// Always consumes one loss draw and, when delivered, one rate draw.
pub fn transmit_uplink<R: Rng + ?Sized>(link: &LinkModel, now: f64, rng: &mut R) -> Option<f64> {
    let u: f64 = rng.random();
    if u < link.p_loss {
        return None;
    }
    let rate = link.rate.sample(rng);
    Some(now + link.payload_bits as f64 / rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeModel {
    /// CPU cycles per virtual-time unit.
    pub speed: f64,
    pub cycles_per_iteration: f64,
}

impl ComputeModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::config("compute.speed", "must be positive"));
        }
        if !(self.cycles_per_iteration > 0.0 && self.cycles_per_iteration.is_finite()) {
            return Err(Error::config("compute.cycles_per_iteration", "must be positive"));
        }
        Ok(())
    }

    pub fn iteration_time(&self) -> f64 {
        self.cycles_per_iteration / self.speed
    }

    pub fn cluster_time(&self, iterations: u32) -> f64 {
        iterations as f64 * self.iteration_time()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    DataArrival { k: usize, example: TrainingExample },
    /// One local iteration of the cluster tagged `epoch` has finished.
    IterationDone { k: usize, epoch: u64 },
    UplinkDelivery { k: usize, payload: UplinkPayload },
    DownlinkDelivery { k: usize, w: ModelVector, stamp: u64 },
    FairnessBroadcastDelivery { k: usize, lambdas: FairnessWeights },
    TimerExpiry { k: usize, epoch: u64 },
}

#[derive(Debug, Clone)]
pub struct SimEvent {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for SimEvent {}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimEvent {
    // Reversed so that BinaryHeap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Min-queue over `(time, seq)` that refuses to schedule into the past.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<SimEvent>,
    next_seq: u64,
    now: f64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time: f64, kind: EventKind) -> Result<u64> {
        if !time.is_finite() || time < self.now {
            return Err(Error::Engine(format!(
                "event at {time} scheduled before current time {}",
                self.now
            )));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(SimEvent { time, seq, kind });
        Ok(seq)
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        let ev = self.heap.pop()?;
        debug_assert!(ev.time >= self.now);
        self.now = ev.time;
        Some(ev)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrivalKind {
    /// The whole shard is admitted at time zero; nothing arrives afterwards.
    Preload,
    Poisson { rate: f64 },
    Periodic { interval: f64 },
    /// Replays timestamped examples in file order.
    Trace { records: Vec<(f64, TrainingExample)> },
}

/// Per-coworker generator of the next data arrival.
#[derive(Debug, Clone)]
pub struct ArrivalProcess {
    kind: ArrivalKind,
    exp: Option<Exp<f64>>,
    cursor: usize,
    last: f64,
}

impl ArrivalProcess {
    pub fn new(kind: ArrivalKind) -> Result<Self> {
        let exp = match &kind {
            ArrivalKind::Poisson { rate } => {
                if !(*rate > 0.0 && rate.is_finite()) {
                    return Err(Error::config("arrivals.rate", "must be positive"));
                }
                Some(Exp::new(*rate).map_err(|e| Error::config("arrivals.rate", e.to_string()))?)
            }
            ArrivalKind::Periodic { interval } => {
                if !(*interval > 0.0 && interval.is_finite()) {
                    return Err(Error::config("arrivals.interval", "must be positive"));
                }
                None
            }
            ArrivalKind::Trace { records } => {
                let mut prev = 0.0;
                for (t, _) in records {
                    if !(t.is_finite() && *t >= prev) {
                        return Err(Error::config(
                            "arrivals.trace",
                            "arrival times must be finite, non-negative and non-decreasing",
                        ));
                    }
                    prev = *t;
                }
                None
            }
            ArrivalKind::Preload => None,
        };
        Ok(ArrivalProcess { kind, exp, cursor: 0, last: 0.0 })
    }

    pub fn kind(&self) -> &ArrivalKind {
        &self.kind
    }

    /// Next arrival time and example. `pick` draws an example for the
    /// synthetic kinds; trace replays carry their own examples.
    pub fn next<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        mut pick: impl FnMut(&mut R) -> TrainingExample,
    ) -> Option<(f64, TrainingExample)> {
        match &self.kind {
            ArrivalKind::Preload => None,
            ArrivalKind::Poisson { .. } => {
                let gap = self.exp.as_ref().expect("poisson sampler").sample(rng);
                self.last += gap;
                Some((self.last, pick(rng)))
            }
            ArrivalKind::Periodic { interval } => {
                self.cursor += 1;
                self.last = self.cursor as f64 * interval;
                Some((self.last, pick(rng)))
            }
            ArrivalKind::Trace { records } => {
                let rec = records.get(self.cursor)?.clone();
                self.cursor += 1;
                Some(rec)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn dummy<R>(_: &mut R) -> TrainingExample {
        TrainingExample::scalar(vec![0.0], 0.0)
    }

    #[test]
    fn queue_orders_by_time_then_seq() {
        let mut q = EventQueue::new();
        let t = |k| EventKind::TimerExpiry { k, epoch: 0 };
        q.schedule(2.0, t(0)).unwrap();
        q.schedule(1.0, t(1)).unwrap();
        q.schedule(1.0, t(2)).unwrap();
        q.schedule(0.5, t(3)).unwrap();
        let order: Vec<usize> = std::iter::from_fn(|| q.pop())
            .map(|e| match e.kind {
                EventKind::TimerExpiry { k, .. } => k,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(order, vec![3, 1, 2, 0]);
        assert_eq!(q.now(), 2.0);
        assert!(matches!(q.schedule(1.0, t(0)), Err(Error::Engine(_))));
        assert!(q.schedule(f64::NAN, t(0)).is_err());
    }

    #[test]
    fn loss_extremes() {
        let mut rng = stream(1, 0, Purpose::Link);
        let mut link = LinkModel { p_loss: 0.0, rate: RateDist::Constant { rate: 100.0 }, payload_bits: 50 };
        for _ in 0..1000 {
            assert_eq!(transmit_uplink(&link, 1.0, &mut rng), Some(1.5));
        }
        link.p_loss = 1.0;
        for _ in 0..1000 {
            assert_eq!(transmit_uplink(&link, 1.0, &mut rng), None);
        }
    }

    #[test]
    fn loss_fraction_within_binomial_band() {
        let mut rng = stream(5, 0, Purpose::Link);
        let link = LinkModel { p_loss: 0.25, rate: RateDist::Uniform { rate: 10.0, spread: 0.5 }, payload_bits: 10 };
        let n = 10_000;
        let mut ok = 0;
        for _ in 0..n {
            if let Some(t) = transmit_uplink(&link, 0.0, &mut rng) {
                assert!((1.0 / 1.5..=1.0 / 0.5).contains(&t));
                ok += 1;
            }
        }
        let frac = ok as f64 / n as f64;
        assert!((frac - 0.75).abs() <= 4.0 * (0.75f64 * 0.25 / n as f64).sqrt(), "{frac}");
    }

    #[test]
    fn periodic_arrivals() {
        let mut a = ArrivalProcess::new(ArrivalKind::Periodic { interval: 1.0 }).unwrap();
        let mut rng = stream(1, 0, Purpose::Arrivals);
        let times: Vec<f64> = (0..4).map(|_| a.next(&mut rng, dummy).unwrap().0).collect();
        assert_eq!(times, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn poisson_mean_gap() {
        let rate = 2.5;
        let mut a = ArrivalProcess::new(ArrivalKind::Poisson { rate }).unwrap();
        let mut rng = stream(2, 0, Purpose::Arrivals);
        let n = 10_000;
        let mut last = 0.0;
        for _ in 0..n {
            let (t, _) = a.next(&mut rng, dummy).unwrap();
            assert!(t >= last);
            last = t;
        }
        let mean = last / n as f64;
        // Exponential: σ = mean = 1/rate.
        assert!((mean - 1.0 / rate).abs() <= 4.0 * (1.0 / rate) / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn trace_replay_and_validation() {
        let recs = vec![
            (0.5, TrainingExample::scalar(vec![1.0], 2.0)),
            (0.75, TrainingExample::scalar(vec![3.0], 4.0)),
        ];
        let mut a = ArrivalProcess::new(ArrivalKind::Trace { records: recs.clone() }).unwrap();
        let mut rng = stream(1, 0, Purpose::Arrivals);
        assert_eq!(a.next(&mut rng, dummy), Some(recs[0].clone()));
        assert_eq!(a.next(&mut rng, dummy), Some(recs[1].clone()));
        assert_eq!(a.next(&mut rng, dummy), None);
        let bad = vec![(1.0, recs[0].1.clone()), (0.5, recs[0].1.clone())];
        assert!(ArrivalProcess::new(ArrivalKind::Trace { records: bad }).is_err());
        assert!(ArrivalProcess::new(ArrivalKind::Poisson { rate: 0.0 }).is_err());
        assert!(ArrivalProcess::new(ArrivalKind::Periodic { interval: -1.0 }).is_err());
    }
}
