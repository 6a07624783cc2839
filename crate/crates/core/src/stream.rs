//! Finite per-coworker data buffer with access control (newest-|S|
//! admission) and buffer control (evict oldest above the mini-batch size).

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TrainingExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Stored,
    StoredAfterEvict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Eviction {
    Evicted,
    Kept,
}

/// Fewer than `|MB|` entries are buffered; the local processor has to stall.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NotReady {
    pub count: usize,
    pub needed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamBuffer {
    capacity: usize,
    minibatch_size: usize,
    entries: VecDeque<(u64, TrainingExample)>,
    next_index: u64,
    warmed: bool,
}

impl StreamBuffer {
    pub fn new(capacity: usize, minibatch_size: usize) -> Result<Self> {
        if minibatch_size == 0 {
            return Err(Error::config("buffer.minibatch_size", "must be at least 1"));
        }
        if capacity < minibatch_size {
            return Err(Error::config(
                "buffer.capacity",
                format!("capacity {capacity} is smaller than the mini-batch size {minibatch_size}"),
            ));
        }
        Ok(StreamBuffer {
            capacity,
            minibatch_size,
            entries: VecDeque::with_capacity(capacity),
            next_index: 0,
            warmed: false,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn minibatch_size(&self) -> usize {
        self.minibatch_size
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True once the buffer has held at least `|MB|` entries.
    pub fn has_warmed_up(&self) -> bool {
        self.warmed
    }

    pub fn is_ready(&self) -> bool {
        self.entries.len() >= self.minibatch_size
    }

    /// Arrival indices of the stored entries, oldest first.
    pub fn arrival_indices(&self) -> Vec<u64> {
        self.entries.iter().map(|(i, _)| *i).collect()
    }

    pub fn examples(&self) -> impl Iterator<Item = &TrainingExample> {
        self.entries.iter().map(|(_, e)| e)
    }

    pub fn admit(&mut self, example: TrainingExample) -> Admission {
        let outcome = if self.entries.len() == self.capacity {
            self.entries.pop_front();
            Admission::StoredAfterEvict
        } else {
            Admission::Stored
        };
        self.entries.push_back((self.next_index, example));
        self.next_index += 1;
        if self.entries.len() >= self.minibatch_size {
            self.warmed = true;
        }
        outcome
    }

    pub fn evict_oldest_if_surplus(&mut self) -> Eviction {
        if self.entries.len() > self.minibatch_size {
            self.entries.pop_front();
            Eviction::Evicted
        } else {
            Eviction::Kept
        }
    }

    /// Draws `|MB|` distinct entries uniformly at random, in sampled order.
    pub fn sample_minibatch<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
    ) -> std::result::Result<Vec<TrainingExample>, NotReady> {
        if !self.is_ready() {
            return Err(NotReady {
                count: self.entries.len(),
                needed: self.minibatch_size,
            });
        }
        let picks = rand::seq::index::sample(rng, self.entries.len(), self.minibatch_size);
        Ok(picks.iter().map(|i| self.entries[i].1.clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use std::collections::HashMap;

    fn ex(i: usize) -> TrainingExample {
        TrainingExample::scalar(vec![i as f64], 0.0)
    }

    #[test]
    fn admission_examples() {
        let mut b = StreamBuffer::new(4, 1).unwrap();
        assert_eq!(b.admit(ex(1)), Admission::Stored);
        assert_eq!(b.len(), 1);
        for i in 2..=4 {
            b.admit(ex(i));
        }
        assert_eq!(b.admit(ex(5)), Admission::StoredAfterEvict);
        let xs: Vec<f64> = b.examples().map(|e| e.x[0]).collect();
        assert_eq!(xs, vec![2.0, 3.0, 4.0, 5.0]);

        let mut one = StreamBuffer::new(1, 1).unwrap();
        for i in 0..5 {
            one.admit(ex(i));
            assert_eq!(one.examples().next().unwrap().x[0], i as f64);
            assert_eq!(one.len(), 1);
        }
    }

    #[test]
    fn eviction_examples() {
        let mut b = StreamBuffer::new(8, 3).unwrap();
        assert_eq!(b.evict_oldest_if_surplus(), Eviction::Kept);
        for i in 0..3 {
            b.admit(ex(i));
        }
        assert_eq!(b.evict_oldest_if_surplus(), Eviction::Kept);
        b.admit(ex(3));
        assert_eq!(b.evict_oldest_if_surplus(), Eviction::Evicted);
        assert_eq!(b.len(), 3);
        assert_eq!(b.arrival_indices(), vec![1, 2, 3]);
    }

    #[test]
    fn sampling_examples() {
        let mut b = StreamBuffer::new(4, 2).unwrap();
        let mut rng = stream(3, 0, Purpose::Compute);
        b.admit(ex(0));
        assert_eq!(b.sample_minibatch(&mut rng), Err(NotReady { count: 1, needed: 2 }));
        b.admit(ex(1));
        let mut full: Vec<f64> = b.sample_minibatch(&mut rng).unwrap().iter().map(|e| e.x[0]).collect();
        full.sort_by(f64::total_cmp);
        assert_eq!(full, vec![0.0, 1.0]);
    }

    #[test]
    fn pair_frequencies_are_uniform() {
        let mut b = StreamBuffer::new(4, 2).unwrap();
        for i in 0..4 {
            b.admit(ex(i));
        }
        let mut rng = stream(11, 0, Purpose::Compute);
        let n = 10_000;
        let mut counts: HashMap<(i64, i64), usize> = HashMap::new();
        for _ in 0..n {
            let s = b.sample_minibatch(&mut rng).unwrap();
            let (a, c) = (s[0].x[0] as i64, s[1].x[0] as i64);
            assert_ne!(a, c);
            *counts.entry((a.min(c), a.max(c))).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        let p = 1.0 / 6.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for (_, c) in counts {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sd, "{c}");
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(StreamBuffer::new(2, 3).is_err());
        assert!(StreamBuffer::new(2, 0).is_err());
    }
}
