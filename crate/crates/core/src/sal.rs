//! Plateau-driven, top-down activation of adapter layers.

use std::collections::VecDeque;

use crate::encoder::Tower;
use crate::error::{Error, Result};
use crate::lora::LoraModel;

/// Bounded FIFO of recent accuracies.
#[derive(Clone, Debug, PartialEq)]
pub struct CapabilityQueue {
    max_len: usize,
    entries: VecDeque<f64>,
}

impl CapabilityQueue {
    pub fn new(max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::config("sal.queue_len", "must be at least 1"));
        }
        Ok(CapabilityQueue { max_len, entries: VecDeque::with_capacity(max_len + 1) })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.max_len
    }

    pub fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().copied()
    }

    /// Appends, evicting the oldest entry when full.
    pub fn push(&mut self, acc: f64) {
        if self.is_full() {
            self.entries.pop_front();
        }
        self.entries.push_back(acc);
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.entries.iter().sum::<f64>() / self.entries.len() as f64)
    }
}

/// Current accuracy minus the mean of a full queue; `None` until the queue fills.
pub fn incremental_factor(queue: &CapabilityQueue, acc_now: f64) -> Option<f64> {
    if !queue.is_full() {
        return None;
    }
    queue.mean().map(|m| acc_now - m)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationEvent {
    pub layer: usize,
    pub delta: f64,
}

/// Per-client controller state.
#[derive(Clone, Debug, PartialEq)]
pub struct SalState {
    pub queue: CapabilityQueue,
    pub threshold: f64,
    next_layer: usize,
    exhausted: bool,
}

impl SalState {
    /// Fresh controller for an encoder of `depth` layers whose top layer is already active.
    pub fn new(queue_len: usize, threshold: f64, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("model.depth", "must be at least 1"));
        }
        if threshold.is_nan() {
            return Err(Error::config("sal.threshold", "must be a number"));
        }
        Ok(SalState {
            queue: CapabilityQueue::new(queue_len)?,
            threshold,
            next_layer: depth.saturating_sub(2),
            exhausted: depth == 1,
        })
    }

    /// Rebuilds a controller from saved fields.
    pub fn restore(queue: CapabilityQueue, threshold: f64, next_layer: usize, exhausted: bool) -> Self {
        SalState { queue, threshold, next_layer, exhausted }
    }

    pub fn next_layer(&self) -> usize {
        self.next_layer
    }

    pub fn is_exhausted(&self) -> bool {
        self.exhausted
    }

    /// Records `acc_now` and decides whether training has plateaued.
    ///
    /// The factor is measured against the queue as it stood before the push;
    /// a factor equal to the threshold is not a plateau.
    pub fn observe(&mut self, acc_now: f64) -> Option<ActivationEvent> {
        let delta = incremental_factor(&self.queue, acc_now);
        self.queue.push(acc_now);
        let delta = delta?;
        if self.exhausted || delta >= self.threshold {
            return None;
        }
        let layer = self.next_layer;
        if layer == 0 {
            self.exhausted = true;
        } else {
            self.next_layer -= 1;
        }
        Some(ActivationEvent { layer, delta })
    }

    /// [`observe`](Self::observe), then activates the chosen layer in both towers.
    pub fn step(&mut self, model: &mut LoraModel, acc_now: f64) -> Result<Option<ActivationEvent>> {
        let event = self.observe(acc_now);
        if let Some(ev) = event {
            for tower in Tower::BOTH {
                model.set_layer_active(tower, ev.layer, true)?;
            }
        }
        Ok(event)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queue_evicts_oldest() {
        let mut q = CapabilityQueue::new(2).unwrap();
        for a in [0.1, 0.2, 0.3] {
            q.push(a);
        }
        assert_eq!(q.entries().collect::<Vec<_>>(), vec![0.2, 0.3]);
        assert!(CapabilityQueue::new(0).is_err());
    }

    #[test]
    fn single_layer_encoder_starts_exhausted() {
        let mut s = SalState::new(1, f64::INFINITY, 1).unwrap();
        assert!(s.is_exhausted());
        s.observe(0.5);
        assert_eq!(s.observe(0.5), None);
    }
}
