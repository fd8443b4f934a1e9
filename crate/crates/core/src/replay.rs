//! Prioritized experience replay over a sum tree.
//!
//! Transitions enter FIFO with priority `|ψ| + ε` (fresh ones fall back to
//! the running max so they are sampled at least once). Sampling is
//! proportional to `p^ν`; bias-correction weights `(1/(n·P))^ι` are
//! normalized by the batch maximum. Stale priority updates (for evicted
//! slots) are skipped and counted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neuronet::RecurrentState;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("buffer holds {have} transitions, need {need}")]
    NotReady { have: usize, need: usize },
    #[error("invalid capacity {0}")]
    InvalidCapacity(usize),
}

/// One MDP step as shipped by a broker and stored by the learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    /// Behavior-policy log-probability of `action` at collection time.
    pub behavior_log_prob: f64,
    /// Broker-assigned initial priority; `None` lets the buffer use its max.
    pub initial_priority: Option<f64>,
    /// Actor recurrent state immediately before this step, so any stored
    /// transition can start a replay segment.
    pub actor_rec: RecurrentState,
    /// Unique episode identifier (globally unique across brokers).
    pub episode_uid: u64,
    pub step_in_episode: u32,
    pub violation: bool,
}

/// Binary sum tree over leaf masses. Parents are recomputed (not
/// incrementally adjusted) along the update path, so the root never drifts
/// from the true leaf sum by more than association-order rounding.
#[derive(Debug, Clone)]
struct SumTree {
    capacity: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            nodes: vec![0.0; 2 * capacity.max(1)],
        }
    }

    fn set(&mut self, leaf: usize, value: f64) {
        let mut idx = leaf + self.capacity;
        self.nodes[idx] = value;
        while idx > 1 {
            idx /= 2;
            self.nodes[idx] = self.nodes[2 * idx] + self.nodes[2 * idx + 1];
        }
    }

    fn get(&self, leaf: usize) -> f64 {
        self.nodes[leaf + self.capacity]
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    /// Leaf whose cumulative interval contains `mass` ∈ [0, total).
    fn find(&self, mass: f64) -> usize {
        let mut idx = 1;
        let mut m = mass;
        while idx < self.capacity {
            let left = 2 * idx;
            if m < self.nodes[left] {
                idx = left;
            } else {
                m -= self.nodes[left];
                idx = left + 1;
            }
        }
        idx - self.capacity
    }
}

#[derive(Debug, Clone)]
struct Slot {
    transition: Transition,
    /// Monotonic arrival id; consecutive ids are arrival-contiguous.
    id: u64,
    raw_priority: f64,
}

/// A reference to a sampled transition, valid until the slot is evicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    pub slot: usize,
    pub id: u64,
}

#[derive(Debug)]
pub struct SampledBatch {
    pub refs: Vec<SampleRef>,
    /// Bias-correction weights, normalized by the batch maximum.
    pub weights: Vec<f64>,
}

#[derive(Debug)]
pub struct PriorityBuffer {
    capacity: usize,
    /// Prioritization exponent ν; 0 yields uniform sampling.
    nu: f64,
    /// Bias-correction exponent ι, annealed externally.
    iota: f64,
    /// Priority floor ε.
    pub epsilon: f64,
    slots: Vec<Option<Slot>>,
    tree: SumTree,
    write: usize,
    count: usize,
    next_id: u64,
    max_priority: f64,
    pub stale_update_skips: u64,
}

impl PriorityBuffer {
    pub fn new(capacity: usize, nu: f64, iota: f64, epsilon: f64) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::InvalidCapacity(0));
        }
        Ok(Self {
            capacity,
            nu,
            iota,
            epsilon,
            slots: vec![None; capacity],
            tree: SumTree::new(capacity),
            write: 0,
            count: 0,
            next_id: 0,
            max_priority: 1.0,
            stale_update_skips: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn iota(&self) -> f64 {
        self.iota
    }

    pub fn set_iota(&mut self, iota: f64) {
        self.iota = iota;
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    /// Priority for a TD error: `|ψ| + ε`.
    pub fn priority_of(&self, psi: f64) -> f64 {
        psi.abs() + self.epsilon
    }

    /// Appends a transition, evicting the oldest when full.
    pub fn store(&mut self, transition: Transition) {
        let raw = transition
            .initial_priority
            .filter(|p| *p > 0.0)
            .unwrap_or(self.max_priority);
        self.max_priority = self.max_priority.max(raw);
        let slot = self.write;
        self.slots[slot] = Some(Slot {
            transition,
            id: self.next_id,
            raw_priority: raw,
        });
        self.tree.set(slot, raw.powf(self.nu));
        self.next_id += 1;
        self.write = (self.write + 1) % self.capacity;
        self.count = (self.count + 1).min(self.capacity);
    }

    pub fn get(&self, r: SampleRef) -> Option<&Transition> {
        match &self.slots[r.slot] {
            Some(s) if s.id == r.id => Some(&s.transition),
            _ => None,
        }
    }

    pub fn get_slot(&self, slot: usize) -> Option<(&Transition, u64)> {
        self.slots
            .get(slot)
            .and_then(|s| s.as_ref())
            .map(|s| (&s.transition, s.id))
    }

    /// The contiguous in-episode run starting at `r`, at most `horizon`
    /// long: consecutive arrival ids, same episode, cut after a `done`.
    pub fn segment_from(&self, r: SampleRef, horizon: usize) -> Vec<SampleRef> {
        let mut out = Vec::with_capacity(horizon);
        let Some(first) = self.slots[r.slot].as_ref() else {
            return out;
        };
        if first.id != r.id {
            return out;
        }
        let uid = first.transition.episode_uid;
        let step0 = first.transition.step_in_episode;
        for k in 0..horizon as u64 {
            let slot = (r.slot + k as usize) % self.capacity;
            let Some(s) = self.slots[slot].as_ref() else {
                break;
            };
            if s.id != r.id + k
                || s.transition.episode_uid != uid
                || u64::from(s.transition.step_in_episode) != u64::from(step0) + k
            {
                break;
            }
            out.push(SampleRef { slot, id: s.id });
            if s.transition.done {
                break;
            }
        }
        out
    }

    /// Draws `batch` independent samples with probability `p^ν / Σ p^ν`.
    pub fn sample<R: rand::Rng>(
        &self,
        batch: usize,
        rng: &mut R,
    ) -> Result<SampledBatch, ReplayError> {
        if self.count < batch {
            return Err(ReplayError::NotReady {
                have: self.count,
                need: batch,
            });
        }
        let total = self.tree.total();
        let n = self.count as f64;
        let mut refs = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut slot = self.tree.find(rng.gen_range(0.0..total));
            // Rounding at the leaf boundary can land on an empty slot.
            while self.slots[slot].is_none() {
                slot = (slot + self.capacity - 1) % self.capacity;
            }
            let s = self.slots[slot].as_ref().unwrap();
            let prob = self.tree.get(slot) / total;
            refs.push(SampleRef { slot, id: s.id });
            weights.push((1.0 / (n * prob)).powf(self.iota));
        }
        let max_w = weights.iter().copied().fold(f64::MIN, f64::max);
        if max_w > 0.0 {
            for w in &mut weights {
                *w /= max_w;
            }
        }
        Ok(SampledBatch { refs, weights })
    }

    /// Replaces priorities with `|ψ| + ε` for still-resident samples;
    /// evicted references are skipped and counted.
    pub fn update_priorities(&mut self, refs: &[SampleRef], psis: &[f64]) {
        for (r, &psi) in refs.iter().zip(psis) {
            let raw = self.priority_of(psi);
            match self.slots[r.slot].as_mut() {
                Some(s) if s.id == r.id => {
                    s.raw_priority = raw;
                    self.max_priority = self.max_priority.max(raw);
                    self.tree.set(r.slot, raw.powf(self.nu));
                }
                _ => self.stale_update_skips += 1,
            }
        }
    }

    /// Root mass the tree reports (Σ p^ν up to rounding).
    pub fn tree_total(&self) -> f64 {
        self.tree.total()
    }

    /// Linear-scan recomputation of Σ p^ν for consistency checks.
    pub fn rescan_total(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|s| s.raw_priority.powf(self.nu))
            .sum()
    }
}
