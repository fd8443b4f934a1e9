//! Autonomous episode runner.
//!
//! A broker owns its environment episodes and a snapshot of the actor
//! policy. Each epoch it executes exactly `n_steps` placement decisions
//! (dequeuing or sampling services as episodes finish), tags every
//! transition with its behavior log-probability, pre-step recurrent state
//! and an initial priority, then emits the batch for the learner. Policy
//! snapshots are adopted only at epoch boundaries, and never while an
//! episode is in flight.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{EnvContext, EnvError, Episode, EpisodeSummary, ServicePlan};
use crate::learner::PolicySnapshot;
use crate::neuronet::{log_softmax, NetError, Network, RecurrentState};
use crate::replay::Transition;

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("broker has no services to run")]
    NoServices,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    /// Sample from the policy distribution (training).
    Sample,
    /// Deterministic argmax, ties toward the lowest server id (evaluation).
    Argmax,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BrokerConfig {
    pub id: usize,
    /// Decision steps per epoch.
    pub n_steps: usize,
    pub mode: ActionMode,
    pub seed: u64,
    /// Floor added to |r| for broker-side initial priorities.
    pub priority_epsilon: f64,
    /// Additive priority bonus for violation-flagged transitions.
    pub violation_priority_bonus: f64,
    /// Restrict sampling to servers with capacity for the current task
    /// (falls back to the full fleet when nothing fits).
    pub mask_capacity: bool,
}

impl BrokerConfig {
    pub fn new(id: usize, n_steps: usize, seed: u64) -> Self {
        Self {
            id,
            n_steps,
            mode: ActionMode::Sample,
            seed,
            priority_epsilon: 0.01,
            violation_priority_bonus: 0.0,
            mask_capacity: false,
        }
    }
}

/// Ordered experience from one epoch of one broker.
#[derive(Debug, Clone)]
pub struct ExperienceBatch {
    pub broker_id: usize,
    pub snapshot_version: u64,
    pub transitions: Vec<Transition>,
    pub summaries: Vec<EpisodeSummary>,
}

/// Serves episodes: explicit requests first, otherwise a seeded uniform
/// draw from the dataset.
pub struct ServiceQueue {
    dataset: Arc<Vec<Arc<ServicePlan>>>,
    queued: VecDeque<Arc<ServicePlan>>,
    rng: ChaCha8Rng,
}

impl ServiceQueue {
    pub fn new(dataset: Arc<Vec<Arc<ServicePlan>>>, seed: u64) -> Self {
        Self {
            dataset,
            queued: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn enqueue(&mut self, plan: Arc<ServicePlan>) {
        self.queued.push_back(plan);
    }

    fn next(&mut self) -> Option<Arc<ServicePlan>> {
        if let Some(p) = self.queued.pop_front() {
            return Some(p);
        }
        if self.dataset.is_empty() {
            return None;
        }
        let i = self.rng.gen_range(0..self.dataset.len());
        Some(self.dataset[i].clone())
    }
}

/// Chooses an action from the snapshot policy: sampled or argmax, with the
/// exact log-probability of the chosen action. `mask`, when present,
/// restricts the distribution to allowed actions (unless none is allowed).
pub fn decision_engine(
    actor: &Network,
    state: &[f64],
    rec: &RecurrentState,
    mode: ActionMode,
    rng: &mut ChaCha8Rng,
    mask: Option<&[bool]>,
) -> Result<(usize, f64, RecurrentState), NetError> {
    let (logits, next_rec) = actor.forward_step(state, rec)?;
    let mut log_probs = log_softmax(&logits);
    if let Some(mask) = mask {
        if mask.iter().any(|&m| m) {
            let mass: f64 = mask
                .iter()
                .enumerate()
                .filter(|(_, allowed)| **allowed)
                .map(|(i, _)| log_probs[i].exp())
                .sum();
            let log_mass = mass.ln();
            for (i, &allowed) in mask.iter().enumerate() {
                if allowed {
                    log_probs[i] -= log_mass;
                } else {
                    log_probs[i] = f64::NEG_INFINITY;
                }
            }
        }
    }
    let action = match mode {
        ActionMode::Argmax => {
            let mut best = 0;
            for i in 1..log_probs.len() {
                if log_probs[i] > log_probs[best] {
                    best = i;
                }
            }
            best
        }
        ActionMode::Sample => {
            let draw: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = log_probs.len() - 1;
            for (i, lp) in log_probs.iter().enumerate() {
                acc += lp.exp();
                if draw < acc {
                    chosen = i;
                    break;
                }
            }
            // Cumulative rounding can spill past 1.0 onto a masked action.
            if log_probs[chosen] == f64::NEG_INFINITY {
                chosen = log_probs
                    .iter()
                    .enumerate()
                    .rev()
                    .find(|(_, lp)| lp.is_finite())
                    .map(|(i, _)| i)
                    .unwrap_or(0);
            }
            chosen
        }
    };
    Ok((action, log_probs[action], next_rec))
}

struct ActiveEpisode {
    episode: Episode,
    rec: RecurrentState,
    uid: u64,
    step: u32,
    state: crate::environment::StateVector,
}

pub struct Broker {
    pub config: BrokerConfig,
    ctx: Arc<EnvContext>,
    queue: ServiceQueue,
    snapshot: Arc<PolicySnapshot>,
    pending: Option<Arc<PolicySnapshot>>,
    active: Option<ActiveEpisode>,
    rng: ChaCha8Rng,
    episodes_started: u64,
    pub env_steps: u64,
}

impl Broker {
    pub fn new(
        config: BrokerConfig,
        ctx: Arc<EnvContext>,
        queue: ServiceQueue,
        snapshot: Arc<PolicySnapshot>,
    ) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(crate::subseed(
            config.seed,
            &format!("broker-{}", config.id),
        ));
        Self {
            config,
            ctx,
            queue,
            snapshot,
            pending: None,
            active: None,
            rng,
            episodes_started: 0,
            env_steps: 0,
        }
    }

    pub fn snapshot_version(&self) -> u64 {
        self.snapshot.version
    }

    pub fn current_snapshot(&self) -> Arc<PolicySnapshot> {
        self.snapshot.clone()
    }

    /// Stages a snapshot for adoption at the next epoch boundary with no
    /// episode in flight. Stale versions are ignored.
    pub fn sync_policy(&mut self, snapshot: Arc<PolicySnapshot>) {
        if snapshot.version >= self.snapshot.version {
            self.pending = Some(snapshot);
        }
    }

    pub fn enqueue(&mut self, plan: Arc<ServicePlan>) {
        self.queue.enqueue(plan);
    }

    fn next_uid(&mut self) -> u64 {
        self.episodes_started += 1;
        ((self.config.id as u64) << 40) | self.episodes_started
    }

    /// Runs exactly `n_steps` environment steps under one policy snapshot
    /// and returns the experience batch.
    pub fn run_epoch(&mut self) -> Result<ExperienceBatch, BrokerError> {
        // Epoch-boundary adoption, never mid-episode: stored behavior
        // log-probs stay consistent with a single snapshot per batch.
        if self.active.is_none() {
            if let Some(p) = self.pending.take() {
                self.snapshot = p;
            }
        }
        let mut transitions = Vec::with_capacity(self.config.n_steps);
        let mut summaries = Vec::new();
        for _ in 0..self.config.n_steps {
            if self.active.is_none() {
                let plan = self.queue.next().ok_or(BrokerError::NoServices)?;
                let episode = Episode::new(self.ctx.clone(), plan);
                let state = episode.state();
                let uid = self.next_uid();
                self.active = Some(ActiveEpisode {
                    episode,
                    rec: self.snapshot.actor.fresh_state(),
                    uid,
                    step: 0,
                    state,
                });
            }
            let active = self.active.as_mut().expect("episode just ensured");
            let mask = if self.config.mask_capacity {
                Some(active.episode.capacity_mask())
            } else {
                None
            };
            let pre_rec = active.rec.clone();
            let (action, log_mu, next_rec) = decision_engine(
                &self.snapshot.actor,
                active.state.as_slice(),
                &pre_rec,
                self.config.mode,
                &mut self.rng,
                mask.as_deref(),
            )?;
            let outcome = active.episode.step(action)?;
            let violation = outcome.diag.deadline_violated || outcome.diag.capacity_violated;
            let priority = outcome.reward.abs()
                + self.config.priority_epsilon
                + if violation {
                    self.config.violation_priority_bonus
                } else {
                    0.0
                };
            transitions.push(Transition {
                state: active.state.0.clone(),
                action,
                reward: outcome.reward,
                next_state: outcome.next_state.0.clone(),
                done: outcome.done,
                behavior_log_prob: log_mu,
                initial_priority: Some(priority),
                actor_rec: pre_rec,
                episode_uid: active.uid,
                step_in_episode: active.step,
                violation,
            });
            self.env_steps += 1;
            active.rec = next_rec;
            active.step += 1;
            if outcome.done {
                if let Some(s) = outcome.summary {
                    summaries.push(s);
                }
                self.active = None;
            } else {
                active.state = outcome.next_state;
            }
        }
        Ok(ExperienceBatch {
            broker_id: self.config.id,
            snapshot_version: self.snapshot.version,
            transitions,
            summaries,
        })
    }
}
