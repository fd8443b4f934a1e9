//! Centralized learning coordination.
//!
//! The learner is the sole owner of the parameters and the replay buffer.
//! Each iteration samples prioritized transitions, replays each one's
//! segment through the current actor and critic (starting from the stored
//! recurrent snapshot, critic hidden zeroed at the segment start), computes
//! clipped importance ratios, corrected TD errors and multi-step
//! advantages, takes Adam steps on the clipped policy surrogate and the
//! value loss, refreshes priorities, and publishes a new policy snapshot.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neuronet::{
    adam_step, backward, forward_segment, log_softmax, AcParams, AdamParams, Grads, NetError,
    Network, RecurrentState, Tape,
};
use crate::replay::{PriorityBuffer, ReplayError, SampleRef, Transition};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LearnerConfig {
    /// Discount factor γ.
    pub gamma: f64,
    /// Trace decay τ (GAE lambda).
    pub tau: f64,
    /// TD-error importance clip ρ̄ (may be infinite).
    pub rho_bar: f64,
    /// Trace importance clip c̄ (may be infinite).
    pub c_bar: f64,
    /// Policy clipping threshold η.
    pub eta: f64,
    /// Segment horizon H for advantage accumulation.
    pub horizon: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch_size: usize,
    /// Inner gradient updates per learn iteration.
    pub gradient_steps: usize,
    /// Entropy bonus coefficient (0 disables it).
    pub entropy_coef: f64,
    /// Global gradient-norm clip; `None` disables.
    pub grad_clip: Option<f64>,
    /// Behavior probabilities below this floor are clamped (and counted).
    pub mu_floor: f64,
    pub iota_start: f64,
    pub iota_end: f64,
    /// Iterations over which ι anneals linearly from start to end.
    pub iota_anneal_iters: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            tau: 0.95,
            rho_bar: 1.0,
            c_bar: 1.0,
            eta: 0.2,
            horizon: 8,
            lr_actor: 0.01,
            lr_critic: 0.01,
            batch_size: 128,
            gradient_steps: 2,
            entropy_coef: 0.0,
            grad_clip: Some(10.0),
            mu_floor: 1e-12,
            iota_start: 0.4,
            iota_end: 1.0,
            iota_anneal_iters: 200,
        }
    }
}

/// Versioned, immutable actor parameters as published to brokers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub version: u64,
    pub actor: Network,
}

/// Importance ratio χ = π(a|s)/μ(a|s), computed in log space. Returns the
/// ratio and whether the stored behavior probability hit the floor.
pub fn importance_ratio(log_pi: f64, log_mu: f64, mu_floor: f64) -> (f64, bool) {
    let floor = mu_floor.ln();
    if log_mu < floor {
        ((log_pi - floor).exp(), true)
    } else {
        ((log_pi - log_mu).exp(), false)
    }
}

/// Clipped-importance corrected TD error
/// ψ = min(ρ̄, χ)·(r + γ·V(s′)·(1−done) − V(s)).
pub fn corrected_td(
    chi: f64,
    rho_bar: f64,
    reward: f64,
    v: f64,
    v_next: f64,
    done: bool,
    gamma: f64,
) -> f64 {
    let rho = chi.min(rho_bar);
    let bootstrap = if done { 0.0 } else { gamma * v_next };
    rho * (reward + bootstrap - v)
}

/// Multi-step advantages over a contiguous segment:
/// V̂_j = Σ_{k<H} (τγ)^k (Π_{l<k} σ_{j+l}) ψ_{j+k}, truncated at the
/// segment end. `sigmas[t]` must already be clipped by c̄.
pub fn advantage(psis: &[f64], sigmas: &[f64], tau_gamma: f64, horizon: usize) -> Vec<f64> {
    let len = psis.len();
    let mut out = vec![0.0; len];
    for j in 0..len {
        let mut acc = 0.0;
        let mut coeff = 1.0;
        for k in 0..horizon.min(len - j) {
            acc += coeff * psis[j + k];
            coeff *= tau_gamma * sigmas[j + k];
        }
        out[j] = acc;
    }
    out
}

/// Clipped surrogate for one transition: min(χ·V̂, clip(χ, 1−η, 1+η)·V̂).
pub fn clipped_surrogate(chi: f64, vhat: f64, eta: f64) -> f64 {
    (chi * vhat).min(chi.clamp(1.0 - eta, 1.0 + eta) * vhat)
}

/// Whether the surrogate passes gradient through χ at this point (the
/// unclipped branch is selected, or χ sits strictly inside the clip band).
fn surrogate_grad_active(chi: f64, vhat: f64, eta: f64) -> bool {
    let u = chi * vhat;
    let cl = chi.clamp(1.0 - eta, 1.0 + eta) * vhat;
    u <= cl || (chi > 1.0 - eta && chi < 1.0 + eta)
}

/// Per-iteration metrics row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub mean_reward: f64,
    pub mean_abs_td: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub mean_ratio: f64,
    pub mean_is_weight: f64,
    pub snapshot_version: u64,
    pub buffer_size: usize,
    pub buffer_max_priority: f64,
    pub ratio_floor_clamps: u64,
    /// Mean full-discounted-return advantage over sampled segments that
    /// reach their episode's end (diagnostic; NaN when none were sampled).
    pub full_return_advantage: f64,
}

pub struct Learner {
    pub config: LearnerConfig,
    pub params: AcParams,
    pub buffer: PriorityBuffer,
    rng: ChaCha8Rng,
    iteration: u64,
    pub transitions_ingested: u64,
    ratio_floor_clamps: u64,
}

impl Learner {
    pub fn new(
        config: LearnerConfig,
        params: AcParams,
        buffer: PriorityBuffer,
        seed: u64,
    ) -> Result<Self, LearnerError> {
        if config.batch_size == 0 || config.horizon == 0 || config.gradient_steps == 0 {
            return Err(LearnerError::InvalidConfig(
                "batch_size, horizon and gradient_steps must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&config.gamma) {
            return Err(LearnerError::InvalidConfig("gamma must lie in [0,1]".into()));
        }
        if !(config.eta > 0.0 && config.eta < 1.0) {
            return Err(LearnerError::InvalidConfig("eta must lie in (0,1)".into()));
        }
        Ok(Self {
            config,
            params,
            buffer,
            rng: ChaCha8Rng::seed_from_u64(crate::subseed(seed, "learner-sampling")),
            iteration: 0,
            transitions_ingested: 0,
            ratio_floor_clamps: 0,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Appends broker transitions to the replay buffer.
    pub fn ingest(&mut self, transitions: Vec<Transition>) {
        for t in transitions {
            self.buffer.store(t);
            self.transitions_ingested += 1;
        }
    }

    pub fn ready(&self) -> bool {
        self.buffer.len() >= self.config.batch_size
    }

    pub fn snapshot(&self) -> Arc<PolicySnapshot> {
        Arc::new(PolicySnapshot {
            version: self.params.version,
            actor: self.params.actor.clone(),
        })
    }

    fn iota_for(&self, iteration: u64) -> f64 {
        let c = &self.config;
        if c.iota_anneal_iters == 0 {
            return c.iota_end;
        }
        let frac = (iteration as f64 / c.iota_anneal_iters as f64).min(1.0);
        c.iota_start + (c.iota_end - c.iota_start) * frac
    }

    /// One outer learning iteration: `gradient_steps` sampled updates, a
    /// priority refresh per update, and a snapshot version bump.
    pub fn learn_iteration(&mut self) -> Result<IterationMetrics, LearnerError> {
        if !self.ready() {
            return Err(LearnerError::Replay(ReplayError::NotReady {
                have: self.buffer.len(),
                need: self.config.batch_size,
            }));
        }
        let cfg = self.config;
        self.buffer.set_iota(self.iota_for(self.iteration));

        let mut agg = MetricsAggregator::new(cfg.eta);
        for _ in 0..cfg.gradient_steps {
            let batch = self.buffer.sample(cfg.batch_size, &mut self.rng)?;
            let mut actor_grads = Grads::zeros_like(&self.params.actor);
            let mut critic_grads = Grads::zeros_like(&self.params.critic);
            let mut new_psis = Vec::with_capacity(batch.refs.len());
            let inv_batch = 1.0 / batch.refs.len() as f64;

            for (r, &w) in batch.refs.iter().zip(&batch.weights) {
                let sample = self.evaluate_segment(*r)?;
                agg.observe(&sample, w);

                // Policy surrogate at the segment's first transition,
                // weighted by the PER bias correction; gradient flows
                // through log π (descent on the negated surrogate).
                if surrogate_grad_active(sample.chi0, sample.vhat0, cfg.eta) && sample.vhat0 != 0.0
                {
                    let factor = w * sample.chi0 * sample.vhat0 * inv_batch;
                    let mut dlogits = vec![0.0; sample.probs0.len()];
                    for (k, p) in sample.probs0.iter().enumerate() {
                        let onehot = if k == sample.action0 { 1.0 } else { 0.0 };
                        dlogits[k] = -factor * (onehot - p);
                    }
                    add_entropy_gradient(&mut dlogits, &sample.probs0, cfg.entropy_coef, inv_batch);
                    actor_grads.add(&backward(
                        &self.params.actor,
                        &sample.actor_tape_first,
                        &[dlogits],
                    )?);
                } else if cfg.entropy_coef > 0.0 {
                    let mut dlogits = vec![0.0; sample.probs0.len()];
                    add_entropy_gradient(&mut dlogits, &sample.probs0, cfg.entropy_coef, inv_batch);
                    actor_grads.add(&backward(
                        &self.params.actor,
                        &sample.actor_tape_first,
                        &[dlogits],
                    )?);
                }

                // Critic: semi-gradient of ½(V(s) − R̂)² with the target
                // R̂ = V(s) + V̂ held constant.
                let dv0 = -sample.vhat0 * inv_batch;
                critic_grads.add(&backward(
                    &self.params.critic,
                    &sample.critic_tape_first,
                    &[vec![dv0]],
                )?);

                new_psis.push(sample.psi0);
            }

            if let Some(max_norm) = cfg.grad_clip {
                actor_grads.clip_norm(max_norm);
                critic_grads.clip_norm(max_norm);
            }
            adam_step(
                &mut self.params.actor,
                &mut self.params.adam_actor,
                &actor_grads,
                &AdamParams::with_lr(cfg.lr_actor),
            )?;
            adam_step(
                &mut self.params.critic,
                &mut self.params.adam_critic,
                &critic_grads,
                &AdamParams::with_lr(cfg.lr_critic),
            )?;

            self.buffer.update_priorities(&batch.refs, &new_psis);
        }

        self.iteration += 1;
        self.params.version += 1;
        Ok(agg.finish(self))
    }

    /// Replays the segment starting at `r` through the current actor and
    /// critic and derives all per-sample learning quantities.
    fn evaluate_segment(&mut self, r: SampleRef) -> Result<SegmentEval, LearnerError> {
        let cfg = self.config;
        let refs = self.buffer.segment_from(r, cfg.horizon);
        debug_assert!(!refs.is_empty(), "sampled refs are resident");
        let transitions: Vec<&Transition> =
            refs.iter().map(|r| self.buffer.get(*r).unwrap()).collect();
        let len = transitions.len();

        // Actor replay from the stored recurrent snapshot.
        let states: Vec<&[f64]> = transitions.iter().map(|t| t.state.as_slice()).collect();
        let rec0 = normalize_rec(&transitions[0].actor_rec, self.params.actor.config.rec_dim());
        let actor_tape = forward_segment(&self.params.actor, &states, &rec0)?;
        let mut chis = Vec::with_capacity(len);
        let mut floor_hits = 0u64;
        for (t, tr) in transitions.iter().enumerate() {
            let log_probs = log_softmax(actor_tape.outputs(t));
            let (chi, clamped) =
                importance_ratio(log_probs[tr.action], tr.behavior_log_prob, cfg.mu_floor);
            if clamped {
                floor_hits += 1;
            }
            chis.push(chi);
        }

        // Critic replay: hidden state zeroed at the segment start, values
        // for each state plus the bootstrap state after the last one.
        let mut critic_inputs = states.clone();
        let last = transitions[len - 1];
        critic_inputs.push(last.next_state.as_slice());
        let critic_rec = RecurrentState::zeros(self.params.critic.config.rec_dim());
        let critic_tape = forward_segment(&self.params.critic, &critic_inputs, &critic_rec)?;
        let values: Vec<f64> = (0..=len).map(|t| critic_tape.outputs(t)[0]).collect();

        let mut psis = Vec::with_capacity(len);
        let mut sigmas = Vec::with_capacity(len);
        for (t, tr) in transitions.iter().enumerate() {
            psis.push(corrected_td(
                chis[t],
                cfg.rho_bar,
                tr.reward,
                values[t],
                values[t + 1],
                tr.done,
                cfg.gamma,
            ));
            sigmas.push(chis[t].min(cfg.c_bar));
        }
        let vhats = advantage(&psis, &sigmas, cfg.tau * cfg.gamma, cfg.horizon);

        // Diagnostic: full discounted return from the segment start when the
        // segment reaches its episode's end.
        let full_return_adv = if last.done {
            let mut ret = 0.0;
            let mut disc = 1.0;
            for tr in &transitions {
                ret += disc * tr.reward;
                disc *= cfg.gamma;
            }
            Some(ret - values[0])
        } else {
            None
        };

        let probs0: Vec<f64> = log_softmax(actor_tape.outputs(0))
            .iter()
            .map(|lp| lp.exp())
            .collect();
        let action0 = transitions[0].action;
        let reward0 = transitions[0].reward;

        // Single-step sub-tapes: only the first transition contributes to
        // the losses, so the backward pass can stop there.
        let state0 = states[0];
        let critic_state0 = critic_inputs[0];
        let actor_tape_first = forward_segment(&self.params.actor, &[state0], &rec0)?;
        let critic_tape_first = forward_segment(&self.params.critic, &[critic_state0], &critic_rec)?;

        self.ratio_floor_clamps += floor_hits;
        Ok(SegmentEval {
            action0,
            reward0,
            chi0: chis[0],
            psi0: psis[0],
            vhat0: vhats[0],
            probs0,
            full_return_adv,
            actor_tape_first,
            critic_tape_first,
        })
    }
}

fn normalize_rec(stored: &RecurrentState, want: usize) -> RecurrentState {
    if stored.h.len() == want {
        stored.clone()
    } else {
        RecurrentState::zeros(want)
    }
}

/// Adds d(−coef·entropy)/dlogits, scaled by the batch mean factor.
fn add_entropy_gradient(dlogits: &mut [f64], probs: &[f64], coef: f64, inv_batch: f64) {
    if coef == 0.0 {
        return;
    }
    let entropy: f64 = -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>();
    for (d, &p) in dlogits.iter_mut().zip(probs) {
        let dh = if p > 0.0 { -p * (p.ln() + entropy) } else { 0.0 };
        *d -= coef * inv_batch * dh;
    }
}

struct SegmentEval {
    action0: usize,
    reward0: f64,
    chi0: f64,
    psi0: f64,
    vhat0: f64,
    probs0: Vec<f64>,
    full_return_adv: Option<f64>,
    actor_tape_first: Tape,
    critic_tape_first: Tape,
}

struct MetricsAggregator {
    eta: f64,
    n: usize,
    reward: f64,
    abs_td: f64,
    surrogate: f64,
    value_loss: f64,
    ratio: f64,
    is_weight: f64,
    full_ret_adv: f64,
    full_ret_n: usize,
}

impl MetricsAggregator {
    fn new(eta: f64) -> Self {
        Self {
            eta,
            n: 0,
            reward: 0.0,
            abs_td: 0.0,
            surrogate: 0.0,
            value_loss: 0.0,
            ratio: 0.0,
            is_weight: 0.0,
            full_ret_adv: 0.0,
            full_ret_n: 0,
        }
    }

    fn observe(&mut self, s: &SegmentEval, w: f64) {
        self.n += 1;
        self.reward += s.reward0;
        self.abs_td += s.psi0.abs();
        self.surrogate += w * clipped_surrogate(s.chi0, s.vhat0, self.eta);
        self.value_loss += s.vhat0 * s.vhat0 / 2.0;
        self.ratio += s.chi0;
        self.is_weight += w;
        if let Some(a) = s.full_return_adv {
            self.full_ret_adv += a;
            self.full_ret_n += 1;
        }
    }

    fn finish(self, learner: &Learner) -> IterationMetrics {
        let n = self.n.max(1) as f64;
        IterationMetrics {
            iteration: learner.iteration,
            mean_reward: self.reward / n,
            mean_abs_td: self.abs_td / n,
            // Reported as a loss: the negated mean surrogate.
            policy_loss: -self.surrogate / n,
            value_loss: self.value_loss / n,
            mean_ratio: self.ratio / n,
            mean_is_weight: self.is_weight / n,
            snapshot_version: learner.params.version,
            buffer_size: learner.buffer.len(),
            buffer_max_priority: learner.buffer.max_priority(),
            ratio_floor_clamps: learner.ratio_floor_clamps,
            full_return_advantage: if self.full_ret_n > 0 {
                self.full_ret_adv / self.full_ret_n as f64
            } else {
                f64::NAN
            },
        }
    }
}
