//! Fog service-placement simulator with a distributed broker-learner
//! reinforcement-learning trainer.
//!
//! The crate is organized around the data flow of a placement experiment:
//!
//! * [`workload`] generates and analyzes DAG-structured services
//!   (upward ranks, critical path, placement order).
//! * [`infrastructure`] models the three-tier server fleet, bandwidth and
//!   propagation delays.
//! * [`security`] scores how well a server's enabled configuration items
//!   satisfy a task's required security controls, with hard-constraint
//!   penalties.
//! * [`environment`] is the MDP: state encoding, per-step latency/security
//!   rewards, constraint checks, and the weighted placement objective.
//! * [`neuronet`] is a small self-contained differentiable core
//!   (FC layers + LSTM cell + softmax/value heads, Adam, BPTT).
//! * [`replay`] is a prioritized experience buffer over a sum tree.
//! * [`learner`] runs off-policy corrected actor-critic updates over
//!   prioritized samples and publishes policy snapshots.
//! * [`broker`] runs episodes against the environment with a snapshot of
//!   the policy and ships experience batches to the learner.
//! * [`orchestrator`] wires brokers and the learner together for training,
//!   evaluation, reference policies and speedup benchmarks.

pub mod broker;
pub mod environment;
pub mod infrastructure;
pub mod learner;
pub mod neuronet;
pub mod orchestrator;
pub mod replay;
pub mod security;
pub mod workload;

mod seeding;

pub use seeding::subseed;
