//! End-to-end experiment driver.
//!
//! Builds the fleet, catalog and service dataset from one config, then
//! wires brokers to the learner. A single-broker run executes in strict
//! lockstep (bit-reproducible); multi-broker runs use one thread per
//! broker with a bounded submission channel (back-pressure beyond 16
//! pending batches) and a shared snapshot slot the learner republishes
//! into after every iteration.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{ActionMode, Broker, BrokerConfig, BrokerError, ServiceQueue};
use crate::environment::{EnvContext, EnvError, Episode, EpisodeSummary, ObjectiveWeights, ServicePlan};
use crate::infrastructure::{generate_infrastructure, InfraError, InfraParams, Infrastructure};
use crate::learner::{IterationMetrics, Learner, LearnerConfig, LearnerError, PolicySnapshot};
use crate::neuronet::{AcParams, NetConfig, NetError, Network};
use crate::replay::{PriorityBuffer, ReplayError};
use crate::security::{SecurityCatalog, SecurityError, SecurityThresholds};
use crate::workload::{
    assign_attributes, build_dataset, generate_topology, load_services, DagShapeParams,
    DatasetProfile, GenRanges, ServiceDag, WorkloadError,
};

#[derive(Debug, Error)]
pub enum OrchError {
    #[error("config validation: {0}")]
    Config(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Infra(#[from] InfraError),
    #[error(transparent)]
    Security(#[from] SecurityError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("worker thread panicked")]
    WorkerPanic,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Latency weight α and security weight β (must sum to 1).
    pub alpha: f64,
    pub beta: f64,
    pub cloud_count: usize,
    pub fog_count: usize,
    pub iot_count: usize,
    pub area_m: f64,
    /// Per-tier probability that a catalog item is enabled on a server.
    pub cloud_item_prob: f64,
    pub fog_item_prob: f64,
    pub iot_item_prob: f64,
    pub hard_controls: Vec<usize>,
    pub p_constraint: f64,
    pub p_failure: f64,
    /// Dataset grid profile; ignored when `dataset_path` is set.
    pub dataset_profile: DatasetProfile,
    pub dataset_path: Option<PathBuf>,
    pub infra_path: Option<PathBuf>,
    pub broker_count: usize,
    pub n_steps: usize,
    pub total_iterations: u64,
    pub enable_lstm: bool,
    pub enable_per: bool,
    pub fc1: usize,
    pub fc2: usize,
    pub lstm_hidden: usize,
    pub buffer_capacity: usize,
    /// Prioritization exponent ν (forced to 0 when PER is disabled).
    pub nu: f64,
    pub priority_epsilon: f64,
    pub violation_priority_bonus: f64,
    pub mask_capacity: bool,
    /// Held-out services used by `holdout_plans`.
    pub eval_services: usize,
    pub learner: LearnerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            alpha: 0.5,
            beta: 0.5,
            cloud_count: 4,
            fog_count: 8,
            iot_count: 13,
            area_m: 100_000.0,
            cloud_item_prob: 0.9,
            fog_item_prob: 0.6,
            iot_item_prob: 0.3,
            hard_controls: vec![1, 2, 3],
            p_constraint: -100_000.0,
            p_failure: -1_000_000.0,
            dataset_profile: DatasetProfile::Small,
            dataset_path: None,
            infra_path: None,
            broker_count: 2,
            n_steps: 64,
            total_iterations: 200,
            enable_lstm: true,
            enable_per: true,
            fc1: 128,
            fc2: 128,
            lstm_hidden: 64,
            buffer_capacity: 10_000,
            nu: 0.6,
            priority_epsilon: 0.01,
            violation_priority_bonus: 0.0,
            mask_capacity: false,
            eval_services: 100,
            learner: LearnerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), OrchError> {
        ObjectiveWeights::new(self.alpha, self.beta)
            .map_err(|e| OrchError::Config(e.to_string()))?;
        if self.broker_count == 0 {
            return Err(OrchError::Config("broker_count must be ≥ 1".into()));
        }
        if self.n_steps == 0 {
            return Err(OrchError::Config("n_steps must be ≥ 1".into()));
        }
        if self.buffer_capacity < self.learner.batch_size {
            return Err(OrchError::Config(
                "buffer_capacity must be at least the batch size".into(),
            ));
        }
        if self.cloud_count + self.fog_count + self.iot_count == 0 && self.infra_path.is_none() {
            return Err(OrchError::Config("fleet has no servers".into()));
        }
        Ok(())
    }

    pub fn from_toml(path: &Path) -> Result<Self, OrchError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything a run needs: immutable context plus prepared service plans.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub ctx: Arc<EnvContext>,
    pub plans: Arc<Vec<Arc<ServicePlan>>>,
}

impl Experiment {
    pub fn build(config: ExperimentConfig) -> Result<Self, OrchError> {
        config.validate()?;
        let mut catalog = SecurityCatalog::standard();
        catalog.hard_controls = config.hard_controls.iter().copied().collect();
        catalog.validate()?;
        let mut thresholds = SecurityThresholds::default();
        thresholds.p_constraint = config.p_constraint;

        let infra = match &config.infra_path {
            Some(p) => crate::infrastructure::load_infrastructure(p)?,
            None => {
                let mut params = InfraParams::with_counts(
                    config.cloud_count,
                    config.fog_count,
                    config.iot_count,
                );
                params.area_m = config.area_m;
                params.seed = crate::subseed(config.seed, "infra");
                params.cloud.item_prob = config.cloud_item_prob;
                params.fog.item_prob = config.fog_item_prob;
                params.iot.item_prob = config.iot_item_prob;
                generate_infrastructure(&params, &catalog)?
            }
        };
        let weights = ObjectiveWeights::new(config.alpha, config.beta)
            .map_err(|e| OrchError::Config(e.to_string()))?;
        let ctx = EnvContext::new(
            infra,
            catalog,
            thresholds,
            weights,
            config.p_failure,
            GenRanges::default(),
        )?;

        let services = match &config.dataset_path {
            Some(p) => load_services(p)?,
            None => build_dataset(
                config.dataset_profile,
                crate::subseed(config.seed, "dataset"),
                &GenRanges::default(),
            ),
        };
        let plans = prepare_plans(&services, &ctx)?;
        Ok(Self {
            config,
            ctx,
            plans: Arc::new(plans),
        })
    }

    pub fn actor_config(&self) -> NetConfig {
        NetConfig {
            input_dim: self.ctx.state_dim(),
            fc1: self.config.fc1,
            fc2: self.config.fc2,
            hidden: self.config.lstm_hidden,
            outputs: self.ctx.server_count(),
            use_lstm: self.config.enable_lstm,
        }
    }

    pub fn critic_config(&self) -> NetConfig {
        NetConfig {
            outputs: 1,
            ..self.actor_config()
        }
    }

    pub fn initial_params(&self) -> AcParams {
        AcParams::init(self.actor_config(), self.critic_config(), self.config.seed)
    }

    fn make_learner(&self) -> Result<Learner, OrchError> {
        let c = &self.config;
        let nu = if c.enable_per { c.nu } else { 0.0 };
        let mut lc = c.learner;
        if !c.enable_per {
            lc.iota_start = 0.0;
            lc.iota_end = 0.0;
        }
        if lc.iota_anneal_iters == 0 {
            lc.iota_anneal_iters = c.total_iterations.max(1);
        }
        let buffer = PriorityBuffer::new(c.buffer_capacity, nu, lc.iota_start, 0.01)?;
        Ok(Learner::new(lc, self.initial_params(), buffer, c.seed)?)
    }

    fn make_broker(&self, id: usize, snapshot: Arc<PolicySnapshot>) -> Broker {
        let c = &self.config;
        let mut bc = BrokerConfig::new(id, c.n_steps, c.seed);
        bc.priority_epsilon = c.priority_epsilon;
        bc.violation_priority_bonus = c.violation_priority_bonus;
        bc.mask_capacity = c.mask_capacity;
        let queue = ServiceQueue::new(
            self.plans.clone(),
            crate::subseed(c.seed, &format!("queue-{id}")),
        );
        Broker::new(bc, self.ctx.clone(), queue, snapshot)
    }

    /// Held-out services (disjoint seed stream from the training dataset).
    pub fn holdout_plans(&self) -> Result<Vec<Arc<ServicePlan>>, OrchError> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::subseed(c.seed, "holdout"));
        let grid = [0.2, 0.4, 0.6, 0.8, 1.0];
        let mut out = Vec::with_capacity(c.eval_services);
        for i in 0..c.eval_services {
            let k = if i % 2 == 0 { 5 } else { 10 };
            let dag = assign_attributes(
                generate_topology(&DagShapeParams {
                    task_count: k,
                    fat: grid[rng.gen_range(0..grid.len())],
                    density: grid[rng.gen_range(0..grid.len())],
                    seed: rng.gen(),
                })?,
                rng.gen(),
                &GenRanges::default(),
            );
            out.push(ServicePlan::new(dag, &self.ctx)?);
        }
        Ok(out)
    }

    /// Trains to the iteration budget and returns the final parameters,
    /// per-iteration metrics, and conservation counters.
    pub fn train(&self) -> Result<TrainOutcome, OrchError> {
        if self.config.broker_count == 1 {
            self.train_lockstep()
        } else {
            self.train_threaded(None, self.config.total_iterations)
        }
    }

    fn train_lockstep(&self) -> Result<TrainOutcome, OrchError> {
        let start = Instant::now();
        let mut learner = self.make_learner()?;
        let mut broker = self.make_broker(0, learner.snapshot());
        let mut rows = Vec::new();
        let mut window = SummaryWindow::new(200);
        let mut sent = 0u64;
        let mut env_steps = 0u64;
        while learner.iteration() < self.config.total_iterations {
            let batch = broker.run_epoch()?;
            sent += batch.transitions.len() as u64;
            env_steps += batch.transitions.len() as u64;
            window.extend(&batch.summaries);
            learner.ingest(batch.transitions);
            if learner.ready() {
                let m = learner.learn_iteration()?;
                broker.sync_policy(learner.snapshot());
                rows.push(combine(m, &window, env_steps, start.elapsed().as_millis() as u64));
            }
        }
        Ok(TrainOutcome {
            params: learner.params,
            metrics: rows,
            transitions_sent: sent,
            transitions_ingested: learner.transitions_ingested,
            env_steps,
        })
    }

    /// Shared threaded pipeline: runs until the iteration budget, or until
    /// `step_target` env steps have been produced when one is given.
    fn train_threaded(
        &self,
        step_target: Option<u64>,
        iteration_budget: u64,
    ) -> Result<TrainOutcome, OrchError> {
        let start = Instant::now();
        let mut learner = self.make_learner()?;
        let snapshot_slot = Arc::new(RwLock::new(learner.snapshot()));
        let stop = Arc::new(AtomicBool::new(false));
        let steps_total = Arc::new(AtomicU64::new(0));
        let (tx, rx) = crossbeam::channel::bounded::<crate::broker::ExperienceBatch>(16);

        let mut handles = Vec::new();
        for id in 0..self.config.broker_count {
            let mut broker = self.make_broker(id, snapshot_slot.read().unwrap().clone());
            let tx = tx.clone();
            let stop = stop.clone();
            let steps_total = steps_total.clone();
            let slot = snapshot_slot.clone();
            handles.push(std::thread::spawn(move || -> Result<u64, BrokerError> {
                let mut sent = 0u64;
                while !stop.load(Ordering::Relaxed) {
                    broker.sync_policy(slot.read().unwrap().clone());
                    let batch = broker.run_epoch()?;
                    sent += batch.transitions.len() as u64;
                    steps_total.fetch_add(batch.transitions.len() as u64, Ordering::Relaxed);
                    if tx.send(batch).is_err() {
                        break;
                    }
                }
                Ok(sent)
            }));
        }
        drop(tx);

        let mut rows = Vec::new();
        let mut window = SummaryWindow::new(200);
        let done = |learner: &Learner| -> bool {
            match step_target {
                Some(t) => steps_total.load(Ordering::Relaxed) >= t,
                None => learner.iteration() >= iteration_budget,
            }
        };
        while !done(&learner) {
            match rx.recv_timeout(std::time::Duration::from_millis(20)) {
                Ok(batch) => {
                    window.extend(&batch.summaries);
                    learner.ingest(batch.transitions);
                    if learner.ready() && learner.iteration() < iteration_budget {
                        let m = learner.learn_iteration()?;
                        *snapshot_slot.write().unwrap() = learner.snapshot();
                        rows.push(combine(
                            m,
                            &window,
                            steps_total.load(Ordering::Relaxed),
                            start.elapsed().as_millis() as u64,
                        ));
                    }
                }
                Err(crossbeam::channel::RecvTimeoutError::Timeout) => continue,
                Err(crossbeam::channel::RecvTimeoutError::Disconnected) => break,
            }
        }
        stop.store(true, Ordering::Relaxed);
        // Drain every in-flight batch so brokers can finish their sends.
        while let Ok(batch) = rx.recv_timeout(std::time::Duration::from_millis(200)) {
            window.extend(&batch.summaries);
            learner.ingest(batch.transitions);
        }
        let mut sent = 0u64;
        for h in handles {
            sent += h.join().map_err(|_| OrchError::WorkerPanic)??;
        }
        // Anything still buffered after the joins.
        while let Ok(batch) = rx.try_recv() {
            window.extend(&batch.summaries);
            learner.ingest(batch.transitions);
        }
        Ok(TrainOutcome {
            params: learner.params,
            metrics: rows,
            transitions_sent: sent,
            transitions_ingested: learner.transitions_ingested,
            env_steps: steps_total.load(Ordering::Relaxed),
        })
    }

    /// Wall-clock seconds for the pipeline to produce `target_steps`
    /// environment steps with `workers` brokers.
    pub fn measure_throughput(&self, workers: usize, target_steps: u64) -> Result<f64, OrchError> {
        let mut cfg = self.config.clone();
        cfg.broker_count = workers;
        let exp = Experiment {
            config: cfg,
            ctx: self.ctx.clone(),
            plans: self.plans.clone(),
        };
        let start = Instant::now();
        exp.train_threaded(Some(target_steps), u64::MAX)?;
        Ok(start.elapsed().as_secs_f64())
    }

    /// Argmax-mode rollouts of `policy` over `plans`.
    pub fn evaluate(
        &self,
        policy: &EvalPolicy,
        plans: &[Arc<ServicePlan>],
    ) -> Result<EvalSummary, OrchError> {
        let mut rows = Vec::with_capacity(plans.len());
        let mut rng = ChaCha8Rng::seed_from_u64(crate::subseed(self.config.seed, "eval-random"));
        for plan in plans {
            let mut episode = Episode::new(self.ctx.clone(), plan.clone());
            let mut rec = match policy {
                EvalPolicy::Net(net) => net.fresh_state(),
                _ => crate::neuronet::RecurrentState::zeros(0),
            };
            let mut summary = None;
            while !episode.done() {
                let action = match policy {
                    EvalPolicy::Net(net) => {
                        let state = episode.state();
                        let (a, _, next) = crate::broker::decision_engine(
                            net,
                            state.as_slice(),
                            &rec,
                            ActionMode::Argmax,
                            &mut rng,
                            None,
                        )?;
                        rec = next;
                        a
                    }
                    EvalPolicy::Random => rng.gen_range(0..self.ctx.server_count()),
                    EvalPolicy::GreedyLatency => greedy_choice(&episode, |p| (p.t_ms, 0.0))?,
                    EvalPolicy::GreedySecurity => {
                        greedy_choice(&episode, |p| (-p.security_score, p.t_ms))?
                    }
                };
                let outcome = episode.step(action)?;
                if outcome.done {
                    summary = outcome.summary;
                }
            }
            let s = summary.expect("finished episode has a summary");
            rows.push(EvalRow {
                service_id: s.service_id.clone(),
                response_ms: s.response_ms,
                security_score: s.security_score,
                security_sum: s.security_sum,
                weighted_cost: s.weighted_cost,
                violations: s.constraint_violations,
                feasible: !s.any_violation && s.security_score >= 0.0,
            });
        }
        Ok(EvalSummary::from_rows(rows))
    }
}

fn prepare_plans(
    services: &[ServiceDag],
    ctx: &Arc<EnvContext>,
) -> Result<Vec<Arc<ServicePlan>>, OrchError> {
    services
        .iter()
        .map(|s| Ok(ServicePlan::new(s.clone(), ctx)?))
        .collect()
}

/// Picks the server minimizing the key returned by `key` (lexicographic,
/// ties toward the lowest server id).
fn greedy_choice(
    episode: &Episode,
    key: impl Fn(&crate::environment::ActionPreview) -> (f64, f64),
) -> Result<usize, EnvError> {
    let r = episode.ctx().server_count();
    let mut best = 0usize;
    let mut best_key = key(&episode.peek(0)?);
    for a in 1..r {
        let k = key(&episode.peek(a)?);
        if k < best_key {
            best = a;
            best_key = k;
        }
    }
    Ok(best)
}

/// Reference policies for paired comparisons.
pub enum EvalPolicy<'a> {
    Net(&'a Network),
    Random,
    GreedyLatency,
    GreedySecurity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub service_id: String,
    pub response_ms: f64,
    pub security_score: f64,
    pub security_sum: f64,
    pub weighted_cost: f64,
    pub violations: usize,
    pub feasible: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub services: usize,
    pub mean_response_ms: f64,
    pub mean_security_score: f64,
    pub mean_weighted_cost: f64,
    pub violation_rate: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalSummary {
    fn from_rows(rows: Vec<EvalRow>) -> Self {
        let n = rows.len().max(1) as f64;
        Self {
            services: rows.len(),
            mean_response_ms: rows.iter().map(|r| r.response_ms).sum::<f64>() / n,
            mean_security_score: rows.iter().map(|r| r.security_score).sum::<f64>() / n,
            mean_weighted_cost: rows.iter().map(|r| r.weighted_cost).sum::<f64>() / n,
            violation_rate: rows.iter().filter(|r| !r.feasible).count() as f64 / n,
            rows,
        }
    }
}

/// Rolling window over recent completed episodes.
struct SummaryWindow {
    cap: usize,
    items: VecDeque<EpisodeSummary>,
    completed: u64,
}

impl SummaryWindow {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            items: VecDeque::new(),
            completed: 0,
        }
    }

    fn extend(&mut self, summaries: &[EpisodeSummary]) {
        for s in summaries {
            self.completed += 1;
            self.items.push_back(s.clone());
            if self.items.len() > self.cap {
                self.items.pop_front();
            }
        }
    }

    fn mean(&self, f: impl Fn(&EpisodeSummary) -> f64) -> f64 {
        if self.items.is_empty() {
            return f64::NAN;
        }
        self.items.iter().map(f).sum::<f64>() / self.items.len() as f64
    }
}

/// One metrics CSV row: learner quantities plus recent-episode aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub env_steps: u64,
    pub elapsed_ms: u64,
    pub mean_reward: f64,
    pub mean_abs_td: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub mean_ratio: f64,
    pub mean_is_weight: f64,
    pub snapshot_version: u64,
    pub buffer_size: usize,
    pub buffer_max_priority: f64,
    pub episodes_completed: u64,
    pub recent_weighted_cost: f64,
    pub recent_response_ms: f64,
    pub recent_security_score: f64,
    pub recent_violation_rate: f64,
    pub full_return_advantage: f64,
}

fn combine(m: IterationMetrics, window: &SummaryWindow, env_steps: u64, elapsed_ms: u64) -> MetricsRow {
    MetricsRow {
        iteration: m.iteration,
        env_steps,
        elapsed_ms,
        mean_reward: m.mean_reward,
        mean_abs_td: m.mean_abs_td,
        policy_loss: m.policy_loss,
        value_loss: m.value_loss,
        mean_ratio: m.mean_ratio,
        mean_is_weight: m.mean_is_weight,
        snapshot_version: m.snapshot_version,
        buffer_size: m.buffer_size,
        buffer_max_priority: m.buffer_max_priority,
        episodes_completed: window.completed,
        recent_weighted_cost: window.mean(|s| s.weighted_cost),
        recent_response_ms: window.mean(|s| s.response_ms),
        recent_security_score: window.mean(|s| s.security_score),
        recent_violation_rate: window.mean(|s| if s.any_violation { 1.0 } else { 0.0 }),
        full_return_advantage: m.full_return_advantage,
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: AcParams,
    pub metrics: Vec<MetricsRow>,
    pub transitions_sent: u64,
    pub transitions_ingested: u64,
    pub env_steps: u64,
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<(), OrchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_eval_csv(summary: &EvalSummary, path: &Path) -> Result<(), OrchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &summary.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Persists a finished run: checkpoint, metrics CSV, and the exact config.
pub fn persist_run(outcome: &TrainOutcome, config: &ExperimentConfig, dir: &Path) -> Result<(), OrchError> {
    std::fs::create_dir_all(dir)?;
    crate::neuronet::save_checkpoint(&outcome.params, &dir.join("checkpoint.json"))?;
    write_metrics_csv(&outcome.metrics, &dir.join("metrics.csv"))?;
    std::fs::write(
        dir.join("run_config.json"),
        serde_json::to_string_pretty(config)?,
    )?;
    Ok(())
}

/// Speedup rows for `bench_speedup`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub workers: usize,
    pub seconds: f64,
    pub speedup: f64,
}

/// Measures wall time to a target number of environment steps for each
/// worker count; speedup is the single-worker time over each variant's.
pub fn bench_speedup(
    exp: &Experiment,
    worker_counts: &[usize],
    target_steps: u64,
) -> Result<Vec<SpeedupRow>, OrchError> {
    let reference = exp.measure_throughput(1, target_steps)?;
    let mut rows = vec![SpeedupRow {
        workers: 1,
        seconds: reference,
        speedup: 1.0,
    }];
    for &w in worker_counts.iter().filter(|&&w| w != 1) {
        let t = exp.measure_throughput(w, target_steps)?;
        rows.push(SpeedupRow {
            workers: w,
            seconds: t,
            speedup: reference / t,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            seed: 7,
            cloud_count: 2,
            fog_count: 2,
            iot_count: 2,
            broker_count: 1,
            n_steps: 32,
            total_iterations: 3,
            fc1: 8,
            fc2: 8,
            lstm_hidden: 8,
            buffer_capacity: 512,
            eval_services: 10,
            learner: LearnerConfig {
                batch_size: 16,
                horizon: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_keeps_initial_checkpoint() {
        let mut cfg = tiny_config();
        cfg.total_iterations = 0;
        let exp = Experiment::build(cfg).unwrap();
        let init = exp.initial_params();
        let out = exp.train().unwrap();
        assert_eq!(out.params.actor, init.actor);
        assert_eq!(out.params.critic, init.critic);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn lockstep_training_is_bit_reproducible() {
        let run = || {
            let exp = Experiment::build(tiny_config()).unwrap();
            exp.train().unwrap().params
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn lstm_ablation_swaps_in_feedforward_nets() {
        let mut cfg = tiny_config();
        cfg.enable_lstm = false;
        let exp = Experiment::build(cfg).unwrap();
        let out = exp.train().unwrap();
        assert!(!out.params.actor.config.use_lstm);
        assert!(out.params.actor.lstm.is_none());
        // History independence of the trained actor.
        let s1 = vec![0.2; exp.ctx.state_dim()];
        let s2 = vec![0.8; exp.ctx.state_dim()];
        let rec = out.params.actor.fresh_state();
        let (_, rec_a) = out.params.actor.forward_step(&s1, &rec).unwrap();
        let (o1, _) = out.params.actor.forward_step(&s2, &rec).unwrap();
        let (o2, _) = out.params.actor.forward_step(&s2, &rec_a).unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn per_ablation_forces_uniform_replay() {
        let mut cfg = tiny_config();
        cfg.enable_per = false;
        let exp = Experiment::build(cfg).unwrap();
        let learner = exp.make_learner().unwrap();
        assert_eq!(learner.buffer.nu(), 0.0);
        assert_eq!(learner.buffer.iota(), 0.0);
        assert_eq!(learner.config.iota_end, 0.0);
    }

    #[test]
    fn threaded_training_conserves_transitions() {
        let mut cfg = tiny_config();
        cfg.broker_count = 2;
        cfg.total_iterations = 3;
        let exp = Experiment::build(cfg).unwrap();
        let out = exp.train().unwrap();
        assert_eq!(
            out.transitions_sent, out.transitions_ingested,
            "every emitted transition must be ingested exactly once"
        );
        assert!(out.metrics.len() <= 3);
        // Snapshot versions in emitted metrics are non-decreasing.
        let versions: Vec<u64> = out.metrics.iter().map(|m| m.snapshot_version).collect();
        let mut sorted = versions.clone();
        sorted.sort_unstable();
        assert_eq!(versions, sorted);
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let exp = Experiment::build(tiny_config()).unwrap();
        let params = exp.initial_params();
        let holdout = exp.holdout_plans().unwrap();
        let a = exp.evaluate(&EvalPolicy::Net(&params.actor), &holdout).unwrap();
        let b = exp.evaluate(&EvalPolicy::Net(&params.actor), &holdout).unwrap();
        assert_eq!(a.mean_weighted_cost, b.mean_weighted_cost);
        assert_eq!(a.rows.len(), 10);
        assert!((0.0..=1.0).contains(&a.violation_rate));
    }

    #[test]
    fn greedy_references_behave() {
        // One fully equipped, fast server among bare slow ones.
        let mut cfg = tiny_config();
        cfg.cloud_count = 0;
        cfg.fog_count = 0;
        cfg.iot_count = 4;
        cfg.iot_item_prob = 0.0;
        let exp = Experiment::build(cfg).unwrap();
        let mut infra = exp.ctx.infra.clone();
        infra.servers[2].config_items = exp.ctx.catalog.item_universe();
        let ctx = EnvContext::new(
            infra,
            exp.ctx.catalog.clone(),
            exp.ctx.thresholds,
            exp.ctx.weights,
            exp.ctx.p_failure,
            exp.ctx.ranges,
        )
        .unwrap();
        let holdout = exp.holdout_plans().unwrap();
        let plans: Vec<Arc<ServicePlan>> = holdout
            .iter()
            .map(|p| ServicePlan::new(p.dag.clone(), &ctx).unwrap())
            .collect();
        let exp2 = Experiment {
            config: exp.config.clone(),
            ctx,
            plans: Arc::new(plans.clone()),
        };
        // Security-greedy routes every task to the equipped server.
        let mut episode = Episode::new(exp2.ctx.clone(), plans[0].clone());
        while !episode.done() {
            let a = greedy_choice(&episode, |p| (-p.security_score, p.t_ms)).unwrap();
            assert_eq!(a, 2);
            episode.step(a).unwrap();
        }

        // Latency-greedy on a single-task service matches brute force.
        let single = plans
            .iter()
            .find(|p| p.task_count() == 5)
            .unwrap();
        let episode = Episode::new(exp2.ctx.clone(), single.clone());
        let a = greedy_choice(&episode, |p| (p.t_ms, 0.0)).unwrap();
        let mut best = (f64::MAX, 0usize);
        for s in 0..exp2.ctx.server_count() {
            let t = episode.peek(s).unwrap().t_ms;
            if t < best.0 {
                best = (t, s);
            }
        }
        assert_eq!(a, best.1);
    }

    #[test]
    fn random_reference_is_no_better_than_greedy() {
        let exp = Experiment::build(tiny_config()).unwrap();
        let holdout = exp.holdout_plans().unwrap();
        let random = exp.evaluate(&EvalPolicy::Random, &holdout).unwrap();
        let greedy_sec = exp.evaluate(&EvalPolicy::GreedySecurity, &holdout).unwrap();
        assert!(
            random.mean_weighted_cost >= greedy_sec.mean_weighted_cost,
            "random {} vs greedy-security {}",
            random.mean_weighted_cost,
            greedy_sec.mean_weighted_cost
        );
    }

    #[test]
    fn config_round_trips_through_toml_and_validates() {
        let cfg = tiny_config();
        let text = toml::to_string(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        let loaded = ExperimentConfig::from_toml(&path).unwrap();
        assert_eq!(loaded.seed, cfg.seed);
        assert_eq!(loaded.learner.batch_size, cfg.learner.batch_size);

        let mut bad = tiny_config();
        bad.alpha = 0.6; // α + β ≠ 1
        assert!(bad.validate().is_err());
    }

    #[test]
    fn persist_run_writes_all_artifacts() {
        let mut cfg = tiny_config();
        cfg.total_iterations = 1;
        let exp = Experiment::build(cfg.clone()).unwrap();
        let out = exp.train().unwrap();
        let dir = tempfile::tempdir().unwrap();
        persist_run(&out, &cfg, dir.path()).unwrap();
        assert!(dir.path().join("checkpoint.json").exists());
        assert!(dir.path().join("metrics.csv").exists());
        assert!(dir.path().join("run_config.json").exists());
        let loaded = crate::neuronet::load_checkpoint(&dir.path().join("checkpoint.json")).unwrap();
        assert_eq!(loaded, out.params);
    }
}
