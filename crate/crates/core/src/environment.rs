//! The placement MDP.
//!
//! An [`Episode`] walks one service's tasks in placement order; each step
//! assigns the current task to a server and emits a reward that combines a
//! normalized latency term (critical-path tasks only) with a normalized
//! security term, or a large failure penalty when the deadline or a
//! capacity constraint is broken. Fleet- and catalog-derived lookup tables
//! live in a shared [`EnvContext`] so that episodes are cheap to create.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infrastructure::Infrastructure;
use crate::security::{self, SecurityCatalog, SecurityThresholds};
use crate::workload::{AverageCosts, CriticalPath, DagIndex, GenRanges, ServiceDag};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid objective weights: α={0} β={1} (must be non-negative and sum to 1)")]
    InvalidWeights(f64, f64),
    #[error("action {action} out of range for {servers} servers")]
    ActionOutOfRange { action: usize, servers: usize },
    #[error("episode is already finished")]
    EpisodeFinished,
    #[error("predecessor {0} not yet assigned")]
    UnassignedPredecessor(usize),
    #[error("deployment incomplete: task {0} unassigned")]
    IncompleteDeployment(usize),
    #[error(transparent)]
    Workload(#[from] crate::workload::WorkloadError),
    #[error(transparent)]
    Infra(#[from] crate::infrastructure::InfraError),
    #[error(transparent)]
    Security(#[from] crate::security::SecurityError),
}

/// Objective weights (latency α, security β); must sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl ObjectiveWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, EnvError> {
        if alpha < 0.0 || beta < 0.0 || (alpha + beta - 1.0).abs() > 1e-9 {
            return Err(EnvError::InvalidWeights(alpha, beta));
        }
        Ok(Self { alpha, beta })
    }

    pub fn balanced() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

/// Immutable per-experiment context: the fleet, the security catalog, and
/// precomputed scoring/normalization tables.
#[derive(Debug)]
pub struct EnvContext {
    pub infra: Infrastructure,
    pub catalog: SecurityCatalog,
    pub thresholds: SecurityThresholds,
    pub weights: ObjectiveWeights,
    /// Reward emitted on deadline or capacity violations.
    pub p_failure: f64,
    pub ranges: GenRanges,
    /// Per server, per control (0-based): discrete control level.
    ctrl_level: Vec<Vec<f64>>,
    /// Per server, per control: enabled-item count within that control.
    item_count: Vec<Vec<f64>>,
    /// Items per control (state-feature normalizer).
    items_per_control: f64,
    mean_bw: Vec<f64>,
    max_iface: f64,
    max_x: f64,
    max_y: f64,
    max_mips: f64,
    min_mips: f64,
    min_pair_bw: Option<f64>,
    max_prop_ms: f64,
}

impl EnvContext {
    pub fn new(
        infra: Infrastructure,
        catalog: SecurityCatalog,
        thresholds: SecurityThresholds,
        weights: ObjectiveWeights,
        p_failure: f64,
        ranges: GenRanges,
    ) -> Result<Arc<Self>, EnvError> {
        catalog.validate()?;
        let controls = catalog.control_count();
        let mut ctrl_level = Vec::with_capacity(infra.servers.len());
        let mut item_count = Vec::with_capacity(infra.servers.len());
        for server in &infra.servers {
            let mut levels = Vec::with_capacity(controls);
            let mut counts = Vec::with_capacity(controls);
            for k in 1..=controls {
                let g = security::control_score(k, &server.config_items, &catalog, &thresholds)?;
                levels.push(security::ctrl_level(g, &thresholds)?);
                let items = catalog.control_items(k)?;
                counts.push(items.intersection(&server.config_items).count() as f64);
            }
            ctrl_level.push(levels);
            item_count.push(counts);
        }
        let items_per_control = catalog
            .controls
            .iter()
            .map(|c| c.capabilities.iter().map(|cp| cp.items.len()).sum::<usize>())
            .max()
            .unwrap_or(1) as f64;
        let mean_bw = (0..infra.servers.len())
            .map(|i| infra.mean_bandwidth_from(i))
            .collect();
        let max_iface = infra.servers.iter().map(|s| s.iface_mbps).fold(1e-12, f64::max);
        let max_x = infra.servers.iter().map(|s| s.x_m).fold(1e-12, f64::max);
        let max_y = infra.servers.iter().map(|s| s.y_m).fold(1e-12, f64::max);
        let max_mips = infra.max_mips();
        let min_mips = infra.min_mips();
        let min_pair_bw = infra.min_pair_bandwidth_mbps();
        let max_prop_ms = infra.max_propagation_delay_ms();
        Ok(Arc::new(Self {
            infra,
            catalog,
            thresholds,
            weights,
            p_failure,
            ranges,
            ctrl_level,
            item_count,
            items_per_control,
            mean_bw,
            max_iface,
            max_x,
            max_y,
            max_mips,
            min_mips,
            min_pair_bw,
            max_prop_ms,
        }))
    }

    pub fn server_count(&self) -> usize {
        self.infra.servers.len()
    }

    /// Cached discrete control level of `control` (1-based) on `server`.
    pub fn cached_ctrl_level(&self, server: usize, control: usize) -> f64 {
        self.ctrl_level[server][control - 1]
    }

    /// Security score of placing `task` on `server`, via the cached levels.
    pub fn cached_task_score(&self, task: &crate::workload::Task, server: usize) -> f64 {
        let full = self.thresholds.ctrl_levels[2];
        let mut num = 0.0;
        let mut den = 0.0;
        for &k in &task.controls {
            let level = self.cached_ctrl_level(server, k);
            if self.catalog.hard_controls.contains(&k) && level != full {
                return self.thresholds.p_constraint;
            }
            let w = self.catalog.ctrl_weights[k - 1];
            num += w * level;
            den += w;
        }
        num / den
    }

    /// Number of task features (k₁) for this catalog.
    pub fn task_feature_dim(&self) -> usize {
        4 + self.catalog.control_count() + 2
    }

    /// Number of per-server features (k₂) for this catalog.
    pub fn server_feature_dim(&self) -> usize {
        6 + self.catalog.control_count()
    }

    /// Total state dimensionality: k₁ + R·k₂.
    pub fn state_dim(&self) -> usize {
        self.task_feature_dim() + self.server_count() * self.server_feature_dim()
    }
}

/// Per-service analysis shared by all episodes over the same service:
/// placement order, critical-path membership, and normalization bounds.
#[derive(Debug)]
pub struct ServicePlan {
    pub dag: ServiceDag,
    pub index: DagIndex,
    /// Task positions in placement order.
    pub order: Vec<usize>,
    pub ranks: Vec<f64>,
    pub on_path: Vec<bool>,
    /// Aggregate incoming data volume per task (KB).
    pub incoming_kb: Vec<f64>,
    /// Per-task completion-time bounds across all placements (ms).
    pub t_min: Vec<f64>,
    pub t_max: Vec<f64>,
    /// Response-time bounds over the critical path (ms).
    pub l_min: f64,
    pub l_max: f64,
}

impl ServicePlan {
    pub fn new(dag: ServiceDag, ctx: &EnvContext) -> Result<Arc<Self>, EnvError> {
        let index = dag.index()?;
        let costs = AverageCosts::from_infrastructure(&ctx.infra)?;
        let ranks = crate::workload::ranks_from_costs(&dag, &index, &costs);
        let CriticalPath { on_path, .. } =
            crate::workload::critical_path_from_ranks(&dag, &index, &ranks, &costs);
        let order = crate::workload::order_from_ranks(&dag, &index, &ranks);

        let n = dag.tasks.len();
        let mut incoming_kb = vec![0.0; n];
        let mut t_min = vec![0.0; n];
        let mut t_max = vec![0.0; n];
        for p in 0..n {
            incoming_kb[p] = index.preds[p].iter().map(|&(_, kb)| kb).sum();
            t_min[p] = dag.tasks[p].cpu_mi / ctx.max_mips * 1000.0;
            let worst_wait = index.preds[p]
                .iter()
                .map(|&(_, kb)| match ctx.min_pair_bw {
                    Some(bw) => 8.0 * kb / bw + ctx.max_prop_ms,
                    None => 0.0,
                })
                .fold(0.0, f64::max);
            t_max[p] = dag.tasks[p].cpu_mi / ctx.min_mips * 1000.0 + worst_wait;
        }
        let l_min = (0..n).filter(|&p| on_path[p]).map(|p| t_min[p]).sum();
        let l_max = (0..n).filter(|&p| on_path[p]).map(|p| t_max[p]).sum();
        Ok(Arc::new(Self {
            dag,
            index,
            order,
            ranks,
            on_path,
            incoming_kb,
            t_min,
            t_max,
            l_min,
            l_max,
        }))
    }

    pub fn task_count(&self) -> usize {
        self.dag.tasks.len()
    }
}

/// Fixed-width feature vector; every component lies in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Encodes the decision state for the task at `order[step]`.
///
/// Task features: cpu, mem, storage, deadline (each scaled by its generation
/// range), the required-control multi-hot, aggregate incoming volume, and
/// the critical-path flag. Per-server features: MIPS, residual memory and
/// storage (fraction of capacity), coordinates, mean link bandwidth, and the
/// enabled-item count for each control the current task requires.
pub fn compose_state(
    ctx: &EnvContext,
    plan: &ServicePlan,
    step: usize,
    resid_mem: &[f64],
    resid_storage: &[f64],
) -> StateVector {
    let p = plan.order[step];
    let task = &plan.dag.tasks[p];
    let controls = ctx.catalog.control_count();
    let mut v = Vec::with_capacity(ctx.state_dim());

    v.push(clamp01(task.cpu_mi / ctx.ranges.cpu_mi.1));
    v.push(clamp01(task.mem_mb / ctx.ranges.mem_mb.1));
    v.push(clamp01(task.storage_mb / ctx.ranges.storage_mb.1));
    v.push(clamp01(task.deadline_ms / ctx.ranges.deadline_ms.1));
    for k in 1..=controls {
        v.push(if task.controls.contains(&k) { 1.0 } else { 0.0 });
    }
    let indeg = plan.index.preds[p].len().max(1) as f64;
    v.push(clamp01(plan.incoming_kb[p] / (ctx.ranges.edge_kb.1 * indeg)));
    v.push(if plan.on_path[p] { 1.0 } else { 0.0 });

    for (s, server) in ctx.infra.servers.iter().enumerate() {
        v.push(clamp01(server.mips / ctx.max_mips));
        v.push(clamp01(resid_mem[s] / server.mem_mb));
        v.push(clamp01(resid_storage[s] / server.storage_mb));
        v.push(clamp01(server.x_m / ctx.max_x));
        v.push(clamp01(server.y_m / ctx.max_y));
        v.push(clamp01(ctx.mean_bw[s] / ctx.max_iface));
        for k in 1..=controls {
            if task.controls.contains(&k) {
                v.push(clamp01(ctx.item_count[s][k - 1] / ctx.items_per_control));
            } else {
                v.push(0.0);
            }
        }
    }
    debug_assert_eq!(v.len(), ctx.state_dim());
    StateVector(v)
}

/// Completion time of the task at `pos` on `server`: computation plus the
/// longest wait for predecessor outputs. Co-located predecessors contribute
/// nothing. Requires all predecessors assigned.
pub fn completion_time(
    pos: usize,
    server: usize,
    assignment: &[Option<usize>],
    dag: &ServiceDag,
    index: &DagIndex,
    infra: &Infrastructure,
) -> Result<(f64, f64, f64), EnvError> {
    if server >= infra.servers.len() {
        return Err(EnvError::ActionOutOfRange {
            action: server,
            servers: infra.servers.len(),
        });
    }
    let t_comp = dag.tasks[pos].cpu_mi / infra.servers[server].mips * 1000.0;
    let mut t_wait = 0.0f64;
    for &(q, kb) in &index.preds[pos] {
        let from = assignment[q].ok_or(EnvError::UnassignedPredecessor(dag.tasks[q].id))?;
        t_wait = t_wait.max(infra.transfer_ms(kb, from, server)?);
    }
    Ok((t_comp, t_wait, t_comp + t_wait))
}

/// Total service response time: the sum of completion times over
/// critical-path tasks.
pub fn response_time(
    assignment: &[Option<usize>],
    plan: &ServicePlan,
    infra: &Infrastructure,
) -> Result<f64, EnvError> {
    let mut total = 0.0;
    for p in 0..plan.task_count() {
        if assignment.get(p).copied().flatten().is_none() {
            return Err(EnvError::IncompleteDeployment(plan.dag.tasks[p].id));
        }
    }
    for p in 0..plan.task_count() {
        if plan.on_path[p] {
            let server = assignment[p].unwrap();
            let (_, _, t) =
                completion_time(p, server, assignment, &plan.dag, &plan.index, infra)?;
            total += t;
        }
    }
    Ok(total)
}

/// Violation report for the deployment constraints: assignment uniqueness,
/// memory capacity, storage capacity, and per-task deadlines.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// Task ids with no assigned server (CST1).
    pub unassigned_tasks: Vec<usize>,
    /// Server indices whose memory capacity is exceeded (CST2).
    pub memory_over: Vec<usize>,
    /// Server indices whose storage capacity is exceeded (CST3).
    pub storage_over: Vec<usize>,
    /// Task ids whose completion time exceeds the deadline (CST4).
    pub deadline_missed: Vec<usize>,
}

impl ConstraintReport {
    pub fn is_clean(&self) -> bool {
        self.unassigned_tasks.is_empty()
            && self.memory_over.is_empty()
            && self.storage_over.is_empty()
            && self.deadline_missed.is_empty()
    }

    pub fn violation_count(&self) -> usize {
        self.unassigned_tasks.len()
            + self.memory_over.len()
            + self.storage_over.len()
            + self.deadline_missed.len()
    }
}

pub fn check_constraints(
    assignment: &[Option<usize>],
    plan: &ServicePlan,
    infra: &Infrastructure,
) -> Result<ConstraintReport, EnvError> {
    let mut report = ConstraintReport::default();
    for (p, t) in plan.dag.tasks.iter().enumerate() {
        if assignment.get(p).copied().flatten().is_none() {
            report.unassigned_tasks.push(t.id);
        }
    }
    let mut mem = vec![0.0f64; infra.servers.len()];
    let mut st = vec![0.0f64; infra.servers.len()];
    for (p, t) in plan.dag.tasks.iter().enumerate() {
        if let Some(s) = assignment.get(p).copied().flatten() {
            mem[s] += t.mem_mb;
            st[s] += t.storage_mb;
        }
    }
    for (s, server) in infra.servers.iter().enumerate() {
        if mem[s] > server.mem_mb {
            report.memory_over.push(s);
        }
        if st[s] > server.storage_mb {
            report.storage_over.push(s);
        }
    }
    if report.unassigned_tasks.is_empty() {
        for (p, t) in plan.dag.tasks.iter().enumerate() {
            let server = assignment[p].unwrap();
            let (_, _, total) =
                completion_time(p, server, assignment, &plan.dag, &plan.index, infra)?;
            if total > t.deadline_ms {
                report.deadline_missed.push(t.id);
            }
        }
    }
    Ok(report)
}

/// Components of the weighted service-level objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedCost {
    pub weighted: f64,
    pub response_ms: f64,
    pub security_score: f64,
    pub norm_latency: f64,
    /// Normalized security deficit, or the raw penalty magnitude when the
    /// score carries a hard-constraint violation.
    pub security_term: f64,
}

/// Weighted cost of a complete deployment. Latency normalizes against the
/// service's best/worst-case response-time bounds; the security deficit
/// normalizes against the [0, 100] score scale. A security score dragged
/// negative by hard-constraint penalties bypasses normalization and enters
/// at raw magnitude so infeasible deployments dominate all feasible ones.
pub fn weighted_cost(
    assignment: &[Option<usize>],
    plan: &ServicePlan,
    ctx: &EnvContext,
) -> Result<WeightedCost, EnvError> {
    let l = response_time(assignment, plan, &ctx.infra)?;
    let s = security::service_score(
        assignment,
        &plan.dag,
        &ctx.infra.servers,
        &ctx.catalog,
        &ctx.thresholds,
    )?;
    let norm_latency = if plan.l_max > plan.l_min {
        (l - plan.l_min) / (plan.l_max - plan.l_min)
    } else {
        0.0
    };
    let security_term = if s < 0.0 { -s } else { (100.0 - s) / 100.0 };
    Ok(WeightedCost {
        weighted: ctx.weights.alpha * norm_latency + ctx.weights.beta * security_term,
        response_ms: l,
        security_score: s,
        norm_latency,
        security_term,
    })
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiag {
    pub task_id: usize,
    pub server: usize,
    pub t_comp_ms: f64,
    pub t_wait_ms: f64,
    pub t_ms: f64,
    pub security_score: f64,
    pub deadline_violated: bool,
    pub capacity_violated: bool,
}

/// End-of-episode summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub service_id: String,
    pub response_ms: f64,
    pub security_score: f64,
    pub security_sum: f64,
    pub weighted_cost: f64,
    pub constraint_violations: usize,
    pub any_violation: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reward: f64,
    /// Zero vector once the episode is done.
    pub next_state: StateVector,
    pub done: bool,
    pub diag: StepDiag,
    pub summary: Option<EpisodeSummary>,
}

/// What a candidate action would yield, without mutating the episode.
#[derive(Debug, Clone, Copy)]
pub struct ActionPreview {
    pub t_ms: f64,
    pub security_score: f64,
    pub deadline_ok: bool,
    pub capacity_ok: bool,
}

/// One in-flight placement episode. Owned by exactly one caller at a time;
/// many episodes may share the same context and plan concurrently.
#[derive(Debug)]
pub struct Episode {
    ctx: Arc<EnvContext>,
    plan: Arc<ServicePlan>,
    step: usize,
    assignment: Vec<Option<usize>>,
    resid_mem: Vec<f64>,
    resid_storage: Vec<f64>,
    rewards: Vec<f64>,
    diags: Vec<StepDiag>,
}

impl Episode {
    pub fn new(ctx: Arc<EnvContext>, plan: Arc<ServicePlan>) -> Self {
        let n = plan.task_count();
        let resid_mem = ctx.infra.servers.iter().map(|s| s.mem_mb).collect();
        let resid_storage = ctx.infra.servers.iter().map(|s| s.storage_mb).collect();
        Self {
            ctx,
            plan,
            step: 0,
            assignment: vec![None; n],
            resid_mem,
            resid_storage,
            rewards: Vec::with_capacity(n),
            diags: Vec::with_capacity(n),
        }
    }

    pub fn ctx(&self) -> &Arc<EnvContext> {
        &self.ctx
    }

    pub fn plan(&self) -> &Arc<ServicePlan> {
        &self.plan
    }

    pub fn done(&self) -> bool {
        self.step >= self.plan.task_count()
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn assignment(&self) -> &[Option<usize>] {
        &self.assignment
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn diags(&self) -> &[StepDiag] {
        &self.diags
    }

    /// Position (into `dag.tasks`) of the task to place next.
    pub fn current_position(&self) -> Option<usize> {
        self.plan.order.get(self.step).copied()
    }

    pub fn state(&self) -> StateVector {
        if self.done() {
            return StateVector::zeros(self.ctx.state_dim());
        }
        compose_state(
            &self.ctx,
            &self.plan,
            self.step,
            &self.resid_mem,
            &self.resid_storage,
        )
    }

    /// Servers able to hold the current task without breaking capacity.
    pub fn capacity_mask(&self) -> Vec<bool> {
        match self.current_position() {
            Some(p) => {
                let t = &self.plan.dag.tasks[p];
                (0..self.ctx.server_count())
                    .map(|s| self.resid_mem[s] >= t.mem_mb && self.resid_storage[s] >= t.storage_mb)
                    .collect()
            }
            None => vec![false; self.ctx.server_count()],
        }
    }

    pub fn peek(&self, action: usize) -> Result<ActionPreview, EnvError> {
        let p = self.current_position().ok_or(EnvError::EpisodeFinished)?;
        if action >= self.ctx.server_count() {
            return Err(EnvError::ActionOutOfRange {
                action,
                servers: self.ctx.server_count(),
            });
        }
        let task = &self.plan.dag.tasks[p];
        let (_, _, t) = completion_time(
            p,
            action,
            &self.assignment,
            &self.plan.dag,
            &self.plan.index,
            &self.ctx.infra,
        )?;
        Ok(ActionPreview {
            t_ms: t,
            security_score: self.ctx.cached_task_score(task, action),
            deadline_ok: t <= task.deadline_ms,
            capacity_ok: self.resid_mem[action] >= task.mem_mb
                && self.resid_storage[action] >= task.storage_mb,
        })
    }

    /// Assigns the current task to server `action` and emits the reward.
    pub fn step(&mut self, action: usize) -> Result<StepOutcome, EnvError> {
        let p = self.current_position().ok_or(EnvError::EpisodeFinished)?;
        if action >= self.ctx.server_count() {
            return Err(EnvError::ActionOutOfRange {
                action,
                servers: self.ctx.server_count(),
            });
        }
        let task = self.plan.dag.tasks[p].clone();
        let (t_comp, t_wait, t) = completion_time(
            p,
            action,
            &self.assignment,
            &self.plan.dag,
            &self.plan.index,
            &self.ctx.infra,
        )?;
        let capacity_violated =
            self.resid_mem[action] < task.mem_mb || self.resid_storage[action] < task.storage_mb;
        // Violating assignments stand and are penalized rather than masked.
        self.assignment[p] = Some(action);
        self.resid_mem[action] -= task.mem_mb;
        self.resid_storage[action] -= task.storage_mb;

        let score = self.ctx.cached_task_score(&task, action);
        let deadline_violated = t > task.deadline_ms;
        let reward = if deadline_violated || capacity_violated {
            self.ctx.p_failure
        } else {
            let latency_term = if self.plan.on_path[p] && self.plan.t_max[p] > self.plan.t_min[p] {
                (t - self.plan.t_min[p]) / (self.plan.t_max[p] - self.plan.t_min[p])
            } else {
                0.0
            };
            let security_term = if score < 0.0 { -score } else { (100.0 - score) / 100.0 };
            -(self.ctx.weights.alpha * latency_term + self.ctx.weights.beta * security_term)
        };

        let diag = StepDiag {
            task_id: task.id,
            server: action,
            t_comp_ms: t_comp,
            t_wait_ms: t_wait,
            t_ms: t,
            security_score: score,
            deadline_violated,
            capacity_violated,
        };
        self.rewards.push(reward);
        self.diags.push(diag);
        self.step += 1;

        let done = self.done();
        let summary = if done { Some(self.summarize()?) } else { None };
        Ok(StepOutcome {
            reward,
            next_state: self.state(),
            done,
            diag,
            summary,
        })
    }

    fn summarize(&self) -> Result<EpisodeSummary, EnvError> {
        let cost = weighted_cost(&self.assignment, &self.plan, &self.ctx)?;
        let report = check_constraints(&self.assignment, &self.plan, &self.ctx.infra)?;
        Ok(EpisodeSummary {
            service_id: self.plan.dag.id.clone(),
            response_ms: cost.response_ms,
            security_score: cost.security_score,
            security_sum: cost.security_score * self.plan.task_count() as f64,
            weighted_cost: cost.weighted,
            constraint_violations: report.violation_count(),
            any_violation: !report.is_clean(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infrastructure::testutil::flat_fleet;
    use crate::workload::{Edge, Task};
    use std::collections::BTreeSet;

    fn ctx_with(infra: Infrastructure, weights: ObjectiveWeights) -> Arc<EnvContext> {
        EnvContext::new(
            infra,
            SecurityCatalog::standard(),
            SecurityThresholds::default(),
            weights,
            -1e6,
            GenRanges::default(),
        )
        .unwrap()
    }

    fn simple_task(id: usize, cpu: f64) -> Task {
        Task {
            id,
            cpu_mi: cpu,
            mem_mb: 10.0,
            storage_mb: 10.0,
            deadline_ms: 1000.0,
            controls: BTreeSet::from([4]),
        }
    }

    fn two_server_fleet() -> Infrastructure {
        // Server 0: 10,000 MIPS at origin; server 1: 1,000 MIPS, 200 km away,
        // both 10 Mbps interfaces, ample capacity, full item universe.
        let mut infra = flat_fleet(2, 10_000.0, 10.0);
        infra.servers[1].mips = 1_000.0;
        infra.servers[1].x_m = 200_000.0;
        infra
    }

    #[test]
    fn completion_time_hand_arithmetic() {
        let infra = two_server_fleet();
        let dag = ServiceDag {
            id: "pair".into(),
            tasks: vec![simple_task(1, 100.0), simple_task(2, 100.0)],
            edges: vec![Edge {
                src: 1,
                dst: 2,
                kb: 100.0,
            }],
        };
        let index = dag.index().unwrap();

        // Entry task: 100 MI on 10,000 MIPS is 10 ms, no wait.
        let (c, w, t) = completion_time(0, 0, &[None, None], &dag, &index, &infra).unwrap();
        assert!((c - 10.0).abs() < 1e-12);
        assert_eq!(w, 0.0);
        assert!((t - 10.0).abs() < 1e-12);

        // Cross-server: 100 KB over 10 Mbps is 80 ms, plus 1 ms propagation.
        let (_, w, _) = completion_time(1, 1, &[Some(0), None], &dag, &index, &infra).unwrap();
        assert!((w - 81.0).abs() < 1e-9);

        // Co-located predecessor contributes nothing.
        let (_, w, _) = completion_time(1, 0, &[Some(0), None], &dag, &index, &infra).unwrap();
        assert_eq!(w, 0.0);

        // Unassigned predecessor is an ordering error.
        assert!(matches!(
            completion_time(1, 0, &[None, None], &dag, &index, &infra),
            Err(EnvError::UnassignedPredecessor(1))
        ));
    }

    #[test]
    fn response_time_respects_critical_path() {
        let infra = flat_fleet(1, 1000.0, 16.0);
        let ctx = ctx_with(infra, ObjectiveWeights::balanced());
        // Fork: n1 -> {n2 (5 MI), n3 (2 MI)}; single server so comm-free.
        let dag = ServiceDag {
            id: "fork".into(),
            tasks: vec![simple_task(1, 1.0), simple_task(2, 5.0), simple_task(3, 2.0)],
            edges: vec![
                Edge { src: 1, dst: 2, kb: 1.0 },
                Edge { src: 1, dst: 3, kb: 1.0 },
            ],
        };
        let plan = ServicePlan::new(dag, &ctx).unwrap();
        assert_eq!(plan.on_path, vec![true, true, false]);
        let l = response_time(&[Some(0), Some(0), Some(0)], &plan, &ctx.infra).unwrap();
        assert!((l - 6.0).abs() < 1e-12); // T1 + T2, excluding n3

        assert!(matches!(
            response_time(&[Some(0), None, Some(0)], &plan, &ctx.infra),
            Err(EnvError::IncompleteDeployment(2))
        ));
    }

    #[test]
    fn constraint_report_flags_oversubscription_and_deadlines() {
        let mut infra = flat_fleet(1, 1000.0, 16.0);
        infra.servers[0].mem_mb = 1000.0;
        let ctx = ctx_with(infra, ObjectiveWeights::balanced());
        let mut t1 = simple_task(1, 1.0);
        t1.mem_mb = 600.0;
        let mut t2 = simple_task(2, 1.0);
        t2.mem_mb = 600.0;
        let dag = ServiceDag {
            id: "mem".into(),
            tasks: vec![t1, t2],
            edges: vec![],
        };
        let plan = ServicePlan::new(dag, &ctx).unwrap();
        let report = check_constraints(&[Some(0), Some(0)], &plan, &ctx.infra).unwrap();
        assert_eq!(report.memory_over, vec![0]);
        assert!(report.storage_over.is_empty());
        assert!(report.deadline_missed.is_empty());
        assert!(!report.is_clean());

        let report = check_constraints(&[Some(0), None], &plan, &ctx.infra).unwrap();
        assert_eq!(report.unassigned_tasks, vec![2]);
    }

    #[test]
    fn state_dimensions_and_idempotence() {
        let ctx = ctx_with(two_server_fleet(), ObjectiveWeights::balanced());
        assert_eq!(ctx.task_feature_dim(), 21);
        assert_eq!(ctx.server_feature_dim(), 21);
        let dag = ServiceDag {
            id: "pair".into(),
            tasks: vec![simple_task(1, 10.0), simple_task(2, 10.0)],
            edges: vec![Edge {
                src: 1,
                dst: 2,
                kb: 10.0,
            }],
        };
        let plan = ServicePlan::new(dag, &ctx).unwrap();
        let ep = Episode::new(ctx.clone(), plan.clone());
        let a = ep.state();
        let b = ep.state();
        assert_eq!(a, b);
        assert_eq!(a.len(), 21 + 2 * 21);
        assert!(a.as_slice().iter().all(|v| (0.0..=1.0).contains(v) && v.is_finite()));
    }

    #[test]
    fn placing_a_task_reduces_residual_memory_feature() {
        let ctx = ctx_with(two_server_fleet(), ObjectiveWeights::balanced());
        let dag = ServiceDag {
            id: "pair".into(),
            tasks: vec![simple_task(1, 10.0), simple_task(2, 10.0)],
            edges: vec![Edge {
                src: 1,
                dst: 2,
                kb: 10.0,
            }],
        };
        let plan = ServicePlan::new(dag, &ctx).unwrap();
        let mut ep = Episode::new(ctx.clone(), plan);
        let before = ep.state();
        ep.step(0).unwrap();
        let after = ep.state();
        // Server 0 residual-memory feature sits right after the task block.
        let k1 = ctx.task_feature_dim();
        let mem_idx = k1 + 1;
        assert!(after.0[mem_idx] < before.0[mem_idx]);
    }

    #[test]
    fn rewards_are_nonpositive_and_penalize_violations() {
        let ctx = ctx_with(two_server_fleet(), ObjectiveWeights::balanced());
        let mut t = simple_task(1, 100.0);
        t.deadline_ms = 5.0; // 10 ms on the fast server: unmeetable
        let dag = ServiceDag {
            id: "late".into(),
            tasks: vec![t],
            edges: vec![],
        };
        let plan = ServicePlan::new(dag, &ctx).unwrap();
        let mut ep = Episode::new(ctx.clone(), plan);
        let out = ep.step(0).unwrap();
        assert_eq!(out.reward, -1e6);
        assert!(out.diag.deadline_violated);
        assert!(out.done);

        // Capacity violation also yields the failure penalty.
        let mut infra = two_server_fleet();
        infra.servers[0].mem_mb = 5.0;
        infra.servers[1].mem_mb = 5.0;
        let ctx = ctx_with(infra, ObjectiveWeights::balanced());
        let dag = ServiceDag {
            id: "big".into(),
            tasks: vec![simple_task(1, 1.0)],
            edges: vec![],
        };
        let plan = ServicePlan::new(dag, &ctx).unwrap();
        let mut ep = Episode::new(ctx, plan);
        let out = ep.step(0).unwrap();
        assert_eq!(out.reward, -1e6);
        assert!(out.diag.capacity_violated);
    }

    #[test]
    fn near_zero_reward_on_ideal_placement() {
        // Single fast, fully equipped server: latency term 0 (degenerate
        // bounds), security term 0.
        let infra = flat_fleet(1, 10_000.0, 16.0);
        let ctx = ctx_with(infra, ObjectiveWeights::balanced());
        let dag = ServiceDag {
            id: "one".into(),
            tasks: vec![simple_task(1, 10.0)],
            edges: vec![],
        };
        let plan = ServicePlan::new(dag, &ctx).unwrap();
        let mut ep = Episode::new(ctx, plan);
        let out = ep.step(0).unwrap();
        assert!(out.reward.abs() < 1e-12);
        let summary = out.summary.unwrap();
        assert!((summary.security_score - 100.0).abs() < 1e-12);
        assert!(summary.weighted_cost.abs() < 1e-12);
    }

    #[test]
    fn episode_emits_k_rewards_then_finishes() {
        let ctx = ctx_with(two_server_fleet(), ObjectiveWeights::balanced());
        let dag = ServiceDag {
            id: "three".into(),
            tasks: vec![simple_task(1, 1.0), simple_task(2, 1.0), simple_task(3, 1.0)],
            edges: vec![
                Edge { src: 1, dst: 2, kb: 1.0 },
                Edge { src: 2, dst: 3, kb: 1.0 },
            ],
        };
        let plan = ServicePlan::new(dag, &ctx).unwrap();
        let mut ep = Episode::new(ctx, plan);
        let mut rewards = 0;
        while !ep.done() {
            let out = ep.step(0).unwrap();
            rewards += 1;
            assert!(out.reward <= 0.0);
            if out.done {
                assert!(out.summary.is_some());
                assert!(out.next_state.as_slice().iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(rewards, 3);
        assert!(matches!(ep.step(0), Err(EnvError::EpisodeFinished)));
    }

    #[test]
    fn invalid_action_is_rejected() {
        let ctx = ctx_with(two_server_fleet(), ObjectiveWeights::balanced());
        let dag = ServiceDag {
            id: "one".into(),
            tasks: vec![simple_task(1, 1.0)],
            edges: vec![],
        };
        let plan = ServicePlan::new(dag, &ctx).unwrap();
        let mut ep = Episode::new(ctx, plan);
        assert!(matches!(
            ep.step(5),
            Err(EnvError::ActionOutOfRange { action: 5, .. })
        ));
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(ObjectiveWeights::new(0.6, 0.5).is_err());
        assert!(ObjectiveWeights::new(-0.2, 1.2).is_err());
        assert!(ObjectiveWeights::new(0.3, 0.7).is_ok());
    }

    /// Brute-force enumeration of all placements for tiny instances.
    fn enumerate_best<F: Fn(&[Option<usize>]) -> f64>(
        k: usize,
        r: usize,
        objective: F,
    ) -> (Vec<usize>, f64) {
        let mut best = (vec![0; k], f64::MAX);
        let total = r.pow(k as u32);
        for code in 0..total {
            let mut c = code;
            let mut asg = Vec::with_capacity(k);
            for _ in 0..k {
                asg.push(Some(c % r));
                c /= r;
            }
            let v = objective(&asg);
            if v < best.1 {
                best = (asg.iter().map(|a| a.unwrap()).collect(), v);
            }
        }
        best
    }

    #[test]
    fn alpha_one_ranks_by_latency_and_beta_one_by_security() {
        use crate::workload::{assign_attributes, generate_topology, DagShapeParams};
        use rand::SeedableRng;
        let mut master = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        use rand::Rng;
        for trial in 0..10 {
            let k = master.gen_range(2..=4usize);
            let dag = assign_attributes(
                generate_topology(&DagShapeParams {
                    task_count: k,
                    fat: master.gen_range(0.2..=1.0),
                    density: master.gen_range(0.2..=1.0),
                    seed: trial,
                })
                .unwrap(),
                trial + 100,
                &GenRanges::default(),
            );
            let infra = crate::infrastructure::testutil::uniform_fleet(4, trial + 50);

            let ctx_l = ctx_with(infra.clone(), ObjectiveWeights::new(1.0, 0.0).unwrap());
            let plan_l = ServicePlan::new(dag.clone(), &ctx_l).unwrap();
            let (_, min_w) = enumerate_best(k, 4, |asg| {
                weighted_cost(asg, &plan_l, &ctx_l).unwrap().weighted
            });
            let (_, min_l) = enumerate_best(k, 4, |asg| {
                response_time(asg, &plan_l, &ctx_l.infra).unwrap()
            });
            let norm = if plan_l.l_max > plan_l.l_min {
                (min_l - plan_l.l_min) / (plan_l.l_max - plan_l.l_min)
            } else {
                0.0
            };
            assert!(
                (min_w - norm).abs() < 1e-9,
                "α=1: best W {min_w} != normalized best L {norm}"
            );

            let ctx_s = ctx_with(infra, ObjectiveWeights::new(0.0, 1.0).unwrap());
            let plan_s = ServicePlan::new(dag, &ctx_s).unwrap();
            // The fixture fleet enables every item, so no hard violations.
            let (_, min_w) = enumerate_best(k, 4, |asg| {
                weighted_cost(asg, &plan_s, &ctx_s).unwrap().weighted
            });
            let (_, neg_max_s) = enumerate_best(k, 4, |asg| {
                -security::service_score(
                    asg,
                    &plan_s.dag,
                    &ctx_s.infra.servers,
                    &ctx_s.catalog,
                    &ctx_s.thresholds,
                )
                .unwrap()
            });
            assert!(
                (min_w - (100.0 + neg_max_s) / 100.0).abs() < 1e-9,
                "β=1: best W should equal normalized best security deficit"
            );
        }
    }

    #[test]
    fn colocating_critical_path_on_fastest_server_is_optimal_single_server_choice() {
        // All-on-one-server placements: the fastest server must minimize L.
        let mut infra = flat_fleet(4, 1000.0, 16.0);
        infra.servers[2].mips = 20_000.0;
        let ctx = ctx_with(infra, ObjectiveWeights::balanced());
        let dag = ServiceDag {
            id: "chain".into(),
            tasks: vec![simple_task(1, 5.0), simple_task(2, 9.0), simple_task(3, 2.0)],
            edges: vec![
                Edge { src: 1, dst: 2, kb: 3.0 },
                Edge { src: 2, dst: 3, kb: 8.0 },
            ],
        };
        let plan = ServicePlan::new(dag, &ctx).unwrap();
        let mut best = (usize::MAX, f64::MAX);
        for s in 0..4 {
            let asg = vec![Some(s); 3];
            let l = response_time(&asg, &plan, &ctx.infra).unwrap();
            if l < best.1 {
                best = (s, l);
            }
        }
        assert_eq!(best.0, 2);
    }
}
