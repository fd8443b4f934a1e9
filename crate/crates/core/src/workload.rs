//! DAG-structured service workloads: generation, loading, and critical-path
//! analysis.
//!
//! A service is a DAG of tasks. Each task carries CPU, memory, storage,
//! deadline and security-control requirements; each edge carries the data
//! volume shipped between tasks. Analysis is based on upward ranks computed
//! from fleet-average computation and communication costs, from which the
//! critical path and the placement order are derived.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infrastructure::Infrastructure;

/// Layer-window for generated dependencies: a task may depend on tasks up to
/// this many layers above its own (adjacent layer or one skip).
const LAYER_WINDOW: usize = 2;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed DAG: {0}")]
    MalformedDag(String),
    #[error("infrastructure is empty")]
    EmptyInfrastructure,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// One task of a service: `⟨cpu, mem, storage, security, deadline⟩`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    /// Required CPU work, million instructions.
    pub cpu_mi: f64,
    pub mem_mb: f64,
    pub storage_mb: f64,
    pub deadline_ms: f64,
    /// Required security controls, indices into the catalog (1-based).
    pub controls: BTreeSet<usize>,
}

/// Dependency edge: `dst` consumes `kb` kilobytes produced by `src`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceDag {
    pub id: String,
    pub tasks: Vec<Task>,
    pub edges: Vec<Edge>,
}

/// Shape parameters for the layered DAG generator.
///
/// `fat` controls the width-to-height ratio (small values give chain-like
/// services, large values give wide parallel ones); `density` controls how
/// many candidate cross-layer dependencies are materialized.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DagShapeParams {
    pub task_count: usize,
    pub fat: f64,
    pub density: f64,
    pub seed: u64,
}

/// Attribute ranges used by the generator. These same ranges double as the
/// min-max normalization constants for state encoding.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenRanges {
    pub cpu_mi: (f64, f64),
    pub mem_mb: (f64, f64),
    pub storage_mb: (f64, f64),
    pub deadline_ms: (f64, f64),
    pub edge_kb: (f64, f64),
    /// Number of required controls drawn per task (inclusive bounds).
    pub controls_per_task: (usize, usize),
    /// Size of the control universe.
    pub control_count: usize,
}

impl Default for GenRanges {
    fn default() -> Self {
        Self {
            cpu_mi: (0.5, 100.0),
            mem_mb: (10.0, 1000.0),
            storage_mb: (10.0, 1000.0),
            deadline_ms: (10.0, 1000.0),
            edge_kb: (1.0, 1000.0),
            controls_per_task: (1, 5),
            control_count: 15,
        }
    }
}

/// Pre-resolved adjacency for a validated DAG.
///
/// Task positions (0-based indices into `ServiceDag::tasks`) are used
/// everywhere internally; ids only appear at the serialization boundary.
#[derive(Debug, Clone)]
pub struct DagIndex {
    pub preds: Vec<Vec<(usize, f64)>>,
    pub succs: Vec<Vec<(usize, f64)>>,
    /// Positions in one valid topological order (ties by task id).
    pub topo: Vec<usize>,
}

impl ServiceDag {
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn position_of(&self, task_id: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.id == task_id)
    }

    /// Builds predecessor/successor lists and a topological order.
    ///
    /// Fails on unknown edge endpoints, self-loops, or cycles.
    pub fn index(&self) -> Result<DagIndex, WorkloadError> {
        let n = self.tasks.len();
        if n == 0 {
            return Err(WorkloadError::MalformedDag("service has no tasks".into()));
        }
        let mut seen_ids = BTreeSet::new();
        for t in &self.tasks {
            if !seen_ids.insert(t.id) {
                return Err(WorkloadError::MalformedDag(format!(
                    "duplicate task id {}",
                    t.id
                )));
            }
        }
        let mut preds = vec![Vec::new(); n];
        let mut succs = vec![Vec::new(); n];
        for e in &self.edges {
            if e.src == e.dst {
                return Err(WorkloadError::MalformedDag(format!(
                    "self-loop on task {}",
                    e.src
                )));
            }
            let s = self.position_of(e.src).ok_or_else(|| {
                WorkloadError::MalformedDag(format!("edge references unknown task {}", e.src))
            })?;
            let d = self.position_of(e.dst).ok_or_else(|| {
                WorkloadError::MalformedDag(format!("edge references unknown task {}", e.dst))
            })?;
            preds[d].push((s, e.kb));
            succs[s].push((d, e.kb));
        }

        // Kahn's algorithm; among ready tasks pick the lowest id so the
        // order is deterministic regardless of edge insertion order.
        let mut indegree: Vec<usize> = preds.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<(usize, usize)> = indegree
            .iter()
            .enumerate()
            .filter(|(_, d)| **d == 0)
            .map(|(p, _)| (self.tasks[p].id, p))
            .collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(&(id, p)) = ready.iter().next() {
            ready.remove(&(id, p));
            topo.push(p);
            for &(s, _) in &succs[p] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.insert((self.tasks[s].id, s));
                }
            }
        }
        if topo.len() != n {
            return Err(WorkloadError::MalformedDag(
                "dependency cycle detected".into(),
            ));
        }
        Ok(DagIndex { preds, succs, topo })
    }
}

fn check_shape_params(p: &DagShapeParams) -> Result<(), WorkloadError> {
    if p.task_count < 1 {
        return Err(WorkloadError::InvalidParameter("task_count must be ≥ 1".into()));
    }
    for (name, v) in [("fat", p.fat), ("density", p.density)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(WorkloadError::InvalidParameter(format!(
                "{name} must lie in (0, 1], got {v}"
            )));
        }
    }
    Ok(())
}

/// Number of layers for a given task count and fat parameter:
/// `max(1, round(K^(1 - 0.5·fat)))`, clamped to `[1, K]`.
fn layer_count(task_count: usize, fat: f64) -> usize {
    let k = task_count as f64;
    let layers = k.powf(1.0 - 0.5 * fat).round() as usize;
    layers.clamp(1, task_count)
}

/// Generates the topology of a service: tasks arranged into layers, with
/// dependencies drawn from earlier to later layers only (so the result is
/// acyclic by construction). Attributes are left zeroed for
/// [`assign_attributes`].
///
/// Every task outside the first layer is guaranteed at least one
/// predecessor in the layer immediately above it.
pub fn generate_topology(params: &DagShapeParams) -> Result<ServiceDag, WorkloadError> {
    check_shape_params(params)?;
    let k = params.task_count;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let layers = layer_count(k, params.fat);
    let mut widths = vec![1usize; layers];
    for _ in 0..k - layers {
        let l = rng.gen_range(0..layers);
        widths[l] += 1;
    }

    // Task ids 1..=K assigned layer by layer.
    let mut layer_of = Vec::with_capacity(k);
    for (l, w) in widths.iter().enumerate() {
        layer_of.extend(std::iter::repeat(l).take(*w));
    }
    let layer_start: Vec<usize> = widths
        .iter()
        .scan(0usize, |acc, w| {
            let s = *acc;
            *acc += w;
            Some(s)
        })
        .collect();

    let tasks: Vec<Task> = (1..=k)
        .map(|id| Task {
            id,
            cpu_mi: 0.0,
            mem_mb: 0.0,
            storage_mb: 0.0,
            deadline_ms: 0.0,
            controls: BTreeSet::new(),
        })
        .collect();

    let mut edges = Vec::new();
    let mut has_prev_layer_pred = vec![false; k];
    for dst in 0..k {
        let dl = layer_of[dst];
        for src in 0..dst {
            let sl = layer_of[src];
            if sl >= dl || dl - sl > LAYER_WINDOW {
                continue;
            }
            if rng.gen_bool(params.density) {
                edges.push(Edge {
                    src: src + 1,
                    dst: dst + 1,
                    kb: 0.0,
                });
                if sl + 1 == dl {
                    has_prev_layer_pred[dst] = true;
                }
            }
        }
    }
    // Patch connectivity: every non-entry-layer task depends on at least one
    // task of the previous layer, which also keeps the longest chain spanning
    // all layers.
    for dst in 0..k {
        let dl = layer_of[dst];
        if dl == 0 || has_prev_layer_pred[dst] {
            continue;
        }
        let prev_start = layer_start[dl - 1];
        let src = prev_start + rng.gen_range(0..widths[dl - 1]);
        edges.push(Edge {
            src: src + 1,
            dst: dst + 1,
            kb: 0.0,
        });
    }
    edges.sort_by_key(|e| (e.dst, e.src));

    Ok(ServiceDag {
        id: format!(
            "svc-k{}-f{:.1}-d{:.1}-s{}",
            k, params.fat, params.density, params.seed
        ),
        tasks,
        edges,
    })
}

/// Draws task and edge attributes uniformly from `ranges`, deterministically
/// in `seed`. Tasks are visited in order, then edges, so the same
/// (topology, seed) pair always yields the same service.
pub fn assign_attributes(mut dag: ServiceDag, seed: u64, ranges: &GenRanges) -> ServiceDag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in &mut dag.tasks {
        t.cpu_mi = rng.gen_range(ranges.cpu_mi.0..=ranges.cpu_mi.1);
        t.mem_mb = rng.gen_range(ranges.mem_mb.0..=ranges.mem_mb.1);
        t.storage_mb = rng.gen_range(ranges.storage_mb.0..=ranges.storage_mb.1);
        t.deadline_ms = rng.gen_range(ranges.deadline_ms.0..=ranges.deadline_ms.1);
        let want = rng.gen_range(ranges.controls_per_task.0..=ranges.controls_per_task.1);
        let mut controls = BTreeSet::new();
        while controls.len() < want.min(ranges.control_count) {
            controls.insert(rng.gen_range(1..=ranges.control_count));
        }
        t.controls = controls;
    }
    for e in &mut dag.edges {
        e.kb = rng.gen_range(ranges.edge_kb.0..=ranges.edge_kb.1);
    }
    dag
}

/// Fleet-average cost model used by ranking: computation cost of a task is
/// `cpu / mean MIPS` (ms) and communication cost of an edge is its transfer
/// time over the mean pairwise bandwidth (ms). With a single server there
/// are no pairs and communication is free.
#[derive(Debug, Clone, Copy)]
pub struct AverageCosts {
    pub mean_mips: f64,
    pub mean_pair_bandwidth_mbps: Option<f64>,
}

impl AverageCosts {
    pub fn from_infrastructure(infra: &Infrastructure) -> Result<Self, WorkloadError> {
        let n = infra.servers.len();
        if n == 0 {
            return Err(WorkloadError::EmptyInfrastructure);
        }
        let mean_mips = infra.servers.iter().map(|s| s.mips).sum::<f64>() / n as f64;
        let mean_pair_bandwidth_mbps = if n < 2 {
            None
        } else {
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for i in 0..n {
                for j in i + 1..n {
                    sum += infra.servers[i].iface_mbps.min(infra.servers[j].iface_mbps);
                    pairs += 1;
                }
            }
            Some(sum / pairs as f64)
        };
        Ok(Self {
            mean_mips,
            mean_pair_bandwidth_mbps,
        })
    }

    pub fn comp_ms(&self, cpu_mi: f64) -> f64 {
        cpu_mi / self.mean_mips * 1000.0
    }

    pub fn comm_ms(&self, kb: f64) -> f64 {
        match self.mean_pair_bandwidth_mbps {
            // kb·8/1000 megabits over `bw` Mbit/s, in milliseconds.
            Some(bw) => 8.0 * kb / bw,
            None => 0.0,
        }
    }
}

/// Upward rank per task position: average computation cost plus the maximum
/// over successors of edge communication cost plus successor rank. Exit
/// tasks rank at their own computation cost.
pub fn upward_rank(
    dag: &ServiceDag,
    infra: &Infrastructure,
) -> Result<Vec<f64>, WorkloadError> {
    let costs = AverageCosts::from_infrastructure(infra)?;
    let index = dag.index()?;
    Ok(ranks_from_costs(dag, &index, &costs))
}

pub(crate) fn ranks_from_costs(
    dag: &ServiceDag,
    index: &DagIndex,
    costs: &AverageCosts,
) -> Vec<f64> {
    let mut rank = vec![0.0; dag.tasks.len()];
    for &p in index.topo.iter().rev() {
        let own = costs.comp_ms(dag.tasks[p].cpu_mi);
        let tail = index.succs[p]
            .iter()
            .map(|&(s, kb)| costs.comm_ms(kb) + rank[s])
            .fold(0.0, f64::max);
        rank[p] = own + tail;
    }
    rank
}

/// The critical path and its per-task membership indicator.
#[derive(Debug, Clone)]
pub struct CriticalPath {
    /// Task positions along the path, entry to exit.
    pub path: Vec<usize>,
    /// Membership indicator per task position.
    pub on_path: Vec<bool>,
}

/// Extracts the critical path: start from the entry task of maximal rank,
/// then repeatedly follow the successor maximizing communication cost plus
/// successor rank — the branch that realizes the parent's rank, so the path
/// carries the maximal total average cost. Ties break toward the lowest
/// task id.
pub fn critical_path(
    dag: &ServiceDag,
    infra: &Infrastructure,
) -> Result<CriticalPath, WorkloadError> {
    let costs = AverageCosts::from_infrastructure(infra)?;
    let index = dag.index()?;
    let ranks = ranks_from_costs(dag, &index, &costs);
    Ok(critical_path_from_ranks(dag, &index, &ranks, &costs))
}

pub(crate) fn critical_path_from_ranks(
    dag: &ServiceDag,
    index: &DagIndex,
    ranks: &[f64],
    costs: &AverageCosts,
) -> CriticalPath {
    let better = |a: (f64, usize), b: (f64, usize)| -> bool {
        // Is `a` preferable to `b`? Higher key wins, then lower id.
        match a.0.partial_cmp(&b.0).unwrap() {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => dag.tasks[a.1].id < dag.tasks[b.1].id,
        }
    };
    let mut current = index
        .preds
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_empty())
        .map(|(p, _)| (ranks[p], p))
        .reduce(|best, cand| if better(cand, best) { cand } else { best })
        .expect("a DAG always has an entry task")
        .1;

    let mut path = vec![current];
    loop {
        let next = index.succs[current]
            .iter()
            .map(|&(s, kb)| (costs.comm_ms(kb) + ranks[s], s))
            .reduce(|best, cand| if better(cand, best) { cand } else { best });
        match next {
            Some((_, s)) => {
                path.push(s);
                current = s;
            }
            None => break,
        }
    }
    let mut on_path = vec![false; dag.tasks.len()];
    for &p in &path {
        on_path[p] = true;
    }
    CriticalPath { path, on_path }
}

/// Placement order: a topological order that always picks the
/// highest-upward-rank ready task next (critical-path tasks first), with
/// ties broken by lowest task id.
pub fn task_order(
    dag: &ServiceDag,
    infra: &Infrastructure,
) -> Result<Vec<usize>, WorkloadError> {
    let costs = AverageCosts::from_infrastructure(infra)?;
    let index = dag.index()?;
    let ranks = ranks_from_costs(dag, &index, &costs);
    Ok(order_from_ranks(dag, &index, &ranks))
}

pub(crate) fn order_from_ranks(dag: &ServiceDag, index: &DagIndex, ranks: &[f64]) -> Vec<usize> {
    let n = dag.tasks.len();
    let mut indegree: Vec<usize> = index.preds.iter().map(Vec::len).collect();
    let mut ready: Vec<usize> = (0..n).filter(|&p| indegree[p] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while !ready.is_empty() {
        let mut best = 0;
        for i in 1..ready.len() {
            let (a, b) = (ready[i], ready[best]);
            let take = match ranks[a].partial_cmp(&ranks[b]).unwrap() {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => dag.tasks[a].id < dag.tasks[b].id,
            };
            if take {
                best = i;
            }
        }
        let p = ready.swap_remove(best);
        order.push(p);
        for &(s, _) in &index.succs[p] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(s);
            }
        }
    }
    order
}

/// Saves a service dataset as a JSON array; [`load_services`] round-trips it
/// losslessly.
pub fn save_services(services: &[ServiceDag], path: &std::path::Path) -> Result<(), WorkloadError> {
    let json = serde_json::to_string_pretty(services)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_services(path: &std::path::Path) -> Result<Vec<ServiceDag>, WorkloadError> {
    let data = std::fs::read_to_string(path)?;
    let services: Vec<ServiceDag> = serde_json::from_str(&data)?;
    for s in &services {
        s.index()?;
        for t in &s.tasks {
            for v in [t.cpu_mi, t.mem_mb, t.storage_mb, t.deadline_ms] {
                if !(v > 0.0) {
                    return Err(WorkloadError::MalformedDag(format!(
                        "task {} of service {} has a non-positive attribute",
                        t.id, s.id
                    )));
                }
            }
            if t.controls.is_empty() {
                return Err(WorkloadError::MalformedDag(format!(
                    "task {} of service {} requires no security controls",
                    t.id, s.id
                )));
            }
        }
    }
    Ok(services)
}

/// Dataset grid profiles. The full grid is 6 task-count levels × 5 fat ×
/// 5 density × 5 topology variants × 10 attribute draws = 7,500 services;
/// the small profile keeps K ≤ 10 with 3 variants and a single attribute
/// draw (150 services) for quick runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetProfile {
    Full,
    Small,
}

pub fn build_dataset(profile: DatasetProfile, seed: u64, ranges: &GenRanges) -> Vec<ServiceDag> {
    let (ks, fats, densities, variants, attr_sets): (&[usize], &[f64], &[f64], usize, usize) =
        match profile {
            DatasetProfile::Full => (
                &[5, 10, 20, 40, 80, 100],
                &[0.2, 0.4, 0.6, 0.8, 1.0],
                &[0.2, 0.4, 0.6, 0.8, 1.0],
                5,
                10,
            ),
            DatasetProfile::Small => (
                &[5, 10],
                &[0.2, 0.4, 0.6, 0.8, 1.0],
                &[0.2, 0.4, 0.6, 0.8, 1.0],
                3,
                1,
            ),
        };
    let mut services = Vec::new();
    for &k in ks {
        for &fat in fats {
            for &density in densities {
                for v in 0..variants {
                    let topo_seed = crate::subseed(
                        seed,
                        &format!("topo-k{k}-f{fat:.1}-d{density:.1}-v{v}"),
                    );
                    let topo = generate_topology(&DagShapeParams {
                        task_count: k,
                        fat,
                        density,
                        seed: topo_seed,
                    })
                    .expect("grid parameters are valid");
                    for a in 0..attr_sets {
                        let attr_seed = crate::subseed(
                            seed,
                            &format!("attr-k{k}-f{fat:.1}-d{density:.1}-v{v}-a{a}"),
                        );
                        let mut dag = assign_attributes(topo.clone(), attr_seed, ranges);
                        dag.id = format!("svc-k{k}-f{fat:.1}-d{density:.1}-v{v}-a{a}");
                        services.push(dag);
                    }
                }
            }
        }
    }
    services
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infrastructure::testutil::{flat_fleet, uniform_fleet};

    fn chain(costs_mi: &[f64], kb: f64) -> ServiceDag {
        let tasks = costs_mi
            .iter()
            .enumerate()
            .map(|(i, &c)| Task {
                id: i + 1,
                cpu_mi: c,
                mem_mb: 10.0,
                storage_mb: 10.0,
                deadline_ms: 1000.0,
                controls: BTreeSet::from([1]),
            })
            .collect::<Vec<_>>();
        let edges = (1..costs_mi.len())
            .map(|i| Edge {
                src: i,
                dst: i + 1,
                kb,
            })
            .collect();
        ServiceDag {
            id: "chain".into(),
            tasks,
            edges,
        }
    }

    #[test]
    fn single_task_has_no_edges() {
        let dag = generate_topology(&DagShapeParams {
            task_count: 1,
            fat: 0.7,
            density: 0.9,
            seed: 0,
        })
        .unwrap();
        assert_eq!(dag.tasks.len(), 1);
        assert!(dag.edges.is_empty());
    }

    #[test]
    fn low_fat_gives_a_chain_dominated_dag() {
        let dag = generate_topology(&DagShapeParams {
            task_count: 5,
            fat: 0.2,
            density: 0.2,
            seed: 42,
        })
        .unwrap();
        // Longest chain must span at least three tasks.
        let index = dag.index().unwrap();
        let mut depth = vec![1usize; 5];
        for &p in &index.topo {
            for &(s, _) in &index.succs[p] {
                depth[s] = depth[s].max(depth[p] + 1);
            }
        }
        assert!(depth.iter().copied().max().unwrap() >= 3);
    }

    #[test]
    fn full_fat_full_density_connects_every_window_pair() {
        let dag = generate_topology(&DagShapeParams {
            task_count: 5,
            fat: 1.0,
            density: 1.0,
            seed: 42,
        })
        .unwrap();
        // Recover layers: entry tasks are layer 0, everything else has a
        // predecessor, and with density 1 every in-window pair is an edge.
        let index = dag.index().unwrap();
        let mut layer = vec![0usize; 5];
        for &p in &index.topo {
            for &(s, _) in &index.succs[p] {
                layer[s] = layer[s].max(layer[p] + 1);
            }
        }
        for dst in 0..5 {
            for src in 0..5 {
                let (ls, ld) = (layer[src], layer[dst]);
                if ls < ld && ld - ls <= LAYER_WINDOW {
                    assert!(
                        index.preds[dst].iter().any(|&(s, _)| s == src),
                        "missing edge {} -> {}",
                        src + 1,
                        dst + 1
                    );
                }
            }
        }
    }

    #[test]
    fn topology_is_always_acyclic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..1000 {
            let p = DagShapeParams {
                task_count: rng.gen_range(1..=40),
                fat: rng.gen_range(0.05..=1.0),
                density: rng.gen_range(0.05..=1.0),
                seed: i,
            };
            let dag = generate_topology(&p).unwrap();
            let index = dag.index().expect("generated DAG must be acyclic");
            // Every non-entry task has at least one predecessor.
            let entries = index.preds.iter().filter(|p| p.is_empty()).count();
            assert!(entries >= 1);
        }
    }

    #[test]
    fn attribute_assignment_is_deterministic_and_in_range() {
        let ranges = GenRanges::default();
        let topo = generate_topology(&DagShapeParams {
            task_count: 20,
            fat: 0.6,
            density: 0.5,
            seed: 3,
        })
        .unwrap();
        let a = assign_attributes(topo.clone(), 11, &ranges);
        let b = assign_attributes(topo.clone(), 11, &ranges);
        assert_eq!(a, b);

        let c = assign_attributes(topo, 12, &ranges);
        assert_ne!(a, c, "different seeds should differ");

        let mut seen = 0;
        for seed in 0..50u64 {
            let topo = generate_topology(&DagShapeParams {
                task_count: 20,
                fat: 0.6,
                density: 0.5,
                seed,
            })
            .unwrap();
            let dag = assign_attributes(topo, seed, &ranges);
            for t in &dag.tasks {
                seen += 1;
                assert!(t.cpu_mi >= 0.5 && t.cpu_mi <= 100.0);
                assert!(t.mem_mb >= 10.0 && t.mem_mb <= 1000.0);
                assert!(t.storage_mb >= 10.0 && t.storage_mb <= 1000.0);
                assert!(t.deadline_ms >= 10.0 && t.deadline_ms <= 1000.0);
                assert!(!t.controls.is_empty() && t.controls.len() <= 5);
                assert!(t.controls.iter().all(|&c| (1..=15).contains(&c)));
            }
            for e in &dag.edges {
                assert!(e.kb >= 1.0 && e.kb <= 1000.0);
            }
        }
        assert_eq!(seen, 50 * 20);
    }

    #[test]
    fn upward_rank_single_task() {
        // cpu 4 MI on a 1000-MIPS server: 4 ms of average computation.
        let dag = chain(&[4.0], 0.0);
        let infra = flat_fleet(1, 1000.0, 16.0);
        let ranks = upward_rank(&dag, &infra).unwrap();
        assert!((ranks[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn upward_rank_chain() {
        // comp (2, 3) ms, comm 1 ms: rank(n2)=3, rank(n1)=6.
        let dag = chain(&[2.0, 3.0], 2.0); // 8·2/16 = 1 ms
        let infra = flat_fleet(2, 1000.0, 16.0);
        let ranks = upward_rank(&dag, &infra).unwrap();
        assert!((ranks[1] - 3.0).abs() < 1e-12);
        assert!((ranks[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn upward_rank_fork_takes_max_branch() {
        // comp (1, 5, 2), zero comm (single server): rank(n1) = 1 + max(5,2).
        let mut dag = chain(&[1.0, 5.0], 1.0);
        dag.tasks.push(Task {
            id: 3,
            cpu_mi: 2.0,
            mem_mb: 10.0,
            storage_mb: 10.0,
            deadline_ms: 1000.0,
            controls: BTreeSet::from([1]),
        });
        dag.edges.push(Edge {
            src: 1,
            dst: 3,
            kb: 1.0,
        });
        let infra = flat_fleet(1, 1000.0, 16.0);
        let ranks = upward_rank(&dag, &infra).unwrap();
        assert!((ranks[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn rank_rejects_cycles() {
        let mut dag = chain(&[1.0, 1.0], 1.0);
        dag.edges.push(Edge {
            src: 2,
            dst: 1,
            kb: 1.0,
        });
        let infra = flat_fleet(1, 1000.0, 16.0);
        assert!(matches!(
            upward_rank(&dag, &infra),
            Err(WorkloadError::MalformedDag(_))
        ));
    }

    #[test]
    fn critical_path_of_chain_is_everything() {
        let dag = chain(&[1.0, 2.0, 3.0], 1.0);
        let infra = flat_fleet(2, 1000.0, 16.0);
        let cp = critical_path(&dag, &infra).unwrap();
        assert_eq!(cp.path, vec![0, 1, 2]);
        assert!(cp.on_path.iter().all(|&b| b));
    }

    #[test]
    fn critical_path_picks_heavier_fork_branch() {
        // n1 -> {n2 (5 MI), n3 (3 MI)}, single server so comm is free.
        let mut dag = chain(&[2.0, 5.0], 1.0);
        dag.tasks.push(Task {
            id: 3,
            cpu_mi: 3.0,
            mem_mb: 10.0,
            storage_mb: 10.0,
            deadline_ms: 1000.0,
            controls: BTreeSet::from([1]),
        });
        dag.edges.push(Edge {
            src: 1,
            dst: 3,
            kb: 1.0,
        });
        let infra = flat_fleet(1, 1000.0, 16.0);
        let cp = critical_path(&dag, &infra).unwrap();
        assert_eq!(cp.path, vec![0, 1]);
        assert_eq!(cp.on_path, vec![true, true, false]);

        // Exhaustive check: the chosen path carries the maximal average cost.
        let costs = AverageCosts::from_infrastructure(&infra).unwrap();
        let index = dag.index().unwrap();
        let best = max_path_cost(&dag, &index, &costs);
        let chosen: f64 = cp.path.iter().map(|&p| costs.comp_ms(dag.tasks[p].cpu_mi)).sum();
        assert!((best - chosen).abs() < 1e-12);
    }

    #[test]
    fn critical_path_tie_breaks_to_lower_id() {
        // Symmetric fork: both branches rank equally, id 2 must win.
        let mut dag = chain(&[2.0, 5.0], 1.0);
        dag.tasks.push(Task {
            id: 3,
            cpu_mi: 5.0,
            mem_mb: 10.0,
            storage_mb: 10.0,
            deadline_ms: 1000.0,
            controls: BTreeSet::from([1]),
        });
        dag.edges.push(Edge {
            src: 1,
            dst: 3,
            kb: 1.0,
        });
        let infra = flat_fleet(1, 1000.0, 16.0);
        let cp = critical_path(&dag, &infra).unwrap();
        assert_eq!(cp.path, vec![0, 1]);
    }

    /// Brute-force maximal entry-to-exit path cost under average costs.
    pub(crate) fn max_path_cost(dag: &ServiceDag, index: &DagIndex, costs: &AverageCosts) -> f64 {
        fn dfs(
            p: usize,
            dag: &ServiceDag,
            index: &DagIndex,
            costs: &AverageCosts,
            acc: f64,
            best: &mut f64,
        ) {
            let here = acc + costs.comp_ms(dag.tasks[p].cpu_mi);
            if index.succs[p].is_empty() {
                *best = best.max(here);
                return;
            }
            for &(s, kb) in &index.succs[p] {
                dfs(s, dag, index, costs, here + costs.comm_ms(kb), best);
            }
        }
        let mut best = f64::MIN;
        for (p, preds) in index.preds.iter().enumerate() {
            if preds.is_empty() {
                dfs(p, dag, index, costs, 0.0, &mut best);
            }
        }
        best
    }

    #[test]
    fn critical_path_cost_matches_exhaustive_enumeration() {
        let ranges = GenRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..200 {
            let dag = assign_attributes(
                generate_topology(&DagShapeParams {
                    task_count: rng.gen_range(1..=12),
                    fat: rng.gen_range(0.2..=1.0),
                    density: rng.gen_range(0.2..=1.0),
                    seed: 1000 + i,
                })
                .unwrap(),
                2000 + i,
                &ranges,
            );
            let infra = uniform_fleet(4, 3000 + i);
            let costs = AverageCosts::from_infrastructure(&infra).unwrap();
            let index = dag.index().unwrap();
            let cp = critical_path(&dag, &infra).unwrap();
            let mut chosen = 0.0;
            for (k, &p) in cp.path.iter().enumerate() {
                chosen += costs.comp_ms(dag.tasks[p].cpu_mi);
                if k + 1 < cp.path.len() {
                    let next = cp.path[k + 1];
                    let kb = index.succs[p]
                        .iter()
                        .find(|&&(s, _)| s == next)
                        .map(|&(_, kb)| kb)
                        .expect("consecutive path tasks are connected");
                    chosen += costs.comm_ms(kb);
                }
            }
            let best = max_path_cost(&dag, &index, &costs);
            assert!(
                (best - chosen).abs() <= 1e-9 * best.abs().max(1.0),
                "dag {i}: greedy path cost {chosen} vs exhaustive {best}"
            );
        }
    }

    #[test]
    fn order_is_rank_descending_among_ready() {
        let mut dag = chain(&[2.0, 5.0], 1.0);
        dag.tasks.push(Task {
            id: 3,
            cpu_mi: 3.0,
            mem_mb: 10.0,
            storage_mb: 10.0,
            deadline_ms: 1000.0,
            controls: BTreeSet::from([1]),
        });
        dag.edges.push(Edge {
            src: 1,
            dst: 3,
            kb: 1.0,
        });
        let infra = flat_fleet(1, 1000.0, 16.0);
        let order = task_order(&dag, &infra).unwrap();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn order_prefixes_are_predecessor_closed() {
        let ranges = GenRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..100 {
            let dag = assign_attributes(
                generate_topology(&DagShapeParams {
                    task_count: rng.gen_range(1..=30),
                    fat: rng.gen_range(0.2..=1.0),
                    density: rng.gen_range(0.2..=1.0),
                    seed: i,
                })
                .unwrap(),
                i,
                &ranges,
            );
            let infra = uniform_fleet(3, i);
            let order = task_order(&dag, &infra).unwrap();
            let index = dag.index().unwrap();
            // Permutation of all positions.
            let mut sorted = order.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..dag.tasks.len()).collect::<Vec<_>>());
            // Every prefix contains all predecessors of its members.
            let mut placed = vec![false; dag.tasks.len()];
            for &p in &order {
                for &(q, _) in &index.preds[p] {
                    assert!(placed[q], "task {} placed before predecessor {}", p, q);
                }
                placed[p] = true;
            }
        }
    }

    #[test]
    fn dataset_round_trip_is_lossless_and_seed_deterministic() {
        let ranges = GenRanges::default();
        let a = build_dataset(DatasetProfile::Small, 7, &ranges);
        let b = build_dataset(DatasetProfile::Small, 7, &ranges);
        assert_eq!(a.len(), 150);
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("services.json");
        save_services(&a, &path).unwrap();
        let loaded = load_services(&path).unwrap();
        assert_eq!(a, loaded);

        // Bit-identical bytes when regenerated with the same seed.
        let path2 = dir.path().join("services2.json");
        save_services(&b, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
