//! Three-tier security compliance scoring.
//!
//! A *control* (e.g. data-encryption protection) decomposes into
//! *capabilities*, each realized by binary *configuration items* that a
//! server either enables or not. Scoring walks the hierarchy bottom-up:
//! the fraction of a capability's items a server enables (its satisfaction
//! rate) maps to a discrete capability level; capability levels aggregate
//! into a control score, which maps to a discrete control level; control
//! levels aggregate into the task score. Controls in the hard set must be
//! fully compliant or the task score collapses to a large negative penalty.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infrastructure::ServerNode;
use crate::workload::{ServiceDag, Task};

#[derive(Debug, Error)]
pub enum SecurityError {
    #[error("catalog integrity: {0}")]
    CatalogIntegrity(String),
    #[error("unknown control index {0}")]
    UnknownControl(usize),
    #[error("value {0} outside [0, 100]")]
    Domain(f64),
    #[error("incomplete deployment: task {0} unassigned")]
    IncompleteDeployment(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// One capability: the set of configuration items that realize it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capability {
    pub items: BTreeSet<usize>,
}

/// One control: its capabilities and their weights (summing to 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub capabilities: Vec<Capability>,
    pub cap_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecurityCatalog {
    /// Controls in id order; control ids are 1-based.
    pub controls: Vec<Control>,
    /// Per-control weight basis, renormalized over each task's required set.
    pub ctrl_weights: Vec<f64>,
    /// Controls that must reach full compliance wherever required.
    pub hard_controls: BTreeSet<usize>,
}

impl SecurityCatalog {
    /// The standard catalog: 15 controls × 5 capabilities × 3 items with
    /// globally unique item ids 1..=225, uniform weights, hard set {1,2,3}.
    pub fn standard() -> Self {
        let mut controls = Vec::with_capacity(15);
        let mut next_item = 1usize;
        for _ in 0..15 {
            let mut capabilities = Vec::with_capacity(5);
            for _ in 0..5 {
                let items: BTreeSet<usize> = (next_item..next_item + 3).collect();
                next_item += 3;
                capabilities.push(Capability { items });
            }
            controls.push(Control {
                capabilities,
                cap_weights: vec![0.2; 5],
            });
        }
        Self {
            controls,
            ctrl_weights: vec![1.0; 15],
            hard_controls: BTreeSet::from([1, 2, 3]),
        }
    }

    pub fn control_count(&self) -> usize {
        self.controls.len()
    }

    pub fn control(&self, id: usize) -> Result<&Control, SecurityError> {
        if id == 0 || id > self.controls.len() {
            return Err(SecurityError::UnknownControl(id));
        }
        Ok(&self.controls[id - 1])
    }

    /// All configuration-item ids across the catalog.
    pub fn item_universe(&self) -> BTreeSet<usize> {
        self.controls
            .iter()
            .flat_map(|c| c.capabilities.iter())
            .flat_map(|cp| cp.items.iter().copied())
            .collect()
    }

    /// Item ids belonging to control `id`.
    pub fn control_items(&self, id: usize) -> Result<BTreeSet<usize>, SecurityError> {
        Ok(self
            .control(id)?
            .capabilities
            .iter()
            .flat_map(|cp| cp.items.iter().copied())
            .collect())
    }

    /// Structural validation: non-empty capabilities, unique item ids,
    /// capability weights summing to one per control, hard set in range.
    pub fn validate(&self) -> Result<(), SecurityError> {
        if self.controls.is_empty() {
            return Err(SecurityError::CatalogIntegrity("no controls".into()));
        }
        if self.ctrl_weights.len() != self.controls.len() {
            return Err(SecurityError::CatalogIntegrity(
                "control weight count mismatch".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for (i, c) in self.controls.iter().enumerate() {
            if c.capabilities.is_empty() {
                return Err(SecurityError::CatalogIntegrity(format!(
                    "control {} has no capabilities",
                    i + 1
                )));
            }
            if c.cap_weights.len() != c.capabilities.len() {
                return Err(SecurityError::CatalogIntegrity(format!(
                    "control {} capability weight count mismatch",
                    i + 1
                )));
            }
            let sum: f64 = c.cap_weights.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(SecurityError::CatalogIntegrity(format!(
                    "control {} capability weights sum to {}, expected 1",
                    i + 1,
                    sum
                )));
            }
            if c.cap_weights.iter().any(|w| *w < 0.0) {
                return Err(SecurityError::CatalogIntegrity(format!(
                    "control {} has a negative capability weight",
                    i + 1
                )));
            }
            for cp in &c.capabilities {
                if cp.items.is_empty() {
                    return Err(SecurityError::CatalogIntegrity(format!(
                        "control {} has an empty capability",
                        i + 1
                    )));
                }
                for item in &cp.items {
                    if !seen.insert(*item) {
                        return Err(SecurityError::CatalogIntegrity(format!(
                            "configuration item {item} appears twice"
                        )));
                    }
                }
            }
        }
        for &h in &self.hard_controls {
            self.control(h)?;
        }
        Ok(())
    }
}

/// Discretization tables and the hard-constraint penalty.
///
/// Capability levels: 0 ↦ 0, (0, 33] ↦ 25, (33, 66] ↦ 50, (66, 100) ↦ 75,
/// 100 ↦ 100. Control levels: 0 ↦ 0, (0, 100) ↦ 50, 100 ↦ 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecurityThresholds {
    pub cap_levels: [f64; 5],
    /// Interior capability boundaries (upper bounds of the 25 and 50 bands).
    pub cap_bounds: [f64; 2],
    pub ctrl_levels: [f64; 3],
    pub p_constraint: f64,
}

impl Default for SecurityThresholds {
    fn default() -> Self {
        Self {
            cap_levels: [0.0, 25.0, 50.0, 75.0, 100.0],
            cap_bounds: [33.0, 66.0],
            ctrl_levels: [0.0, 50.0, 100.0],
            p_constraint: -100_000.0,
        }
    }
}

/// Percentage of the capability's configuration items enabled on the server.
pub fn satisfaction_rate(
    cap: &Capability,
    server_cnf: &BTreeSet<usize>,
) -> Result<f64, SecurityError> {
    if cap.items.is_empty() {
        return Err(SecurityError::CatalogIntegrity(
            "capability has no configuration items".into(),
        ));
    }
    let hit = cap.items.intersection(server_cnf).count();
    Ok(100.0 * hit as f64 / cap.items.len() as f64)
}

/// Discrete capability level for a satisfaction rate.
pub fn cap_level(sr: f64, th: &SecurityThresholds) -> Result<f64, SecurityError> {
    if !(0.0..=100.0).contains(&sr) {
        return Err(SecurityError::Domain(sr));
    }
    Ok(if sr == 0.0 {
        th.cap_levels[0]
    } else if sr <= th.cap_bounds[0] {
        th.cap_levels[1]
    } else if sr <= th.cap_bounds[1] {
        th.cap_levels[2]
    } else if sr < 100.0 {
        th.cap_levels[3]
    } else {
        th.cap_levels[4]
    })
}

/// Weighted mean of the control's capability levels.
pub fn control_score(
    control_id: usize,
    server_cnf: &BTreeSet<usize>,
    catalog: &SecurityCatalog,
    th: &SecurityThresholds,
) -> Result<f64, SecurityError> {
    let control = catalog.control(control_id)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (cp, &w) in control.capabilities.iter().zip(&control.cap_weights) {
        let sr = satisfaction_rate(cp, server_cnf)?;
        num += w * cap_level(sr, th)?;
        den += w;
    }
    if den == 0.0 {
        return Err(SecurityError::CatalogIntegrity(format!(
            "control {control_id} has zero total capability weight"
        )));
    }
    Ok(num / den)
}

/// Discrete control level: non-compliant, partial, or fully compliant.
pub fn ctrl_level(score: f64, th: &SecurityThresholds) -> Result<f64, SecurityError> {
    if !(0.0..=100.0).contains(&score) {
        return Err(SecurityError::Domain(score));
    }
    Ok(if score == 0.0 {
        th.ctrl_levels[0]
    } else if score < 100.0 {
        th.ctrl_levels[1]
    } else {
        th.ctrl_levels[2]
    })
}

/// Security score of placing `task` on `server`: the control-weighted mean
/// of its required controls' levels, or the hard-constraint penalty when any
/// required hard control falls short of full compliance.
pub fn task_score(
    task: &Task,
    server: &ServerNode,
    catalog: &SecurityCatalog,
    th: &SecurityThresholds,
) -> Result<f64, SecurityError> {
    if task.controls.is_empty() {
        return Err(SecurityError::CatalogIntegrity(format!(
            "task {} requires no controls",
            task.id
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &k in &task.controls {
        let g = control_score(k, &server.config_items, catalog, th)?;
        let level = ctrl_level(g, th)?;
        if catalog.hard_controls.contains(&k) && level != th.ctrl_levels[2] {
            return Ok(th.p_constraint);
        }
        let w = catalog
            .ctrl_weights
            .get(k - 1)
            .copied()
            .ok_or(SecurityError::UnknownControl(k))?;
        num += w * level;
        den += w;
    }
    if den == 0.0 {
        return Err(SecurityError::CatalogIntegrity(
            "required controls carry zero total weight".into(),
        ));
    }
    Ok(num / den)
}

/// Mean task score over a full assignment (penalty values included).
///
/// `assignment[p]` is the server index for the task at position `p`.
pub fn service_score(
    assignment: &[Option<usize>],
    dag: &ServiceDag,
    servers: &[ServerNode],
    catalog: &SecurityCatalog,
    th: &SecurityThresholds,
) -> Result<f64, SecurityError> {
    let mut sum = 0.0;
    for (p, task) in dag.tasks.iter().enumerate() {
        let s = assignment
            .get(p)
            .copied()
            .flatten()
            .ok_or(SecurityError::IncompleteDeployment(task.id))?;
        let server = servers
            .get(s)
            .ok_or(SecurityError::CatalogIntegrity(format!(
                "assignment references unknown server {s}"
            )))?;
        sum += task_score(task, server, catalog, th)?;
    }
    Ok(sum / dag.tasks.len() as f64)
}

/// Sum of task scores (diagnostic companion to the mean-based service score).
pub fn service_score_sum(
    assignment: &[Option<usize>],
    dag: &ServiceDag,
    servers: &[ServerNode],
    catalog: &SecurityCatalog,
    th: &SecurityThresholds,
) -> Result<f64, SecurityError> {
    Ok(service_score(assignment, dag, servers, catalog, th)? * dag.tasks.len() as f64)
}

pub fn save_catalog(catalog: &SecurityCatalog, path: &std::path::Path) -> Result<(), SecurityError> {
    std::fs::write(path, serde_json::to_string_pretty(catalog)?)?;
    Ok(())
}

pub fn load_catalog(path: &std::path::Path) -> Result<SecurityCatalog, SecurityError> {
    let catalog: SecurityCatalog = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    catalog.validate()?;
    Ok(catalog)
}
