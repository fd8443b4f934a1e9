//! The three-tier server fleet: capacities, coordinates, network links, and
//! per-server security configuration inventories.
//!
//! Servers are immutable once generated; episode-level residual-capacity
//! bookkeeping lives in the environment module. Link bandwidth between two
//! servers is the smaller of their interface rates, and propagation delay
//! follows straight-line distance at the configured signal speed.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::security::SecurityCatalog;

#[derive(Debug, Error)]
pub enum InfraError {
    #[error("unknown server index {0}")]
    UnknownServer(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    Cloud,
    Fog,
    Iot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerNode {
    pub tier: Tier,
    /// Index within the tier; the position in `Infrastructure::servers` is
    /// the global server id used by actions.
    pub index: usize,
    /// Aggregate processing capacity (cores × per-core MIPS).
    pub mips: f64,
    pub mem_mb: f64,
    pub storage_mb: f64,
    pub x_m: f64,
    pub y_m: f64,
    pub iface_mbps: f64,
    /// Enabled security configuration items (catalog item ids).
    pub config_items: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Infrastructure {
    pub servers: Vec<ServerNode>,
    /// Signal transmission speed, meters per second.
    pub prop_speed_mps: f64,
}

impl Infrastructure {
    pub fn server_count(&self) -> usize {
        self.servers.len()
    }

    fn check(&self, i: usize) -> Result<&ServerNode, InfraError> {
        self.servers.get(i).ok_or(InfraError::UnknownServer(i))
    }

    /// Link bandwidth in Mbps: the smaller interface of the two endpoints.
    pub fn bandwidth_mbps(&self, i: usize, j: usize) -> Result<f64, InfraError> {
        let a = self.check(i)?;
        let b = self.check(j)?;
        Ok(a.iface_mbps.min(b.iface_mbps))
    }

    /// Propagation delay in milliseconds; zero between a server and itself.
    pub fn propagation_delay_ms(&self, i: usize, j: usize) -> Result<f64, InfraError> {
        let a = self.check(i)?;
        let b = self.check(j)?;
        let dist = ((a.x_m - b.x_m).powi(2) + (a.y_m - b.y_m).powi(2)).sqrt();
        Ok(dist / self.prop_speed_mps * 1000.0)
    }

    /// Transfer duration of `kb` kilobytes over the (i, j) link plus its
    /// propagation delay, in milliseconds. Zero when co-located.
    pub fn transfer_ms(&self, kb: f64, i: usize, j: usize) -> Result<f64, InfraError> {
        if i == j {
            self.check(i)?;
            return Ok(0.0);
        }
        let bw = self.bandwidth_mbps(i, j)?;
        Ok(8.0 * kb / bw + self.propagation_delay_ms(i, j)?)
    }

    pub fn max_mips(&self) -> f64 {
        self.servers.iter().map(|s| s.mips).fold(0.0, f64::max)
    }

    pub fn min_mips(&self) -> f64 {
        self.servers.iter().map(|s| s.mips).fold(f64::MAX, f64::min)
    }

    /// Smallest off-diagonal link bandwidth; `None` for a single server.
    pub fn min_pair_bandwidth_mbps(&self) -> Option<f64> {
        let n = self.servers.len();
        if n < 2 {
            return None;
        }
        let mut min = f64::MAX;
        for i in 0..n {
            for j in i + 1..n {
                min = min.min(self.servers[i].iface_mbps.min(self.servers[j].iface_mbps));
            }
        }
        Some(min)
    }

    /// Largest pairwise propagation delay in ms; zero for a single server.
    pub fn max_propagation_delay_ms(&self) -> f64 {
        let n = self.servers.len();
        let mut max = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                max = max.max(self.propagation_delay_ms(i, j).unwrap());
            }
        }
        max
    }

    /// Mean link bandwidth from server `i` to every other server, in Mbps.
    pub fn mean_bandwidth_from(&self, i: usize) -> f64 {
        let n = self.servers.len();
        if n < 2 {
            return self.servers[i].iface_mbps;
        }
        let sum: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| self.servers[i].iface_mbps.min(self.servers[j].iface_mbps))
            .sum();
        sum / (n - 1) as f64
    }
}

/// Hardware and security profile of one tier.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TierSpec {
    pub per_core_mips: (f64, f64),
    pub cores: (u32, u32),
    pub mem_gb: (f64, f64),
    pub storage_gb: (f64, f64),
    pub iface_mbps: (f64, f64),
    /// Probability that any given catalog configuration item is enabled.
    pub item_prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfraParams {
    pub cloud_count: usize,
    pub fog_count: usize,
    pub iot_count: usize,
    /// Side length of the square deployment area, meters.
    pub area_m: f64,
    pub prop_speed_mps: f64,
    pub seed: u64,
    pub cloud: TierSpec,
    pub fog: TierSpec,
    pub iot: TierSpec,
}

impl Default for InfraParams {
    fn default() -> Self {
        Self {
            cloud_count: 20,
            fog_count: 30,
            iot_count: 50,
            area_m: 100_000.0,
            prop_speed_mps: 2.0e8,
            seed: 0,
            cloud: TierSpec {
                per_core_mips: (10_000.0, 100_000.0),
                cores: (4, 32),
                mem_gb: (16.0, 128.0),
                storage_gb: (500.0, 10_000.0),
                iface_mbps: (100.0, 1000.0),
                item_prob: 0.9,
            },
            fog: TierSpec {
                per_core_mips: (5_000.0, 20_000.0),
                cores: (2, 8),
                mem_gb: (4.0, 32.0),
                storage_gb: (200.0, 500.0),
                iface_mbps: (50.0, 200.0),
                item_prob: 0.6,
            },
            iot: TierSpec {
                per_core_mips: (1_000.0, 5_000.0),
                cores: (1, 2),
                mem_gb: (1.0, 2.0),
                storage_gb: (10.0, 100.0),
                iface_mbps: (10.0, 50.0),
                item_prob: 0.3,
            },
        }
    }
}

impl InfraParams {
    pub fn with_counts(cloud: usize, fog: usize, iot: usize) -> Self {
        Self {
            cloud_count: cloud,
            fog_count: fog,
            iot_count: iot,
            ..Self::default()
        }
    }
}

/// Generates a fleet: tier-appropriate uniform hardware draws, uniform
/// coordinates in the deployment area, and per-tier Bernoulli draws over the
/// catalog's configuration items. Deterministic in the seed.
pub fn generate_infrastructure(
    params: &InfraParams,
    catalog: &SecurityCatalog,
) -> Result<Infrastructure, InfraError> {
    if params.area_m <= 0.0 {
        return Err(InfraError::InvalidParameter("area must be positive".into()));
    }
    if params.prop_speed_mps <= 0.0 {
        return Err(InfraError::InvalidParameter(
            "signal speed must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let item_ids = catalog.item_universe();
    let mut servers = Vec::with_capacity(params.cloud_count + params.fog_count + params.iot_count);
    for (tier, spec, count) in [
        (Tier::Cloud, &params.cloud, params.cloud_count),
        (Tier::Fog, &params.fog, params.fog_count),
        (Tier::Iot, &params.iot, params.iot_count),
    ] {
        for index in 0..count {
            let per_core = rng.gen_range(spec.per_core_mips.0..=spec.per_core_mips.1);
            let cores = rng.gen_range(spec.cores.0..=spec.cores.1);
            let mem_mb = rng.gen_range(spec.mem_gb.0..=spec.mem_gb.1) * 1024.0;
            let storage_mb = rng.gen_range(spec.storage_gb.0..=spec.storage_gb.1) * 1024.0;
            let iface_mbps = rng.gen_range(spec.iface_mbps.0..=spec.iface_mbps.1);
            let x_m = rng.gen_range(0.0..=params.area_m);
            let y_m = rng.gen_range(0.0..=params.area_m);
            let config_items: BTreeSet<usize> = item_ids
                .iter()
                .copied()
                .filter(|_| rng.gen_bool(spec.item_prob))
                .collect();
            servers.push(ServerNode {
                tier,
                index,
                mips: per_core * f64::from(cores),
                mem_mb,
                storage_mb,
                x_m,
                y_m,
                iface_mbps,
                config_items,
            });
        }
    }
    Ok(Infrastructure {
        servers,
        prop_speed_mps: params.prop_speed_mps,
    })
}

pub fn save_infrastructure(
    infra: &Infrastructure,
    path: &std::path::Path,
) -> Result<(), InfraError> {
    std::fs::write(path, serde_json::to_string_pretty(infra)?)?;
    Ok(())
}

pub fn load_infrastructure(path: &std::path::Path) -> Result<Infrastructure, InfraError> {
    let infra: Infrastructure = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if infra.servers.is_empty() {
        return Err(InfraError::InvalidParameter(
            "infrastructure has no servers".into(),
        ));
    }
    for s in &infra.servers {
        if s.mips <= 0.0 || s.mem_mb <= 0.0 || s.storage_mb <= 0.0 || s.iface_mbps <= 0.0 {
            return Err(InfraError::InvalidParameter(format!(
                "server {:?}/{} has a non-positive capacity",
                s.tier, s.index
            )));
        }
    }
    Ok(infra)
}

/// Small hand-built fleets for tests and benchmarks.
pub mod testutil {
    use super::*;

    /// `n` identical servers at the origin: fixed MIPS and interface rate,
    /// effectively unlimited memory/storage, the full item universe enabled.
    pub fn flat_fleet(n: usize, mips: f64, iface_mbps: f64) -> Infrastructure {
        let items: BTreeSet<usize> = SecurityCatalog::standard().item_universe();
        Infrastructure {
            servers: (0..n)
                .map(|index| ServerNode {
                    tier: Tier::Fog,
                    index,
                    mips,
                    mem_mb: 1e9,
                    storage_mb: 1e9,
                    x_m: 0.0,
                    y_m: 0.0,
                    iface_mbps,
                    config_items: items.clone(),
                })
                .collect(),
            prop_speed_mps: 2.0e8,
        }
    }

    /// `n` heterogeneous servers with seeded random capacities, positions in
    /// a 100 km box, and the full item universe enabled.
    pub fn uniform_fleet(n: usize, seed: u64) -> Infrastructure {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: BTreeSet<usize> = SecurityCatalog::standard().item_universe();
        Infrastructure {
            servers: (0..n)
                .map(|index| ServerNode {
                    tier: Tier::Fog,
                    index,
                    mips: rng.gen_range(1_000.0..=100_000.0),
                    mem_mb: rng.gen_range(1_024.0..=131_072.0),
                    storage_mb: rng.gen_range(10_240.0..=1_048_576.0),
                    x_m: rng.gen_range(0.0..=100_000.0),
                    y_m: rng.gen_range(0.0..=100_000.0),
                    iface_mbps: rng.gen_range(10.0..=1000.0),
                    config_items: items.clone(),
                })
                .collect(),
            prop_speed_mps: 2.0e8,
        }
    }
}
