//! The four federated fine-tuning strategies: FedAvg, FedProx, heterogeneous
//! rank (zero-padding) and split training, plus the round loop that drives
//! them through the simulated edge system.

mod run;
mod split;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use run::{run_method, ClientWork, EarlyStop, GlobalModel, RunOutcome, RunOutput, ScenarioContext};
pub use split::{split_round, ClientBatches, ExchangeLog, SplitRoundOutput, SplitServer};

use crate::edge_sim::{DeviceClass, EdgeError};
use crate::lora_model::{AdapterSet, LoraError};
use crate::perturbations::PerturbationError;

#[derive(Debug, Error)]
pub enum MethodError {
    #[error(transparent)]
    Model(#[from] LoraError),
    #[error(transparent)]
    Edge(#[from] EdgeError),
    #[error(transparent)]
    Perturbation(#[from] PerturbationError),
    #[error("strategy misuse: {0}")]
    Misuse(String),
    #[error("invalid strategy configuration: {0}")]
    Config(String),
    #[error("round observer failed: {0}")]
    Observer(String),
}

pub type Result<T> = std::result::Result<T, MethodError>;

/// Rank per device class for heterogeneous-rank training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankMap {
    pub jetson: usize,
    pub iqoo: usize,
    pub p50: usize,
    pub mate20: usize,
    pub nova9: usize,
}

impl Default for RankMap {
    fn default() -> Self {
        Self {
            jetson: 8,
            iqoo: 8,
            p50: 4,
            mate20: 4,
            nova9: 4,
        }
    }
}

impl RankMap {
    pub fn uniform(rank: usize) -> Self {
        Self {
            jetson: rank,
            iqoo: rank,
            p50: rank,
            mate20: rank,
            nova9: rank,
        }
    }

    pub fn rank_for(&self, class: DeviceClass) -> usize {
        match class {
            DeviceClass::Jetson => self.jetson,
            DeviceClass::Iqoo => self.iqoo,
            DeviceClass::P50 => self.p50,
            DeviceClass::Mate20 => self.mate20,
            DeviceClass::Nova9 => self.nova9,
        }
    }

    pub fn max_rank(&self) -> usize {
        DeviceClass::ALL.iter().map(|&c| self.rank_for(c)).max().unwrap_or(0)
    }
}

fn default_mu() -> f64 {
    0.01
}

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyKind {
    #[default]
    FedAvgLora,
    FedProxLora {
        #[serde(default = "default_mu")]
        mu: f64,
    },
    HeteroLora {
        #[serde(default)]
        ranks: RankMap,
    },
    SplitLora {
        #[serde(default = "default_one")]
        sync_period_rounds: usize,
        #[serde(default = "default_one")]
        split_layer_index: usize,
        #[serde(default = "default_true")]
        server_adapters_trainable: bool,
    },
}

impl StrategyKind {
    pub fn split_default() -> Self {
        StrategyKind::SplitLora {
            sync_period_rounds: 1,
            split_layer_index: 1,
            server_adapters_trainable: true,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            StrategyKind::FedAvgLora => "FedAvg",
            StrategyKind::FedProxLora { .. } => "FedProx",
            StrategyKind::HeteroLora { .. } => "HeteroLoRA",
            StrategyKind::SplitLora { .. } => "SplitLoRA",
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        match *self {
            StrategyKind::FedProxLora { mu } if !(mu >= 0.0 && mu.is_finite()) => {
                Err(MethodError::Config(format!("mu must be finite and >= 0, got {mu}")))
            }
            StrategyKind::HeteroLora { ranks } if DeviceClass::ALL.iter().any(|&c| ranks.rank_for(c) == 0) => {
                Err(MethodError::Config("every device class needs a rank of at least 1".into()))
            }
            StrategyKind::SplitLora {
                sync_period_rounds,
                split_layer_index,
                ..
            } => {
                if sync_period_rounds == 0 {
                    Err(MethodError::Config("sync_period_rounds must be at least 1".into()))
                } else if split_layer_index == 0 || split_layer_index >= num_layers {
                    Err(MethodError::Config(format!(
                        "split_layer_index must lie in [1, {num_layers}), got {split_layer_index}"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Bytes for `elements` f64 values on the wire. Every payload size in the
/// simulator goes through this.
pub fn payload_bytes(elements: usize) -> u64 {
    elements as u64 * 8
}

pub fn adapter_bytes(adapters: &AdapterSet) -> u64 {
    payload_bytes(adapters.element_count())
}

/// A client's upload at the end of local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientPayload {
    pub client_id: usize,
    pub adapters: AdapterSet,
    pub sample_count: usize,
    pub payload_bytes: u64,
}

impl ClientPayload {
    pub fn new(client_id: usize, adapters: AdapterSet, sample_count: usize) -> Self {
        let payload_bytes = adapter_bytes(&adapters);
        Self {
            client_id,
            adapters,
            sample_count,
            payload_bytes,
        }
    }
}

/// Sample-count-weighted mean of every factor. Payloads are processed in
/// client-id order whatever order they arrive in.
pub fn aggregate_fedavg(payloads: &[ClientPayload]) -> Result<AdapterSet> {
    let mut order: Vec<&ClientPayload> = payloads.iter().collect();
    order.sort_by_key(|p| p.client_id);
    let first = order
        .first()
        .ok_or_else(|| MethodError::Misuse("aggregation needs at least one payload".into()))?;
    for p in &order[1..] {
        if p.adapters.ranks() != first.adapters.ranks() || !p.adapters.same_shape(&first.adapters) {
            return Err(MethodError::Misuse(format!(
                "client {} has ranks {:?} but client {} has {:?}; mixed ranks need heterogeneous aggregation",
                p.client_id,
                p.adapters.ranks(),
                first.client_id,
                first.adapters.ranks()
            )));
        }
    }
    let total: usize = order.iter().map(|p| p.sample_count).sum();
    if total == 0 {
        return Err(MethodError::Misuse("payloads carry no samples".into()));
    }
    let mut out = first.adapters.clone();
    for layer in out.layers_mut() {
        layer.a = layer.a.scale(0.0);
        layer.b = layer.b.scale(0.0);
    }
    for p in &order {
        let w = p.sample_count as f64 / total as f64;
        for (acc, src) in out.layers_mut().iter_mut().zip(p.adapters.layers()) {
            acc.a.add_scaled(&src.a, w).map_err(LoraError::from)?;
            acc.b.add_scaled(&src.b, w).map_err(LoraError::from)?;
        }
    }
    Ok(out)
}

/// Result of heterogeneous-rank aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroAggregate {
    /// Weighted mean of the zero-padded factors at `r_max`.
    pub padded: AdapterSet,
    /// Each contributor's share, truncated back to its own rank.
    pub per_client: Vec<(usize, AdapterSet)>,
}

/// Zero-pads every payload to `r_max`, averages as FedAvg does, and hands each
/// client the leading rows of A and columns of B matching its own rank.
pub fn aggregate_hetero(payloads: &[ClientPayload], r_max: usize) -> Result<HeteroAggregate> {
    for p in payloads {
        if let Some(&r) = p.adapters.ranks().iter().max() {
            if r > r_max {
                return Err(MethodError::Config(format!(
                    "client {} has rank {r}, above r_max {r_max}",
                    p.client_id
                )));
            }
        }
    }
    let padded_payloads: Vec<ClientPayload> = payloads
        .iter()
        .map(|p| ClientPayload {
            client_id: p.client_id,
            adapters: p.adapters.padded(r_max),
            sample_count: p.sample_count,
            payload_bytes: p.payload_bytes,
        })
        .collect();
    let padded = aggregate_fedavg(&padded_payloads)?;
    let mut per_client: Vec<(usize, AdapterSet)> = payloads
        .iter()
        .map(|p| (p.client_id, truncate_like(&padded, &p.adapters)))
        .collect();
    per_client.sort_by_key(|(id, _)| *id);
    Ok(HeteroAggregate { padded, per_client })
}

/// `global` cut down to the per-layer ranks of `like`.
pub fn truncate_like(global: &AdapterSet, like: &AdapterSet) -> AdapterSet {
    let layers = global
        .layers()
        .iter()
        .zip(like.layers())
        .map(|(g, l)| g.truncated(l.rank()))
        .collect();
    AdapterSet::new(layers).expect("truncation keeps shapes valid")
}
