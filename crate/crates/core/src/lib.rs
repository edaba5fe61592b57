//! Deterministic, desk-scale benchmark harness for federated LoRA fine-tuning
//! under simulated edge-system constraints.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense matrices, linear layers, cross-entropy and AdamW.
//! * [`lora_model`]: a frozen toy base model with per-layer LoRA adapters and a
//!   synthetic non-IID classification task.
//! * [`fed_methods`]: FedAvg+LoRA, FedProx+LoRA, HeteroLoRA and SplitLoRA.
//! * [`edge_sim`]: device profiles, client pool, cost model and the cost ledger.
//! * [`perturbations`]: bandwidth fluctuation, dropout and device mixes.
//! * [`protocols`]: Quality-under-Budget, Cost-to-Target, Robustness and the
//!   overall ranking.
//! * [`harness`]: scenario configuration, trace files, reports and curves.

// Range checks are written as `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod edge_sim;
pub mod fed_methods;
pub mod harness;
pub mod lora_model;
pub mod numerics;
pub mod perturbations;
pub mod protocols;
pub mod seeds;
