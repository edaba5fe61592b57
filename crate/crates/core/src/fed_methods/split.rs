use serde::{Deserialize, Serialize};

use super::{payload_bytes, ClientPayload, MethodError, Result};
use crate::lora_model::{
    backward_stack, forward_stack, AdapterOptimizer, AdapterSet, BaseModel, Dataset, LoraError, TrainingConfig,
};
use crate::numerics::softmax_cross_entropy;

/// Server half of split training: adapters for layers `[split, L)` and their
/// optimizer, both persisting across rounds.
#[derive(Debug, Clone)]
pub struct SplitServer {
    pub split_layer_index: usize,
    pub adapters: AdapterSet,
    pub optimizer: AdapterOptimizer,
    pub trainable: bool,
}

impl SplitServer {
    pub fn new(full: &AdapterSet, split_layer_index: usize, training: &TrainingConfig, trainable: bool) -> Self {
        let (_, server) = full.split_at(split_layer_index);
        let optimizer = AdapterOptimizer::new(&server, training.optimizer);
        Self {
            split_layer_index,
            adapters: server,
            optimizer,
            trainable,
        }
    }
}

/// One client's work for the round: its data and the batch order.
#[derive(Debug, Clone, Copy)]
pub struct ClientBatches<'a> {
    pub client_id: usize,
    pub data: &'a Dataset,
    pub schedule: &'a [Vec<usize>],
}

/// Bytes of every activation sent up and every gradient sent down.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeLog {
    /// `(client_id, activation_bytes, gradient_bytes)` per exchange.
    pub entries: Vec<(usize, u64, u64)>,
}

impl ExchangeLog {
    pub fn client_totals(&self, client_id: usize) -> (u64, u64) {
        self.entries
            .iter()
            .filter(|e| e.0 == client_id)
            .fold((0, 0), |(a, g), e| (a + e.1, g + e.2))
    }

    pub fn totals(&self) -> (u64, u64) {
        self.entries.iter().fold((0, 0), |(a, g), e| (a + e.1, g + e.2))
    }
}

#[derive(Debug, Clone)]
pub struct SplitRoundOutput {
    /// Client-side adapters after local training, in client-id order.
    pub updates: Vec<ClientPayload>,
    /// Mean batch loss per client, same order.
    pub train_losses: Vec<f64>,
    pub exchange: ExchangeLog,
}

/// Runs the clients one after another against the shared server. Each batch:
/// the client forwards its layers and uploads the activation, the server
/// finishes the forward pass, computes the loss, backpropagates (updating its
/// own adapters if trainable) and returns the activation gradient, and the
/// client applies its AdamW step.
pub fn split_round(
    base: &BaseModel,
    client_start: &[(usize, AdapterSet)],
    server: &mut SplitServer,
    clients: &[ClientBatches<'_>],
    training: &TrainingConfig,
) -> Result<SplitRoundOutput> {
    let s = server.split_layer_index;
    if s == 0 || s >= base.num_layers() {
        return Err(MethodError::Config(format!("split index {s} out of range")));
    }
    let (client_layers, server_layers) = base.layers().split_at(s);
    let act = base.activation();
    let mut order: Vec<&ClientBatches<'_>> = clients.iter().collect();
    order.sort_by_key(|c| c.client_id);

    let mut out = SplitRoundOutput {
        updates: Vec::with_capacity(order.len()),
        train_losses: Vec::with_capacity(order.len()),
        exchange: ExchangeLog::default(),
    };
    for c in order {
        let mut local = client_start
            .iter()
            .find(|(id, _)| *id == c.client_id)
            .map(|(_, a)| a.clone())
            .ok_or_else(|| MethodError::Misuse(format!("no client-side adapters for client {}", c.client_id)))?;
        let mut opt = AdapterOptimizer::new(&local, training.optimizer);
        let mut loss_sum = 0.0;
        for idx in c.schedule {
            let batch = c.data.subset(idx);
            let (hidden, client_cache) = forward_stack(client_layers, local.layers(), act, true, &batch.features)?;
            let (logits, server_cache) = forward_stack(server_layers, server.adapters.layers(), act, false, &hidden)?;
            let (loss, grad_logits) = softmax_cross_entropy(&logits, &batch.labels).map_err(LoraError::from)?;
            let (server_grads, grad_hidden) =
                backward_stack(server_layers, server.adapters.layers(), act, &server_cache, &grad_logits)?;
            if server.trainable {
                server.optimizer.apply(&mut server.adapters, &server_grads)?;
            }
            let (client_grads, _) = backward_stack(client_layers, local.layers(), act, &client_cache, &grad_hidden)?;
            opt.apply(&mut local, &client_grads)?;
            out.exchange
                .entries
                .push((c.client_id, payload_bytes(hidden.len()), payload_bytes(grad_hidden.len())));
            loss_sum += loss;
        }
        out.train_losses.push(if c.schedule.is_empty() {
            0.0
        } else {
            loss_sum / c.schedule.len() as f64
        });
        out.updates.push(ClientPayload::new(c.client_id, local, c.data.len()));
    }
    Ok(out)
}
