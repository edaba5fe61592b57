use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::split::{split_round, ClientBatches, SplitServer};
use super::{adapter_bytes, aggregate_fedavg, aggregate_hetero, ClientPayload, MethodError, Result, StrategyKind};
use crate::edge_sim::{
    check_feasibility, costs_from_times, memory_footprint, round_wall_clock, select_clients, transfer_seconds,
    ClientPool, ClientRoundCost, CostLedger, EvalSnapshot, ExchangeBreakdown, Feasibility, MemoryModel, RoundRecord,
};
use crate::lora_model::{
    batch_schedule, effective_rank, evaluate, train_on_schedule, AdapterOptimizer, AdapterSet, BaseModel, ModelConfig,
    Prox, SyntheticTask, TrainingConfig,
};
use crate::perturbations::{apply_dropout, PerturbationSpec};
use crate::seeds::{SeedTree, Stream};

/// Stop once the best test accuracy has not improved by more than
/// `min_delta` for `patience` consecutive evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub patience: usize,
    #[serde(default)]
    pub min_delta: f64,
}

/// Everything one run needs, borrowed from the caller.
#[derive(Debug, Clone)]
pub struct ScenarioContext<'a> {
    pub kind: StrategyKind,
    pub base: &'a BaseModel,
    pub task: &'a SyntheticTask,
    pub pool: &'a ClientPool,
    pub model: &'a ModelConfig,
    pub training: &'a TrainingConfig,
    pub seeds: SeedTree,
    pub rounds: usize,
    pub clients_per_round: usize,
    /// Evaluate every this many rounds (and always after the last one).
    pub eval_every: usize,
    pub perturbation: PerturbationSpec,
    pub memory: MemoryModel,
    pub server_aggregation_seconds: f64,
    /// How long the server waits for an upload that never arrives.
    pub upload_timeout_seconds: f64,
    /// Further upload attempts after a drop; each fails again with the
    /// dropout ratio.
    pub upload_retries: u32,
    pub early_stop: Option<EarlyStop>,
    /// Keep every round's global adapters in the output.
    pub keep_history: bool,
}

/// What a client did in a round, before it is turned into costs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientWork {
    pub client_id: usize,
    pub rank: usize,
    /// Optimizer steps, scaled by the share of compute done on the device.
    pub train_steps: f64,
    pub down_bytes: u64,
    /// Bytes sent during training (split activations); never lost.
    pub streamed_up_bytes: u64,
    /// The end-of-round upload; lost when the client drops.
    pub final_up_bytes: u64,
    /// No upload attempt succeeded.
    pub dropped: bool,
    pub failed_uploads: u32,
    pub train_loss: f64,
}

/// Server-held model state between rounds.
#[derive(Debug, Clone, PartialEq)]
pub enum GlobalModel {
    Shared(AdapterSet),
    /// Zero-padded aggregate at the largest rank.
    Padded(AdapterSet),
    Split {
        client: AdapterSet,
        server: AdapterSet,
    },
}

impl GlobalModel {
    /// Adapters for every layer, as used for evaluation.
    pub fn full(&self) -> AdapterSet {
        match self {
            GlobalModel::Shared(a) | GlobalModel::Padded(a) => a.clone(),
            GlobalModel::Split { client, server } => AdapterSet::concat(client, server),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    /// Global adapters after each round, when requested.
    pub history: Vec<AdapterSet>,
    pub final_model: AdapterSet,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub enum RunOutcome {
    Infeasible(Feasibility),
    Completed(RunOutput),
}

impl ScenarioContext<'_> {
    fn client_rank(&self, client_id: usize) -> usize {
        match self.kind {
            StrategyKind::HeteroLora { ranks } => ranks.rank_for(self.pool.device_of(client_id)),
            _ => self.model.rank,
        }
    }

    fn hosted_layers(&self) -> usize {
        match self.kind {
            StrategyKind::SplitLora { split_layer_index, .. } => split_layer_index,
            _ => self.base.num_layers(),
        }
    }

    /// Static per-client footprint in MiB.
    pub fn footprint(&self, client_id: usize) -> f64 {
        let dims = self.base.layer_dims();
        let rank = self.client_rank(client_id);
        let ranks: Vec<usize> = dims.iter().map(|&(i, o)| effective_rank(rank, i, o)).collect();
        memory_footprint(&self.memory, &dims, &ranks, self.training.batch_size, self.hosted_layers())
    }

    pub fn feasibility(&self) -> Feasibility {
        let fp: Vec<(usize, f64)> = self.pool.clients().iter().map(|c| (c.client_id, self.footprint(c.client_id))).collect();
        check_feasibility(&fp, self.pool)
    }

    /// Fraction of the model's multiply-adds that run on the device.
    fn device_compute_fraction(&self) -> f64 {
        let dims = self.base.layer_dims();
        let total: usize = dims.iter().map(|&(i, o)| i * o).sum();
        let hosted: usize = dims.iter().take(self.hosted_layers()).map(|&(i, o)| i * o).sum();
        hosted as f64 / total as f64
    }

    fn validate(&self) -> Result<()> {
        self.kind.validate(self.base.num_layers())?;
        if self.pool.len() != self.task.shards.len() {
            return Err(MethodError::Config(format!(
                "pool has {} clients but the task has {} shards",
                self.pool.len(),
                self.task.shards.len()
            )));
        }
        if self.eval_every == 0 {
            return Err(MethodError::Config("eval_every must be at least 1".into()));
        }
        self.perturbation.validate(self.pool.len())?;
        Ok(())
    }

    fn schedule(&self, round: usize, client_id: usize) -> Vec<Vec<usize>> {
        let mut rng = self.seeds.stream2(Stream::Shuffle, round as u64, client_id as u64);
        batch_schedule(
            self.task.shards[client_id].len(),
            self.training.batch_size,
            self.training.local_epochs,
            &mut rng,
        )
    }
}

struct RoundResult {
    works: Vec<ClientWork>,
    aggregated: bool,
    exchange: Option<ExchangeBreakdown>,
}

/// Local training for the full-model strategies, one task per client, then
/// aggregation over the clients whose upload arrived.
fn full_model_round(
    ctx: &ScenarioContext<'_>,
    global: &mut GlobalModel,
    round: usize,
    selected: &[usize],
    dropped: &[bool],
) -> Result<RoundResult> {
    let shared = global.full();
    let trained = selected
        .par_iter()
        .map(|&id| {
            let start = match ctx.kind {
                StrategyKind::HeteroLora { .. } => shared.truncated(ctx.client_rank(id)),
                _ => shared.clone(),
            };
            let mut adapters = start.clone();
            let mut opt = AdapterOptimizer::new(&adapters, ctx.training.optimizer);
            let schedule = ctx.schedule(round, id);
            let prox = match ctx.kind {
                StrategyKind::FedProxLora { mu } => Some(Prox { mu, anchor: &start }),
                _ => None,
            };
            let data = &ctx.task.shards[id].data;
            let loss = train_on_schedule(ctx.base, &mut adapters, data, &schedule, &mut opt, prox.as_ref())?;
            Ok((id, start, adapters, loss, schedule.len()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut works = Vec::with_capacity(trained.len());
    let mut survivors = Vec::new();
    for ((id, start, adapters, loss, steps), &drop) in trained.into_iter().zip(dropped) {
        works.push(ClientWork {
            client_id: id,
            rank: start.ranks()[0],
            train_steps: steps as f64,
            down_bytes: adapter_bytes(&start),
            streamed_up_bytes: 0,
            final_up_bytes: adapter_bytes(&adapters),
            dropped: drop,
            failed_uploads: 0,
            train_loss: loss,
        });
        if !drop {
            survivors.push(ClientPayload::new(id, adapters, ctx.task.shards[id].len()));
        }
    }
    let aggregated = !survivors.is_empty();
    if aggregated {
        *global = match ctx.kind {
            StrategyKind::HeteroLora { ranks } => GlobalModel::Padded(aggregate_hetero(&survivors, ranks.max_rank())?.padded),
            _ => GlobalModel::Shared(aggregate_fedavg(&survivors)?),
        };
    }
    Ok(RoundResult {
        works,
        aggregated,
        exchange: None,
    })
}

/// Client-side adapter copies between synchronisations.
#[derive(Default)]
struct SplitClients {
    version: u64,
    local: BTreeMap<usize, (u64, AdapterSet)>,
}

fn split_round_step(
    ctx: &ScenarioContext<'_>,
    global: &mut GlobalModel,
    server: &mut SplitServer,
    clients: &mut SplitClients,
    round: usize,
    selected: &[usize],
    dropped: &[bool],
) -> Result<RoundResult> {
    let StrategyKind::SplitLora { sync_period_rounds, .. } = ctx.kind else {
        unreachable!("split step on a non-split strategy")
    };
    let GlobalModel::Split { client: client_global, .. } = global else {
        unreachable!("split step without split state")
    };
    let sync = (round + 1).is_multiple_of(sync_period_rounds);
    let adapter_size = adapter_bytes(client_global);

    let mut starts = Vec::with_capacity(selected.len());
    let mut downloads = Vec::with_capacity(selected.len());
    for &id in selected {
        match clients.local.get(&id) {
            Some((v, a)) if *v == clients.version => {
                starts.push((id, a.clone()));
                downloads.push(0);
            }
            _ => {
                starts.push((id, client_global.clone()));
                downloads.push(adapter_size);
            }
        }
    }
    let schedules: Vec<Vec<Vec<usize>>> = selected.iter().map(|&id| ctx.schedule(round, id)).collect();
    let batches: Vec<ClientBatches<'_>> = selected
        .iter()
        .zip(&schedules)
        .map(|(&id, s)| ClientBatches {
            client_id: id,
            data: &ctx.task.shards[id].data,
            schedule: s,
        })
        .collect();
    let out = split_round(ctx.base, &starts, server, &batches, ctx.training)?;

    let fraction = ctx.device_compute_fraction();
    let mut breakdown = ExchangeBreakdown::default();
    let mut works = Vec::with_capacity(selected.len());
    let mut survivors = Vec::new();
    for (((payload, loss), (&drop, &down)), schedule) in out
        .updates
        .into_iter()
        .zip(out.train_losses)
        .zip(dropped.iter().zip(&downloads))
        .zip(&schedules)
    {
        let id = payload.client_id;
        let (act, grad) = out.exchange.client_totals(id);
        let final_up = if sync { payload.payload_bytes } else { 0 };
        breakdown.activation_bytes += act;
        breakdown.gradient_bytes += grad;
        breakdown.adapter_sync_bytes += down + if drop { 0 } else { final_up };
        works.push(ClientWork {
            client_id: id,
            rank: payload.adapters.ranks()[0],
            train_steps: schedule.len() as f64 * fraction,
            down_bytes: down + grad,
            streamed_up_bytes: act,
            final_up_bytes: final_up,
            dropped: drop,
            failed_uploads: 0,
            train_loss: loss,
        });
        if sync {
            if !drop {
                survivors.push(payload);
            }
        } else {
            clients.local.insert(id, (clients.version, payload.adapters));
        }
    }
    let mut aggregated = true;
    if sync {
        if survivors.is_empty() {
            aggregated = false;
        } else {
            *client_global = aggregate_fedavg(&survivors)?;
        }
        clients.version += 1;
        clients.local.clear();
    }
    if let GlobalModel::Split { server: s, .. } = global {
        *s = server.adapters.clone();
    }
    Ok(RoundResult {
        works,
        aggregated,
        exchange: Some(breakdown),
    })
}

/// Select → distribute → train → collect → aggregate, once per round, with
/// costs charged to the ledger at each round barrier. `observer` sees every
/// record as soon as it is complete.
pub fn run_method(
    ctx: &ScenarioContext<'_>,
    observer: &mut dyn FnMut(&RoundRecord) -> std::result::Result<(), String>,
) -> Result<RunOutcome> {
    ctx.validate()?;
    let feasibility = ctx.feasibility();
    if !feasibility.feasible {
        return Ok(RunOutcome::Infeasible(feasibility));
    }

    let init_rank = match ctx.kind {
        StrategyKind::HeteroLora { ranks } => ranks.max_rank(),
        _ => ctx.model.rank,
    };
    let init = AdapterSet::init(
        &ctx.base.layer_dims(),
        init_rank,
        ctx.model.alpha,
        ctx.model.init_std,
        &mut ctx.seeds.stream(Stream::AdapterInit, 0),
    )?;
    let mut split_state = None;
    let mut global = match ctx.kind {
        StrategyKind::FedAvgLora | StrategyKind::FedProxLora { .. } => GlobalModel::Shared(init),
        StrategyKind::HeteroLora { .. } => GlobalModel::Padded(init),
        StrategyKind::SplitLora {
            split_layer_index,
            server_adapters_trainable,
            ..
        } => {
            let server = SplitServer::new(&init, split_layer_index, ctx.training, server_adapters_trainable);
            let (client, server_part) = init.split_at(split_layer_index);
            split_state = Some((server, SplitClients::default()));
            GlobalModel::Split {
                client,
                server: server_part,
            }
        }
    };

    let mut ledger = CostLedger::new();
    let mut records = Vec::with_capacity(ctx.rounds);
    let mut history = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut stopped_early = false;

    for round in 0..ctx.rounds {
        let multiplier = ctx.perturbation.bandwidth_at(ledger.elapsed_hours());
        let selected = select_clients(
            ctx.pool.len(),
            ctx.clients_per_round,
            &mut ctx.seeds.stream(Stream::Selection, round as u64),
        )?;
        let first_try = apply_dropout(
            &selected,
            ctx.perturbation.dropout_ratio(),
            &mut ctx.seeds.stream(Stream::Dropout, round as u64),
        )?;
        let failed = retry_uploads(
            &first_try,
            ctx.upload_retries,
            ctx.perturbation.dropout_ratio(),
            &mut ctx.seeds.stream2(Stream::Dropout, round as u64, 1),
        );
        let dropped: Vec<bool> = failed.iter().map(|&f| f > ctx.upload_retries).collect();

        let result = match split_state.as_mut() {
            Some((server, clients)) => split_round_step(ctx, &mut global, server, clients, round, &selected, &dropped)?,
            None => full_model_round(ctx, &mut global, round, &selected, &dropped)?,
        };

        let mut works = result.works;
        for w in &mut works {
            let pos = selected.binary_search(&w.client_id).expect("work only for selected clients");
            w.failed_uploads = failed[pos];
        }
        let clients: Vec<ClientRoundCost> = works.iter().map(|w| charge(ctx, w, multiplier)).collect();
        let durations: Vec<f64> = clients.iter().map(ClientRoundCost::duration_seconds).collect();
        let wall = round_wall_clock(&durations, ctx.server_aggregation_seconds);
        let cumulative = ledger.record_round(&clients, wall);

        let last = round + 1 == ctx.rounds;
        let eval = if (round + 1) % ctx.eval_every == 0 || last {
            let e = evaluate(ctx.base, &global.full(), &ctx.task.test)?;
            let train_loss = works.iter().map(|w| w.train_loss).sum::<f64>() / works.len().max(1) as f64;
            Some(EvalSnapshot::new(e, train_loss))
        } else {
            None
        };

        let record = RoundRecord {
            round: round + 1,
            selected,
            clients,
            wall_clock_seconds: wall,
            exchange: result.exchange,
            aggregated: result.aggregated,
            cumulative,
            eval,
        };
        observer(&record).map_err(MethodError::Observer)?;
        records.push(record);
        if ctx.keep_history {
            history.push(global.full());
        }

        if let (Some(stop), Some(e)) = (ctx.early_stop, eval) {
            if e.test_accuracy > best_acc + stop.min_delta {
                best_acc = e.test_accuracy;
                stale = 0;
            } else {
                stale += 1;
                if stale >= stop.patience && !last {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    Ok(RunOutcome::Completed(RunOutput {
        records,
        history,
        final_model: global.full(),
        stopped_early,
    }))
}

/// Failed upload attempts per client: 0 for clients that never dropped,
/// otherwise 1 plus every retry that failed too. More than `retries` means
/// the update was lost. No randomness is drawn when `retries` is 0.
fn retry_uploads(first_try: &[bool], retries: u32, ratio: f64, rng: &mut impl Rng) -> Vec<u32> {
    first_try
        .iter()
        .map(|&dropped| {
            if !dropped {
                return 0;
            }
            let mut failed = 1;
            while failed <= retries && rng.random_bool(ratio) {
                failed += 1;
            }
            failed
        })
        .collect()
}

/// Turns a client's work into time, bytes and energy. Every failed upload
/// keeps the radio up until the server gives up on it and is not counted as
/// traffic.
fn charge(ctx: &ScenarioContext<'_>, w: &ClientWork, multiplier: f64) -> ClientRoundCost {
    let profile = ctx.pool.profile_of(w.client_id);
    let train_seconds = w.train_steps / profile.steps_per_second;
    let (mut comm_seconds, up_bytes) = if w.dropped {
        (
            transfer_seconds(profile, w.down_bytes + w.streamed_up_bytes, multiplier),
            w.streamed_up_bytes,
        )
    } else {
        (
            transfer_seconds(profile, w.down_bytes + w.streamed_up_bytes + w.final_up_bytes, multiplier),
            w.streamed_up_bytes + w.final_up_bytes,
        )
    };
    if w.failed_uploads > 0 {
        let wait = transfer_seconds(profile, w.final_up_bytes, multiplier).max(ctx.upload_timeout_seconds);
        comm_seconds += f64::from(w.failed_uploads) * wait;
    }
    let peak = ctx.footprint(w.client_id);
    let costs = costs_from_times(profile, train_seconds, comm_seconds, peak);
    ClientRoundCost {
        client_id: w.client_id,
        device: ctx.pool.device_of(w.client_id),
        rank: w.rank,
        train_seconds,
        comm_seconds,
        down_bytes: w.down_bytes,
        up_bytes,
        energy_kj: costs.energy_kj,
        peak_memory_mb: peak,
        dropped: w.dropped,
        failed_uploads: w.failed_uploads,
    }
}
