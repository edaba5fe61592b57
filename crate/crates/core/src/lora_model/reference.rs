//! Non-federated reference points: the untouched pretrained model, one model
//! trained on all shards pooled together, and every client training alone.

use rayon::prelude::*;

use super::model::{AdapterSet, BaseModel};
use super::task::SyntheticTask;
use super::train::{batch_schedule, evaluate, evaluate_base, train_on_schedule, AdapterOptimizer, EvalResult, TrainingConfig};
use super::{ModelConfig, Result};
use crate::seeds::{SeedTree, Stream};

pub fn pretrained_quality(base: &BaseModel, task: &SyntheticTask) -> Result<EvalResult> {
    evaluate_base(base, &task.test)
}

/// Trains one adapter set on the pooled data for `rounds` passes of
/// `local_epochs` each and reports the best loss and the best accuracy seen
/// at any pass boundary.
pub fn centroid_run(
    base: &BaseModel,
    task: &SyntheticTask,
    model: &ModelConfig,
    training: &TrainingConfig,
    rounds: usize,
    seeds: &SeedTree,
) -> Result<EvalResult> {
    let pooled = task.pooled_train()?;
    let mut adapters = AdapterSet::init(
        &base.layer_dims(),
        model.rank,
        model.alpha,
        model.init_std,
        &mut seeds.stream(Stream::AdapterInit, 0),
    )?;
    let mut opt = AdapterOptimizer::new(&adapters, training.optimizer);
    let mut best = evaluate(base, &adapters, &task.test)?;
    for round in 0..rounds {
        let mut rng = seeds.stream2(Stream::Shuffle, round as u64, 0xFF_FFFF);
        let schedule = batch_schedule(pooled.len(), training.batch_size, training.local_epochs, &mut rng);
        train_on_schedule(base, &mut adapters, &pooled, &schedule, &mut opt, None)?;
        let e = evaluate(base, &adapters, &task.test)?;
        best.loss = best.loss.min(e.loss);
        best.accuracy = best.accuracy.max(e.accuracy);
    }
    Ok(best)
}

/// Every client trains its own adapters on its own shard for the same number
/// of passes; the result is the mean of the final per-client scores.
pub fn local_only_run(
    base: &BaseModel,
    task: &SyntheticTask,
    model: &ModelConfig,
    training: &TrainingConfig,
    rounds: usize,
    seeds: &SeedTree,
) -> Result<EvalResult> {
    let init = AdapterSet::init(
        &base.layer_dims(),
        model.rank,
        model.alpha,
        model.init_std,
        &mut seeds.stream(Stream::AdapterInit, 0),
    )?;
    let results = task
        .shards
        .par_iter()
        .map(|shard| {
            let mut adapters = init.clone();
            let mut opt = AdapterOptimizer::new(&adapters, training.optimizer);
            for round in 0..rounds {
                let mut rng = seeds.stream2(Stream::Shuffle, round as u64, shard.client_id as u64);
                let schedule = batch_schedule(shard.len(), training.batch_size, training.local_epochs, &mut rng);
                train_on_schedule(base, &mut adapters, &shard.data, &schedule, &mut opt, None)?;
            }
            evaluate(base, &adapters, &task.test)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    Ok(EvalResult {
        loss: results.iter().map(|r| r.loss).sum::<f64>() / n,
        accuracy: results.iter().map(|r| r.accuracy).sum::<f64>() / n,
    })
}
