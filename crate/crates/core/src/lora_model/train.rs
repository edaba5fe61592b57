use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{backward_stack, forward_stack, AdapterGrad, AdapterSet, BaseModel};
use super::{LoraError, Result};
use crate::numerics::{adamw_update, softmax_cross_entropy, AdamWConfig, AdamWState, Matrix};

/// Features with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(LoraError::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let feats: Vec<&Matrix> = parts.iter().map(|d| &d.features).collect();
        Ok(Dataset {
            features: Matrix::vstack(&feats)?,
            labels: parts.iter().flat_map(|d| d.labels.iter().copied()).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub local_epochs: usize,
}

/// Learning rate for the toy task. The optimizer's own default (2e-4) moves
/// the adapters too little in 50 rounds of 8 local steps.
pub const DEFAULT_SCENARIO_LEARNING_RATE: f64 = 2e-3;

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig {
                learning_rate: DEFAULT_SCENARIO_LEARNING_RATE,
                ..AdamWConfig::default()
            },
            batch_size: 8,
            local_epochs: 1,
        }
    }
}

/// Proximal term `(mu/2)·‖θ − anchor‖²` over all adapter factors.
#[derive(Debug, Clone, Copy)]
pub struct Prox<'a> {
    pub mu: f64,
    pub anchor: &'a AdapterSet,
}

/// One AdamW state per trainable matrix, `(A, B)` per layer.
#[derive(Debug, Clone)]
pub struct AdapterOptimizer {
    states: Vec<(AdamWState, AdamWState)>,
}

impl AdapterOptimizer {
    pub fn new(adapters: &AdapterSet, config: AdamWConfig) -> Self {
        Self {
            states: adapters
                .layers()
                .iter()
                .map(|l| {
                    (
                        AdamWState::new(l.a.rows(), l.a.cols(), config),
                        AdamWState::new(l.b.rows(), l.b.cols(), config),
                    )
                })
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.states.first().map_or(0, |s| s.0.step_count)
    }

    /// Applies one AdamW update to every factor.
    pub fn apply(&mut self, adapters: &mut AdapterSet, grads: &[AdapterGrad]) -> Result<()> {
        if grads.len() != adapters.len() || self.states.len() != adapters.len() {
            return Err(LoraError::Shape("optimizer, gradients and adapters disagree on layer count".into()));
        }
        for ((layer, g), (sa, sb)) in adapters.layers_mut().iter_mut().zip(grads).zip(&mut self.states) {
            adamw_update(&mut layer.a, &g.a, sa)?;
            adamw_update(&mut layer.b, &g.b, sb)?;
        }
        Ok(())
    }
}

/// Adds `mu·(θ − anchor)` to each gradient in place.
pub fn add_prox_gradient(grads: &mut [AdapterGrad], adapters: &[super::LoraAdapter], anchor: &[super::LoraAdapter], mu: f64) -> Result<()> {
    if adapters.len() != anchor.len() || grads.len() != adapters.len() {
        return Err(LoraError::Shape("prox anchor does not match adapters".into()));
    }
    for ((g, p), a) in grads.iter_mut().zip(adapters).zip(anchor) {
        g.a.add_scaled(&p.a.sub(&a.a)?, mu)?;
        g.b.add_scaled(&p.b.sub(&a.b)?, mu)?;
    }
    Ok(())
}

/// `(mu/2)·‖θ − anchor‖²`.
pub fn prox_penalty(adapters: &AdapterSet, prox: &Prox<'_>) -> Result<f64> {
    if !adapters.same_shape(prox.anchor) {
        return Err(LoraError::Shape("prox anchor does not match adapters".into()));
    }
    let mut sq = 0.0;
    for (p, a) in adapters.layers().iter().zip(prox.anchor.layers()) {
        sq += p.a.sub(&a.a)?.data().iter().map(|v| v * v).sum::<f64>();
        sq += p.b.sub(&a.b)?.data().iter().map(|v| v * v).sum::<f64>();
    }
    Ok(0.5 * prox.mu * sq)
}

/// Mean cross-entropy on `batch` and its gradient w.r.t. every adapter
/// factor, with the prox gradient added when present.
pub fn loss_and_grads(
    base: &BaseModel,
    adapters: &AdapterSet,
    batch: &Dataset,
    prox: Option<&Prox<'_>>,
) -> Result<(f64, Vec<AdapterGrad>)> {
    if batch.is_empty() {
        return Err(LoraError::Config("empty batch".into()));
    }
    adapters.check_against(base.layers())?;
    if let Some(p) = prox {
        if !adapters.same_shape(p.anchor) {
            return Err(LoraError::Shape("prox anchor does not match adapters".into()));
        }
    }
    let (logits, cache) = forward_stack(base.layers(), adapters.layers(), base.activation(), false, &batch.features)?;
    let (loss, grad_logits) = softmax_cross_entropy(&logits, &batch.labels)?;
    let (mut grads, _) = backward_stack(base.layers(), adapters.layers(), base.activation(), &cache, &grad_logits)?;
    if let Some(p) = prox {
        add_prox_gradient(&mut grads, adapters.layers(), p.anchor.layers(), p.mu)?;
    }
    Ok((loss, grads))
}

/// One optimizer step on one batch. Returns the batch cross-entropy before
/// the update.
pub fn local_train_step(
    base: &BaseModel,
    adapters: &mut AdapterSet,
    batch: &Dataset,
    optimizer: &mut AdapterOptimizer,
    prox: Option<&Prox<'_>>,
) -> Result<f64> {
    let (loss, grads) = loss_and_grads(base, adapters, batch, prox)?;
    optimizer.apply(adapters, &grads)?;
    Ok(loss)
}

/// Index batches for `epochs` passes over `n` samples, reshuffled every pass.
pub fn batch_schedule(n: usize, batch_size: usize, epochs: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let bs = batch_size.max(1);
    let mut out = Vec::with_capacity(epochs * n.div_ceil(bs));
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        out.extend(order.chunks(bs).map(<[usize]>::to_vec));
    }
    out
}

/// Runs the whole schedule; returns the mean batch loss.
pub fn train_on_schedule(
    base: &BaseModel,
    adapters: &mut AdapterSet,
    data: &Dataset,
    schedule: &[Vec<usize>],
    optimizer: &mut AdapterOptimizer,
    prox: Option<&Prox<'_>>,
) -> Result<f64> {
    let mut total = 0.0;
    for idx in schedule {
        total += local_train_step(base, adapters, &data.subset(idx), optimizer, prox)?;
    }
    Ok(if schedule.is_empty() { 0.0 } else { total / schedule.len() as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate_logits(logits: &Matrix, labels: &[usize]) -> Result<EvalResult> {
    if labels.is_empty() {
        return Err(LoraError::Config("empty evaluation set".into()));
    }
    let (loss, _) = softmax_cross_entropy(logits, labels)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    Ok(EvalResult {
        loss,
        accuracy: correct as f64 / labels.len() as f64,
    })
}

pub fn evaluate(base: &BaseModel, adapters: &AdapterSet, test: &Dataset) -> Result<EvalResult> {
    let logits = super::forward_with_adapters(base, adapters, &test.features)?;
    evaluate_logits(&logits, &test.labels)
}

pub fn evaluate_base(base: &BaseModel, test: &Dataset) -> Result<EvalResult> {
    evaluate_logits(&base.forward(&test.features)?, &test.labels)
}
