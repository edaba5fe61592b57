use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::BaseModel;
use super::train::{argmax, Dataset};
use super::{LoraError, ModelConfig, Result};
use crate::numerics::Matrix;
use crate::seeds::{SeedTree, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub num_clients: usize,
    pub samples_per_client: usize,
    pub test_samples: usize,
    /// Dirichlet concentration of per-client label proportions. Small values
    /// give strongly skewed clients; very large values approach IID.
    pub concentration: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_clients: 100,
            samples_per_client: 64,
            test_samples: 1000,
            concentration: 1.0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.samples_per_client == 0 || self.test_samples == 0 {
            return Err(LoraError::Config("client count, shard size and test size must be at least 1".into()));
        }
        if !(self.concentration > 0.0) || !self.concentration.is_finite() {
            return Err(LoraError::Config(format!(
                "concentration must be positive and finite, got {}",
                self.concentration
            )));
        }
        Ok(())
    }
}

/// Where a sample was drawn: substream tag, substream index and draw number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleOrigin {
    pub stream: u8,
    pub index: u64,
    pub draw: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskShard {
    pub client_id: usize,
    pub data: Dataset,
    pub origins: Vec<SampleOrigin>,
}

impl TaskShard {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn label_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &y in &self.data.labels {
            h[y] += 1;
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub teacher: BaseModel,
    pub shards: Vec<TaskShard>,
    pub test: Dataset,
    pub test_origins: Vec<SampleOrigin>,
}

impl SyntheticTask {
    pub fn num_classes(&self) -> usize {
        self.teacher.num_classes()
    }

    pub fn train_size(&self) -> usize {
        self.shards.iter().map(TaskShard::len).sum()
    }

    /// No test sample shares an origin with any training sample.
    pub fn train_test_disjoint(&self) -> bool {
        let train: HashSet<SampleOrigin> = self.shards.iter().flat_map(|s| s.origins.iter().copied()).collect();
        self.test_origins.iter().all(|o| !train.contains(o))
    }

    /// All shards merged into one dataset, in client-id order.
    pub fn pooled_train(&self) -> Result<Dataset> {
        let parts: Vec<&Dataset> = self.shards.iter().map(|s| &s.data).collect();
        Dataset::concat(&parts)
    }
}

const CALIBRATION_SAMPLES: usize = 4096;
const REJECTION_FACTOR: usize = 200;

fn draw_input(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Planted teacher: a random network whose output bias is shifted so every
/// class logit has zero mean over the input distribution.
pub fn build_teacher(seeds: &SeedTree, model: &ModelConfig) -> Result<BaseModel> {
    let mut rng = seeds.stream(Stream::Teacher, 0);
    let widths = model.widths();
    let teacher = BaseModel::random(&widths, model.activation, model.teacher_gain, &mut rng)?;
    let probe = Matrix::from_fn(CALIBRATION_SAMPLES, model.input_dim, |_, _| rng.sample(StandardNormal));
    let logits = teacher.forward(&probe)?;
    let means: Vec<f64> = logits
        .column_sums()
        .into_iter()
        .map(|s| s / CALIBRATION_SAMPLES as f64)
        .collect();
    let mut layers = teacher.layers().to_vec();
    let last = layers.last_mut().expect("non-empty");
    for (b, m) in last.bias.iter_mut().zip(means) {
        *b -= m;
    }
    BaseModel::new(layers, model.activation)
}

/// The frozen starting point: teacher weights plus seeded Gaussian noise.
pub fn pretrained_base(seeds: &SeedTree, teacher: &BaseModel, noise_std: f64) -> BaseModel {
    teacher.perturbed(noise_std, &mut seeds.stream(Stream::Pretrain, 0))
}

fn dirichlet(rng: &mut impl Rng, k: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("validated concentration");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Largest-remainder apportionment of `n` items by `proportions`; remainder
/// ties go to the lower class index.
pub fn apportion(n: usize, proportions: &[f64]) -> Vec<usize> {
    let ideal: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&i, &j| {
        let (ri, rj) = (ideal[i] - ideal[i].floor(), ideal[j] - ideal[j].floor());
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn label_of(teacher: &BaseModel, x: &[f64]) -> Result<usize> {
    let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(argmax(teacher.forward(&m)?.row(0)))
}

/// Draws one client's shard from its own substream, so the result depends
/// only on the master seed and the client id.
pub fn generate_shard(seeds: &SeedTree, teacher: &BaseModel, cfg: &TaskConfig, client_id: usize) -> Result<TaskShard> {
    let k = teacher.num_classes();
    let dim = teacher.input_dim();
    let n = cfg.samples_per_client;
    let mut rng = seeds.stream(Stream::ClientData, client_id as u64);
    let mut quota = apportion(n, &dirichlet(&mut rng, k, cfg.concentration));

    let mut feats = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut origins = Vec::with_capacity(n);
    let cap = (REJECTION_FACTOR * n) as u64;
    let mut draw = 0u64;
    while labels.len() < n {
        let x = draw_input(&mut rng, dim);
        let y = label_of(teacher, &x)?;
        // Past the cap, a class the teacher rarely emits cannot stall generation.
        let accept = quota[y] > 0 || draw >= cap;
        if accept {
            quota[y] = quota[y].saturating_sub(1);
            feats.extend_from_slice(&x);
            labels.push(y);
            origins.push(SampleOrigin {
                stream: Stream::ClientData as u8,
                index: client_id as u64,
                draw,
            });
        }
        draw += 1;
    }
    Ok(TaskShard {
        client_id,
        data: Dataset::new(Matrix::from_vec(n, dim, feats)?, labels)?,
        origins,
    })
}

/// Teacher-labelled held-out samples from the natural input distribution.
pub fn generate_test(seeds: &SeedTree, teacher: &BaseModel, count: usize) -> Result<(Dataset, Vec<SampleOrigin>)> {
    let dim = teacher.input_dim();
    let mut rng = seeds.stream(Stream::TestData, 0);
    let features = Matrix::from_fn(count, dim, |_, _| rng.sample(StandardNormal));
    let logits = teacher.forward(&features)?;
    let labels = (0..count).map(|i| argmax(logits.row(i))).collect();
    let origins = (0..count as u64)
        .map(|draw| SampleOrigin {
            stream: Stream::TestData as u8,
            index: 0,
            draw,
        })
        .collect();
    Ok((Dataset::new(features, labels)?, origins))
}

/// Teacher, per-client shards and test set for one seed.
pub fn generate_task(seeds: &SeedTree, cfg: &TaskConfig, model: &ModelConfig) -> Result<SyntheticTask> {
    cfg.validate()?;
    model.validate()?;
    let teacher = build_teacher(seeds, model)?;
    let shards = (0..cfg.num_clients)
        .map(|c| generate_shard(seeds, &teacher, cfg, c))
        .collect::<Result<Vec<_>>>()?;
    let (test, test_origins) = generate_test(seeds, &teacher, cfg.test_samples)?;
    Ok(SyntheticTask {
        teacher,
        shards,
        test,
        test_origins,
    })
}
