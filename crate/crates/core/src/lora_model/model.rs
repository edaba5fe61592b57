use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LoraError, Result};
use crate::numerics::{linear_backward, linear_forward, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One frozen linear layer. `weight` is `[out × in]`, acting on column vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl FrozenLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// The frozen base network. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    layers: Vec<FrozenLayer>,
    activation: Activation,
}

impl BaseModel {
    pub fn new(layers: Vec<FrozenLayer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(LoraError::Config("base model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(LoraError::Shape(format!(
                    "layer {i}: bias length {} != out dim {}",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(LoraError::Shape(format!(
                    "layer {i} out dim {} does not chain into layer {} in dim {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    /// Random network with weights `N(0, gain²/in)` and biases `N(0, 0.1²)`.
    pub fn random(widths: &[usize], activation: Activation, gain: f64, rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(LoraError::Config("need at least input and output widths".into()));
        }
        let bias_dist = Normal::new(0.0, 0.1).expect("valid std");
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let dist = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("valid std");
                FrozenLayer {
                    weight: Matrix::from_fn(fan_out, fan_in, |_, _| dist.sample(rng)),
                    bias: (0..fan_out).map(|_| bias_dist.sample(rng)).collect(),
                }
            })
            .collect();
        Self::new(layers, activation)
    }

    /// Copy with `N(0, noise_std²)` added to every weight entry.
    pub fn perturbed(&self, noise_std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, noise_std.max(0.0)).expect("valid std");
        let layers = self
            .layers
            .iter()
            .map(|l| FrozenLayer {
                weight: l.weight.map(|w| w + dist.sample(rng)),
                bias: l.bias.clone(),
            })
            .collect();
        Self {
            layers,
            activation: self.activation,
        }
    }

    pub fn layers(&self) -> &[FrozenLayer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// `(in, out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim(), l.out_dim())).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// SHA-256 over the bit patterns of every frozen parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for v in l.weight.data().iter().chain(&l.bias) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Plain forward pass without adapters.
    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        let last = self.layers.len() - 1;
        let mut x = input.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let z = linear_forward(&x, &l.weight.transpose(), &l.bias)?;
            x = if i == last { z } else { z.map(|v| self.activation.apply(v)) };
        }
        Ok(x)
    }
}

/// LoRA factors for one layer: effective delta is `(alpha / rank) · B·A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `[rank × in]`
    pub a: Matrix,
    /// `[out × rank]`
    pub b: Matrix,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn element_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `(alpha / rank) · B·A`, shape `[out × in]`.
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).expect("adapter factors conform").scale(self.scaling())
    }

    /// Zero-pads to `rank`: extra rows of A and extra columns of B are zero.
    /// Alpha is rescaled so the scaling factor, and hence the delta, is unchanged.
    pub fn padded(&self, rank: usize) -> LoraAdapter {
        assert!(rank >= self.rank());
        if rank == self.rank() {
            return self.clone();
        }
        LoraAdapter {
            a: self.a.padded(rank, self.in_dim()),
            b: self.b.padded(self.out_dim(), rank),
            alpha: self.scaling() * rank as f64,
        }
    }

    /// First `rank` rows of A and first `rank` columns of B.
    pub fn truncated(&self, rank: usize) -> LoraAdapter {
        assert!(rank <= self.rank() && rank >= 1);
        if rank == self.rank() {
            return self.clone();
        }
        LoraAdapter {
            a: self.a.truncated(rank, self.in_dim()),
            b: self.b.truncated(self.out_dim(), rank),
            alpha: self.scaling() * rank as f64,
        }
    }

    fn validate(&self, layer: usize) -> Result<()> {
        let r = self.rank();
        if r == 0 || self.b.cols() != r {
            return Err(LoraError::Shape(format!(
                "layer {layer}: A has {} rows but B has {} columns",
                r,
                self.b.cols()
            )));
        }
        if r > self.in_dim().min(self.out_dim()) {
            return Err(LoraError::Shape(format!(
                "layer {layer}: rank {r} exceeds min(in, out) = {}",
                self.in_dim().min(self.out_dim())
            )));
        }
        Ok(())
    }
}

/// Per-layer adapters, the unit of federated exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    layers: Vec<LoraAdapter>,
}

impl AdapterSet {
    pub fn new(layers: Vec<LoraAdapter>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            l.validate(i)?;
        }
        Ok(Self { layers })
    }

    /// Fresh adapters for every layer: `A ~ N(0, init_std²)`, `B = 0`.
    ///
    /// The requested rank is clamped per layer to `min(in, out)`; `alpha`
    /// defaults to the (clamped) rank, i.e. a scaling factor of 1.
    pub fn init(
        dims: &[(usize, usize)],
        rank: usize,
        alpha: Option<f64>,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(LoraError::Config("LoRA rank must be at least 1".into()));
        }
        let dist = Normal::new(0.0, init_std).map_err(|e| LoraError::Config(e.to_string()))?;
        let layers = dims
            .iter()
            .map(|&(fan_in, fan_out)| {
                let r = effective_rank(rank, fan_in, fan_out);
                LoraAdapter {
                    a: Matrix::from_fn(r, fan_in, |_, _| dist.sample(rng)),
                    b: Matrix::zeros(fan_out, r),
                    alpha: alpha.map_or(r as f64, |a| a * r as f64 / rank as f64),
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LoraAdapter] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.rank()).collect()
    }

    pub fn element_count(&self) -> usize {
        self.layers.iter().map(|l| l.element_count()).sum()
    }

    /// Layers `[0, at)` and `[at, len)`.
    pub fn split_at(&self, at: usize) -> (AdapterSet, AdapterSet) {
        let (a, b) = self.layers.split_at(at);
        (AdapterSet { layers: a.to_vec() }, AdapterSet { layers: b.to_vec() })
    }

    pub fn concat(front: &AdapterSet, back: &AdapterSet) -> AdapterSet {
        AdapterSet {
            layers: front.layers.iter().chain(&back.layers).cloned().collect(),
        }
    }

    /// Pads every layer to `min(rank, in, out)`.
    pub fn padded(&self, rank: usize) -> AdapterSet {
        AdapterSet {
            layers: self
                .layers
                .iter()
                .map(|l| l.padded(effective_rank(rank, l.in_dim(), l.out_dim()).max(l.rank())))
                .collect(),
        }
    }

    /// Truncates every layer to `min(rank, in, out)`.
    pub fn truncated(&self, rank: usize) -> AdapterSet {
        AdapterSet {
            layers: self
                .layers
                .iter()
                .map(|l| l.truncated(effective_rank(rank, l.in_dim(), l.out_dim()).min(l.rank())))
                .collect(),
        }
    }

    pub fn check_against(&self, frozen: &[FrozenLayer]) -> Result<()> {
        if self.layers.len() != frozen.len() {
            return Err(LoraError::Shape(format!(
                "{} adapters for {} layers",
                self.layers.len(),
                frozen.len()
            )));
        }
        for (i, (a, f)) in self.layers.iter().zip(frozen).enumerate() {
            if a.in_dim() != f.in_dim() || a.out_dim() != f.out_dim() {
                return Err(LoraError::Shape(format!(
                    "layer {i}: adapter is {}x{}, layer is {}x{}",
                    a.out_dim(),
                    a.in_dim(),
                    f.out_dim(),
                    f.in_dim()
                )));
            }
        }
        Ok(())
    }

    /// True when every factor has the same shape as in `other`.
    pub fn same_shape(&self, other: &AdapterSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(x, y)| x.a.shape() == y.a.shape() && x.b.shape() == y.b.shape())
    }
}

/// Rank actually used on a layer of the given shape.
pub fn effective_rank(rank: usize, in_dim: usize, out_dim: usize) -> usize {
    rank.min(in_dim).min(out_dim)
}

/// Gradients for one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub a: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    projected: Matrix,
    output: Matrix,
    activated: bool,
}

/// Saved intermediates of [`forward_stack`].
#[derive(Debug, Clone)]
pub struct StackCache {
    layers: Vec<LayerCache>,
}

/// Forward through consecutive layers, each computing
/// `act(x·Wᵀ + bias + s·(x·Aᵀ)·Bᵀ)`. The activation is skipped on the last
/// layer of the stack unless `activate_last` is set.
pub fn forward_stack(
    frozen: &[FrozenLayer],
    adapters: &[LoraAdapter],
    activation: Activation,
    activate_last: bool,
    input: &Matrix,
) -> Result<(Matrix, StackCache)> {
    if frozen.len() != adapters.len() {
        return Err(LoraError::Shape(format!(
            "{} adapters for {} layers",
            adapters.len(),
            frozen.len()
        )));
    }
    let mut caches = Vec::with_capacity(frozen.len());
    let mut x = input.clone();
    for (i, (layer, adapter)) in frozen.iter().zip(adapters).enumerate() {
        let activated = activate_last || i + 1 < frozen.len();
        let base = linear_forward(&x, &layer.weight.transpose(), &layer.bias)?;
        let projected = x.matmul(&adapter.a.transpose())?;
        let lora = projected.matmul(&adapter.b.transpose())?;
        let mut z = base;
        z.add_scaled(&lora, adapter.scaling())?;
        let output = if activated { z.map(|v| activation.apply(v)) } else { z };
        caches.push(LayerCache {
            input: x,
            projected,
            output: output.clone(),
            activated,
        });
        x = output;
    }
    Ok((x, StackCache { layers: caches }))
}

/// Backward through a stack produced by [`forward_stack`]. Returns adapter
/// gradients (one per layer) and the gradient w.r.t. the stack input. Frozen
/// weights receive no gradient.
pub fn backward_stack(
    frozen: &[FrozenLayer],
    adapters: &[LoraAdapter],
    activation: Activation,
    cache: &StackCache,
    grad_output: &Matrix,
) -> Result<(Vec<AdapterGrad>, Matrix)> {
    let mut grads = Vec::with_capacity(frozen.len());
    let mut g = grad_output.clone();
    for ((layer, adapter), c) in frozen.iter().zip(adapters).zip(&cache.layers).rev() {
        let gz = if c.activated {
            let mut gz = g.clone();
            for (v, &y) in gz.data_mut().iter_mut().zip(c.output.data()) {
                *v *= activation.derivative_from_output(y);
            }
            gz
        } else {
            g
        };
        let s = adapter.scaling();
        let main = linear_backward(&c.input, &layer.weight.transpose(), &gz)?;
        let g_lora = gz.scale(s);
        let up = linear_backward(&c.projected, &adapter.b.transpose(), &g_lora)?;
        let down = linear_backward(&c.input, &adapter.a.transpose(), &up.input)?;
        grads.push(AdapterGrad {
            a: down.weight.transpose(),
            b: up.weight.transpose(),
        });
        let mut gi = main.input;
        gi.add_scaled(&down.input, 1.0)?;
        g = gi;
    }
    grads.reverse();
    Ok((grads, g))
}

/// Logits of the adapted model.
pub fn forward_with_adapters(base: &BaseModel, adapters: &AdapterSet, input: &Matrix) -> Result<Matrix> {
    adapters.check_against(base.layers())?;
    Ok(forward_stack(base.layers(), adapters.layers(), base.activation(), false, input)?.0)
}

/// The base model with every adapter folded in: `W + (alpha/r)·B·A`.
pub fn materialize(base: &BaseModel, adapters: &AdapterSet) -> Result<BaseModel> {
    adapters.check_against(base.layers())?;
    let layers = base
        .layers()
        .iter()
        .zip(adapters.layers())
        .map(|(l, a)| FrozenLayer {
            weight: l.weight.add(&a.delta()).expect("shapes checked"),
            bias: l.bias.clone(),
        })
        .collect();
    BaseModel::new(layers, base.activation())
}
