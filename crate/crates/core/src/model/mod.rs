//! The multi-exit network.
//!
//! A stack of `L` dense blocks; after every block an internal classifier head
//! (one hidden layer MLP + softmax) reads that block's hidden state. Head `i`
//! never sees blocks deeper than `i`, so evaluating a prefix of the stack is
//! enough to get the first `l` distributions.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{self, Distribution};

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation and the activation output.
    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!(
                "unknown activation `{other}` (expected relu or tanh)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    pub head_hidden_dim: usize,
    pub activation: Activation,
    /// Adds `h_{i-1}` to the output of blocks `i >= 2`.
    pub residual: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Config with the default head width (`hidden_dim`), ReLU, no residual
    /// skips and seed 42.
    pub fn new(input_dim: usize, hidden_dim: usize, num_layers: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dim,
            num_layers,
            num_classes,
            head_hidden_dim: hidden_dim,
            activation: Activation::Relu,
            residual: false,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.head_hidden_dim == 0 {
            return Err(Error::Config("all model dimensions must be at least 1".into()));
        }
        if self.num_layers < 2 {
            return Err(Error::Config(format!(
                "a multi-exit model needs at least 2 layers, got {}",
                self.num_layers
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Affine map `y = W x + b`; `weights` is `out_dim x in_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn glorot(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Dense {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }

    /// Accumulates `dW += dy x^T`, `db += dy` into `grad` and returns `W^T dy`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad.bias[o] += d;
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += d * x[i];
                dx[i] += d * row[i];
            }
        }
        dx
    }
}

/// Internal classifier: affine -> activation -> affine -> softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hidden: Dense,
    pub output: Dense,
}

/// All learnable parameters. Gradients and optimizer moments use the same
/// shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub blocks: Vec<Dense>,
    pub heads: Vec<Head>,
}

impl Params {
    fn zeros(config: &ModelConfig) -> Self {
        let blocks = (0..config.num_layers)
            .map(|i| {
                let fan_in = if i == 0 { config.input_dim } else { config.hidden_dim };
                Dense::zeros(fan_in, config.hidden_dim)
            })
            .collect();
        let heads = (0..config.num_layers)
            .map(|_| Head {
                hidden: Dense::zeros(config.hidden_dim, config.head_hidden_dim),
                output: Dense::zeros(config.head_hidden_dim, config.num_classes),
            })
            .collect();
        Params { blocks, heads }
    }

    pub fn zeros_like(&self) -> Self {
        let zero = |d: &Dense| Dense::zeros(d.in_dim, d.out_dim);
        Params {
            blocks: self.blocks.iter().map(zero).collect(),
            heads: self
                .heads
                .iter()
                .map(|h| Head {
                    hidden: zero(&h.hidden),
                    output: zero(&h.output),
                })
                .collect(),
        }
    }

    fn denses(&self) -> impl Iterator<Item = &Dense> {
        self.blocks
            .iter()
            .zip(&self.heads)
            .flat_map(|(b, h)| [b, &h.hidden, &h.output])
    }

    fn denses_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.blocks
            .iter_mut()
            .zip(self.heads.iter_mut())
            .flat_map(|(b, h)| [b, &mut h.hidden, &mut h.output])
    }

    /// Parameter groups in checkpoint order: for each layer, block weights and
    /// bias, then head hidden weights and bias, then head output weights and
    /// bias.
    pub fn groups(&self) -> Vec<(String, &[f64])> {
        const PARTS: [&str; 3] = ["block", "head_hidden", "head_output"];
        self.denses()
            .enumerate()
            .flat_map(|(n, d)| {
                let layer = n / 3 + 1;
                let part = PARTS[n % 3];
                [
                    (format!("{part}{layer}.weight"), d.weights.as_slice()),
                    (format!("{part}{layer}.bias"), d.bias.as_slice()),
                ]
            })
            .collect()
    }

    pub fn groups_mut(&mut self) -> Vec<&mut [f64]> {
        self.denses_mut()
            .flat_map(|d| [d.weights.as_mut_slice(), d.bias.as_mut_slice()])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.denses().map(|d| d.weights.len() + d.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.groups().into_iter().flat_map(|(_, g)| g.iter().copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|x| x.is_finite()))
    }

    fn same_shape(&self, other: &Params) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.heads.len() == other.heads.len()
            && self.denses().zip(other.denses()).all(|(a, b)| {
                a.in_dim == b.in_dim
                    && a.out_dim == b.out_dim
                    && a.weights.len() == b.weights.len()
                    && a.bias.len() == b.bias.len()
            })
    }
}

/// Per-sample record of every head's output plus the gold label.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub sample_id: usize,
    pub gold: usize,
    pub dists: Vec<Distribution>,
}

impl LayerTrace {
    pub fn new(sample_id: usize, gold: usize, dists: Vec<Distribution>) -> Result<Self> {
        let Some(first) = dists.first() else {
            return Err(Error::InvalidInput("trace has no layers".into()));
        };
        let c = first.num_classes();
        if dists.iter().any(|d| d.num_classes() != c) {
            return Err(Error::InvalidInput("trace layers disagree on class count".into()));
        }
        if gold >= c {
            return Err(Error::InvalidInput(format!(
                "gold label {gold} out of range for C = {c}"
            )));
        }
        Ok(LayerTrace {
            sample_id,
            gold,
            dists,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.dists.len()
    }

    pub fn num_classes(&self) -> usize {
        self.dists[0].num_classes()
    }

    /// Argmax class of each head, shallow to deep.
    pub fn predictions(&self) -> Vec<usize> {
        self.dists.iter().map(math::argmax_class).collect()
    }
}

/// Activations recorded by [`MultiExitModel::forward`], consumed by
/// [`MultiExitModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    model_id: u64,
    input: Vec<f64>,
    block_pre: Vec<Vec<f64>>,
    /// Post-activation (and post-skip) hidden states `h_1..h_l`.
    hidden: Vec<Vec<f64>>,
    /// Activation output of each block before the residual add.
    block_act: Vec<Vec<f64>>,
    head_pre: Vec<Vec<f64>>,
    head_act: Vec<Vec<f64>>,
    dists: Vec<Distribution>,
}

impl ForwardCache {
    pub fn dists(&self) -> &[Distribution] {
        &self.dists
    }
}

#[derive(Debug, Clone)]
pub struct MultiExitModel {
    config: ModelConfig,
    params: Params,
    id: u64,
}

impl PartialEq for MultiExitModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl MultiExitModel {
    /// Glorot-uniform weights, zero biases, drawn from a ChaCha8 stream
    /// seeded with `config.seed` in checkpoint order.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Params::zeros(&config);
        for dense in params.denses_mut() {
            *dense = Dense::glorot(dense.in_dim, dense.out_dim, &mut rng);
        }
        Ok(MultiExitModel {
            config,
            params,
            id: fresh_id(),
        })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        if !Params::zeros(&config).same_shape(&params) {
            return Err(Error::InvalidInput("parameter shapes do not match config".into()));
        }
        if !params.all_finite() {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        Ok(MultiExitModel {
            config,
            params,
            id: fresh_id(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut Params {
        self.id = fresh_id();
        &mut self.params
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.config.input_dim {
            return Err(Error::InvalidInput(format!(
                "expected {} features, got {}",
                self.config.input_dim,
                features.len()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature".into()));
        }
        Ok(())
    }

    fn block_step(&self, layer: usize, prev: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let act = self.config.activation;
        let pre = self.params.blocks[layer].forward(prev);
        let post: Vec<f64> = pre.iter().map(|&z| act.apply(z)).collect();
        let hidden = if self.config.residual && layer > 0 {
            post.iter().zip(prev).map(|(a, b)| a + b).collect()
        } else {
            post.clone()
        };
        (pre, post, hidden)
    }

    fn head_step(&self, layer: usize, hidden: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Distribution)> {
        let act = self.config.activation;
        let head = &self.params.heads[layer];
        let pre = head.hidden.forward(hidden);
        let post: Vec<f64> = pre.iter().map(|&z| act.apply(z)).collect();
        let dist = math::softmax(&head.output.forward(&post))?;
        Ok((pre, post, dist))
    }

    fn run(&self, features: &[f64], layers: usize) -> Result<ForwardCache> {
        self.check_features(features)?;
        let mut cache = ForwardCache {
            model_id: self.id,
            input: features.to_vec(),
            block_pre: Vec::with_capacity(layers),
            hidden: Vec::with_capacity(layers),
            block_act: Vec::with_capacity(layers),
            head_pre: Vec::with_capacity(layers),
            head_act: Vec::with_capacity(layers),
            dists: Vec::with_capacity(layers),
        };
        for layer in 0..layers {
            let prev = cache.hidden.last().unwrap_or(&cache.input);
            let (pre, post, hidden) = self.block_step(layer, prev);
            let (hpre, hpost, dist) = self.head_step(layer, &hidden)?;
            cache.block_pre.push(pre);
            cache.block_act.push(post);
            cache.hidden.push(hidden);
            cache.head_pre.push(hpre);
            cache.head_act.push(hpost);
            cache.dists.push(dist);
        }
        Ok(cache)
    }

    /// Full forward pass over all `L` layers.
    pub fn forward(&self, features: &[f64]) -> Result<ForwardCache> {
        self.run(features, self.config.num_layers)
    }

    /// Head outputs of the first `layers` layers only; deeper blocks are never
    /// evaluated.
    pub fn forward_prefix(&self, features: &[f64], layers: usize) -> Result<Vec<Distribution>> {
        if layers == 0 || layers > self.config.num_layers {
            return Err(Error::InvalidInput(format!(
                "prefix length {layers} outside 1..={}",
                self.config.num_layers
            )));
        }
        Ok(self.run(features, layers)?.dists)
    }

    pub fn trace(&self, sample_id: usize, gold: usize, features: &[f64]) -> Result<LayerTrace> {
        LayerTrace::new(sample_id, gold, self.forward(features)?.dists)
    }

    /// Layer-by-layer evaluation for early-exit inference.
    pub fn stepper<'a>(&'a self, features: &[f64]) -> Result<LayerStepper<'a>> {
        self.check_features(features)?;
        Ok(LayerStepper {
            model: self,
            state: features.to_vec(),
            next_layer: 0,
        })
    }

    /// Reverse-mode gradients of a loss whose derivative with respect to each
    /// head's output distribution is `dist_grads[i]`.
    pub fn backward(&self, cache: &ForwardCache, dist_grads: &[Vec<f64>]) -> Result<Params> {
        if cache.model_id != self.id {
            return Err(Error::Contract(
                "forward cache was produced by a different or since-modified model".into(),
            ));
        }
        let layers = cache.dists.len();
        if dist_grads.len() != layers {
            return Err(Error::Contract(format!(
                "{} head gradients for a cache of {layers} layers",
                dist_grads.len()
            )));
        }
        let c = self.config.num_classes;
        if let Some(g) = dist_grads.iter().find(|g| g.len() != c) {
            return Err(Error::Contract(format!(
                "head gradient of length {} for {c} classes",
                g.len()
            )));
        }

        let act = self.config.activation;
        let mut grads = self.params.zeros_like();
        let mut dhidden: Vec<Vec<f64>> = vec![vec![0.0; self.config.hidden_dim]; layers];

        for layer in 0..layers {
            let g = &dist_grads[layer];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            // softmax Jacobian: dz = q * (g - <q, g>)
            let q = cache.dists[layer].probs();
            let dot: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
            let dlogits: Vec<f64> = q.iter().zip(g).map(|(qi, gi)| qi * gi - qi * dot).collect();

            let head = &self.params.heads[layer];
            let ghead = &mut grads.heads[layer];
            let da = head.output.backward(&cache.head_act[layer], &dlogits, &mut ghead.output);
            let dpre: Vec<f64> = da
                .iter()
                .zip(&cache.head_pre[layer])
                .zip(&cache.head_act[layer])
                .map(|((d, &pre), &post)| d * act.derivative(pre, post))
                .collect();
            let dh = head.hidden.backward(&cache.hidden[layer], &dpre, &mut ghead.hidden);
            for (acc, d) in dhidden[layer].iter_mut().zip(dh) {
                *acc += d;
            }
        }

        for layer in (0..layers).rev() {
            let dh = std::mem::take(&mut dhidden[layer]);
            let dpre: Vec<f64> = dh
                .iter()
                .zip(&cache.block_pre[layer])
                .zip(&cache.block_act[layer])
                .map(|((d, &pre), &post)| d * act.derivative(pre, post))
                .collect();
            let input = if layer == 0 {
                &cache.input
            } else {
                &cache.hidden[layer - 1]
            };
            let dprev = self.params.blocks[layer].backward(input, &dpre, &mut grads.blocks[layer]);
            if layer > 0 {
                let target = &mut dhidden[layer - 1];
                for (acc, d) in target.iter_mut().zip(dprev) {
                    *acc += d;
                }
                if self.config.residual {
                    for (acc, d) in target.iter_mut().zip(&dh) {
                        *acc += d;
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Evaluates one block + head at a time so a caller can stop early.
pub struct LayerStepper<'a> {
    model: &'a MultiExitModel,
    state: Vec<f64>,
    next_layer: usize,
}

impl LayerStepper<'_> {
    /// Number of blocks evaluated so far.
    pub fn layers_done(&self) -> usize {
        self.next_layer
    }

    pub fn next_dist(&mut self) -> Result<Option<Distribution>> {
        if self.next_layer >= self.model.config.num_layers {
            return Ok(None);
        }
        let (_, _, hidden) = self.model.block_step(self.next_layer, &self.state);
        let (_, _, dist) = self.model.head_step(self.next_layer, &hidden)?;
        self.state = hidden;
        self.next_layer += 1;
        Ok(Some(dist))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            seed,
            ..ModelConfig::new(3, 4, 3, 3)
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = MultiExitModel::init(small_config(1)).unwrap();
        let b = MultiExitModel::init(small_config(1)).unwrap();
        let c = MultiExitModel::init(small_config(2)).unwrap();
        assert_eq!(a.params().to_flat(), b.params().to_flat());
        assert_ne!(a.params().to_flat(), c.params().to_flat());
    }

    #[test]
    fn init_respects_glorot_bounds_and_zero_bias() {
        let m = MultiExitModel::init(small_config(9)).unwrap();
        for d in m.params().denses() {
            let limit = (6.0 / (d.in_dim + d.out_dim) as f64).sqrt();
            assert!(d.weights.iter().all(|w| w.abs() <= limit));
            assert!(d.bias.iter().all(|b| *b == 0.0));
        }
    }

    #[test]
    fn config_shape_contract() {
        let m = MultiExitModel::init(ModelConfig::new(2, 5, 2, 2)).unwrap();
        assert_eq!(m.params().heads.len(), 2);
        assert_eq!(m.params().blocks[0].in_dim, 2);
        assert_eq!(m.params().heads[1].output.out_dim, 2);
        assert!(MultiExitModel::init(ModelConfig::new(2, 5, 1, 2)).is_err());
        assert!(MultiExitModel::init(ModelConfig::new(2, 5, 3, 1)).is_err());
        assert!(MultiExitModel::init(ModelConfig::new(0, 5, 3, 2)).is_err());
    }

    #[test]
    fn zero_params_give_uniform_heads() {
        let mut m = MultiExitModel::init(small_config(3)).unwrap();
        for g in m.params_mut().groups_mut() {
            g.fill(0.0);
        }
        let cache = m.forward(&[0.3, -1.0, 2.0]).unwrap();
        for d in cache.dists() {
            for p in d.probs() {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_features() {
        let m = MultiExitModel::init(small_config(3)).unwrap();
        assert!(m.forward(&[0.0, 1.0]).is_err());
        assert!(m.forward(&[0.0, f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn prefix_matches_full_forward_bitwise() {
        let m = MultiExitModel::init(small_config(5)).unwrap();
        let x = [0.5, -0.25, 1.5];
        let full = m.forward(&x).unwrap();
        for l in 1..=3 {
            let prefix = m.forward_prefix(&x, l).unwrap();
            assert_eq!(prefix.len(), l);
            assert_eq!(&prefix[..], &full.dists()[..l]);
        }
        assert!(m.forward_prefix(&x, 0).is_err());
        assert!(m.forward_prefix(&x, 4).is_err());
    }

    #[test]
    fn stepper_matches_forward() {
        let m = MultiExitModel::init(small_config(6)).unwrap();
        let x = [1.0, 2.0, -3.0];
        let full = m.forward(&x).unwrap();
        let mut stepper = m.stepper(&x).unwrap();
        let mut seen = Vec::new();
        while let Some(d) = stepper.next_dist().unwrap() {
            seen.push(d);
        }
        assert_eq!(stepper.layers_done(), 3);
        assert_eq!(&seen[..], full.dists());
    }

    #[test]
    fn head_locality() {
        let m = MultiExitModel::init(small_config(7)).unwrap();
        let x = [0.1, 0.2, 0.3];
        let before = m.forward(&x).unwrap();
        let mut perturbed = m.clone();
        for w in perturbed.params_mut().blocks[2].weights.iter_mut() {
            *w += 0.5;
        }
        let after = perturbed.forward(&x).unwrap();
        assert_eq!(before.dists()[..2], after.dists()[..2]);
        assert_ne!(before.dists()[2], after.dists()[2]);
    }

    #[test]
    fn zero_output_grads_give_zero_param_grads() {
        let m = MultiExitModel::init(small_config(8)).unwrap();
        let cache = m.forward(&[1.0, 0.0, -1.0]).unwrap();
        let grads = m.backward(&cache, &vec![vec![0.0; 3]; 3]).unwrap();
        assert!(grads.to_flat().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn shallow_head_gradient_does_not_reach_deeper_blocks() {
        let m = MultiExitModel::init(small_config(10)).unwrap();
        let cache = m.forward(&[1.0, 0.5, -1.0]).unwrap();
        let mut g = vec![vec![0.0; 3]; 3];
        g[0] = vec![-1.0, 0.3, 0.2];
        let grads = m.backward(&cache, &g).unwrap();
        assert!(grads.blocks[2].weights.iter().all(|x| *x == 0.0));
        assert!(grads.blocks[1].weights.iter().all(|x| *x == 0.0));
        assert!(grads.blocks[0].weights.iter().any(|x| *x != 0.0));
        assert!(grads.heads[2].output.weights.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = MultiExitModel::init(small_config(11)).unwrap();
        let cache = m.forward(&[1.0, 0.5, -1.0]).unwrap();
        m.params_mut().blocks[0].bias[0] = 0.1;
        let err = m.backward(&cache, &vec![vec![0.0; 3]; 3]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));

        let other = MultiExitModel::init(small_config(11)).unwrap();
        let cache = other.forward(&[1.0, 0.5, -1.0]).unwrap();
        assert!(matches!(
            m.backward(&cache, &vec![vec![0.0; 3]; 3]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            other.backward(&cache, &vec![vec![0.0; 3]; 2]),
            Err(Error::Contract(_))
        ));
    }

    /// Central-difference check of `sum_i <w_i, x_i>` for fixed random
    /// weights `w_i`, which exercises every path through the network.
    fn check_linear_functional(config: ModelConfig) {
        let model = MultiExitModel::init(config.clone()).unwrap();
        let x: Vec<f64> = (0..config.input_dim).map(|i| 0.7 - 0.45 * i as f64).collect();
        let weights: Vec<Vec<f64>> = (0..config.num_layers)
            .map(|l| (0..config.num_classes).map(|c| ((l * 7 + c * 3) % 5) as f64 - 2.0).collect())
            .collect();
        let value = |m: &MultiExitModel| -> f64 {
            m.forward(&x)
                .unwrap()
                .dists()
                .iter()
                .zip(&weights)
                .map(|(d, w)| d.probs().iter().zip(w).map(|(p, wi)| p * wi).sum::<f64>())
                .sum()
        };
        let cache = model.forward(&x).unwrap();
        let analytic = model.backward(&cache, &weights).unwrap().to_flat();
        let h = 1e-5;
        let mut idx = 0;
        let mut probe = model.clone();
        for g in 0..model.params().groups().len() {
            let glen = model.params().groups()[g].1.len();
            for k in 0..glen {
                let orig = probe.params().groups()[g].1[k];
                probe.params_mut().groups_mut()[g][k] = orig + h;
                let up = value(&probe);
                probe.params_mut().groups_mut()[g][k] = orig - h;
                let down = value(&probe);
                probe.params_mut().groups_mut()[g][k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let err = (analytic[idx] - numeric).abs() / numeric.abs().max(1e-8);
                assert!(
                    err <= 1e-4 || (analytic[idx] - numeric).abs() < 1e-9,
                    "param {idx}: analytic {} numeric {numeric}",
                    analytic[idx]
                );
                idx += 1;
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_tanh() {
        check_linear_functional(ModelConfig {
            activation: Activation::Tanh,
            ..small_config(12)
        });
    }

    #[test]
    fn backward_matches_finite_differences_residual() {
        check_linear_functional(ModelConfig {
            activation: Activation::Tanh,
            residual: true,
            head_hidden_dim: 5,
            ..small_config(13)
        });
    }

    #[test]
    fn backward_matches_finite_differences_relu() {
        check_linear_functional(small_config(14));
    }
}
