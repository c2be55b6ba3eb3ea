//! Training objective for multi-exit models.
//!
//! The per-sample loss is
//!
//! ```text
//! L = sum_{i=1..L} alpha_i CE(x_i, y) - sum_{i=2..L} beta_i min_{j<i} CE(x_i, x_j)
//! ```
//!
//! The first sum (relevancy) fits every head to the label. The second
//! (diversity) pushes each head away from whichever earlier head it is
//! currently closest to. With default weights `alpha_i = 1`, `beta_i = lambda`.

mod train;

pub use train::{train, TrainOptions, TrainReport};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::math::{self, clamped_ln, clamped_ln_grad, Distribution};
use crate::model::LayerTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaScheme {
    /// `alpha_i = 1`
    Uniform,
    /// `alpha_i = i`
    Linear,
}

impl fmt::Display for AlphaScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlphaScheme::Uniform => "uniform",
            AlphaScheme::Linear => "linear",
        })
    }
}

impl FromStr for AlphaScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(AlphaScheme::Uniform),
            "linear" => Ok(AlphaScheme::Linear),
            other => Err(Error::Config(format!(
                "unknown alpha scheme `{other}` (expected uniform or linear)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    /// Relevancy weight per layer, `alpha[i]` for layer `i + 1`.
    pub alpha: Vec<f64>,
    /// Diversity weight per layer, `beta[i]` for layer `i + 1`. `beta[0]` is
    /// never used since the first head has no predecessor.
    pub beta: Vec<f64>,
    /// Drops the diversity term of the deepest head.
    pub zero_last_beta: bool,
    /// Restricts the closest-head search to the immediately preceding head.
    pub adjacent_only: bool,
    /// Also back-propagate through the selected earlier head. Off by default:
    /// the earlier head acts as a fixed teacher.
    pub target_gradient: bool,
}

impl ObjectiveConfig {
    pub fn new(lambda: f64, num_layers: usize, scheme: AlphaScheme) -> Result<Self> {
        let alpha = (1..=num_layers)
            .map(|i| match scheme {
                AlphaScheme::Uniform => 1.0,
                AlphaScheme::Linear => i as f64,
            })
            .collect();
        let config = ObjectiveConfig {
            lambda,
            alpha,
            beta: vec![lambda; num_layers],
            zero_last_beta: false,
            adjacent_only: false,
            target_gradient: false,
        };
        config.validate(num_layers)?;
        Ok(config)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if num_layers < 2 {
            return Err(Error::Config(
                "the diversity term needs at least 2 layers".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda = {} is outside [0, 1); we suggest lambda in (0, 1), with 0 as the relevancy-only baseline",
                self.lambda
            )));
        }
        if self.alpha.len() != num_layers || self.beta.len() != num_layers {
            return Err(Error::Config(format!(
                "need {num_layers} alpha and beta weights, got {} and {}",
                self.alpha.len(),
                self.beta.len()
            )));
        }
        if self
            .alpha
            .iter()
            .chain(&self.beta)
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Diversity weight actually applied to 0-based layer `index`.
    pub fn effective_beta(&self, index: usize) -> f64 {
        if index == 0 || (self.zero_last_beta && index + 1 == self.beta.len()) {
            0.0
        } else {
            self.beta[index]
        }
    }

    fn effective_betas(&self) -> Vec<f64> {
        (0..self.beta.len()).map(|i| self.effective_beta(i)).collect()
    }
}

/// `sum_i alpha_i CE(x_i, onehot(gold))`.
pub fn relevancy_loss(trace: &LayerTrace, alpha: &[f64]) -> f64 {
    trace
        .dists
        .iter()
        .zip(alpha)
        .map(|(d, a)| -a * clamped_ln(d.probs()[trace.gold]))
        .sum()
}

/// Value of the diversity term together with the earlier head chosen for
/// every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversityTerm {
    pub value: f64,
    /// `argmin_layer[k]` is the 1-based layer closest to layer `k + 2`.
    pub argmin_layer: Vec<usize>,
    /// `min_ce[k]` is `CE(x_{k+2}, x_{argmin})`.
    pub min_ce: Vec<f64>,
}

/// For each layer `i >= 2`, the earlier head `j` minimizing `CE(x_i, x_j)`
/// (smallest `j` on ties) and that minimum.
fn closest_previous(trace: &LayerTrace, adjacent_only: bool) -> (Vec<usize>, Vec<f64>) {
    let dists = &trace.dists;
    (1..dists.len())
        .map(|i| {
            let q = dists[i].probs();
            let candidates = if adjacent_only { i - 1..i } else { 0..i };
            let mut best = (candidates.start, f64::INFINITY);
            for j in candidates {
                let ce = math::cross_entropy_raw(q, dists[j].probs());
                if ce < best.1 {
                    best = (j, ce);
                }
            }
            (best.0 + 1, best.1)
        })
        .unzip()
}

/// `-sum_{i>=2} beta_i min_{j<i} CE(x_i, x_j)`; `beta` is indexed like
/// [`ObjectiveConfig::beta`].
pub fn diversity_loss(trace: &LayerTrace, beta: &[f64], adjacent_only: bool) -> DiversityTerm {
    let (argmin_layer, min_ce) = closest_previous(trace, adjacent_only);
    let weighted: f64 = min_ce
        .iter()
        .enumerate()
        .map(|(k, ce)| beta[k + 1] * ce)
        .sum();
    DiversityTerm {
        value: -weighted,
        argmin_layer,
        min_ce,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub relevancy: f64,
    pub diversity: f64,
    pub argmin_layer: Vec<usize>,
    /// Derivative of `value` with respect to each head's probabilities.
    pub dist_grads: Vec<Vec<f64>>,
}

/// Relevancy plus diversity, with per-head gradients.
pub fn combined_loss(trace: &LayerTrace, config: &ObjectiveConfig) -> Result<CombinedLoss> {
    let layers = trace.num_layers();
    config.validate(layers)?;
    let betas = config.effective_betas();
    let relevancy = relevancy_loss(trace, &config.alpha);
    let div = diversity_loss(trace, &betas, config.adjacent_only);

    let c = trace.num_classes();
    let mut dist_grads = vec![vec![0.0; c]; layers];
    for (i, grad) in dist_grads.iter_mut().enumerate() {
        let qc = trace.dists[i].probs()[trace.gold];
        grad[trace.gold] -= config.alpha[i] * clamped_ln_grad(qc);
    }
    for (k, &chosen) in div.argmin_layer.iter().enumerate() {
        let i = k + 1;
        let j = chosen - 1;
        let beta = betas[i];
        if beta == 0.0 {
            continue;
        }
        let q = trace.dists[i].probs();
        let p = trace.dists[j].probs();
        for class in 0..c {
            dist_grads[i][class] += beta * p[class] * clamped_ln_grad(q[class]);
        }
        if config.target_gradient {
            for class in 0..c {
                dist_grads[j][class] += beta * clamped_ln(q[class]);
            }
        }
    }

    Ok(CombinedLoss {
        value: relevancy + div.value,
        relevancy,
        diversity: div.value,
        argmin_layer: div.argmin_layer,
        dist_grads,
    })
}

/// Loss at one layer with uniform weights: `CE(q, y) - lambda CE(q, p)`,
/// `p` being the selected earlier head.
pub fn layer_loss(q: &Distribution, p: &Distribution, gold: usize, lambda: f64) -> Result<f64> {
    let target = Distribution::one_hot(gold, q.num_classes())?;
    Ok(math::cross_entropy(q, &target)? - lambda * math::cross_entropy(q, p)?)
}

/// Binary soft target `p'`: `1 - lambda p_c` on the gold class,
/// `lambda p_c` on the other.
pub fn binary_soft_target(p: &Distribution, gold: usize, lambda: f64) -> Result<Distribution> {
    if p.num_classes() != 2 || gold > 1 {
        return Err(Error::InvalidInput("binary soft target needs C = 2".into()));
    }
    let a = lambda * p.probs()[gold];
    let mut probs = vec![a; 2];
    probs[gold] = 1.0 - a;
    Distribution::new(probs)
}

/// Binary rewrite of [`layer_loss`] as a distillation term against the soft
/// target plus `lambda ln(1 - q_c)`.
pub fn binary_decomposition(q: &Distribution, p: &Distribution, gold: usize, lambda: f64) -> Result<f64> {
    let soft = binary_soft_target(p, gold, lambda)?;
    Ok(math::cross_entropy(q, &soft)? + lambda * clamped_ln(1.0 - q.probs()[gold]))
}

/// Multi-class rewrite of [`layer_loss`]:
/// `(lambda p_c - 1) ln q_c + lambda sum_{i != c} p_i ln q_i`.
pub fn multiclass_decomposition(q: &Distribution, p: &Distribution, gold: usize, lambda: f64) -> Result<f64> {
    if q.num_classes() != p.num_classes() || gold >= q.num_classes() {
        return Err(Error::InvalidInput("mismatched distributions or gold class".into()));
    }
    let (qs, ps) = (q.probs(), p.probs());
    let gold_term = (lambda * ps[gold] - 1.0) * clamped_ln(qs[gold]);
    let rest: f64 = (0..qs.len())
        .filter(|&i| i != gold)
        .map(|i| ps[i] * clamped_ln(qs[i]))
        .sum();
    Ok(gold_term + lambda * rest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiagnostic {
    /// 1-based layer, always >= 2.
    pub layer: usize,
    /// `lambda * p_c`, the effective label-smoothing strength.
    pub alpha: f64,
    /// 1-based earlier layer with the closest prediction.
    pub argmin_layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRecord {
    pub step: usize,
    pub layers: Vec<LayerDiagnostic>,
}

impl DiagnosticRecord {
    /// Mean alpha per layer and most frequent argmin (smallest on ties).
    pub fn aggregate(step: usize, records: &[DiagnosticRecord]) -> Option<DiagnosticRecord> {
        let first = records.first()?;
        let n = records.len() as f64;
        let layers = first
            .layers
            .iter()
            .enumerate()
            .map(|(k, template)| {
                let alpha = records.iter().map(|r| r.layers[k].alpha).sum::<f64>() / n;
                let mut counts = vec![0usize; template.layer];
                for r in records {
                    counts[r.layers[k].argmin_layer] += 1;
                }
                let mut argmin_layer = 1;
                for (j, &count) in counts.iter().enumerate().skip(1) {
                    if count > counts[argmin_layer] {
                        argmin_layer = j;
                    }
                }
                LayerDiagnostic {
                    layer: template.layer,
                    alpha,
                    argmin_layer,
                }
            })
            .collect();
        Some(DiagnosticRecord { step, layers })
    }
}

/// Dynamic alpha and closest-layer choice for every layer `>= 2`.
pub fn record_diagnostics(trace: &LayerTrace, config: &ObjectiveConfig, step: usize) -> DiagnosticRecord {
    let (argmin, _) = closest_previous(trace, config.adjacent_only);
    let layers = argmin
        .into_iter()
        .enumerate()
        .map(|(k, argmin_layer)| LayerDiagnostic {
            layer: k + 2,
            alpha: config.lambda * trace.dists[argmin_layer - 1].probs()[trace.gold],
            argmin_layer,
        })
        .collect();
    DiagnosticRecord { step, layers }
}

/// How often each earlier layer was the closest one, accumulated over
/// training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosestLayerMatrix {
    /// `counts[i][j]`: times 0-based layer `j` was closest to layer `i`.
    counts: Vec<Vec<u64>>,
}

impl ClosestLayerMatrix {
    pub fn new(num_layers: usize) -> Self {
        ClosestLayerMatrix {
            counts: vec![vec![0; num_layers]; num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.counts.len()
    }

    /// Adds one observation per layer from 1-based argmin indices, as found
    /// in [`CombinedLoss::argmin_layer`].
    pub fn record(&mut self, argmin_layer: &[usize]) {
        for (k, &j) in argmin_layer.iter().enumerate() {
            self.counts[k + 1][j - 1] += 1;
        }
    }

    pub fn count(&self, layer: usize, closest_layer: usize) -> u64 {
        self.counts[layer - 1][closest_layer - 1]
    }

    /// Percentage matrix: row `layer` (1-based, `>= 2`) over earlier layers.
    /// Rows with no observations are all zero.
    pub fn percentages(&self) -> Vec<(usize, Vec<f64>)> {
        (1..self.counts.len())
            .map(|i| {
                let row = &self.counts[i][..i];
                let total: u64 = row.iter().sum();
                let pct = row
                    .iter()
                    .map(|&c| {
                        if total == 0 {
                            0.0
                        } else {
                            100.0 * c as f64 / total as f64
                        }
                    })
                    .collect();
                (i + 1, pct)
            })
            .collect()
    }
}
