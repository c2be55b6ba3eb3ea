//! Probability primitives shared by training and inference.
//!
//! Everything is `f64` and natural-log based. Any logarithm of a probability
//! goes through [`clamped_ln`], which floors its argument at [`PROB_FLOOR`].

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `sum(probs) == 1` for a [`Distribution`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// `ln(max(p, PROB_FLOOR))`, with the upper end clamped to 1.
#[inline]
pub fn clamped_ln(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0).ln()
}

/// Derivative of [`clamped_ln`] with respect to `p`; zero inside the clamped
/// regions.
#[inline]
pub fn clamped_ln_grad(p: f64) -> f64 {
    if p > PROB_FLOOR {
        1.0 / p.min(1.0)
    } else {
        0.0
    }
}

/// A normalized probability vector over `C >= 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates and wraps `probs`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a distribution needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidInput(format!(
                "probability {bad} is negative or not finite"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Distribution { probs })
    }

    /// Accepts rows whose sum is within `tolerance` of 1 and rescales them to
    /// sum to 1. Used when ingesting externally produced probabilities.
    pub fn normalized(mut probs: Vec<f64>, tolerance: f64) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > tolerance {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, outside 1 ± {tolerance}"
            )));
        }
        if sum != 1.0 {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Distribution::new(probs)
    }

    pub fn uniform(num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidInput("uniform needs C >= 2".into()));
        }
        Ok(Distribution {
            probs: vec![1.0 / num_classes as f64; num_classes],
        })
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 || class >= num_classes {
            return Err(Error::InvalidInput(format!(
                "one-hot class {class} out of range for C = {num_classes}"
            )));
        }
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Ok(Distribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Distribution> {
    if logits.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Distribution {
        probs: exps.into_iter().map(|e| e / total).collect(),
    })
}

/// Shannon entropy in nats; `0 ln 0` counts as 0.
pub fn entropy(p: &Distribution) -> f64 {
    p.probs
        .iter()
        .filter(|&&pi| pi > 0.0)
        .map(|&pi| -pi * clamped_ln(pi))
        .sum()
}

/// `CE(q, p) = -sum_i p_i ln q_i`, where `q` is the prediction and `p` the
/// target.
pub fn cross_entropy(q: &Distribution, p: &Distribution) -> Result<f64> {
    if q.num_classes() != p.num_classes() {
        return Err(Error::InvalidInput(format!(
            "cross-entropy over mismatched class counts {} and {}",
            q.num_classes(),
            p.num_classes()
        )));
    }
    Ok(cross_entropy_raw(q.probs(), p.probs()))
}

pub(crate) fn cross_entropy_raw(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(_, &pi)| pi != 0.0)
        .map(|(&qi, &pi)| -pi * clamped_ln(qi))
        .sum()
}

/// Index of the largest probability; ties go to the smallest index.
pub fn argmax_class(p: &Distribution) -> usize {
    argmax(p.probs())
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
