use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::Dataset;
use crate::model::{adam_step, AdamState, LayerTrace, MultiExitModel, Params};

use super::{combined_loss, record_diagnostics, ClosestLayerMatrix, DiagnosticRecord, ObjectiveConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Record a diagnostic every this many optimizer steps.
    pub log_every: usize,
    /// Seeds the per-epoch shuffle.
    pub shuffle_seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            lr: 1e-2,
            batch_size: 32,
            log_every: 10,
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub diagnostics: Vec<DiagnosticRecord>,
    pub closest: ClosestLayerMatrix,
}

/// Mini-batch Adam on the combined objective. Batch loss is the mean over its
/// samples. Fully deterministic for a given model, dataset and options.
pub fn train(
    model: &mut MultiExitModel,
    data: &Dataset,
    objective: &ObjectiveConfig,
    options: &TrainOptions,
) -> Result<TrainReport> {
    let cfg = model.config().clone();
    objective.validate(cfg.num_layers)?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    data.validate()?;
    if data.input_dim() != cfg.input_dim {
        return Err(Error::InvalidInput(format!(
            "dataset has {} features, model expects {}",
            data.input_dim(),
            cfg.input_dim
        )));
    }
    if data.num_classes > cfg.num_classes {
        return Err(Error::InvalidInput(format!(
            "dataset has {} classes, model has {}",
            data.num_classes, cfg.num_classes
        )));
    }
    if options.batch_size == 0 || options.log_every == 0 {
        return Err(Error::Config("batch size and log interval must be positive".into()));
    }
    if !(options.lr.is_finite() && options.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", options.lr)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.shuffle_seed);
    let mut adam = AdamState::new(model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        steps: 0,
        epoch_losses: Vec::with_capacity(options.epochs),
        diagnostics: Vec::new(),
        closest: ClosestLayerMatrix::new(cfg.num_layers),
    };

    for _ in 0..options.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(options.batch_size) {
            let step = report.steps;
            let log_now = step.is_multiple_of(options.log_every);
            let mut grads: Option<Params> = None;
            let mut batch_loss = 0.0;
            let mut records = Vec::new();
            for &idx in batch {
                let sample = &data.samples[idx];
                // features were validated up front, so a failure here is numeric blow-up
                let cache = model.forward(&sample.features).map_err(|e| Error::Diverged {
                    step,
                    message: e.to_string(),
                })?;
                let trace = LayerTrace::new(idx, sample.label, cache.dists().to_vec())?;
                let loss = combined_loss(&trace, objective)?;
                if !loss.value.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        message: format!("non-finite loss on sample {idx}"),
                    });
                }
                batch_loss += loss.value;
                report.closest.record(&loss.argmin_layer);
                if log_now {
                    records.push(record_diagnostics(&trace, objective, step));
                }
                let g = model.backward(&cache, &loss.dist_grads)?;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => add_into(acc, &g),
                }
            }
            let mut grads = grads.expect("batch is non-empty");
            let scale = 1.0 / batch.len() as f64;
            for group in grads.groups_mut() {
                group.iter_mut().for_each(|x| *x *= scale);
            }
            adam_step(model, &grads, &mut adam, options.lr).map_err(|e| match e {
                Error::Diverged { message, .. } => Error::Diverged { step, message },
                other => other,
            })?;
            if !model.params().all_finite() {
                return Err(Error::Diverged {
                    step,
                    message: "non-finite parameter after update".into(),
                });
            }
            if let Some(rec) = DiagnosticRecord::aggregate(step, &records) {
                report.diagnostics.push(rec);
            }
            epoch_loss += batch_loss;
            report.steps += 1;
        }
        report.epoch_losses.push(epoch_loss / data.len() as f64);
    }
    Ok(report)
}

fn add_into(acc: &mut Params, other: &Params) {
    let src = other.groups();
    for (dst, (_, s)) in acc.groups_mut().into_iter().zip(src) {
        for (a, b) in dst.iter_mut().zip(s) {
            *a += b;
        }
    }
}
