//! Policy evaluation over exit logs: accuracy, speed-up and exit histograms.
//!
//! Speed-up is `L / mean exit layer`, i.e. measured in layers executed, not
//! wall-clock time.

use std::io::Write;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::MultiExitModel;
use crate::strategy::{decide_trace, ExitOutcome, ExitPolicy, ExitRunner};

use super::{Dataset, ExitLog};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub policy: ExitPolicy,
    pub samples: usize,
    pub correct: usize,
    pub forced_final: usize,
    pub accuracy: f64,
    pub mean_exit_layer: f64,
    pub speedup: f64,
    /// `exit_histogram[l - 1]`: samples leaving at layer `l`.
    pub exit_histogram: Vec<usize>,
    /// Same, counting only samples whose emitted prediction is correct.
    pub correct_exit_histogram: Vec<usize>,
}

fn require_samples(log: &ExitLog) -> Result<()> {
    if log.is_empty() {
        return Err(Error::InvalidInput("exit log has no samples".into()));
    }
    Ok(())
}

/// Per-sample outcomes, in trace order.
pub fn outcomes(log: &ExitLog, policy: &ExitPolicy) -> Result<Vec<ExitOutcome>> {
    policy.validate()?;
    log.traces.par_iter().map(|t| decide_trace(policy, t)).collect()
}

pub fn evaluate(log: &ExitLog, policy: &ExitPolicy) -> Result<SweepPoint> {
    require_samples(log)?;
    let results = outcomes(log, policy)?;
    let layers = log.num_layers;
    let mut exit_histogram = vec![0; layers];
    let mut correct_exit_histogram = vec![0; layers];
    let (mut correct, mut forced, mut layer_sum) = (0usize, 0usize, 0u64);
    for (trace, out) in log.traces.iter().zip(&results) {
        exit_histogram[out.exit_layer - 1] += 1;
        layer_sum += out.exit_layer as u64;
        if out.forced_final {
            forced += 1;
        }
        if out.prediction == trace.gold {
            correct += 1;
            correct_exit_histogram[out.exit_layer - 1] += 1;
        }
    }
    let n = log.len();
    let mean_exit_layer = layer_sum as f64 / n as f64;
    Ok(SweepPoint {
        policy: policy.clone(),
        samples: n,
        correct,
        forced_final: forced,
        accuracy: correct as f64 / n as f64,
        mean_exit_layer,
        speedup: layers as f64 / mean_exit_layer,
        exit_histogram,
        correct_exit_histogram,
    })
}

/// One policy template with one parameter swept over a list of values.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrid {
    pub base: ExitPolicy,
    pub param: String,
    pub values: Vec<f64>,
}

impl PolicyGrid {
    /// `base_spec` is a policy string missing the swept parameter, e.g.
    /// `voting:k=0.5`; `grid_spec` is `delta=1,2,3` or `delta=0.5:3:0.25`
    /// (inclusive range).
    pub fn parse(base_spec: &str, grid_spec: &str) -> Result<Self> {
        let (param, values) = parse_grid(grid_spec)?;
        let base_spec = base_spec.trim();
        let sep = if base_spec.contains(':') { "," } else { ":" };
        let first = format!("{base_spec}{sep}{param}={}", values[0]);
        let base: ExitPolicy = first.parse()?;
        let grid = PolicyGrid { base, param, values };
        grid.policies()?;
        Ok(grid)
    }

    pub fn policies(&self) -> Result<Vec<ExitPolicy>> {
        if self.values.is_empty() {
            return Err(Error::Config("parameter grid is empty".into()));
        }
        self.values
            .iter()
            .map(|&v| self.base.with_param(&self.param, v))
            .collect()
    }
}

/// Parses `name=v1,v2,...` or `name=start:stop:step`.
pub fn parse_grid(spec: &str) -> Result<(String, Vec<f64>)> {
    let (name, rest) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid `{spec}` must look like name=values")))?;
    let num = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("grid value `{s}` is not a number")))
    };
    let values = if rest.contains(':') {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("range grid `{rest}` must be start:stop:step")));
        }
        let (start, stop, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if step.is_nan() || step <= 0.0 || !start.is_finite() || !stop.is_finite() || stop < start {
            return Err(Error::Config(format!("bad range `{rest}`")));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize;
        // rounding keeps 0.1-style steps printing as typed
        (0..=count)
            .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
            .collect()
    } else {
        rest.split(',').map(num).collect::<Result<Vec<f64>>>()?
    };
    if values.is_empty() {
        return Err(Error::Config("parameter grid is empty".into()));
    }
    Ok((name.trim().to_string(), values))
}

/// Evaluates every grid point; results are sorted by speed-up (stable, so
/// equal speed-ups keep grid order).
pub fn sweep(log: &ExitLog, grid: &PolicyGrid) -> Result<Vec<SweepPoint>> {
    let mut points = grid
        .policies()?
        .iter()
        .map(|p| evaluate(log, p))
        .collect::<Result<Vec<_>>>()?;
    points.sort_by(|a, b| a.speedup.total_cmp(&b.speedup));
    Ok(points)
}

/// One row per requested policy (duplicates kept) followed by the oracle.
pub fn compare_policies(log: &ExitLog, policies: &[ExitPolicy]) -> Result<Vec<SweepPoint>> {
    require_samples(log)?;
    if policies.is_empty() {
        return Err(Error::Config("no policies to compare".into()));
    }
    policies
        .iter()
        .chain(std::iter::once(&ExitPolicy::Oracle))
        .map(|p| evaluate(log, p))
        .collect()
}

/// Accuracy of each head on its own.
pub fn per_layer_accuracy(log: &ExitLog) -> Vec<f64> {
    let mut correct = vec![0usize; log.num_layers];
    for t in &log.traces {
        for (l, p) in t.predictions().into_iter().enumerate() {
            if p == t.gold {
                correct[l] += 1;
            }
        }
    }
    let n = log.len().max(1) as f64;
    correct.into_iter().map(|c| c as f64 / n).collect()
}

/// Fraction of (head pair, sample) combinations whose argmax predictions
/// differ, averaged over all unordered head pairs.
pub fn mean_pairwise_disagreement(log: &ExitLog) -> f64 {
    let layers = log.num_layers;
    if layers < 2 || log.is_empty() {
        return 0.0;
    }
    let mut differing = 0u64;
    for t in &log.traces {
        let preds = t.predictions();
        for i in 0..layers {
            for j in i + 1..layers {
                if preds[i] != preds[j] {
                    differing += 1;
                }
            }
        }
    }
    let pairs = (layers * (layers - 1) / 2) as f64;
    differing as f64 / (pairs * log.len() as f64)
}

/// Result of running a policy against a live model, stopping each sample's
/// forward pass at its exit layer.
#[derive(Debug, Clone)]
pub struct EarlyExitRun {
    pub outcomes: Vec<ExitOutcome>,
    /// Blocks actually evaluated, summed over samples.
    pub layers_executed: usize,
    pub elapsed: Duration,
}

pub fn early_exit_inference(model: &MultiExitModel, data: &Dataset, policy: &ExitPolicy) -> Result<EarlyExitRun> {
    policy.validate()?;
    let start = Instant::now();
    let mut outcomes = Vec::with_capacity(data.len());
    let mut layers_executed = 0;
    for s in &data.samples {
        let mut stepper = model.stepper(&s.features)?;
        let mut runner = ExitRunner::new(policy, Some(s.label))?;
        let mut outcome = None;
        while let Some(dist) = stepper.next_dist()? {
            if let Some(out) = runner.observe(&dist) {
                outcome = Some(out);
                break;
            }
        }
        let outcome = match outcome {
            Some(o) => o,
            None => runner.finish()?,
        };
        layers_executed += stepper.layers_done();
        outcomes.push(outcome);
    }
    Ok(EarlyExitRun {
        outcomes,
        layers_executed,
        elapsed: start.elapsed(),
    })
}

pub const REPORT_HEADER: &str = "policy,params,accuracy,speedup,mean_exit_layer";

/// `policy,params,accuracy,speedup,mean_exit_layer`
pub fn write_report_csv<W: Write>(points: &[SweepPoint], mut out: W) -> Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{}",
            p.policy.name(),
            p.policy.params_string(),
            p.accuracy,
            p.speedup,
            p.mean_exit_layer
        )?;
    }
    out.flush()?;
    Ok(())
}

pub const HISTOGRAM_HEADER: &str = "policy,params,layer,exits,correct_exits,correct_exit_pct";

/// Per-layer exit counts; `correct_exit_pct` is relative to all samples.
pub fn write_histogram_csv<W: Write>(points: &[SweepPoint], mut out: W) -> Result<()> {
    writeln!(out, "{HISTOGRAM_HEADER}")?;
    for p in points {
        for (l, (exits, correct)) in p
            .exit_histogram
            .iter()
            .zip(&p.correct_exit_histogram)
            .enumerate()
        {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                p.policy.name(),
                p.policy.params_string(),
                l + 1,
                exits,
                correct,
                100.0 * *correct as f64 / p.samples as f64
            )?;
        }
    }
    out.flush()?;
    Ok(())
}
