//! Early-exit decision rules.
//!
//! Every rule consumes head outputs one layer at a time through
//! [`ExitRunner`], so a decision at layer `l` can only depend on layers
//! `1..=l`. Layers are 1-based throughout this module.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::math::{argmax_class, entropy, Distribution};
use crate::model::LayerTrace;

/// Prediction emitted by voting when no layer reached the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VotingFallback {
    /// Plurality over all heads.
    Plurality,
    /// Argmax of the deepest head, like the other rules.
    LastLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExitPolicy {
    /// Exit once `entropy(x_l) < threshold`.
    Entropy { threshold: f64 },
    /// Exit once `max_c x_l[c] >= threshold`.
    MaxProb { threshold: f64 },
    /// Exit once the prediction has stayed the same for `patience`
    /// consecutive layer transitions.
    Patience { patience: usize },
    /// Exit once `V_l = max_c votes_c / l^k >= delta`.
    Voting {
        delta: f64,
        k: f64,
        fallback: VotingFallback,
    },
    /// Exit at the first head that predicts the gold label.
    Oracle,
    /// Exit as soon as either inner rule fires. When both fire at the same
    /// layer, and for the forced fallback, `first` decides the prediction.
    Hybrid {
        first: Box<ExitPolicy>,
        second: Box<ExitPolicy>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExitOutcome {
    pub exit_layer: usize,
    pub prediction: usize,
    /// No criterion fired at any layer; the sample ran the whole stack.
    pub forced_final: bool,
}

impl ExitPolicy {
    pub fn voting(delta: f64, k: f64) -> Self {
        ExitPolicy::Voting {
            delta,
            k,
            fallback: VotingFallback::Plurality,
        }
    }

    pub fn hybrid(first: ExitPolicy, second: ExitPolicy) -> Self {
        ExitPolicy::Hybrid {
            first: Box::new(first),
            second: Box::new(second),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExitPolicy::Entropy { .. } => "entropy",
            ExitPolicy::MaxProb { .. } => "maxprob",
            ExitPolicy::Patience { .. } => "patience",
            ExitPolicy::Voting { .. } => "voting",
            ExitPolicy::Oracle => "oracle",
            ExitPolicy::Hybrid { .. } => "hybrid",
        }
    }

    pub fn needs_gold(&self) -> bool {
        match self {
            ExitPolicy::Oracle => true,
            ExitPolicy::Hybrid { first, second } => first.needs_gold() || second.needs_gold(),
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self {
            ExitPolicy::Entropy { threshold } if threshold.is_nan() || *threshold < 0.0 => {
                bad(format!("entropy threshold must be >= 0, got {threshold}"))
            }
            ExitPolicy::MaxProb { threshold } if !(*threshold > 0.0 && *threshold <= 1.0) => {
                bad(format!("maxprob threshold must be in (0, 1], got {threshold}"))
            }
            ExitPolicy::Patience { patience: 0 } => bad("patience must be >= 1".into()),
            ExitPolicy::Voting { delta, k, .. } => {
                if delta.is_nan() || *delta <= 0.0 {
                    bad(format!("vote threshold delta must be > 0, got {delta}"))
                } else if !(0.0..1.0).contains(k) {
                    bad(format!("vote exponent k must be in [0, 1), got {k}"))
                } else {
                    Ok(())
                }
            }
            ExitPolicy::Hybrid { first, second } => {
                first.validate()?;
                second.validate()
            }
            _ => Ok(()),
        }
    }

    /// Parameter list without the policy name, e.g. `delta=2.5;k=0.5`.
    /// Semicolon-separated so it can sit in a CSV cell unquoted.
    pub fn params_string(&self) -> String {
        match self {
            ExitPolicy::Hybrid { first, second } => format!("{first}+{second}").replace(',', ";"),
            other => {
                let s = other.to_string();
                s.split_once(':').map_or(String::new(), |(_, p)| p.replace(',', ";"))
            }
        }
    }

    /// Copy with the named parameter replaced, for grid sweeps.
    pub fn with_param(&self, name: &str, value: f64) -> Result<ExitPolicy> {
        let mut out = self.clone();
        match (&mut out, name) {
            (ExitPolicy::Entropy { threshold }, "t") | (ExitPolicy::MaxProb { threshold }, "t") => {
                *threshold = value
            }
            (ExitPolicy::Patience { patience }, "s") => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::Config(format!("patience must be a positive integer, got {value}")));
                }
                *patience = value as usize;
            }
            (ExitPolicy::Voting { delta, .. }, "delta") => *delta = value,
            (ExitPolicy::Voting { k, .. }, "k") => *k = value,
            (policy, _) => {
                return Err(Error::Config(format!(
                    "{} has no sweepable parameter `{name}`",
                    policy.name()
                )))
            }
        }
        out.validate()?;
        Ok(out)
    }
}

impl fmt::Display for ExitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitPolicy::Entropy { threshold } => write!(f, "entropy:t={threshold}"),
            ExitPolicy::MaxProb { threshold } => write!(f, "maxprob:t={threshold}"),
            ExitPolicy::Patience { patience } => write!(f, "patience:s={patience}"),
            ExitPolicy::Voting { delta, k, fallback } => {
                write!(f, "voting:delta={delta},k={k}")?;
                if *fallback == VotingFallback::LastLayer {
                    f.write_str(",fallback=last")?;
                }
                Ok(())
            }
            ExitPolicy::Oracle => f.write_str("oracle"),
            ExitPolicy::Hybrid { first, second } => write!(f, "hybrid:{first}+{second}"),
        }
    }
}

struct ParamList<'a> {
    policy: &'a str,
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> ParamList<'a> {
    fn parse(policy: &'a str, text: &'a str, allowed: &[&str]) -> Result<Self> {
        let mut pairs: Vec<(&str, &str)> = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("{policy}: expected key=value, got `{item}`"))
            })?;
            let key = key.trim();
            if !allowed.contains(&key) {
                return Err(Error::Config(format!(
                    "{policy}: unknown parameter `{key}` (expected {})",
                    allowed.join(", ")
                )));
            }
            if pairs.iter().any(|(k, _)| *k == key) {
                return Err(Error::Config(format!("{policy}: parameter `{key}` given twice")));
            }
            pairs.push((key, value.trim()));
        }
        Ok(ParamList { policy, pairs })
    }

    fn raw(&self, key: &str) -> Option<&'a str> {
        self.pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn required<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("{}: missing required parameter `{key}`", self.policy)))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("{}: cannot parse {key}=`{raw}`", self.policy)))
    }
}

fn parse_simple(spec: &str) -> Result<ExitPolicy> {
    let (kind, params) = spec.split_once(':').unwrap_or((spec, ""));
    let kind = kind.trim();
    let policy = match kind {
        "entropy" => ExitPolicy::Entropy {
            threshold: ParamList::parse(kind, params, &["t"])?.required("t")?,
        },
        "maxprob" => ExitPolicy::MaxProb {
            threshold: ParamList::parse(kind, params, &["t"])?.required("t")?,
        },
        "patience" => ExitPolicy::Patience {
            patience: ParamList::parse(kind, params, &["s"])?.required("s")?,
        },
        "voting" => {
            let list = ParamList::parse(kind, params, &["delta", "k", "fallback"])?;
            let fallback = match list.raw("fallback") {
                None | Some("plurality") => VotingFallback::Plurality,
                Some("last") => VotingFallback::LastLayer,
                Some(other) => {
                    return Err(Error::Config(format!(
                        "voting: fallback must be plurality or last, got `{other}`"
                    )))
                }
            };
            ExitPolicy::Voting {
                delta: list.required("delta")?,
                k: list.required("k")?,
                fallback,
            }
        }
        "oracle" => {
            ParamList::parse(kind, params, &[])?;
            ExitPolicy::Oracle
        }
        "hybrid" => return Err(Error::Config("hybrid policies cannot be nested".into())),
        other => return Err(Error::Config(format!("unknown exit policy `{other}`"))),
    };
    Ok(policy)
}

impl FromStr for ExitPolicy {
    type Err = Error;

    /// Parses specs such as `voting:delta=2.5,k=0.5`, `patience:s=6`,
    /// `entropy:t=0.3`, `maxprob:t=0.9`, `oracle` and
    /// `hybrid:voting:delta=2.5,k=0.5+entropy:t=0.15`.
    fn from_str(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        let policy = match spec.strip_prefix("hybrid:") {
            Some(inner) => {
                let parts: Vec<&str> = inner.split('+').collect();
                if parts.len() != 2 {
                    return Err(Error::Config(format!(
                        "hybrid needs exactly two policies joined by `+`, got `{inner}`"
                    )));
                }
                ExitPolicy::hybrid(parse_simple(parts[0])?, parse_simple(parts[1])?)
            }
            None => parse_simple(spec)?,
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Running vote counts over the heads seen so far.
#[derive(Debug, Clone, Default)]
struct VoteTally {
    counts: Vec<usize>,
    layers: usize,
}

impl VoteTally {
    fn add(&mut self, class: usize) {
        if self.counts.len() <= class {
            self.counts.resize(class + 1, 0);
        }
        self.counts[class] += 1;
        self.layers += 1;
    }

    fn score(&self, k: f64) -> f64 {
        let best = self.counts.iter().copied().max().unwrap_or(0);
        best as f64 / (self.layers as f64).powf(k)
    }

    /// Most voted class, smallest index on ties.
    fn plurality(&self) -> usize {
        let mut best = 0;
        for (c, &n) in self.counts.iter().enumerate() {
            if n > self.counts[best] {
                best = c;
            }
        }
        best
    }
}

/// Consecutive-agreement counter; resets to 0 whenever the prediction
/// changes.
#[derive(Debug, Clone, Default)]
struct PatienceCounter {
    last: Option<usize>,
    streak: usize,
}

impl PatienceCounter {
    fn push(&mut self, prediction: usize) -> usize {
        self.streak = match self.last {
            Some(prev) if prev == prediction => self.streak + 1,
            _ => 0,
        };
        self.last = Some(prediction);
        self.streak
    }
}

#[derive(Debug, Clone)]
enum RunnerState {
    Entropy(f64),
    MaxProb(f64),
    Patience(usize, PatienceCounter),
    Voting {
        delta: f64,
        k: f64,
        fallback: VotingFallback,
        tally: VoteTally,
    },
    Oracle(usize),
    Hybrid(Box<ExitRunner>, Box<ExitRunner>),
}

/// Incremental evaluation of one policy on one sample.
#[derive(Debug, Clone)]
pub struct ExitRunner {
    state: RunnerState,
    layer: usize,
    last_prediction: Option<usize>,
    decided: Option<ExitOutcome>,
}

impl ExitRunner {
    /// `gold` is only needed (and then required) by oracle policies.
    pub fn new(policy: &ExitPolicy, gold: Option<usize>) -> Result<Self> {
        policy.validate()?;
        let state = match policy {
            ExitPolicy::Entropy { threshold } => RunnerState::Entropy(*threshold),
            ExitPolicy::MaxProb { threshold } => RunnerState::MaxProb(*threshold),
            ExitPolicy::Patience { patience } => RunnerState::Patience(*patience, PatienceCounter::default()),
            ExitPolicy::Voting { delta, k, fallback } => RunnerState::Voting {
                delta: *delta,
                k: *k,
                fallback: *fallback,
                tally: VoteTally::default(),
            },
            ExitPolicy::Oracle => RunnerState::Oracle(
                gold.ok_or_else(|| Error::InvalidInput("the oracle policy needs the gold label".into()))?,
            ),
            ExitPolicy::Hybrid { first, second } => RunnerState::Hybrid(
                Box::new(ExitRunner::new(first, gold)?),
                Box::new(ExitRunner::new(second, gold)?),
            ),
        };
        Ok(ExitRunner {
            state,
            layer: 0,
            last_prediction: None,
            decided: None,
        })
    }

    /// Layers observed so far.
    pub fn layers_seen(&self) -> usize {
        self.layer
    }

    /// Feeds the next head's output. Returns the outcome once the rule fires;
    /// after that the runner ignores further input.
    pub fn observe(&mut self, dist: &Distribution) -> Option<ExitOutcome> {
        if let Some(done) = self.decided {
            return Some(done);
        }
        self.layer += 1;
        let layer = self.layer;
        let prediction = argmax_class(dist);
        self.last_prediction = Some(prediction);
        let fire = |prediction| {
            Some(ExitOutcome {
                exit_layer: layer,
                prediction,
                forced_final: false,
            })
        };
        let outcome = match &mut self.state {
            RunnerState::Entropy(t) => (entropy(dist) < *t).then_some(()).and_then(|_| fire(prediction)),
            RunnerState::MaxProb(t) => (dist.max_prob() >= *t).then_some(()).and_then(|_| fire(prediction)),
            RunnerState::Patience(s, counter) => {
                (counter.push(prediction) >= *s).then_some(()).and_then(|_| fire(prediction))
            }
            RunnerState::Voting { delta, k, tally, .. } => {
                tally.add(prediction);
                (tally.score(*k) >= *delta)
                    .then_some(())
                    .and_then(|_| fire(tally.plurality()))
            }
            RunnerState::Oracle(gold) => (prediction == *gold).then_some(()).and_then(|_| fire(prediction)),
            RunnerState::Hybrid(a, b) => {
                let first = a.observe(dist);
                let second = b.observe(dist);
                first.or(second)
            }
        };
        self.decided = outcome;
        outcome
    }

    /// Outcome after the last observed layer: the fired decision if any,
    /// otherwise the forced exit at that layer.
    pub fn finish(&self) -> Result<ExitOutcome> {
        if let Some(done) = self.decided {
            return Ok(done);
        }
        let last = self
            .last_prediction
            .ok_or_else(|| Error::InvalidInput("no layers were observed".into()))?;
        let prediction = match &self.state {
            RunnerState::Voting {
                fallback: VotingFallback::Plurality,
                tally,
                ..
            } => tally.plurality(),
            RunnerState::Hybrid(first, _) => first.finish()?.prediction,
            _ => last,
        };
        Ok(ExitOutcome {
            exit_layer: self.layer,
            prediction,
            forced_final: true,
        })
    }
}

/// Runs `policy` over the whole trace.
pub fn decide(policy: &ExitPolicy, dists: &[Distribution], gold: Option<usize>) -> Result<ExitOutcome> {
    let mut runner = ExitRunner::new(policy, gold)?;
    for d in dists {
        if let Some(out) = runner.observe(d) {
            return Ok(out);
        }
    }
    runner.finish()
}

pub fn decide_trace(policy: &ExitPolicy, trace: &LayerTrace) -> Result<ExitOutcome> {
    decide(policy, &trace.dists, Some(trace.gold))
}

/// `V_l`: the largest vote count among the argmax predictions of the given
/// heads, divided by `l^k`.
pub fn vote_score(dists: &[Distribution], k: f64) -> f64 {
    let mut tally = VoteTally::default();
    for d in dists {
        tally.add(argmax_class(d));
    }
    tally.score(k)
}

pub fn decide_voting(dists: &[Distribution], delta: f64, k: f64) -> Result<ExitOutcome> {
    decide(&ExitPolicy::voting(delta, k), dists, None)
}

pub fn decide_entropy(dists: &[Distribution], threshold: f64) -> Result<ExitOutcome> {
    decide(&ExitPolicy::Entropy { threshold }, dists, None)
}

pub fn decide_maxprob(dists: &[Distribution], threshold: f64) -> Result<ExitOutcome> {
    decide(&ExitPolicy::MaxProb { threshold }, dists, None)
}

pub fn decide_oracle(trace: &LayerTrace) -> Result<ExitOutcome> {
    decide(&ExitPolicy::Oracle, &trace.dists, Some(trace.gold))
}

pub fn decide_hybrid(
    dists: &[Distribution],
    gold: Option<usize>,
    first: &ExitPolicy,
    second: &ExitPolicy,
) -> Result<ExitOutcome> {
    decide(&ExitPolicy::hybrid(first.clone(), second.clone()), dists, gold)
}

/// Patience rule on bare per-layer predictions.
pub fn decide_patience(predictions: &[usize], patience: usize) -> Result<ExitOutcome> {
    if patience == 0 {
        return Err(Error::Config("patience must be >= 1".into()));
    }
    let mut counter = PatienceCounter::default();
    for (i, &p) in predictions.iter().enumerate() {
        if counter.push(p) >= patience {
            return Ok(ExitOutcome {
                exit_layer: i + 1,
                prediction: p,
                forced_final: false,
            });
        }
    }
    let last = *predictions
        .last()
        .ok_or_else(|| Error::InvalidInput("no layers were observed".into()))?;
    Ok(ExitOutcome {
        exit_layer: predictions.len(),
        prediction: last,
        forced_final: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::softmax;
    use proptest::prelude::*;

    fn voter(class: usize, c: usize) -> Distribution {
        let mut p = vec![0.1 / (c - 1) as f64; c];
        p[class] = 0.9;
        Distribution::new(p).unwrap()
    }

    fn votes(classes: &[usize], c: usize) -> Vec<Distribution> {
        classes.iter().map(|&k| voter(k, c)).collect()
    }

    #[test]
    fn vote_score_examples() {
        assert!((vote_score(&votes(&[0, 0], 2), 0.25) - 1.6817928305074292).abs() < 1e-12);
        assert!((vote_score(&votes(&[1; 4], 2), 0.5) - 2.0).abs() < 1e-12);
        assert!((vote_score(&votes(&[0; 12], 2), 0.75) - 1.8612097182041991).abs() < 1e-12);
        assert_eq!(vote_score(&votes(&[0, 1, 1, 0, 1], 2), 0.0), 3.0);
    }

    #[test]
    fn voting_examples() {
        let d = votes(&[1, 0, 1], 2);
        let out = decide_voting(&d, 0.5, 0.3).unwrap();
        assert_eq!((out.exit_layer, out.forced_final), (1, false));

        let out = decide_voting(&d, 3f64.powf(1.0 - 0.25) + 1e-9, 0.25).unwrap();
        assert!(out.forced_final);
        assert_eq!(out.exit_layer, 3);
        assert_eq!(out.prediction, 1);

        // A=0, B=1: counts 1,1,2,3
        let out = decide_voting(&votes(&[0, 1, 0, 0], 2), 3.0, 0.0).unwrap();
        assert_eq!((out.exit_layer, out.prediction, out.forced_final), (4, 0, false));
    }

    #[test]
    fn voting_fallback_modes() {
        let d = votes(&[2, 2, 1], 3);
        let plural = decide(&ExitPolicy::voting(100.0, 0.0), &d, None).unwrap();
        assert_eq!(plural.prediction, 2);
        let last = ExitPolicy::Voting {
            delta: 100.0,
            k: 0.0,
            fallback: VotingFallback::LastLayer,
        };
        assert_eq!(decide(&last, &d, None).unwrap().prediction, 1);
    }

    #[test]
    fn vote_prediction_ties_go_to_smallest_class() {
        let out = decide_voting(&votes(&[1, 0], 2), 1.0, 0.0).unwrap();
        assert_eq!((out.exit_layer, out.prediction), (1, 1));
        let out = decide(&ExitPolicy::voting(5.0, 0.0), &votes(&[1, 0], 2), None).unwrap();
        assert_eq!(out.prediction, 0);
    }

    #[test]
    fn patience_examples() {
        let out = decide_patience(&[0, 1, 1, 1], 2).unwrap();
        assert_eq!((out.exit_layer, out.prediction, out.forced_final), (4, 1, false));
        let out = decide_patience(&[3, 3, 3, 3, 3], 2).unwrap();
        assert_eq!(out.exit_layer, 3);
        for s in 1..4 {
            let out = decide_patience(&[0, 1, 0, 1, 0, 1], s).unwrap();
            assert!(out.forced_final);
            assert_eq!((out.exit_layer, out.prediction), (6, 1));
        }
        assert!(decide_patience(&[0, 0], 0).is_err());
        // the runner agrees with the bare-prediction form
        let d = votes(&[0, 1, 1, 1], 2);
        assert_eq!(
            decide(&ExitPolicy::Patience { patience: 2 }, &d, None).unwrap(),
            decide_patience(&[0, 1, 1, 1], 2).unwrap()
        );
    }

    #[test]
    fn entropy_and_maxprob_examples() {
        let d = votes(&[0, 1, 0], 3);
        assert_eq!(decide_entropy(&d, 3f64.ln()).unwrap().exit_layer, 1);

        let almost = Distribution::new(vec![1.0 - 1e-12, 1e-12]).unwrap();
        let out = decide_maxprob(&[almost.clone(), almost], 1.0).unwrap();
        assert!(out.forced_final);

        let d = vec![by_entropy_three(0.9), by_entropy_three(0.4), by_entropy_three(0.1)];
        for (dist, h) in d.iter().zip([0.9, 0.4, 0.1]) {
            assert!((entropy(dist) - h).abs() < 1e-9);
        }
        assert_eq!(decide_entropy(&d, 0.5).unwrap().exit_layer, 2);
        assert!(decide_entropy(&d, 0.0).unwrap().forced_final);
    }

    fn by_entropy_three(h_target: f64) -> Distribution {
        let (mut lo, mut hi) = (1.0 / 3.0, 1.0);
        let make = |m: f64| Distribution::new(vec![m, (1.0 - m) / 2.0, (1.0 - m) / 2.0]).unwrap();
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if entropy(&make(mid)) > h_target { lo = mid } else { hi = mid }
        }
        make(0.5 * (lo + hi))
    }

    #[test]
    fn oracle_examples() {
        let t = LayerTrace::new(0, 1, votes(&[0, 2, 1, 0], 3)).unwrap();
        assert_eq!(decide_oracle(&t).unwrap().exit_layer, 3);
        let t = LayerTrace::new(0, 1, votes(&[0, 2, 0], 3)).unwrap();
        let out = decide_oracle(&t).unwrap();
        assert!(out.forced_final);
        assert_eq!(out.exit_layer, 3);
        assert_ne!(out.prediction, 1);
        assert!(decide(&ExitPolicy::Oracle, &t.dists, None).is_err());
    }

    #[test]
    fn hybrid_examples() {
        let d = votes(&[0, 1, 1, 1, 0], 2);
        let entropy_only = ExitPolicy::Entropy { threshold: 0.2 };
        let never_votes = ExitPolicy::voting(f64::INFINITY, 0.0);
        let h = ExitPolicy::hybrid(entropy_only.clone(), never_votes.clone());
        assert_eq!(decide(&h, &d, None).unwrap(), decide(&entropy_only, &d, None).unwrap());

        let voting = ExitPolicy::voting(3.0, 0.0);
        let never_entropy = ExitPolicy::Entropy { threshold: 0.0 };
        let h = ExitPolicy::hybrid(voting.clone(), never_entropy);
        assert_eq!(decide(&h, &d, None).unwrap(), decide(&voting, &d, None).unwrap());

        // same-layer firing uses the first policy's prediction
        let d = votes(&[1, 0], 2);
        let a = ExitPolicy::voting(1.0, 0.0);
        let b = ExitPolicy::Patience { patience: 1 };
        let out = decide_hybrid(&d, None, &b, &a).unwrap();
        assert_eq!((out.exit_layer, out.prediction), (1, 1));
    }

    #[test]
    fn policy_strings_round_trip() {
        for spec in [
            "voting:delta=2.5,k=0.5",
            "voting:delta=2,k=0,fallback=last",
            "patience:s=6",
            "entropy:t=0.3",
            "maxprob:t=0.9",
            "oracle",
            "hybrid:voting:delta=2.5,k=0.5+entropy:t=0.15",
        ] {
            let p: ExitPolicy = spec.parse().unwrap();
            assert_eq!(p.to_string(), spec);
        }
        let p: ExitPolicy = "voting:delta=2.0,k=0.5".parse().unwrap();
        assert_eq!(p, ExitPolicy::voting(2.0, 0.5));
        assert_eq!(p.params_string(), "delta=2;k=0.5");
    }

    #[test]
    fn policy_string_errors() {
        for bad in [
            "voting:delta=2.5",
            "voting:k=0.5",
            "voting:delta=2,k=1",
            "voting:delta=0,k=0.5",
            "voting:delta=2,k=0.5,delta=3",
            "patience:s=0",
            "patience:s=1.5",
            "entropy:t=-1",
            "maxprob:t=0",
            "maxprob:t=1.5",
            "oracle:x=1",
            "entropy",
            "bogus:t=1",
            "hybrid:oracle",
            "hybrid:oracle+entropy:t=1+patience:s=2",
            "voting:delta=2,k=0.5,fallback=maybe",
        ] {
            assert!(bad.parse::<ExitPolicy>().is_err(), "{bad} should be rejected");
        }
    }

    #[test]
    fn with_param_updates_and_validates() {
        let base = ExitPolicy::voting(1.0, 0.5);
        assert_eq!(base.with_param("delta", 2.5).unwrap(), ExitPolicy::voting(2.5, 0.5));
        assert!(base.with_param("k", 1.0).is_err());
        assert!(base.with_param("s", 2.0).is_err());
        let pat = ExitPolicy::Patience { patience: 1 };
        assert_eq!(pat.with_param("s", 4.0).unwrap(), ExitPolicy::Patience { patience: 4 });
        assert!(pat.with_param("s", 2.5).is_err());
    }

    fn trace_strategy(c: usize) -> impl Strategy<Value = Vec<Distribution>> {
        prop::collection::vec(
            prop::collection::vec(-3.0f64..3.0, c).prop_map(|z| softmax(&z).unwrap()),
            1..13,
        )
    }

    proptest! {
        #[test]
        fn vote_score_bounded(d in trace_strategy(3), k in 0.0f64..0.999) {
            let l = d.len() as f64;
            prop_assert!(vote_score(&d, k) <= l.powf(1.0 - k) + 1e-12);
        }

        #[test]
        fn decisions_only_read_the_prefix(d in trace_strategy(2), extra in trace_strategy(2)) {
            let policies = [
                ExitPolicy::voting(2.0, 0.5),
                ExitPolicy::Patience { patience: 2 },
                ExitPolicy::Entropy { threshold: 0.4 },
                ExitPolicy::MaxProb { threshold: 0.8 },
                ExitPolicy::Oracle,
            ];
            for p in &policies {
                let short = decide(p, &d, Some(0)).unwrap();
                if !short.forced_final {
                    let mut longer = d.clone();
                    longer.extend(extra.iter().cloned());
                    prop_assert_eq!(decide(p, &longer, Some(0)).unwrap(), short);
                }
            }
        }

        #[test]
        fn hybrid_exits_no_later_than_inner(d in trace_strategy(2), t in 0.0f64..0.7, delta in 0.5f64..4.0) {
            let a = ExitPolicy::Entropy { threshold: t };
            let b = ExitPolicy::voting(delta, 0.25);
            let h = decide_hybrid(&d, None, &a, &b).unwrap();
            let ea = decide(&a, &d, None).unwrap().exit_layer;
            let eb = decide(&b, &d, None).unwrap().exit_layer;
            prop_assert!(h.exit_layer <= ea.min(eb));
        }
    }
}
