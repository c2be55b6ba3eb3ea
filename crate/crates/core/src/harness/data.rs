use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, num_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        let dataset = Dataset {
            name: name.into(),
            num_classes,
            samples,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidInput("a dataset needs at least 2 classes".into()));
        }
        let Some(first) = self.samples.first() else {
            return Ok(());
        };
        let dim = first.features.len();
        for (i, s) in self.samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "sample {i} has {} features, expected {dim}",
                    s.features.len()
                )));
            }
            if s.label >= self.num_classes {
                return Err(Error::InvalidInput(format!(
                    "sample {i} label {} out of range for C = {}",
                    s.label, self.num_classes
                )));
            }
            if s.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("sample {i} has a non-finite feature")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature dimension, 0 for an empty dataset.
    pub fn input_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    GaussianBlobs,
    TwoMoons,
    ConcentricRings,
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::GaussianBlobs => "gaussian_blobs",
            SyntheticKind::TwoMoons => "two_moons",
            SyntheticKind::ConcentricRings => "concentric_rings",
        })
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blobs" | "blobs" => Ok(SyntheticKind::GaussianBlobs),
            "two_moons" | "moons" => Ok(SyntheticKind::TwoMoons),
            "concentric_rings" | "rings" => Ok(SyntheticKind::ConcentricRings),
            other => Err(Error::Config(format!("unknown synthetic dataset `{other}`"))),
        }
    }
}

/// Two-dimensional synthetic classification data.
///
/// Labels cycle `0, 1, .., C-1` so class counts differ by at most one, and the
/// sample order is shuffled afterwards. `noise` is the standard deviation of
/// the Gaussian perturbation.
///
/// * blobs: class `c` centred at radius 3, angle `2 pi c / C`
/// * moons: the usual interleaved half circles, binary only
/// * rings: class `c` on the circle of radius `c + 1`
pub fn gen_synthetic(kind: SyntheticKind, n: usize, num_classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::InvalidInput("need at least 2 classes".into()));
    }
    if n < num_classes {
        return Err(Error::InvalidInput(format!(
            "n = {n} is smaller than the class count {num_classes}"
        )));
    }
    if !noise.is_finite() || noise < 0.0 {
        return Err(Error::InvalidInput(format!("noise must be >= 0, got {noise}")));
    }
    if kind == SyntheticKind::TwoMoons && num_classes != 2 {
        return Err(Error::InvalidInput(format!(
            "two_moons is a binary generator, got C = {num_classes}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let tau = std::f64::consts::TAU;
    let mut samples: Vec<Sample> = (0..n)
        .map(|i| {
            let label = i % num_classes;
            let (x, y) = match kind {
                SyntheticKind::GaussianBlobs => {
                    let angle = tau * label as f64 / num_classes as f64;
                    (3.0 * angle.cos(), 3.0 * angle.sin())
                }
                SyntheticKind::TwoMoons => {
                    let t = rng.random_range(0.0..std::f64::consts::PI);
                    if label == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    }
                }
                SyntheticKind::ConcentricRings => {
                    let t = rng.random_range(0.0..tau);
                    let r = (label + 1) as f64;
                    (r * t.cos(), r * t.sin())
                }
            };
            let dx = noise * gauss.sample(&mut rng);
            let dy = noise * gauss.sample(&mut rng);
            Sample {
                features: vec![x + dx, y + dy],
                label,
            }
        })
        .collect();
    samples.shuffle(&mut rng);
    Dataset::new(kind.to_string(), num_classes, samples)
}

/// Reads `label,feature,...` rows; `C` is the largest label plus one. Blank
/// lines and lines starting with `#` are skipped.
pub fn load_csv_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    read_csv_dataset(BufReader::new(file), &name, &path.display().to_string())
}

pub fn read_csv_dataset<R: BufRead>(input: R, name: &str, location: &str) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let at = || format!("{location} line {lineno}");
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::format(at(), "expected a label and at least one feature"));
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(Error::format(
                    at(),
                    format!("row has {} fields, previous rows have {w}", fields.len()),
                ))
            }
            _ => {}
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| Error::format(at(), format!("label `{}` is not a class index", fields[0])))?;
        let features = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::format(at(), format!("feature `{f}` is not a finite number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample { features, label });
    }
    if samples.is_empty() {
        return Err(Error::format(location, "no data rows"));
    }
    let num_classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    Dataset::new(name, num_classes.max(2), samples).map_err(|e| Error::format(location, e.to_string()))
}

pub fn write_csv_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    for s in &dataset.samples {
        write!(out, "{}", s.label)?;
        for x in &s.features {
            write!(out, ",{x}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_csv_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_csv_dataset(dataset, BufWriter::new(File::create(path)?))
}
