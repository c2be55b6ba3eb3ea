//! `exitlog v1`: per-layer head outputs for offline strategy evaluation.
//!
//! ```text
//! #exitlog v1 L=<layers> C=<classes>
//! <sample_id>,<gold>,<p[1][0]>,...,<p[1][C-1]>,<p[2][0]>,...,<p[L][C-1]>
//! ```
//!
//! One row per sample, layer-major and class-minor. Each layer's
//! probabilities must sum to 1 within 1e-6; they are renormalized on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Distribution;
use crate::model::{LayerTrace, MultiExitModel};

use super::Dataset;

/// Row-sum tolerance applied when loading.
pub const EXITLOG_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ExitLog {
    pub num_layers: usize,
    pub num_classes: usize,
    pub traces: Vec<LayerTrace>,
}

impl ExitLog {
    pub fn new(num_layers: usize, num_classes: usize, traces: Vec<LayerTrace>) -> Result<Self> {
        if num_layers == 0 || num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "exit log needs L >= 1 and C >= 2, got L = {num_layers}, C = {num_classes}"
            )));
        }
        for t in &traces {
            if t.num_layers() != num_layers || t.num_classes() != num_classes {
                return Err(Error::InvalidInput(format!(
                    "sample {} has {} layers over {} classes, expected {num_layers} x {num_classes}",
                    t.sample_id,
                    t.num_layers(),
                    t.num_classes()
                )));
            }
        }
        Ok(ExitLog {
            num_layers,
            num_classes,
            traces,
        })
    }

    /// Runs every sample through the full model.
    pub fn from_model(model: &MultiExitModel, data: &Dataset) -> Result<Self> {
        let cfg = model.config();
        if !data.is_empty() && data.input_dim() != cfg.input_dim {
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
        let traces = data
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| model.trace(i, s.label, &s.features))
            .collect::<Result<Vec<_>>>()?;
        ExitLog::new(cfg.num_layers, cfg.num_classes, traces)
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }
}

pub fn write_exitlog<W: Write>(log: &ExitLog, mut out: W) -> Result<()> {
    writeln!(out, "#exitlog v1 L={} C={}", log.num_layers, log.num_classes)?;
    for t in &log.traces {
        write!(out, "{},{}", t.sample_id, t.gold)?;
        for d in &t.dists {
            for p in d.probs() {
                write!(out, ",{p}")?;
            }
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn parse_header(line: &str, location: &str) -> Result<(usize, usize)> {
    let at = || format!("{location} line 1");
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some("#exitlog") {
        return Err(Error::format(at(), "missing `#exitlog` magic"));
    }
    match tokens.next() {
        Some("v1") => {}
        Some(v) => return Err(Error::format(at(), format!("unsupported exitlog version `{v}`"))),
        None => return Err(Error::format(at(), "missing version")),
    }
    let mut field = |name: &str| -> Result<usize> {
        let tok = tokens
            .next()
            .ok_or_else(|| Error::format(at(), format!("missing {name}=")))?;
        tok.strip_prefix(name)
            .and_then(|v| v.strip_prefix('='))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(at(), format!("expected {name}=<int>, got `{tok}`")))
    };
    let layers = field("L")?;
    let classes = field("C")?;
    if tokens.next().is_some() {
        return Err(Error::format(at(), "unexpected trailing header fields"));
    }
    if layers == 0 || classes < 2 {
        return Err(Error::format(at(), "need L >= 1 and C >= 2"));
    }
    Ok((layers, classes))
}

pub fn read_exitlog<R: BufRead>(input: R, location: &str) -> Result<ExitLog> {
    let mut lines = input.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => return Err(Error::format(location, "empty file")),
    };
    let (layers, classes) = parse_header(header.trim(), location)?;
    let columns = 2 + layers * classes;
    let mut traces = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let lineno = idx + 2;
        let at = || format!("{location} line {lineno}");
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != columns {
            return Err(Error::format(
                at(),
                format!("expected {columns} columns for L={layers} C={classes}, got {}", fields.len()),
            ));
        }
        let sample_id: usize = fields[0]
            .parse()
            .map_err(|_| Error::format(at(), format!("bad sample id `{}`", fields[0])))?;
        let gold: usize = fields[1]
            .parse()
            .map_err(|_| Error::format(at(), format!("bad gold label `{}`", fields[1])))?;
        if gold >= classes {
            return Err(Error::format(at(), format!("gold label {gold} out of range for C={classes}")));
        }
        let probs = fields[2..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::format(at(), format!("bad probability `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let dists = probs
            .chunks_exact(classes)
            .enumerate()
            .map(|(layer, row)| {
                Distribution::normalized(row.to_vec(), EXITLOG_SUM_TOLERANCE)
                    .map_err(|e| Error::format(at(), format!("layer {}: {e}", layer + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        traces.push(LayerTrace::new(sample_id, gold, dists).map_err(|e| Error::format(at(), e.to_string()))?);
    }
    ExitLog::new(layers, classes, traces)
}

/// Writes the traces of `data` under `model` to `path`.
pub fn dump_exitlog(model: &MultiExitModel, data: &Dataset, path: &Path) -> Result<ExitLog> {
    let log = ExitLog::from_model(model, data)?;
    write_exitlog(&log, BufWriter::new(File::create(path)?))?;
    Ok(log)
}

pub fn load_exitlog(path: &Path) -> Result<ExitLog> {
    let file = File::open(path)?;
    read_exitlog(BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExitLog> {
        read_exitlog(text.as_bytes(), "mem")
    }

    #[test]
    fn hand_written_log_parses() {
        let log = parse("#exitlog v1 L=2 C=2\n7,1,0.3,0.7,0.6,0.4\n").unwrap();
        assert_eq!((log.num_layers, log.num_classes, log.len()), (2, 2, 1));
        let t = &log.traces[0];
        assert_eq!((t.sample_id, t.gold), (7, 1));
        assert_eq!(t.dists[1].probs(), &[0.6, 0.4]);
        assert_eq!(t.predictions(), vec![1, 0]);
    }

    #[test]
    fn rejects_bad_rows() {
        for (text, needle) in [
            ("#exitlog v1 L=2 C=2\n0,0,0.6,0.6,0.5,0.5\n", "line 2"),
            ("#exitlog v1 L=2 C=2\n0,0,0.5,0.5\n", "columns"),
            ("#exitlog v2 L=2 C=2\n", "version"),
            ("#exitlg v1 L=2 C=2\n", "magic"),
            ("#exitlog v1 L=2\n", "C="),
            ("#exitlog v1 L=1 C=2\n0,2,0.5,0.5\n", "gold"),
            ("#exitlog v1 L=1 C=2\n0,0,0.5,x\n", "probability"),
            ("#exitlog v1 L=1 C=2\n0,0,1.5,-0.5\n", "layer 1"),
            ("", "empty"),
        ] {
            let err = parse(text).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "{text:?}: {err}");
            assert!(err.to_string().contains(needle), "{text:?}: {err}");
        }
    }

    #[test]
    fn small_sum_errors_are_renormalized() {
        let log = parse("#exitlog v1 L=1 C=2\n0,0,0.5,0.5000005\n").unwrap();
        let sum: f64 = log.traces[0].dists[0].probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn write_then_read_is_exact() {
        let t = LayerTrace::new(
            3,
            2,
            vec![
                crate::math::softmax(&[0.1, 2.0, -1.0]).unwrap(),
                crate::math::softmax(&[1e-3, 0.0, 5.5]).unwrap(),
            ],
        )
        .unwrap();
        let log = ExitLog::new(2, 3, vec![t]).unwrap();
        let mut buf = Vec::new();
        write_exitlog(&log, &mut buf).unwrap();
        let back = read_exitlog(buf.as_slice(), "mem").unwrap();
        for (a, b) in back.traces[0].dists.iter().zip(&log.traces[0].dists) {
            for (x, y) in a.probs().iter().zip(b.probs()) {
                assert!((x - y).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_exitlog(Path::new("/no/such/log")), Err(Error::Io(_))));
    }
}
