//! The `exitwise` command line.
//!
//! Every flag may also come from a `key=value` file passed with `--config`;
//! keys are long flag names without the dashes and flags given on the command
//! line win. `train` writes a `manifest.txt` in exactly that format, so
//! `exitwise train --config run/manifest.txt --out rerun` repeats a run.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::{
    compare_policies, early_exit_inference, evaluate, gen_synthetic, load_csv_dataset, load_exitlog, mean_pairwise_disagreement,
    per_layer_accuracy, sweep, write_exitlog, write_histogram_csv, write_report_csv, Dataset, ExitLog, PolicyGrid,
    SyntheticKind,
};
use crate::math::argmax_class;
use crate::model::{load_checkpoint, save_checkpoint, Activation, ModelConfig, MultiExitModel};
use crate::objective::{train, AlphaScheme, ObjectiveConfig, TrainOptions, TrainReport};
use crate::strategy::ExitPolicy;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// Environment variable capping the evaluation worker count.
pub const THREADS_ENV: &str = "EXITWISE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "exitwise", version, about = "Train multi-exit classifiers and evaluate early-exit strategies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, diagnostics and manifest.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Run a checkpoint over a dataset and write the per-layer exit log.
    #[command(args_override_self = true)]
    Dump(DumpArgs),
    /// Evaluate one or more exit policies on an exit log.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Sweep one policy parameter over a grid.
    #[command(args_override_self = true)]
    Sweep(SweepArgs),
    /// Accuracy and speed-up of the oracle exit.
    #[command(args_override_self = true)]
    Oracle(OracleArgs),
    /// Policy comparison table, exit histograms and per-layer accuracy.
    #[command(args_override_self = true)]
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Synthetic generator: gaussian_blobs, two_moons or concentric_rings.
    #[arg(long, required_unless_present = "csv", conflicts_with = "csv")]
    pub synthetic: Option<SyntheticKind>,
    /// CSV dataset with rows `label,feature,...`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Synthetic sample count.
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    /// Synthetic class count.
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Synthetic noise standard deviation.
    #[arg(long, default_value_t = 0.2)]
    pub noise: f64,
    /// Overrides the generator seed derived from `--seed`.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// key=value file supplying defaults for any flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; all other seeds are drawn from it unless overridden.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    /// Head hidden width, defaults to `--hidden`.
    #[arg(long)]
    pub head_hidden: Option<usize>,
    #[arg(long, default_value_t = Activation::Relu)]
    pub activation: Activation,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub residual: bool,
    /// Diversity weight, in [0, 1).
    #[arg(long, default_value_t = 0.2)]
    pub lambda: f64,
    #[arg(long, default_value_t = AlphaScheme::Uniform)]
    pub alpha_scheme: AlphaScheme,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub zero_last_beta: bool,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub adjacent_only: bool,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub target_gradient: bool,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Diagnostic interval in optimizer steps.
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Exit log destination.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed, as for `train`; the same seed regenerates the training set.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Also run this policy live, stopping each forward pass at its exit, and
    /// print the wall-clock time to stderr.
    #[arg(long)]
    pub timed_policy: Option<ExitPolicy>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// Policy string, e.g. `voting:delta=2.5,k=0.5`; repeatable.
    #[arg(long = "policy", required = true)]
    pub policies: Vec<ExitPolicy>,
    /// Report CSV destination, stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// Policy missing the swept parameter, e.g. `voting:k=0.5`.
    #[arg(long)]
    pub policy: String,
    /// `name=v1,v2,...` or `name=start:stop:step`.
    #[arg(long)]
    pub grid: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional per-layer exit histogram CSV.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long = "policy", required = true)]
    pub policies: Vec<ExitPolicy>,
    /// Receives comparison.csv, histogram.csv and layers.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Seeds for the three random consumers, drawn in a fixed order from the
/// master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub shuffle: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master);
        Seeds {
            data: rng.next_u64(),
            model: rng.next_u64(),
            shuffle: rng.next_u64(),
        }
    }
}

impl DataArgs {
    fn load(&self, seed: u64) -> Result<Dataset> {
        match (&self.synthetic, &self.csv) {
            (Some(kind), _) => gen_synthetic(*kind, self.samples, self.classes, self.noise, seed),
            (None, Some(path)) => load_csv_dataset(path),
            (None, None) => Err(Error::Config("need --synthetic or --csv".into())),
        }
    }

    fn manifest_lines(&self, seed: u64) -> Vec<(String, String)> {
        let mut lines = Vec::new();
        match (&self.synthetic, &self.csv) {
            (Some(kind), _) => {
                lines.push(("synthetic".into(), kind.to_string()));
                lines.push(("samples".into(), self.samples.to_string()));
                lines.push(("classes".into(), self.classes.to_string()));
                lines.push(("noise".into(), self.noise.to_string()));
                lines.push(("data-seed".into(), seed.to_string()));
            }
            (None, Some(path)) => lines.push(("csv".into(), path.display().to_string())),
            (None, None) => {}
        }
        lines
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Contract(_) => EXIT_USAGE,
        Error::InvalidInput(_) | Error::Format { .. } | Error::Io(_) => EXIT_DATA,
        Error::Diverged { .. } => EXIT_DIVERGED,
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_file(text: &str, location: &str) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("{location} line {}", idx + 1), "expected key=value"))?;
        let key = key.trim();
        if key.is_empty() || key == "config" {
            return Err(Error::format(
                format!("{location} line {}", idx + 1),
                format!("invalid key `{key}`"),
            ));
        }
        entries.push((key.to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

fn flag_name(arg: &OsString) -> Option<String> {
    let s = arg.to_str()?;
    let rest = s.strip_prefix("--")?;
    Some(rest.split_once('=').map_or(rest, |(k, _)| k).to_string())
}

/// Inserts `--key=value` for config entries whose flag is not already on the
/// command line, right after the subcommand name.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(sub) = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
        return Ok(args);
    };
    let sub = sub + 1;
    let mut config_path: Option<PathBuf> = None;
    let mut given = BTreeSet::new();
    let mut iter = args[sub + 1..].iter();
    while let Some(arg) = iter.next() {
        let Some(name) = flag_name(arg) else { continue };
        if name == "config" {
            let s = arg.to_string_lossy();
            config_path = match s.split_once('=') {
                Some((_, v)) => Some(PathBuf::from(v)),
                None => iter.next().map(PathBuf::from),
            };
        }
        given.insert(name);
    }
    let Some(path) = config_path else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)?;
    let entries = parse_config_file(&text, &path.display().to_string())?;
    let injected: Vec<OsString> = entries
        .into_iter()
        .filter(|(k, _)| !given.contains(k))
        .map(|(k, v)| OsString::from(format!("--{k}={v}")))
        .collect();
    let mut out = args[..=sub].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // a second call in the same process finds the pool already built
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

/// Runs the CLI and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::Dump(a) => cmd_dump(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Oracle(a) => cmd_oracle(&a),
        Command::Analyze(a) => cmd_analyze(&a),
    }
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn with_output(path: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => write(&mut create_file(p)?),
        None => write(&mut io::stdout().lock()),
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let objective = {
        let mut o = ObjectiveConfig::new(a.lambda, a.layers, a.alpha_scheme)?;
        o.zero_last_beta = a.zero_last_beta;
        o.adjacent_only = a.adjacent_only;
        o.target_gradient = a.target_gradient;
        o
    };
    let derived = Seeds::derive(a.seed);
    let seeds = Seeds {
        data: a.data.data_seed.unwrap_or(derived.data),
        model: a.model_seed.unwrap_or(derived.model),
        shuffle: a.shuffle_seed.unwrap_or(derived.shuffle),
    };
    let data = a.data.load(seeds.data)?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let config = ModelConfig {
        head_hidden_dim: a.head_hidden.unwrap_or(a.hidden),
        activation: a.activation,
        residual: a.residual,
        seed: seeds.model,
        ..ModelConfig::new(data.input_dim(), a.hidden, a.layers, data.num_classes)
    };
    let options = TrainOptions {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        log_every: a.log_every,
        shuffle_seed: seeds.shuffle,
    };
    let mut model = MultiExitModel::init(config)?;
    let report = train(&mut model, &data, &objective, &options)?;

    fs::create_dir_all(&a.out)?;
    save_checkpoint(&model, &a.out.join("model.mexm"))?;
    write_diagnostics(&report, &mut create_file(&a.out.join("diagnostics.csv"))?)?;
    write_closest(&report, &mut create_file(&a.out.join("closest_layers.csv"))?)?;
    write_losses(&report, &mut create_file(&a.out.join("train_loss.csv"))?)?;
    write_manifest(a, &seeds, &mut create_file(&a.out.join("manifest.txt"))?)?;

    let final_acc = data
        .samples
        .iter()
        .map(|s| model.forward(&s.features).map(|c| argmax_class(&c.dists()[a.layers - 1]) == s.label))
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&ok| ok)
        .count() as f64
        / data.len() as f64;
    println!(
        "trained {} steps, final epoch loss {}, final-layer train accuracy {final_acc}",
        report.steps,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

fn write_diagnostics(report: &TrainReport, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "step,layer,alpha,argmin_layer")?;
    for rec in &report.diagnostics {
        for d in &rec.layers {
            writeln!(out, "{},{},{},{}", rec.step, d.layer, d.alpha, d.argmin_layer)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn write_closest(report: &TrainReport, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "layer,closest_layer,percent")?;
    for (layer, row) in report.closest.percentages() {
        for (j, pct) in row.iter().enumerate() {
            writeln!(out, "{layer},{},{pct}", j + 1)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn write_losses(report: &TrainReport, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "epoch,loss")?;
    for (e, loss) in report.epoch_losses.iter().enumerate() {
        writeln!(out, "{},{loss}", e + 1)?;
    }
    out.flush()?;
    Ok(())
}

fn write_manifest(a: &TrainArgs, seeds: &Seeds, out: &mut dyn Write) -> Result<()> {
    let mut lines = a.data.manifest_lines(seeds.data);
    let mut push = |k: &str, v: String| lines.push((k.to_string(), v));
    push("seed", a.seed.to_string());
    push("model-seed", seeds.model.to_string());
    push("shuffle-seed", seeds.shuffle.to_string());
    push("layers", a.layers.to_string());
    push("hidden", a.hidden.to_string());
    push("head-hidden", a.head_hidden.unwrap_or(a.hidden).to_string());
    push("activation", a.activation.to_string());
    push("residual", a.residual.to_string());
    push("lambda", a.lambda.to_string());
    push("alpha-scheme", a.alpha_scheme.to_string());
    push("zero-last-beta", a.zero_last_beta.to_string());
    push("adjacent-only", a.adjacent_only.to_string());
    push("target-gradient", a.target_gradient.to_string());
    push("epochs", a.epochs.to_string());
    push("lr", a.lr.to_string());
    push("batch-size", a.batch_size.to_string());
    push("log-every", a.log_every.to_string());
    writeln!(out, "# exitwise train manifest")?;
    for (k, v) in lines {
        writeln!(out, "{k}={v}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn cmd_dump(a: &DumpArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let seed = a.data.data_seed.unwrap_or(Seeds::derive(a.seed).data);
    let data = a.data.load(seed)?;
    let log = ExitLog::from_model(&model, &data)?;
    write_exitlog(&log, create_file(&a.out)?)?;
    println!("wrote {} samples to {}", log.len(), a.out.display());
    if let Some(policy) = &a.timed_policy {
        let run = early_exit_inference(&model, &data, policy)?;
        let full = data.len() * log.num_layers;
        eprintln!(
            "{policy}: executed {} of {full} layers in {:.3} ms (wall clock, informational)",
            run.layers_executed,
            run.elapsed.as_secs_f64() * 1e3
        );
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let log = load_exitlog(&a.log)?;
    let rows = a
        .policies
        .iter()
        .map(|p| evaluate(&log, p))
        .collect::<Result<Vec<_>>>()?;
    with_output(a.out.as_deref(), |w| write_report_csv(&rows, w))
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let log = load_exitlog(&a.log)?;
    let grid = PolicyGrid::parse(&a.policy, &a.grid)?;
    let points = sweep(&log, &grid)?;
    if let Some(path) = &a.histogram {
        write_histogram_csv(&points, create_file(path)?)?;
    }
    with_output(a.out.as_deref(), |w| write_report_csv(&points, w))
}

pub fn cmd_oracle(a: &OracleArgs) -> Result<()> {
    let log = load_exitlog(&a.log)?;
    let row = evaluate(&log, &ExitPolicy::Oracle)?;
    with_output(a.out.as_deref(), |w| write_report_csv(&[row], w))
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let log = load_exitlog(&a.log)?;
    let rows = compare_policies(&log, &a.policies)?;
    fs::create_dir_all(&a.out_dir)?;
    write_report_csv(&rows, create_file(&a.out_dir.join("comparison.csv"))?)?;
    write_histogram_csv(&rows, create_file(&a.out_dir.join("histogram.csv"))?)?;
    let mut layers = create_file(&a.out_dir.join("layers.csv"))?;
    writeln!(layers, "layer,accuracy")?;
    for (l, acc) in per_layer_accuracy(&log).iter().enumerate() {
        writeln!(layers, "{},{acc}", l + 1)?;
    }
    layers.flush()?;
    println!("mean pairwise head disagreement {}", mean_pairwise_disagreement(&log));
    println!("wrote {}", a.out_dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(args: &[&str]) -> Vec<OsString> {
        args.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_parsing() {
        let entries = parse_config_file("# c\nlambda = 0.3\n\nlayers=4\n", "f").unwrap();
        assert_eq!(entries, vec![("lambda".into(), "0.3".into()), ("layers".into(), "4".into())]);
        assert!(parse_config_file("lambda\n", "f").is_err());
        assert!(parse_config_file("config=x\n", "f").is_err());
    }

    #[test]
    fn command_line_flags_win_over_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "lambda=0.3\nlayers=4\n").unwrap();
        let args = os(&["exitwise", "train", "--lambda", "0.1", "--config", cfg.to_str().unwrap()]);
        let expanded = expand_config(args).unwrap();
        let text: Vec<String> = expanded.iter().map(|a| a.to_string_lossy().into_owned()).collect();
        assert!(text.contains(&"--layers=4".to_string()));
        assert!(!text.iter().any(|a| a.starts_with("--lambda=")));
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let s = Seeds::derive(42);
        assert_eq!(s, Seeds::derive(42));
        assert_ne!(s, Seeds::derive(43));
        assert!(s.data != s.model && s.model != s.shuffle);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::format("f", "x")), 3);
        assert_eq!(exit_code(&Error::Io(io::Error::other("x"))), 3);
        assert_eq!(exit_code(&Error::Diverged { step: 0, message: "x".into() }), 4);
    }

    #[test]
    fn parses_subcommands() {
        let cli = Cli::try_parse_from(["exitwise", "eval", "--log", "x", "--policy", "voting:delta=2.0,k=0.5"]).unwrap();
        match cli.command {
            Command::Eval(a) => assert_eq!(a.policies, vec![ExitPolicy::voting(2.0, 0.5)]),
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["exitwise", "eval", "--log", "x", "--policy", "voting:k=0.5"]).is_err());
        assert!(Cli::try_parse_from(["exitwise", "train", "--out", "o", "--synthetic", "moons", "--bogus", "1"]).is_err());
        assert!(Cli::try_parse_from(["exitwise", "train", "--out", "o"]).is_err());
        let cli = Cli::try_parse_from(["exitwise", "train", "--out", "o", "--csv", "d.csv", "--residual"]).unwrap();
        match cli.command {
            Command::Train(a) => assert!(a.residual && !a.adjacent_only),
            other => panic!("{other:?}"),
        }
    }
}
