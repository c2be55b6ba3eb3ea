use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_exitwise");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("EXITWISE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--synthetic", "two_moons", "--samples", "200", "--layers", "4", "--hidden", "8", "--epochs", "3",
];

fn train_small(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["train", "--out", p(&out)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn dump_small(dir: &Path, run_dir: &Path) -> PathBuf {
    let log = dir.join("run.exitlog");
    let model = run_dir.join("model.mexm");
    ok(&[
        "dump", "--model", p(&model), "--synthetic", "two_moons", "--samples", "200", "--data-seed", "9", "--out",
        p(&log), "--timed-policy", "patience:s=2",
    ]);
    log
}

#[test]
fn lambda_grid_gives_four_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut checkpoints = Vec::new();
    for lambda in ["0.1", "0.2", "0.3", "0.5"] {
        let run_dir = train_small(dir.path(), &format!("lambda{lambda}"), &["--lambda", lambda]);
        for file in ["model.mexm", "diagnostics.csv", "closest_layers.csv", "train_loss.csv", "manifest.txt"] {
            assert!(run_dir.join(file).is_file(), "{file} missing for lambda {lambda}");
        }
        checkpoints.push(fs::read(run_dir.join("model.mexm")).unwrap());
    }
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(checkpoints[i], checkpoints[j]);
        }
    }
}

#[test]
fn rerun_from_manifest_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let first = train_small(dir.path(), "first", &["--seed", "7", "--lambda", "0.3"]);
    let manifest = first.join("manifest.txt");
    let text = fs::read_to_string(&manifest).unwrap();
    assert!(text.contains("lambda=0.3") && text.contains("seed=7"), "{text}");

    let second = dir.path().join("second");
    ok(&["train", "--config", p(&manifest), "--out", p(&second)]);
    for file in ["model.mexm", "diagnostics.csv", "closest_layers.csv", "train_loss.csv", "manifest.txt"] {
        assert_eq!(
            fs::read(first.join(file)).unwrap(),
            fs::read(second.join(file)).unwrap(),
            "{file} differs"
        );
    }

    // a different master seed changes the result
    let third = train_small(dir.path(), "third", &["--seed", "8", "--lambda", "0.3"]);
    assert_ne!(
        fs::read(first.join("model.mexm")).unwrap(),
        fs::read(third.join("model.mexm")).unwrap()
    );
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("base.txt");
    fs::write(&cfg, "synthetic=two_moons\nsamples=200\nlayers=4\nhidden=8\nepochs=2\nlambda=0.3\n").unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--lambda", "0.1", "--out", p(&out)]);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("lambda=0.1\n"), "{manifest}");
    assert!(manifest.contains("layers=4\n"), "{manifest}");
}

#[test]
fn lambda_out_of_range_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad");
    for lambda in ["1.0", "-0.1", "1.5"] {
        let flag = format!("--lambda={lambda}");
        let mut args = vec!["train", "--out", p(&out), flag.as_str()];
        args.extend_from_slice(SMALL);
        let res = run(&args);
        assert_eq!(res.status.code(), Some(2), "lambda {lambda}");
        let err = String::from_utf8_lossy(&res.stderr);
        assert!(err.contains("we suggest lambda in (0, 1)"), "{err}");
    }
    assert!(!out.exists());
}

#[test]
fn divergence_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", p(dir.path()), "--lr", "1e300"];
    args.extend_from_slice(SMALL);
    assert_eq!(run(&args).status.code(), Some(4));
}

#[test]
fn usage_and_format_exit_codes() {
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.exitlog");
    fs::write(&bad, "#exitlog v1 L=2 C=2\n0,0,0.6,0.6,0.5,0.5\n").unwrap();
    let res = run(&["oracle", "--log", p(&bad)]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 2"));

    let missing = dir.path().join("missing.exitlog");
    assert_eq!(run(&["oracle", "--log", p(&missing)]).status.code(), Some(3));
    assert_eq!(
        run(&["eval", "--log", p(&bad), "--policy", "voting:delta=2"]).status.code(),
        Some(2),
        "policy parameters have no silent defaults"
    );
}

#[test]
fn evaluation_commands() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = train_small(dir.path(), "run", &[]);
    let log = dump_small(dir.path(), &run_dir);
    let text = fs::read_to_string(&log).unwrap();
    assert!(text.starts_with("#exitlog v1 L=4 C=2\n"));
    assert_eq!(text.lines().count(), 201);

    let oracle = ok(&["oracle", "--log", p(&log)]);
    let lines: Vec<&str> = oracle.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "policy,params,accuracy,speedup,mean_exit_layer");
    assert!(lines[1].starts_with("oracle,,"));

    let sweep_csv = dir.path().join("sweep.csv");
    let hist = dir.path().join("hist.csv");
    ok(&[
        "sweep", "--log", p(&log), "--policy", "voting:k=0.5", "--grid", "delta=1.5,2.5", "--out", p(&sweep_csv),
        "--histogram", p(&hist),
    ]);
    let sweep_text = fs::read_to_string(&sweep_csv).unwrap();
    assert_eq!(sweep_text.lines().count(), 3, "{sweep_text}");
    assert_eq!(fs::read_to_string(&hist).unwrap().lines().count(), 1 + 2 * 4);

    let eval = ok(&["eval", "--log", p(&log), "--policy", "voting:delta=2.0,k=0.5", "--policy", "patience:s=2"]);
    let rows: Vec<&str> = eval.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("voting,delta=2;k=0.5,"), "{}", rows[1]);
    assert!(rows[2].starts_with("patience,s=2,"), "{}", rows[2]);

    let analysis = dir.path().join("analysis");
    ok(&[
        "analyze", "--log", p(&log), "--policy", "hybrid:voting:delta=2,k=0.5+entropy:t=0.15", "--out-dir",
        p(&analysis),
    ]);
    let cmp = fs::read_to_string(analysis.join("comparison.csv")).unwrap();
    assert_eq!(cmp.lines().count(), 3);
    assert_eq!(fs::read_to_string(analysis.join("layers.csv")).unwrap().lines().count(), 5);

    // outputs are deterministic
    let again = ok(&["eval", "--log", p(&log), "--policy", "voting:delta=2.0,k=0.5", "--policy", "patience:s=2"]);
    assert_eq!(eval, again);
}

#[test]
fn thread_cap_must_be_positive() {
    let res = Command::new(BIN)
        .args(["oracle", "--log", "x"])
        .env("EXITWISE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
}
