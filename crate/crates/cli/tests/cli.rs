//! End-to-end checks of the `hcnaf` binary: exit codes, file outputs and
//! the density of an untrained checkpoint.

use std::path::Path;
use std::process::{Command, Output};

use hcnaf_cli::config::{Experiment, RunConfig};
use hcnaf_cli::experiment::{build_model, save_checkpoint};

fn hcnaf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcnaf"))
        .args(args)
        .env_remove("HCNAF_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).expect("utf-8 output")
}

/// Untrained toy-2 checkpoint whose flow is the identity to O(1e-10).
fn identity_checkpoint(dir: &Path) -> String {
    let mut cfg = RunConfig::defaults(Experiment::Toy2);
    cfg.hyper.init_input_scale = 1e-5;
    let model = build_model(&cfg).unwrap();
    let path = dir.join("identity.hcnaf");
    save_checkpoint(&model, &cfg, &path).unwrap();
    path.display().to_string()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(hcnaf(&[]).status.code(), Some(1));
    assert_eq!(hcnaf(&["train", "--experiment", "toy9"]).status.code(), Some(1));
    assert_eq!(hcnaf(&["config", "--experiment", "toy1", "--set", "train.nope=1"]).status.code(), Some(1));
    assert_eq!(hcnaf(&["density", "--checkpoint", "/nonexistent/x.hcnaf", "--condition", "0,0"]).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let o = hcnaf(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("gradcheck"));
}

#[test]
fn gradcheck_threshold_exit_code() {
    let base = ["gradcheck", "--experiment", "toy1", "--set", "data.n=100", "--batch", "4"];
    let ok = hcnaf(&base);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(stdout(&ok).contains("pass=true"));
    let strict: Vec<&str> = base.iter().copied().chain(["--tolerance", "0"]).collect();
    let o = hcnaf(&strict);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("pass=false"));
}

#[test]
fn config_output_parses_back() {
    let o = hcnaf(&["config", "--experiment", "toypom", "--set", "train.max_iters=7"]);
    assert_eq!(o.status.code(), Some(0));
    let cfg = RunConfig::parse(&stdout(&o)).unwrap();
    assert_eq!(cfg.experiment, Experiment::ToyPom);
    assert_eq!(cfg.train.max_iters, 7);
}

#[test]
fn paramcount_full_size_digits_heads() {
    let o = hcnaf(&["paramcount", "--dim", "784", "--cond-dim", "1", "--hidden-layers", "1", "--width-per-dim", "38"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().any(|l| l == "n_w=46713856"), "{}", stdout(&o));
}

#[test]
fn untrained_density_is_standard_normal() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path());
    let o = hcnaf(&["density", "--checkpoint", &ckpt, "--condition", "0.5,-1", "--bounds", "-3,3,-2,2", "--res", "12,8"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,y,density"));
    let mut rows = 0;
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        let expected = (-(v[0] * v[0] + v[1] * v[1]) / 2.0).exp() / (2.0 * std::f64::consts::PI);
        assert!((v[2] - expected).abs() < 1e-6, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 12 * 8);
}

#[test]
fn density_and_samples_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path());
    let pgm = |name: &str| {
        let path = dir.path().join(name);
        let o = hcnaf(&["density", "--checkpoint", &ckpt, "--condition", "1,1", "--format", "pgm", "--out", path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read(path).unwrap()
    };
    let a = pgm("a.pgm");
    assert!(a.starts_with(b"P5\n"));
    assert_eq!(a, pgm("b.pgm"));
    let sample = || stdout(&hcnaf(&["sample", "--checkpoint", &ckpt, "--condition", "1,1", "-n", "50", "--seed", "9"]));
    let s = sample();
    assert_eq!(s.lines().count(), 51);
    assert_eq!(s, sample());
}

#[test]
fn train_refuses_non_empty_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("keep.txt"), "x").unwrap();
    let out = dir.path().display().to_string();
    let args = ["train", "--experiment", "toy1", "--set", "train.max_iters=20", "--set", "data.n=200", "--out", &out];
    assert_eq!(hcnaf(&args).status.code(), Some(1));
    assert!(!dir.path().join("checkpoint.hcnaf").exists());
    let forced: Vec<&str> = args.iter().copied().chain(["--force"]).collect();
    let o = hcnaf(&forced);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.hcnaf", "metrics.csv", "config.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let e = hcnaf(&["eval", "--checkpoint", dir.path().join("checkpoint.hcnaf").to_str().unwrap(), "--set", "eval.n_samples=200", "--set", "eval.entropy_samples=2000"]);
    assert_eq!(e.status.code(), Some(0), "{}", String::from_utf8_lossy(&e.stderr));
    assert!(stdout(&e).contains("toy1.grid10.gap="));
}
