use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kao_cli::config::ExperimentConfig;
use kao_core::harness::record::{read_run_dir, read_summary};
use tempfile::TempDir;

const SMALL: &str = r#"
schema_version = 1
seed = 7

[synthetic]
horizon = 300
window = 100
n_experts = 6
em_iter = 3

[aggregation]
burn_in = 20
grid = [0.01, 0.1, 1.0]
"#;

fn kao(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kao"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert_ok(&kao(&["--config", s(&cfg), "--out", s(&a), "simulate"]));
    assert_ok(&kao(&["--config", s(&cfg), "--out", s(&b), "simulate"]));
    assert_ok(&kao(&["--config", s(&cfg), "--out", s(&c), "--seed", "8", "simulate"]));
    for f in ["stream.csv", "truth.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        assert_ne!(fs::read(a.join(f)).unwrap(), fs::read(c.join(f)).unwrap(), "{f}");
    }
    let stream = fs::read_to_string(a.join("stream.csv")).unwrap();
    assert_eq!(stream.lines().count(), 301);
    assert!(stream.lines().next().unwrap().ends_with(",y"));
}

#[test]
fn zero_noise_preset_writes_a_noiseless_truth() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("z");
    assert_ok(&kao(&[
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "simulate",
        "--preset",
        "zero-noise",
    ]));
    let saved = ExperimentConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(saved.synthetic.q_diag, 0.0);
    assert_eq!(saved.synthetic.sigma, 1e-4);
}

#[test]
fn invalid_rule_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let out = kao(&[
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("r")),
        "run",
        "--rules",
        "kao-ms,hedge",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in [
        "hedge", "kao-ms", "kao-grad", "kao-ml", "kao-ada", "ewa", "boa", "mlpoly",
    ] {
        assert!(err.contains(name), "{name} missing from: {err}");
    }
}

#[test]
fn bad_config_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "schema_version = 1\nlearning_rate = 3\n").unwrap();
    let out = kao(&["--config", s(&path), "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = kao(&["--config", s(&tmp.path().join("missing.toml")), "simulate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_and_plotdata_write_their_schemas() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("run");
    assert_ok(&kao(&[
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "run",
        "--rules",
        "kao-ms,kao-ada,ewa",
    ]));
    let saved = ExperimentConfig::load(&out.join("config.toml")).unwrap();
    for rule in ["kao-ms", "kao-ada", "ewa"] {
        let dir = out.join(rule);
        for f in ["config.toml", "steps.csv", "weights.csv", "summary.toml"] {
            assert!(dir.join(f).is_file(), "{rule}/{f}");
        }
        let summary = read_summary(&dir).unwrap();
        let rec = read_run_dir(&dir).unwrap();
        // the stored hash is reproducible from the stored configuration
        let own = ExperimentConfig::load(&dir.join("config.toml")).unwrap();
        assert_eq!(summary.config_hash, own.hash());
        assert_eq!(summary.config_hash, saved.hash());
        assert_eq!(summary.seed, 7);
        assert_eq!(rec.horizon(), 200);
        assert_eq!(rec.n_experts(), 6);
        assert!(summary.metrics.mse.is_finite());
        assert!(summary.metrics.mse >= summary.metrics.best_convex_mse - 1e-9);
    }
    let table = fs::read_to_string(out.join("relative_rmse.csv")).unwrap();
    assert!(table.starts_with("procedure,rmse,relative_rmse"));

    let plots = tmp.path().join("plots");
    assert_ok(&kao(&["--out", s(&plots), "plotdata", s(&out)]));
    let header = |f: &str| {
        fs::read_to_string(plots.join(f))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(header("cumulative_error.csv"), "t,rule,cum_sq_error,run");
    assert_eq!(header("predictions.csv"), "t,rule,run,y,y_agg,mu");
    assert_eq!(header("mse.csv"), "run,rule,mse,best_expert_mse,best_convex_mse");
    assert_eq!(header("weights.csv"), "t,rule,run,expert_id,expert,rho");
    let mse = fs::read_to_string(plots.join("mse.csv")).unwrap();
    assert_eq!(mse.lines().count(), 4);
    let cum = fs::read_to_string(plots.join("cumulative_error.csv")).unwrap();
    assert_eq!(cum.lines().count(), 1 + 3 * 200);
}

#[test]
fn run_on_a_written_stream_matches_the_simulated_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let sim = tmp.path().join("sim");
    assert_ok(&kao(&["--config", s(&cfg), "--out", s(&sim), "simulate"]));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_ok(&kao(&[
        "--config",
        s(&cfg),
        "--out",
        s(&a),
        "run",
        "--rules",
        "kao-grad",
    ]));
    let stream = sim.join("stream.csv");
    assert_ok(&kao(&[
        "--config",
        s(&cfg),
        "--out",
        s(&b),
        "run",
        "--rules",
        "kao-grad",
        "--stream",
        s(&stream),
    ]));
    let ra = read_run_dir(&a.join("kao-grad")).unwrap();
    let rb = read_run_dir(&b.join("kao-grad")).unwrap();
    assert_eq!(ra.y, rb.y);
    assert_eq!(ra.agg, rb.agg);
    assert_eq!(ra.mu, rb.mu);
}

#[test]
fn replications_get_their_own_directories() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("reps");
    assert_ok(&kao(&[
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "run",
        "--rules",
        "boa",
        "--replications",
        "2",
    ]));
    let a = read_summary(&out.join("rep_000/boa")).unwrap();
    let b = read_summary(&out.join("rep_001/boa")).unwrap();
    assert_ne!(a.seed, b.seed);
    assert_ne!(a.metrics.mse, b.metrics.mse);
}

#[test]
fn plotdata_rejects_missing_and_empty_inputs() {
    let tmp = TempDir::new().unwrap();
    let out = kao(&["--out", s(&tmp.path().join("p")), "plotdata"]);
    assert_eq!(out.status.code(), Some(2));
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = kao(&["--out", s(&tmp.path().join("p")), "plotdata", s(&empty)]);
    assert_eq!(out.status.code(), Some(1));
    let out = kao(&[
        "--out",
        s(&tmp.path().join("p")),
        "plotdata",
        s(&tmp.path().join("nope")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn em_fit_writes_parameters() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let sim = tmp.path().join("sim");
    assert_ok(&kao(&["--config", s(&cfg), "--out", s(&sim), "simulate"]));
    let out = tmp.path().join("em");
    let stream = sim.join("stream.csv");
    assert_ok(&kao(&[
        "--out",
        s(&out),
        "em-fit",
        "--data",
        s(&stream),
        "--iterations",
        "5",
    ]));
    let text = fs::read_to_string(out.join("em_fit.toml")).unwrap();
    let v: toml::Value = toml::from_str(&text).unwrap();
    let iterations = v["iterations"].as_integer().unwrap() as usize;
    assert!((1..=5).contains(&iterations));
    let ll: Vec<f64> = v["loglik"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_float().unwrap())
        .collect();
    assert_eq!(ll.len(), iterations + 1);
    for w in ll.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
    }
    assert!(v["sigma2"].as_float().unwrap() > 0.0);
    assert_eq!(v["q"].as_array().unwrap().len(), 5);
}
