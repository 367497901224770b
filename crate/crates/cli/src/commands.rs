//! Subcommand implementations. Every output is a function of the resolved
//! configuration and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use kao_core::aggregation::Rule;
use kao_core::harness::expert_setting::{ar1_correction_trace, correction_trace, raw_trace, simulate_black_box};
use kao_core::harness::metrics::relative_rmse_table;
use kao_core::harness::record::{fmt_f64, read_run_dir, read_summary, write_run_dir, SUMMARY_FILE};
use kao_core::harness::replication::{simulate_synthetic, synthetic_trace, SyntheticSpec};
use kao_core::harness::{aggregate_trace, metrics, ExpertTrace, RunRecord};
use kao_core::model::{read_stream_csv, ObservationStream, SimulationTruth};
use kao_core::rng::derive_seed;
use kao_core::smoother::{em_fit, EmOptions};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, ExpertKind};
use crate::{Failure, Preset};

pub const STREAM_FILE: &str = "stream.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const RELATIVE_RMSE_FILE: &str = "relative_rmse.csv";
pub const CUMULATIVE_FILE: &str = "cumulative_error.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const MSE_FILE: &str = "mse.csv";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const EM_FILE: &str = "em_fit.toml";

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

/// The zero-noise preset: no state noise and `sigma2 = 1e-8`.
pub fn zero_noise(spec: &SyntheticSpec) -> SyntheticSpec {
    SyntheticSpec {
        q_diag: 0.0,
        q_off: 0.0,
        sigma: 1e-4,
        ..spec.clone()
    }
}

/// Simulated stream for one seed: the covariate study for subset experts,
/// a forecaster panel otherwise.
pub fn simulated_stream(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<ObservationStream> {
    Ok(match cfg.experts.kind {
        ExpertKind::Subsets => simulate_synthetic(&cfg.synthetic, seed)?.stream,
        _ => simulate_black_box(cfg.experts.forecasters, cfg.synthetic.horizon, seed)?,
    })
}

pub fn simulate(cfg: &ExperimentConfig, preset: Preset) -> Result<(), Failure> {
    let mut cfg = cfg.clone();
    if preset == Preset::ZeroNoise {
        cfg.synthetic = zero_noise(&cfg.synthetic);
    }
    let stream = simulated_stream(&cfg, cfg.seed)?;
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(CONFIG_FILE), &cfg.to_toml())?;
    write_stream(&cfg.out.join(STREAM_FILE), &stream, &cfg.experts.response)?;
    if let Some(truth) = &stream.truth {
        write_truth(&cfg.out.join(TRUTH_FILE), truth)?;
    }
    println!("wrote {} steps to {}", stream.horizon(), cfg.out.display());
    Ok(())
}

fn write_stream(path: &Path, stream: &ObservationStream, response: &str) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = if stream.names.len() == stream.dim() {
        stream.names.clone()
    } else {
        (0..stream.dim()).map(|j| format!("x{j}")).collect()
    };
    if header.iter().any(|h| h == response) {
        bail!("response name '{response}' collides with a design column");
    }
    header.push(response.to_string());
    w.write_record(&header)?;
    for (x, y) in stream.x.iter().zip(&stream.y) {
        let mut row: Vec<String> = x.iter().map(|v| fmt_f64(*v)).collect();
        row.push(fmt_f64(*y));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_truth(path: &Path, truth: &SimulationTruth) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    let d = truth.theta_path.first().map_or(0, |t| t.len());
    let mut header = vec!["t".to_string(), "mu".into(), "sigma2".into()];
    header.extend((0..d).map(|j| format!("theta_{j}")));
    w.write_record(&header)?;
    for (t, (mu, theta)) in truth.mu.iter().zip(&truth.theta_path).enumerate() {
        let mut row = vec![(t + 1).to_string(), fmt_f64(*mu), fmt_f64(truth.sigma2)];
        row.extend(theta.iter().map(|v| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Attach `truth.csv` from the stream's directory when present.
fn read_truth(path: &Path, horizon: usize) -> anyhow::Result<SimulationTruth> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut mu = Vec::new();
    let mut sigma2 = f64::NAN;
    let mut theta_path = Vec::new();
    for rec in r.records() {
        let rec = rec.with_context(|| format!("reading {}", path.display()))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("non-numeric field in {}", path.display()))?;
        if vals.len() < 3 {
            bail!("{}: expected t, mu, sigma2 columns", path.display());
        }
        mu.push(vals[1]);
        sigma2 = vals[2];
        theta_path.push(DVector::from_vec(vals[3..].to_vec()));
    }
    if mu.len() != horizon {
        bail!("{} has {} rows, the stream has {horizon}", path.display(), mu.len());
    }
    let d = theta_path.first().map_or(0, |t: &DVector<f64>| t.len());
    Ok(SimulationTruth {
        theta_path,
        mu,
        state_noise: Vec::new(),
        theta0: DVector::zeros(d),
        sigma2,
    })
}

pub fn load_stream(cfg: &ExperimentConfig, path: &Path) -> anyhow::Result<ObservationStream> {
    let mut stream = read_stream_csv(path, &cfg.experts.response, cfg.experts.normalize)?;
    let truth = path.with_file_name(TRUTH_FILE);
    if truth.exists() {
        stream.truth = Some(read_truth(&truth, stream.horizon())?);
    }
    Ok(stream)
}

/// Expert forecasts for the configured pipeline.
pub fn expert_trace(cfg: &ExperimentConfig, stream: &ObservationStream) -> anyhow::Result<ExpertTrace> {
    let e = &cfg.experts;
    let trace = match e.kind {
        ExpertKind::Subsets => synthetic_trace(&cfg.synthetic, stream)?,
        ExpertKind::Correction => {
            let opts = EmOptions {
                n_iter: e.em_iter,
                tol: e.em_tol,
                ..EmOptions::default()
            };
            correction_trace(stream, &e.template, e.split_fraction, &opts)?
        }
        ExpertKind::Ar1 => ar1_correction_trace(stream, e.split_fraction)?,
        ExpertKind::Raw => raw_trace(stream, e.split_fraction)?,
    };
    if cfg.aggregation.sigma2_from_burn_in {
        return Ok(trace.with_burn_in_sigma2(cfg.aggregation.burn_in)?);
    }
    Ok(trace)
}

/// Per-rule evaluation MSE of one run.
pub type RunSummary = Vec<(Rule, f64)>;

/// Aggregate `stream` with every configured rule and write the run
/// directories under `dir`.
pub fn run_stream(
    cfg: &ExperimentConfig,
    stream: &ObservationStream,
    seed: u64,
    dir: &Path,
) -> Result<RunSummary, Failure> {
    let specs = cfg.aggregation.rule_specs()?;
    let trace = expert_trace(cfg, stream)?;
    if cfg.aggregation.burn_in >= trace.horizon() {
        return Err(Failure::usage(format!(
            "burn-in {} leaves nothing to evaluate in {} steps",
            cfg.aggregation.burn_in,
            trace.horizon()
        )));
    }
    let hash = cfg.hash();
    let toml = cfg.to_toml();
    let mut evaluated = Vec::with_capacity(specs.len());
    let mut summary = Vec::with_capacity(specs.len());
    for spec in &specs {
        let mut rec = aggregate_trace(&trace, spec)?;
        rec.config_hash = hash.clone();
        rec.seed = seed;
        let eval = rec.slice(spec.burn_in);
        let report = metrics(&eval)?;
        write_run_dir(&dir.join(spec.rule.name()), &rec, &toml, &report)?;
        summary.push((spec.rule, report.mse));
        evaluated.push(eval);
    }
    write_relative_rmse(&dir.join(RELATIVE_RMSE_FILE), &evaluated)?;
    Ok(summary)
}

fn write_relative_rmse(path: &Path, records: &[RunRecord]) -> anyhow::Result<()> {
    let labels: Vec<String> = records.iter().map(|r| r.rule.name().to_string()).collect();
    let table = relative_rmse_table(records, &labels)?;
    let mut w = csv_writer(path)?;
    w.write_record(["procedure", "rmse", "relative_rmse"])?;
    for row in table {
        w.write_record([row.procedure, fmt_f64(row.rmse), fmt_f64(row.relative)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(cfg: &ExperimentConfig, stream: Option<&Path>) -> Result<(), Failure> {
    cfg.aggregation.rule_specs()?;
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(CONFIG_FILE), &cfg.to_toml())?;
    if let Some(path) = stream {
        if cfg.replications > 1 {
            return Err(Failure::usage("replications apply to simulated streams only"));
        }
        let data = load_stream(cfg, path)?;
        let summary = run_stream(cfg, &data, cfg.seed, &cfg.out)?;
        print_table(&summary);
        return Ok(());
    }
    if cfg.replications == 1 {
        let data = simulated_stream(cfg, cfg.seed)?;
        let summary = run_stream(cfg, &data, cfg.seed, &cfg.out)?;
        print_table(&summary);
        return Ok(());
    }
    let results: Vec<Result<RunSummary, Failure>> = (0..cfg.replications)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, i as u64);
            let data = simulated_stream(cfg, seed)?;
            run_stream(cfg, &data, seed, &cfg.out.join(replication_dir(i)))
        })
        .collect();
    let mut by_rule: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for r in results {
        for (rule, mse) in r? {
            by_rule.entry(rule.name()).or_default().push(mse);
        }
    }
    println!("{:<10} {:>14} {:>14}", "rule", "median mse", "mean mse");
    for (rule, v) in by_rule {
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        let median = if s.len() % 2 == 1 {
            s[s.len() / 2]
        } else {
            0.5 * (s[s.len() / 2 - 1] + s[s.len() / 2])
        };
        println!(
            "{rule:<10} {median:>14.6} {:>14.6}",
            v.iter().sum::<f64>() / v.len() as f64
        );
    }
    Ok(())
}

pub fn replication_dir(i: usize) -> String {
    format!("rep_{i:03}")
}

fn print_table(summary: &RunSummary) {
    println!("{:<10} {:>14}", "rule", "mse");
    for (rule, mse) in summary {
        println!("{:<10} {mse:>14.6}", rule.name());
    }
}

/// Every run directory (one holding a summary) under the given paths, sorted.
pub fn find_runs(paths: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
        if dir.join(SUMMARY_FILE).is_file() {
            out.push(dir.to_path_buf());
            return Ok(());
        }
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for e in entries {
            walk(&e, out)?;
        }
        Ok(())
    }
    let mut out = Vec::new();
    for p in paths {
        if !p.is_dir() {
            bail!("run directory {} does not exist", p.display());
        }
        walk(p, &mut out)?;
    }
    if out.is_empty() {
        bail!("no run directories found");
    }
    Ok(out)
}

/// Label of a run: its parent directory.
fn run_label(dir: &Path) -> String {
    dir.parent()
        .map(|p| p.display().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| ".".into())
}

pub fn plotdata(paths: &[PathBuf], out: &Path) -> Result<(), Failure> {
    if paths.is_empty() {
        return Err(Failure::usage("plotdata needs at least one run directory"));
    }
    let runs = find_runs(paths)?;
    create_dir(out)?;
    let mut cum = csv_writer(&out.join(CUMULATIVE_FILE))?;
    cum.write_record(["t", "rule", "cum_sq_error", "run"])?;
    let mut pred = csv_writer(&out.join(PREDICTIONS_FILE))?;
    pred.write_record(["t", "rule", "run", "y", "y_agg", "mu"])?;
    let mut mse = csv_writer(&out.join(MSE_FILE))?;
    mse.write_record(["run", "rule", "mse", "best_expert_mse", "best_convex_mse"])?;
    let mut weights = csv_writer(&out.join(WEIGHTS_FILE))?;
    weights.write_record(["t", "rule", "run", "expert_id", "expert", "rho"])?;

    for dir in &runs {
        let rec = read_run_dir(dir)?;
        let summary = read_summary(dir)?;
        let label = run_label(dir);
        let rule = rec.rule.name();
        let mut total = 0.0;
        for t in 0..rec.horizon() {
            let step = (rec.t_offset + t + 1).to_string();
            total += rec.sq_loss[t];
            cum.write_record([step.as_str(), rule, &fmt_f64(total), &label])?;
            let mu = rec.mu.as_ref().map(|m| fmt_f64(m[t])).unwrap_or_default();
            pred.write_record([
                step.as_str(),
                rule,
                &label,
                &fmt_f64(rec.y[t]),
                &fmt_f64(rec.agg[t]),
                &mu,
            ])?;
            for (j, name) in rec.names.iter().enumerate() {
                weights.write_record([
                    step.as_str(),
                    rule,
                    &label,
                    &j.to_string(),
                    name,
                    &fmt_f64(rec.rho[t][j]),
                ])?;
            }
        }
        let m = &summary.metrics;
        mse.write_record([
            label.as_str(),
            rule,
            &fmt_f64(m.mse),
            &fmt_f64(m.best_expert_mse),
            &fmt_f64(m.best_convex_mse),
        ])?;
    }
    for w in [&mut cum, &mut pred, &mut mse, &mut weights] {
        w.flush().context("flushing plot data")?;
    }
    println!("collected {} runs into {}", runs.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EmReport {
    columns: Vec<String>,
    iterations: usize,
    loglik: Vec<f64>,
    sigma2: f64,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    theta0: Vec<f64>,
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn em_fit_csv(cfg: &ExperimentConfig, data: &Path, estimate_theta0: bool) -> Result<(), Failure> {
    let stream = read_stream_csv(data, &cfg.experts.response, cfg.experts.normalize)?;
    let init = cfg.experts.template.model(stream.dim())?;
    let opts = EmOptions {
        fixed_k: true,
        estimate_theta0,
        n_iter: cfg.experts.em_iter,
        tol: cfg.experts.em_tol,
    };
    let fit = em_fit(&stream.x, &stream.y, &init, &opts)?;
    let report = EmReport {
        columns: stream.names.clone(),
        iterations: fit.iterations,
        loglik: fit.loglik.clone(),
        sigma2: fit.model.sigma2,
        q: rows(&fit.model.q),
        k: rows(&fit.model.k),
        theta0: fit.model.theta0.iter().copied().collect(),
    };
    create_dir(&cfg.out)?;
    let text = toml::to_string(&report).context("serialising the EM report")?;
    write_file(&cfg.out.join(EM_FILE), &text)?;
    println!(
        "EM: {} iterations, loglik {:.6}, sigma2 {:.6}",
        fit.iterations,
        fit.loglik.last().copied().unwrap_or(f64::NAN),
        fit.model.sigma2
    );
    Ok(())
}
