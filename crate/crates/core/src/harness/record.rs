//! Run directories: `config.toml`, `steps.csv`, `weights.csv`, `summary.toml`.
//!
//! Floats in CSV files are written with 17 significant digits so a reload is
//! bit-identical. Time indices are 1-based positions in the original stream.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use super::run::RunRecord;
use crate::aggregation::Rule;
use crate::error::{KaoError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const STEPS_FILE: &str = "steps.csv";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const SUMMARY_FILE: &str = "summary.toml";

/// Format a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rule: Rule,
    pub config_hash: String,
    pub seed: u64,
    pub horizon: usize,
    pub t_offset: usize,
    pub burn_in: usize,
    pub sigma2_truth: Option<f64>,
    pub experts: Vec<String>,
    pub metrics: MetricsReport,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| KaoError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| KaoError::io(path, e))
}

/// Write `record` into `dir`, creating it if needed.
pub fn write_run_dir(dir: &Path, record: &RunRecord, config_toml: &str, metrics: &MetricsReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| KaoError::io(dir, e))?;
    write_text(&dir.join(CONFIG_FILE), config_toml)?;
    write_steps(&dir.join(STEPS_FILE), record)?;
    write_weights(&dir.join(WEIGHTS_FILE), record)?;
    let summary = Summary {
        rule: record.rule,
        config_hash: record.config_hash.clone(),
        seed: record.seed,
        horizon: record.horizon(),
        t_offset: record.t_offset,
        burn_in: record.burn_in,
        sigma2_truth: record.sigma2_truth,
        experts: record.names.clone(),
        metrics: metrics.clone(),
    };
    let text = toml::to_string(&summary).map_err(|e| KaoError::Config(e.to_string()))?;
    write_text(&dir.join(SUMMARY_FILE), &text)
}

fn write_steps(path: &Path, r: &RunRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| KaoError::csv(path, e))?;
    let m = r.n_experts();
    let mut header = vec![
        "t".to_string(),
        "y".into(),
        "y_agg".into(),
        "sq_loss".into(),
        "mu".into(),
    ];
    for prefix in ["yhat", "risk", "rho"] {
        header.extend((0..m).map(|j| format!("{prefix}_{j}")));
    }
    w.write_record(&header).map_err(|e| KaoError::csv(path, e))?;
    for t in 0..r.horizon() {
        let mut row = vec![
            (r.t_offset + t + 1).to_string(),
            fmt_f64(r.y[t]),
            fmt_f64(r.agg[t]),
            fmt_f64(r.sq_loss[t]),
            r.mu.as_ref().map(|mu| fmt_f64(mu[t])).unwrap_or_default(),
        ];
        for arr in [&r.y_hat, &r.risk, &r.rho] {
            row.extend(arr[t].iter().map(|v| fmt_f64(*v)));
        }
        w.write_record(&row).map_err(|e| KaoError::csv(path, e))?;
    }
    w.flush().map_err(|e| KaoError::io(path, e))
}

fn write_weights(path: &Path, r: &RunRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| KaoError::csv(path, e))?;
    w.write_record(["t", "rule", "expert_id", "rho", "eta", "pseudo_loss"])
        .map_err(|e| KaoError::csv(path, e))?;
    for t in 0..r.horizon() {
        let step = (r.t_offset + t + 1).to_string();
        for j in 0..r.n_experts() {
            w.write_record([
                step.as_str(),
                r.rule.name(),
                &j.to_string(),
                &fmt_f64(r.rho[t][j]),
                &fmt_f64(r.eta[t][j]),
                &fmt_f64(r.pseudo[t][j]),
            ])
            .map_err(|e| KaoError::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| KaoError::io(path, e))
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join(SUMMARY_FILE);
    toml::from_str(&read_text(&path)?).map_err(|e| KaoError::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn parse(path: &Path, field: &str) -> Result<f64> {
    field.parse().map_err(|_| KaoError::Parse {
        path: path.display().to_string(),
        reason: format!("'{field}' is not a number"),
    })
}

/// Load a run directory written by [`write_run_dir`].
pub fn read_run_dir(dir: &Path) -> Result<RunRecord> {
    let summary = read_summary(dir)?;
    let m = summary.experts.len();
    let n = summary.horizon;

    let steps = dir.join(STEPS_FILE);
    let mut reader = csv::Reader::from_path(&steps).map_err(|e| KaoError::csv(&steps, e))?;
    let mut y = Vec::with_capacity(n);
    let mut agg = Vec::with_capacity(n);
    let mut sq_loss = Vec::with_capacity(n);
    let mut mu = Vec::with_capacity(n);
    let mut y_hat = Vec::with_capacity(n);
    let mut risk = Vec::with_capacity(n);
    let mut rho = Vec::with_capacity(n);
    for rec in reader.records() {
        let rec = rec.map_err(|e| KaoError::csv(&steps, e))?;
        if rec.len() != 5 + 3 * m {
            return Err(KaoError::Parse {
                path: steps.display().to_string(),
                reason: format!("expected {} columns, found {}", 5 + 3 * m, rec.len()),
            });
        }
        y.push(parse(&steps, &rec[1])?);
        agg.push(parse(&steps, &rec[2])?);
        sq_loss.push(parse(&steps, &rec[3])?);
        if !rec[4].is_empty() {
            mu.push(parse(&steps, &rec[4])?);
        }
        let block = |k: usize| -> Result<Vec<f64>> { (0..m).map(|j| parse(&steps, &rec[5 + k * m + j])).collect() };
        y_hat.push(block(0)?);
        risk.push(block(1)?);
        rho.push(block(2)?);
    }

    let weights = dir.join(WEIGHTS_FILE);
    let mut reader = csv::Reader::from_path(&weights).map_err(|e| KaoError::csv(&weights, e))?;
    let mut eta = vec![vec![0.0; m]; y.len()];
    let mut pseudo = vec![vec![0.0; m]; y.len()];
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| KaoError::csv(&weights, e))?;
        let (t, j) = (i / m.max(1), i % m.max(1));
        if t >= y.len() {
            return Err(KaoError::Parse {
                path: weights.display().to_string(),
                reason: "more weight rows than steps".into(),
            });
        }
        eta[t][j] = parse(&weights, &rec[4])?;
        pseudo[t][j] = parse(&weights, &rec[5])?;
    }

    if y.len() != n {
        return Err(KaoError::Parse {
            path: steps.display().to_string(),
            reason: format!("{} rows, summary says {n}", y.len()),
        });
    }
    Ok(RunRecord {
        rule: summary.rule,
        names: summary.experts,
        t_offset: summary.t_offset,
        mu: (mu.len() == n).then_some(mu),
        y,
        y_hat,
        risk,
        rho,
        eta,
        pseudo,
        agg,
        sq_loss,
        sigma2_truth: summary.sigma2_truth,
        burn_in: summary.burn_in,
        rate_violations: summary.metrics.rate_violations,
        config_hash: summary.config_hash,
        seed: summary.seed,
    })
}
