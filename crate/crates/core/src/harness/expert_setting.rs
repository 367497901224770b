//! Correction of black-box forecasters.
//!
//! Each forecast `f_{m,t}` becomes a Kalman expert on `(1, f_{m,t}, e_{m,t-1})`
//! with `K = I`. `Q` and `sigma2` are fitted by EM on the first part of the
//! data and the rest is used for evaluation. For comparison, the same split
//! drives a direct AR(1) correction of each forecaster's residuals.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use super::bank::{build_correction_bank, BankTemplate};
use super::metrics::SIGMA2_FLOOR;
use super::run::{run_experts, ExpertTrace, Refit};
use crate::error::{KaoError, Result};
use crate::model::ObservationStream;
use crate::rng;
use crate::smoother::{em_fit, EmOptions};

/// Index of the first evaluation step.
pub fn split_index(horizon: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(KaoError::InvalidArgument(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let s = (horizon as f64 * fraction).floor() as usize;
    if s == 0 || s >= horizon {
        return Err(KaoError::InvalidArgument(format!(
            "split {fraction} of {horizon} steps leaves an empty part"
        )));
    }
    Ok(s)
}

/// Corrected experts: EM on `..split`, then a fresh filter over the whole
/// stream with the fitted parameters. Returns the evaluation part.
pub fn correction_trace(
    stream: &ObservationStream,
    template: &BankTemplate,
    fraction: f64,
    options: &EmOptions,
) -> Result<ExpertTrace> {
    stream.validate()?;
    let split = split_index(stream.horizon(), fraction)?;
    let names = column_names(stream);
    let mut bank = build_correction_bank(&names, template)?;
    let (x, y) = (&stream.x[..split], &stream.y[..split]);
    for e in &mut bank.experts {
        let design = e.features.design(x, y)?;
        match em_fit(&design, y, &e.model, options) {
            Ok(fit) => {
                log::debug!(
                    "{}: EM stopped after {} iterations, loglik {:.6}",
                    e.name,
                    fit.iterations,
                    fit.loglik.last().copied().unwrap_or(f64::NAN)
                );
                e.refilter(fit.model, &[], &[])?
            }
            Err(err) => log::warn!("EM fit of {} failed, keeping the template: {err}", e.name),
        }
    }
    Ok(run_experts(&bank, stream, &Refit::None)?.slice(split))
}

fn column_names(stream: &ObservationStream) -> Vec<String> {
    if stream.names.len() == stream.dim() {
        stream.names.clone()
    } else {
        (0..stream.dim()).map(|j| format!("f{j}")).collect()
    }
}

/// The raw forecasts as a trace (zero state variance, in-sample residual
/// variance on `..split`). Returns the evaluation part.
pub fn raw_trace(stream: &ObservationStream, fraction: f64) -> Result<ExpertTrace> {
    stream.validate()?;
    let split = split_index(stream.horizon(), fraction)?;
    let y_hat: Vec<Vec<f64>> = stream.x.iter().map(|r| r.iter().copied().collect()).collect();
    trace_from_forecasts(stream, y_hat, split)
}

/// `f_t + a + phi e_{t-1}` with `(a, phi)` fitted by least squares on the
/// residuals of `..split`. Returns the evaluation part.
pub fn ar1_correction_trace(stream: &ObservationStream, fraction: f64) -> Result<ExpertTrace> {
    stream.validate()?;
    let split = split_index(stream.horizon(), fraction)?;
    let m = stream.dim();
    let n = stream.horizon();
    let mut y_hat = vec![vec![0.0; m]; n];
    for j in 0..m {
        let e: Vec<f64> = (0..n).map(|t| stream.y[t] - stream.x[t][j]).collect();
        let (a, phi) = ar1_fit(&e[..split]);
        for t in 0..n {
            let prev = if t == 0 { 0.0 } else { e[t - 1] };
            y_hat[t][j] = stream.x[t][j] + a + phi * prev;
        }
    }
    trace_from_forecasts(stream, y_hat, split)
}

/// Least squares `e_t ≈ a + phi e_{t-1}`.
pub fn ar1_fit(e: &[f64]) -> (f64, f64) {
    if e.len() < 3 {
        return (0.0, 0.0);
    }
    let prev = &e[..e.len() - 1];
    let next = &e[1..];
    let n = prev.len() as f64;
    let mx = prev.iter().sum::<f64>() / n;
    let my = next.iter().sum::<f64>() / n;
    let sxx: f64 = prev.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = prev.iter().zip(next).map(|(x, y)| (x - mx) * (y - my)).sum();
    let phi = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - phi * mx, phi)
}

fn trace_from_forecasts(stream: &ObservationStream, y_hat: Vec<Vec<f64>>, split: usize) -> Result<ExpertTrace> {
    let m = stream.dim();
    let sigma2: Vec<f64> = (0..m)
        .map(|j| {
            let s = (0..split).map(|t| (stream.y[t] - y_hat[t][j]).powi(2)).sum::<f64>() / split as f64;
            s.max(SIGMA2_FLOOR)
        })
        .collect();
    let n = stream.horizon();
    let trace = ExpertTrace {
        names: column_names(stream),
        t_offset: 0,
        y: stream.y.clone(),
        y_hat,
        state_var: vec![vec![0.0; m]; n],
        sigma2: vec![sigma2; n],
        mu: None,
        sigma2_truth: None,
    };
    Ok(trace.slice(split))
}

/// A stand-in for a panel of black-box forecasters: a seasonal signal with
/// AR(1) noise, and `m` forecasts each off by a bias, a scale error and its
/// own persistent AR(1) error.
pub fn simulate_black_box(m: usize, horizon: usize, seed: u64) -> Result<ObservationStream> {
    if m == 0 || horizon < 4 {
        return Err(KaoError::InvalidArgument(
            "need at least one forecaster and four steps".into(),
        ));
    }
    let mut sig = rng::stream(seed, rng::STREAM_OBS_NOISE);
    let mut noise = 0.0;
    let y: Vec<f64> = (0..horizon)
        .map(|t| {
            noise = 0.7 * noise + sig.sample::<f64, _>(StandardNormal);
            let season = (2.0 * std::f64::consts::PI * t as f64 / 7.0).sin();
            50.0 + 10.0 * season + 3.0 * noise
        })
        .collect();
    let mut cols = vec![vec![0.0; horizon]; m];
    for (j, col) in cols.iter_mut().enumerate() {
        let mut r = rng::stream(seed, rng::STREAM_EXPERT_BASE + j as u64);
        let bias = 4.0 * r.sample::<f64, _>(StandardNormal);
        let scale = 1.0 + 0.1 * r.sample::<f64, _>(StandardNormal);
        let phi = 0.5 + 0.45 * r.random::<f64>();
        let sd = 1.0 + 2.0 * r.random::<f64>();
        let mut err = 0.0;
        for t in 0..horizon {
            err = phi * err + sd * r.sample::<f64, _>(StandardNormal);
            col[t] = bias + scale * y[t] + err;
        }
    }
    let x = (0..horizon)
        .map(|t| DVector::from_iterator(m, cols.iter().map(|c| c[t])))
        .collect();
    let mut stream = ObservationStream::new(x, y)?;
    stream.names = (1..=m).map(|j| format!("E{j}")).collect();
    Ok(stream)
}
