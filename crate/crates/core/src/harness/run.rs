//! Driving a bank over a stream and aggregating its forecasts.
//!
//! Experts never see the aggregation weights, so their forecasts are computed
//! once into an [`ExpertTrace`] and every rule is replayed on the same trace.

use serde::{Deserialize, Serialize};

use super::bank::ExpertBank;
use crate::aggregation::{
    aggregate, baseline_update, check_simplex, estimate_g, grad_theory_rate, kao_ada_init, kao_ada_update,
    kao_grad_update, kao_ml_init, kao_ml_update, kao_ms_update, ml_theory_rate, ms_theory_rate, pseudo_loss,
    BaselineInput, ExpertSnapshot, Rule, WeightState, G_INFLATION,
};
use crate::error::{KaoError, Result};
use crate::model::ObservationStream;
use crate::smoother::{em_fit, EmOptions};

/// Per-step forecasts of every expert, stored row-major (`[t][m]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertTrace {
    pub names: Vec<String>,
    /// Index of the first row in the original stream.
    pub t_offset: usize,
    pub y: Vec<f64>,
    pub y_hat: Vec<Vec<f64>>,
    /// `xᵀ P x`, the state part of the risk.
    pub state_var: Vec<Vec<f64>>,
    /// Observation variance in force at each step.
    pub sigma2: Vec<Vec<f64>>,
    pub mu: Option<Vec<f64>>,
    pub sigma2_truth: Option<f64>,
}

impl ExpertTrace {
    pub fn horizon(&self) -> usize {
        self.y.len()
    }

    pub fn n_experts(&self) -> usize {
        self.names.len()
    }

    pub fn risk_row(&self, t: usize) -> Vec<f64> {
        self.state_var[t]
            .iter()
            .zip(&self.sigma2[t])
            .map(|(v, s)| v + s)
            .collect()
    }

    /// Rows `start..`, keeping track of the offset.
    pub fn slice(&self, start: usize) -> Self {
        let s = start.min(self.horizon());
        Self {
            names: self.names.clone(),
            t_offset: self.t_offset + s,
            y: self.y[s..].to_vec(),
            y_hat: self.y_hat[s..].to_vec(),
            state_var: self.state_var[s..].to_vec(),
            sigma2: self.sigma2[s..].to_vec(),
            mu: self.mu.as_ref().map(|m| m[s..].to_vec()),
            sigma2_truth: self.sigma2_truth,
        }
    }

    /// Mean squared error of expert `m`.
    pub fn expert_mse(&self, m: usize) -> f64 {
        let n = self.horizon().max(1) as f64;
        self.y
            .iter()
            .zip(&self.y_hat)
            .map(|(y, row)| (row[m] - y).powi(2))
            .sum::<f64>()
            / n
    }

    /// Replace every expert's observation variance by its mean squared
    /// residual over the first `burn_in` steps (floored, then frozen).
    pub fn with_burn_in_sigma2(&self, burn_in: usize) -> Result<Self> {
        let mut out = self.clone();
        for m in 0..self.n_experts() {
            let y_hat: Vec<f64> = self.y_hat.iter().map(|r| r[m]).collect();
            let est = super::metrics::estimate_sigma2(&self.y, &y_hat, burn_in)?;
            if est.degenerate {
                log::warn!(
                    "expert {}: burn-in residual variance is degenerate, floored",
                    self.names[m]
                );
            }
            for row in &mut out.sigma2 {
                row[m] = est.value;
            }
        }
        Ok(out)
    }

    fn check(&self) -> Result<()> {
        let m = self.n_experts();
        let t = self.horizon();
        if m == 0 {
            return Err(KaoError::InvalidArgument("trace has no experts".into()));
        }
        let rows_ok = [&self.y_hat, &self.state_var, &self.sigma2]
            .iter()
            .all(|a| a.len() == t && a.iter().all(|r| r.len() == m));
        let mu_ok = self.mu.as_ref().is_none_or(|v| v.len() == t);
        if !rows_ok || !mu_ok {
            return Err(KaoError::Dimension("ragged expert trace".into()));
        }
        Ok(())
    }
}

/// Parameter re-estimation while filtering.
#[derive(Debug, Clone, PartialEq)]
pub enum Refit {
    None,
    /// After every `window` observations, fit each expert by EM on all data
    /// seen so far, then re-filter the history with the fitted parameters.
    Em {
        window: usize,
        options: EmOptions,
    },
}

/// Filter every expert along the stream.
pub fn run_experts(bank: &ExpertBank, stream: &ObservationStream, refit: &Refit) -> Result<ExpertTrace> {
    stream.validate()?;
    if let Refit::Em { window, .. } = refit {
        if *window < 2 * bank.max_dim() {
            return Err(KaoError::InvalidArgument(format!(
                "window {window} is shorter than twice the largest expert dimension {}",
                bank.max_dim()
            )));
        }
    }
    let mut bank = bank.clone();
    let horizon = stream.horizon();
    let m = bank.len();
    let mut y_hat = Vec::with_capacity(horizon);
    let mut state_var = Vec::with_capacity(horizon);
    let mut sigma2 = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let x = &stream.x[t];
        let mut p = Vec::with_capacity(m);
        let mut v = Vec::with_capacity(m);
        for e in &bank.experts {
            let (yh, var) = e.predict_parts(x)?;
            p.push(yh);
            v.push(var);
        }
        y_hat.push(p);
        state_var.push(v);
        sigma2.push(bank.experts.iter().map(|e| e.model.sigma2).collect());
        bank.observe_all(x, stream.y[t])?;

        if let Refit::Em { window, options } = refit {
            let seen = t + 1;
            if seen % window == 0 && seen < horizon {
                refit_bank(&mut bank, stream, seen, options)?;
            }
        }
    }
    Ok(ExpertTrace {
        names: bank.names(),
        t_offset: 0,
        y: stream.y.clone(),
        y_hat,
        state_var,
        sigma2,
        mu: stream.truth.as_ref().map(|tr| tr.mu.clone()),
        sigma2_truth: stream.truth.as_ref().map(|tr| tr.sigma2),
    })
}

fn refit_bank(bank: &mut ExpertBank, stream: &ObservationStream, seen: usize, options: &EmOptions) -> Result<()> {
    let x = &stream.x[..seen];
    let y = &stream.y[..seen];
    for e in &mut bank.experts {
        let design = e.features.design(x, y)?;
        match em_fit(&design, y, &e.model, options) {
            Ok(fit) => e.refilter(fit.model, x, y)?,
            Err(err) => log::warn!("EM refit of {} at t={seen} failed, keeping parameters: {err}", e.name),
        }
    }
    Ok(())
}

/// How a rule's learning rate is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateSpec {
    Fixed(f64),
    /// The rate of the rule's regret theorem with its bound estimated on the
    /// burn-in (KAO-MS, KAO-GRAD, KAO-ML).
    Theory,
    /// Parameter-free rules (KAO-ADA, BOA, MLPoly) and the anytime EWA rate.
    Adaptive,
    /// Every fixed rate of the grid; the one with the lowest MSE after the
    /// burn-in is kept (chosen in hindsight).
    Grid(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub rule: Rule,
    pub rate: RateSpec,
    /// Linearise the square loss at the aggregate (baselines only).
    pub gradient_trick: bool,
    /// Calibration period. Theory rates are estimated on it and their
    /// weights stay at the prior until it ends; grids are scored after it.
    pub burn_in: usize,
    /// Prior weights; uniform when absent.
    pub prior: Option<Vec<f64>>,
}

impl RuleSpec {
    /// The default rate for each rule: theory rates for the fixed-rate KAO
    /// rules, adaptive otherwise.
    pub fn default_for(rule: Rule, burn_in: usize) -> Self {
        let rate = match rule {
            Rule::KaoMs | Rule::KaoGrad | Rule::KaoMl => RateSpec::Theory,
            _ => RateSpec::Adaptive,
        };
        Self {
            rule,
            rate,
            gradient_trick: false,
            burn_in,
            prior: None,
        }
    }
}

/// Per-step log of one aggregation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub rule: Rule,
    pub names: Vec<String>,
    pub t_offset: usize,
    pub y: Vec<f64>,
    pub y_hat: Vec<Vec<f64>>,
    pub risk: Vec<Vec<f64>>,
    /// Weights used to forecast step `t`.
    pub rho: Vec<Vec<f64>>,
    /// Rates in force when forecasting step `t`.
    pub eta: Vec<Vec<f64>>,
    pub pseudo: Vec<Vec<f64>>,
    pub agg: Vec<f64>,
    pub sq_loss: Vec<f64>,
    pub mu: Option<Vec<f64>>,
    pub sigma2_truth: Option<f64>,
    pub burn_in: usize,
    pub rate_violations: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl RunRecord {
    pub fn horizon(&self) -> usize {
        self.y.len()
    }

    pub fn n_experts(&self) -> usize {
        self.names.len()
    }

    pub fn mse(&self) -> f64 {
        mean(&self.sq_loss)
    }

    /// Steps `start..`, keeping track of the offset. The weights and rates
    /// carry over, so this is the record of a run evaluated from `start`.
    pub fn slice(&self, start: usize) -> Self {
        let s = start.min(self.horizon());
        Self {
            rule: self.rule,
            names: self.names.clone(),
            t_offset: self.t_offset + s,
            y: self.y[s..].to_vec(),
            y_hat: self.y_hat[s..].to_vec(),
            risk: self.risk[s..].to_vec(),
            rho: self.rho[s..].to_vec(),
            eta: self.eta[s..].to_vec(),
            pseudo: self.pseudo[s..].to_vec(),
            agg: self.agg[s..].to_vec(),
            sq_loss: self.sq_loss[s..].to_vec(),
            mu: self.mu.as_ref().map(|m| m[s..].to_vec()),
            sigma2_truth: self.sigma2_truth,
            burn_in: self.burn_in.saturating_sub(s),
            rate_violations: self.rate_violations,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
        }
    }

    pub fn expert_column(&self, m: usize) -> Vec<f64> {
        self.y_hat.iter().map(|r| r[m]).collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Run one rule over a trace.
pub fn aggregate_trace(trace: &ExpertTrace, spec: &RuleSpec) -> Result<RunRecord> {
    trace.check()?;
    if let RateSpec::Grid(grid) = &spec.rate {
        if grid.is_empty() {
            return Err(KaoError::InvalidArgument("empty learning-rate grid".into()));
        }
        let mut best: Option<RunRecord> = None;
        for &eta in grid {
            let fixed = RuleSpec {
                rate: RateSpec::Fixed(eta),
                ..spec.clone()
            };
            let rec = aggregate_trace(trace, &fixed)?;
            let score = mean(&rec.sq_loss[spec.burn_in.min(rec.horizon())..]);
            let better = best
                .as_ref()
                .is_none_or(|b| score < mean(&b.sq_loss[spec.burn_in.min(b.horizon())..]));
            if better {
                best = Some(rec);
            }
        }
        return Ok(best.expect("grid is non-empty"));
    }

    let m = trace.n_experts();
    let horizon = trace.horizon();
    if spec.burn_in > horizon {
        return Err(KaoError::InvalidArgument(format!(
            "burn-in {} exceeds the horizon {horizon}",
            spec.burn_in
        )));
    }
    let prior = spec.prior.clone().unwrap_or_else(|| vec![1.0 / m as f64; m]);
    check_simplex(&prior)?;
    if prior.len() != m {
        return Err(KaoError::Dimension(format!(
            "{} prior weights for {m} experts",
            prior.len()
        )));
    }

    let (mut state, fixed_eta) = init_state(trace, spec, &prior)?;
    let frozen = if spec.rate == RateSpec::Theory { spec.burn_in } else { 0 };
    let mut rec = RunRecord {
        rule: spec.rule,
        names: trace.names.clone(),
        t_offset: trace.t_offset,
        y: trace.y.clone(),
        y_hat: trace.y_hat.clone(),
        risk: Vec::with_capacity(horizon),
        rho: Vec::with_capacity(horizon),
        eta: Vec::with_capacity(horizon),
        pseudo: Vec::with_capacity(horizon),
        agg: Vec::with_capacity(horizon),
        sq_loss: Vec::with_capacity(horizon),
        mu: trace.mu.clone(),
        sigma2_truth: trace.sigma2_truth,
        burn_in: spec.burn_in,
        rate_violations: 0,
        config_hash: String::new(),
        seed: 0,
    };
    for t in 0..horizon {
        let y = trace.y[t];
        let snap = ExpertSnapshot::new(trace.y_hat[t].clone(), trace.risk_row(t))?;
        // theory rates are fitted on the burn-in, so forecast with the prior until it ends
        let rho = if t < frozen { &prior } else { &state.rho };
        let agg = aggregate(rho, &snap.y_hat);
        let pseudo = pseudo_loss(&snap, rho)?;
        rec.rho.push(rho.clone());
        rec.eta.push(state.eta.clone());
        rec.agg.push(agg);
        rec.sq_loss.push((agg - y).powi(2));
        if t >= frozen {
            state = match spec.rule {
                Rule::KaoMs => kao_ms_update(&state, &snap, fixed_eta)?,
                Rule::KaoGrad => kao_grad_update(&state, &pseudo, fixed_eta)?,
                Rule::KaoMl => kao_ml_update(&state, &pseudo)?,
                Rule::KaoAda => kao_ada_update(&state, &pseudo)?,
                Rule::Ewa | Rule::Boa | Rule::MlPoly => baseline_update(
                    &state,
                    &BaselineInput::observed(y, &snap.y_hat, agg, spec.gradient_trick),
                )?,
            };
        }
        rec.risk.push(snap.risk);
        rec.pseudo.push(pseudo);
    }
    rec.rate_violations = state.rate_violations;
    Ok(rec)
}

/// Initial weights and, for single-rate rules, the rate.
fn init_state(trace: &ExpertTrace, spec: &RuleSpec, prior: &[f64]) -> Result<(WeightState, f64)> {
    let m = prior.len();
    let remaining = trace.horizon() - spec.burn_in;
    let rule = spec.rule;
    let bad_rate = || KaoError::InvalidArgument(format!("rate {:?} does not apply to rule {rule}", spec.rate));
    match (rule, &spec.rate) {
        (Rule::KaoMs, rate) => {
            let eta = match rate {
                RateSpec::Fixed(e) => *e,
                RateSpec::Theory => ms_theory_rate(burn_in_d(trace, spec.burn_in)?)?,
                _ => return Err(bad_rate()),
            };
            Ok((WeightState::with_prior(rule, prior.to_vec(), eta)?, eta))
        }
        (Rule::KaoGrad, rate) => {
            let eta = match rate {
                RateSpec::Fixed(e) => *e,
                RateSpec::Theory => {
                    let g = burn_in_g(trace, spec.burn_in, prior)?;
                    if m < 2 {
                        1.0 / g
                    } else {
                        grad_theory_rate(g, m, remaining.max(1))?
                    }
                }
                _ => return Err(bad_rate()),
            };
            Ok((WeightState::with_prior(rule, prior.to_vec(), eta)?, eta))
        }
        (Rule::KaoMl, rate) => {
            let etas = match rate {
                RateSpec::Fixed(e) => vec![*e; m],
                RateSpec::Theory => {
                    let g = burn_in_g(trace, spec.burn_in, prior)?;
                    prior
                        .iter()
                        .map(|&r| {
                            if m < 2 {
                                Ok(0.5 / g)
                            } else {
                                ml_theory_rate(g, r, remaining.max(1))
                            }
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                _ => return Err(bad_rate()),
            };
            Ok((kao_ml_init(prior, &etas)?, f64::NAN))
        }
        (Rule::KaoAda, RateSpec::Adaptive) => Ok((kao_ada_init(prior)?, f64::NAN)),
        (Rule::Ewa, RateSpec::Fixed(e)) => Ok((WeightState::baseline(rule, prior.to_vec(), Some(*e))?, f64::NAN)),
        (Rule::Ewa | Rule::Boa | Rule::MlPoly, RateSpec::Adaptive) => {
            Ok((WeightState::baseline(rule, prior.to_vec(), None)?, f64::NAN))
        }
        _ => Err(bad_rate()),
    }
}

fn need_burn_in(burn_in: usize) -> Result<()> {
    if burn_in == 0 {
        return Err(KaoError::InvalidArgument(
            "theory rates need a burn-in of at least one step".into(),
        ));
    }
    Ok(())
}

/// `G_INFLATION * max |y_hat - y|` over the burn-in, standing in for `D`.
fn burn_in_d(trace: &ExpertTrace, burn_in: usize) -> Result<f64> {
    need_burn_in(burn_in)?;
    let d = (0..burn_in)
        .flat_map(|t| trace.y_hat[t].iter().map(move |p| (p - trace.y[t]).abs()))
        .fold(0.0_f64, f64::max);
    if !(d > 0.0) || !d.is_finite() {
        return Err(KaoError::InvalidArgument(format!("burn-in gives a degenerate D ({d})")));
    }
    Ok(G_INFLATION * d)
}

/// Inflated `max |L|` over the burn-in with the prior weights held fixed.
fn burn_in_g(trace: &ExpertTrace, burn_in: usize, prior: &[f64]) -> Result<f64> {
    need_burn_in(burn_in)?;
    let mut all = Vec::with_capacity(burn_in * prior.len());
    for t in 0..burn_in {
        let snap = ExpertSnapshot::new(trace.y_hat[t].clone(), trace.risk_row(t))?;
        all.extend(pseudo_loss(&snap, prior)?);
    }
    estimate_g(&all)
}

/// Filter the bank without refits and aggregate with one rule.
pub fn run_online(bank: &ExpertBank, stream: &ObservationStream, spec: &RuleSpec) -> Result<RunRecord> {
    aggregate_trace(&run_experts(bank, stream, &Refit::None)?, spec)
}

/// Filter with optional windowed EM refits and aggregate with one rule.
pub fn sliding_window_refit(
    bank: &ExpertBank,
    stream: &ObservationStream,
    refit: &Refit,
    spec: &RuleSpec,
) -> Result<RunRecord> {
    aggregate_trace(&run_experts(bank, stream, refit)?, spec)
}
