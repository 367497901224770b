//! The four KAO weight updates and their learning-rate helpers.

use super::{check_simplex, ln_weights, softmax_reweight, ExpertSnapshot, Rule, WeightState};
use crate::error::{KaoError, Result};

/// Burn-in estimates of the pseudo-loss bound are inflated by this factor.
pub const G_INFLATION: f64 = 1.5;

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(KaoError::InvalidArgument(format!(
            "learning rate must be positive and finite, got {eta}"
        )))
    }
}

fn check_pseudo(state: &WeightState, pseudo: &[f64]) -> Result<()> {
    if pseudo.len() != state.len() {
        return Err(KaoError::Dimension(format!(
            "{} pseudo-losses for {} experts",
            pseudo.len(),
            state.len()
        )));
    }
    if pseudo.iter().any(|v| !v.is_finite()) {
        return Err(KaoError::NonFinite("pseudo-loss".into()));
    }
    Ok(())
}

fn accumulate(state: &mut WeightState, pseudo: &[f64]) {
    for (m, &l) in pseudo.iter().enumerate() {
        state.cum_pseudo[m] += l;
        state.cum_pseudo_sq[m] += l * l;
    }
}

/// Model selection: `rho_{t+1} ∝ exp(-eta * risk) rho_t`.
pub fn kao_ms_update(state: &WeightState, snap: &ExpertSnapshot, eta: f64) -> Result<WeightState> {
    state.expect_rule(&[Rule::KaoMs])?;
    check_eta(eta)?;
    snap.validate()?;
    if snap.len() != state.len() {
        return Err(KaoError::Dimension(format!(
            "{} risks for {} experts",
            snap.len(),
            state.len()
        )));
    }
    let exponent: Vec<f64> = snap.risk.iter().map(|r| -eta * r).collect();
    let mut next = state.clone();
    next.rho = softmax_reweight(&ln_weights(&state.rho), &exponent);
    next.eta.iter_mut().for_each(|e| *e = eta);
    next.t += 1;
    Ok(next)
}

/// Aggregation with the gradient trick: `rho_{t+1} ∝ exp(-eta L_t) rho_t`.
pub fn kao_grad_update(state: &WeightState, pseudo: &[f64], eta: f64) -> Result<WeightState> {
    state.expect_rule(&[Rule::KaoGrad])?;
    check_eta(eta)?;
    check_pseudo(state, pseudo)?;
    let exponent: Vec<f64> = pseudo.iter().map(|l| -eta * l).collect();
    let mut next = state.clone();
    next.rho = softmax_reweight(&ln_weights(&state.rho), &exponent);
    accumulate(&mut next, pseudo);
    next.eta.iter_mut().for_each(|e| *e = eta);
    next.t += 1;
    Ok(next)
}

/// Multiple fixed rates: `rho_0 ∝ eta ⊙ rho_tilde0`.
pub fn kao_ml_init(rho_tilde0: &[f64], eta: &[f64]) -> Result<WeightState> {
    check_simplex(rho_tilde0)?;
    if eta.len() != rho_tilde0.len() {
        return Err(KaoError::Dimension(format!(
            "{} rates for {} experts",
            eta.len(),
            rho_tilde0.len()
        )));
    }
    for &e in eta {
        check_eta(e)?;
    }
    let mut state = WeightState::with_prior(Rule::KaoMl, rho_tilde0.to_vec(), 0.0)?;
    let w: Vec<f64> = eta.iter().zip(rho_tilde0).map(|(e, r)| e * r).collect();
    let s: f64 = w.iter().sum();
    state.rho = w.into_iter().map(|v| v / s).collect();
    state.eta = eta.to_vec();
    Ok(state)
}

fn note_violations(state: &mut WeightState, pseudo: &[f64]) {
    let worst = pseudo
        .iter()
        .zip(&state.eta)
        .map(|(l, e)| (e * l).abs())
        .fold(0.0, f64::max);
    if worst > 0.5 {
        state.rate_violations += 1;
        log::debug!(
            "{} step {}: |eta * L| = {worst:.4} exceeds 1/2",
            state.rule,
            state.t + 1
        );
    }
}

/// Multiple fixed rates with the surrogate `L (1 + eta L)`.
pub fn kao_ml_update(state: &WeightState, pseudo: &[f64]) -> Result<WeightState> {
    state.expect_rule(&[Rule::KaoMl])?;
    check_pseudo(state, pseudo)?;
    let mut next = state.clone();
    note_violations(&mut next, pseudo);
    let mut exponent = Vec::with_capacity(pseudo.len());
    for (m, &l) in pseudo.iter().enumerate() {
        let eta = state.eta[m];
        let surrogate = l * (1.0 + eta * l);
        next.cum_surrogate[m] += surrogate;
        exponent.push(-eta * surrogate);
    }
    next.rho = softmax_reweight(&ln_weights(&state.rho), &exponent);
    accumulate(&mut next, pseudo);
    next.t += 1;
    Ok(next)
}

pub(crate) fn ada_init(rule: Rule, rho_tilde0: &[f64]) -> Result<WeightState> {
    check_simplex(rho_tilde0)?;
    let m = rho_tilde0.len();
    if m > 1 && rho_tilde0.iter().any(|&r| r <= 0.0 || r >= 1.0) {
        return Err(KaoError::InvalidArgument(
            "adaptive rates need every prior weight strictly inside (0, 1)".into(),
        ));
    }
    let mut state = WeightState::with_prior(rule, rho_tilde0.to_vec(), 0.0)?;
    state.eta = rho_tilde0.iter().map(|r| (-r.ln()).max(0.0).sqrt()).collect();
    state.rho = ada_weights(&state);
    Ok(state)
}

/// `rho ∝ eta ⊙ exp(-eta ⊙ cum_surrogate) ⊙ rho_tilde0`.
pub(crate) fn ada_weights(state: &WeightState) -> Vec<f64> {
    let log_base: Vec<f64> = state
        .eta
        .iter()
        .zip(&state.rho_tilde0)
        .map(|(e, r)| e.ln() + r.ln())
        .collect();
    let exponent: Vec<f64> = state
        .eta
        .iter()
        .zip(&state.cum_surrogate)
        .map(|(e, c)| if *e == 0.0 { 0.0 } else { -e * c })
        .collect();
    softmax_reweight(&log_base, &exponent)
}

/// Initial state for adaptive multiple rates: `eta_0 = sqrt(-ln rho_tilde0)`.
pub fn kao_ada_init(rho_tilde0: &[f64]) -> Result<WeightState> {
    ada_init(Rule::KaoAda, rho_tilde0)
}

fn ada_step(state: &WeightState, pseudo: &[f64]) -> Result<WeightState> {
    check_pseudo(state, pseudo)?;
    let mut next = state.clone();
    note_violations(&mut next, pseudo);
    for (m, &l) in pseudo.iter().enumerate() {
        // the rate in force before this observation multiplies the square term
        next.cum_surrogate[m] += l * (1.0 + state.eta[m] * l);
    }
    accumulate(&mut next, pseudo);
    for m in 0..next.len() {
        let num = (-next.rho_tilde0[m].ln()).max(0.0);
        next.eta[m] = (num / (1.0 + next.cum_pseudo_sq[m])).sqrt();
    }
    next.rho = ada_weights(&next);
    next.t += 1;
    Ok(next)
}

/// Adaptive multiple rates `eta_t = sqrt(-ln rho_tilde0 / (1 + Σ L²))`.
pub fn kao_ada_update(state: &WeightState, pseudo: &[f64]) -> Result<WeightState> {
    state.expect_rule(&[Rule::KaoAda])?;
    ada_step(state, pseudo)
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(KaoError::InvalidArgument(format!("{name} must be positive, got {v}")))
    }
}

/// `1 / (2 D²)`.
pub fn ms_theory_rate(d: f64) -> Result<f64> {
    check_positive("D", d)?;
    Ok(1.0 / (2.0 * d * d))
}

/// `(1/G) sqrt(2 ln M / t)`.
pub fn grad_theory_rate(g: f64, m: usize, t: usize) -> Result<f64> {
    check_positive("G", g)?;
    if m < 2 || t == 0 {
        return Err(KaoError::InvalidArgument(format!(
            "need M >= 2 and t >= 1 (M={m}, t={t})"
        )));
    }
    Ok((2.0 * (m as f64).ln() / t as f64).sqrt() / g)
}

/// `(1/G) min(sqrt(-ln rho_tilde0 / t), 1/2)`.
pub fn ml_theory_rate(g: f64, rho_tilde0: f64, t: usize) -> Result<f64> {
    check_positive("G", g)?;
    if !(rho_tilde0 > 0.0 && rho_tilde0 < 1.0) || t == 0 {
        return Err(KaoError::InvalidArgument(format!(
            "need 0 < rho_tilde0 < 1 and t >= 1 (got {rho_tilde0}, {t})"
        )));
    }
    Ok((-rho_tilde0.ln() / t as f64).sqrt().min(0.5) / g)
}

/// `1 / (8 max(2G, D²))`.
pub fn ml_selection_rate(g: f64, d: f64) -> Result<f64> {
    check_positive("G", g)?;
    check_positive("D", d)?;
    Ok(1.0 / (8.0 * (2.0 * g).max(d * d)))
}

/// Inflated burn-in bound `G_INFLATION * max |L|`.
pub fn estimate_g<'a>(pseudo: impl IntoIterator<Item = &'a f64>) -> Result<f64> {
    let g = pseudo.into_iter().fold(0.0_f64, |acc, l| acc.max(l.abs()));
    if !(g > 0.0) || !g.is_finite() {
        return Err(KaoError::InvalidArgument(format!(
            "burn-in pseudo-losses give a degenerate bound ({g})"
        )));
    }
    Ok(G_INFLATION * g)
}

/// `r_t = ln ln(e^{1/4} + G sqrt(t + 1)) / sqrt(-ln rho_tilde0)`.
pub fn ada_rate_offset(g: f64, rho_tilde0: f64, t: usize) -> f64 {
    let inner = (0.25_f64.exp() + g * ((t + 1) as f64).sqrt()).ln();
    inner.ln() / (-rho_tilde0.ln()).sqrt()
}

/// Aggregation-regret bound of the adaptive rule against the vertex of an
/// expert with pseudo-loss bound `g` and prior weight `rho_tilde0`:
/// `(G (3 + G) sqrt(t) + 1) (sqrt(-ln rho_tilde0) + r_t)`.
pub fn ada_aggregation_bound(g: f64, rho_tilde0: f64, t: usize) -> f64 {
    (g * (3.0 + g) * (t as f64).sqrt() + 1.0) * ((-rho_tilde0.ln()).sqrt() + ada_rate_offset(g, rho_tilde0, t))
}
