//! Loss-based aggregation rules that know nothing about the experts' models.
//!
//! * EWA: exponentially weighted average forecaster (Vovk 1990; Cesa-Bianchi
//!   and Lugosi 2006), `rho ∝ rho_tilde0 exp(-eta Σ loss)`. The anytime rate
//!   is `eta_t = sqrt(8 ln M / t) / B_t` with `B_t` the largest per-step loss
//!   range observed so far.
//! * BOA: Bernstein online aggregation (Wintenberger 2017), the adaptive
//!   second-order update driven by the instantaneous excess losses
//!   `l_m = loss_m - loss_agg`:
//!   `rho ∝ eta ⊙ exp(-eta ⊙ Σ l (1 + eta_prev l)) ⊙ rho_tilde0` with
//!   `eta = min(sqrt(-ln rho_tilde0 / (1 + Σ l²)), 1 / (2 B))`, where `B` is
//!   the largest `|l|` seen so far. `eta_prev` is capped by the current `B`
//!   as well, so `|eta_prev l| <= 1/2` at every step.
//! * MLPoly: polynomially weighted average with multiple learning rates
//!   (Gaillard, Stoltz and van Erven 2014), `rho_m ∝ eta_m (R_m)_+` where
//!   `R_m` is the cumulative regret against expert `m` and
//!   `eta_m = 1 / (1 + Σ r_m²)`.
//!
//! With the gradient trick the losses are linearised at the aggregate:
//! `loss_m = 2 (y_agg - y) y_hat_m`.

use super::kao::{ada_init, ada_weights};
use super::{check_simplex, ln_weights, normalize, softmax_reweight, Rule, WeightState};
use crate::error::{KaoError, Result};

/// Per-expert losses together with the loss of the aggregate forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineInput {
    pub losses: Vec<f64>,
    pub agg_loss: f64,
}

impl BaselineInput {
    /// Square losses at observation `y`, linearised when `gradient_trick` is set.
    pub fn observed(y: f64, y_hat: &[f64], y_agg: f64, gradient_trick: bool) -> Self {
        if gradient_trick {
            let grad = 2.0 * (y_agg - y);
            Self {
                losses: y_hat.iter().map(|p| grad * p).collect(),
                agg_loss: grad * y_agg,
            }
        } else {
            Self {
                losses: y_hat.iter().map(|p| (p - y).powi(2)).collect(),
                agg_loss: (y_agg - y).powi(2),
            }
        }
    }
}

/// `sqrt(8 ln M / t) / range`, or 0 when the range is still zero.
pub fn ewa_anytime_rate(m: usize, t: usize, range: f64) -> f64 {
    if t == 0 || !(range > 0.0) {
        return 0.0;
    }
    (8.0 * (m as f64).ln() / t as f64).sqrt() / range
}

impl WeightState {
    /// Initial state for a baseline rule. `ewa_eta` fixes the EWA rate;
    /// `None` selects the anytime rate.
    pub fn baseline(rule: Rule, rho_tilde0: Vec<f64>, ewa_eta: Option<f64>) -> Result<Self> {
        check_simplex(&rho_tilde0)?;
        match rule {
            Rule::Ewa => {
                if let Some(eta) = ewa_eta {
                    if !(eta > 0.0 && eta.is_finite()) {
                        return Err(KaoError::InvalidArgument(format!(
                            "EWA rate must be positive, got {eta}"
                        )));
                    }
                }
                let mut s = WeightState::with_prior(rule, rho_tilde0, ewa_eta.unwrap_or(0.0))?;
                s.ewa_eta = ewa_eta;
                Ok(s)
            }
            Rule::Boa => ada_init(rule, &rho_tilde0),
            Rule::MlPoly => WeightState::with_prior(rule, rho_tilde0, 1.0),
            other => Err(KaoError::InvalidArgument(format!("{other} is not a baseline rule"))),
        }
    }
}

pub fn baseline_update(state: &WeightState, input: &BaselineInput) -> Result<WeightState> {
    if input.losses.len() != state.len() {
        return Err(KaoError::Dimension(format!(
            "{} losses for {} experts",
            input.losses.len(),
            state.len()
        )));
    }
    if input.losses.iter().any(|v| !v.is_finite()) || !input.agg_loss.is_finite() {
        return Err(KaoError::NonFinite("baseline losses".into()));
    }
    match state.rule {
        Rule::Ewa => Ok(ewa_update(state, &input.losses)),
        Rule::Boa => {
            let excess: Vec<f64> = input.losses.iter().map(|l| l - input.agg_loss).collect();
            Ok(boa_update(state, &excess))
        }
        Rule::MlPoly => Ok(mlpoly_update(state, input)),
        other => Err(KaoError::InvalidArgument(format!("{other} is not a baseline rule"))),
    }
}

fn ewa_update(state: &WeightState, losses: &[f64]) -> WeightState {
    let mut next = state.clone();
    next.t += 1;
    for (c, l) in next.cum_pseudo.iter_mut().zip(losses) {
        *c += l;
    }
    for (c, l) in next.cum_pseudo_sq.iter_mut().zip(losses) {
        *c += l * l;
    }
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    next.loss_range = next.loss_range.max(hi - lo);
    let eta = next
        .ewa_eta
        .unwrap_or_else(|| ewa_anytime_rate(next.len(), next.t, next.loss_range));
    next.eta.iter_mut().for_each(|e| *e = eta);
    let exponent: Vec<f64> = next.cum_pseudo.iter().map(|c| -eta * c).collect();
    next.rho = softmax_reweight(&ln_weights(&next.rho_tilde0), &exponent);
    next
}

fn boa_update(state: &WeightState, excess: &[f64]) -> WeightState {
    let mut next = state.clone();
    next.t += 1;
    let worst = excess.iter().fold(0.0_f64, |a, l| a.max(l.abs()));
    next.loss_range = next.loss_range.max(worst);
    let cap = if next.loss_range > 0.0 {
        0.5 / next.loss_range
    } else {
        f64::INFINITY
    };
    for (m, &l) in excess.iter().enumerate() {
        let eta_prev = state.eta[m].min(cap);
        next.cum_surrogate[m] += l * (1.0 + eta_prev * l);
        next.cum_pseudo[m] += l;
        next.cum_pseudo_sq[m] += l * l;
    }
    for m in 0..next.len() {
        let free = ((-next.rho_tilde0[m].ln()).max(0.0) / (1.0 + next.cum_pseudo_sq[m])).sqrt();
        next.eta[m] = free.min(cap);
    }
    next.rho = ada_weights(&next);
    next
}

fn mlpoly_update(state: &WeightState, input: &BaselineInput) -> WeightState {
    let mut next = state.clone();
    next.t += 1;
    for m in 0..next.len() {
        let r = input.agg_loss - input.losses[m];
        next.cum_pseudo[m] += r;
        next.cum_pseudo_sq[m] += r * r;
        next.eta[m] = 1.0 / (1.0 + next.cum_pseudo_sq[m]);
    }
    let w: Vec<f64> = (0..next.len())
        .map(|m| next.eta[m] * next.cum_pseudo[m].max(0.0) * next.rho_tilde0[m])
        .collect();
    next.rho = if w.iter().any(|&v| v > 0.0) {
        normalize(w)
    } else {
        next.rho_tilde0.clone()
    };
    next
}
