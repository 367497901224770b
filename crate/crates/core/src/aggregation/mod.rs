//! Exponential-weight aggregation of expert forecasts.
//!
//! The KAO rules feed each expert's predictive risk `xᵀPx + sigma2` (or the
//! centred linearised risk derived from it) into the weights. The baselines
//! only see observed losses.

mod baselines;
mod kao;
mod probe;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KaoError, Result};

pub use baselines::{baseline_update, ewa_anytime_rate, BaselineInput};
pub use kao::{
    ada_aggregation_bound, ada_rate_offset, estimate_g, grad_theory_rate, kao_ada_init, kao_ada_update,
    kao_grad_update, kao_ml_init, kao_ml_update, kao_ms_update, ml_selection_rate, ml_theory_rate, ms_theory_rate,
    G_INFLATION,
};
pub use probe::{exp_concavity_probe, phi_second_derivative};

/// Tolerance on `|Σρ - 1|` maintained by every update.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rule {
    #[serde(rename = "kao-ms")]
    KaoMs,
    #[serde(rename = "kao-grad")]
    KaoGrad,
    #[serde(rename = "kao-ml")]
    KaoMl,
    #[serde(rename = "kao-ada")]
    KaoAda,
    #[serde(rename = "ewa")]
    Ewa,
    #[serde(rename = "boa")]
    Boa,
    #[serde(rename = "mlpoly")]
    MlPoly,
}

impl Rule {
    pub const ALL: [Rule; 7] = [
        Rule::KaoMs,
        Rule::KaoGrad,
        Rule::KaoMl,
        Rule::KaoAda,
        Rule::Ewa,
        Rule::Boa,
        Rule::MlPoly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::KaoMs => "kao-ms",
            Rule::KaoGrad => "kao-grad",
            Rule::KaoMl => "kao-ml",
            Rule::KaoAda => "kao-ada",
            Rule::Ewa => "ewa",
            Rule::Boa => "boa",
            Rule::MlPoly => "mlpoly",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Rule::Ewa | Rule::Boa | Rule::MlPoly)
    }

    pub fn valid_names() -> String {
        Rule::ALL.iter().map(|r| r.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = KaoError;

    fn from_str(s: &str) -> Result<Self> {
        Rule::ALL
            .iter()
            .copied()
            .find(|r| r.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                KaoError::InvalidArgument(format!("unknown rule '{s}'; valid rules: {}", Rule::valid_names()))
            })
    }
}

/// Expert forecasts and predictive risks issued at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSnapshot {
    pub y_hat: Vec<f64>,
    pub risk: Vec<f64>,
}

impl ExpertSnapshot {
    pub fn new(y_hat: Vec<f64>, risk: Vec<f64>) -> Result<Self> {
        let s = Self { y_hat, risk };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.y_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_hat.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.y_hat.len() != self.risk.len() || self.y_hat.is_empty() {
            return Err(KaoError::Dimension(format!(
                "{} forecasts vs {} risks",
                self.y_hat.len(),
                self.risk.len()
            )));
        }
        if self.y_hat.iter().chain(&self.risk).any(|v| !v.is_finite()) {
            return Err(KaoError::NonFinite("expert snapshot".into()));
        }
        if let Some(m) = self.risk.iter().position(|&r| r <= 0.0) {
            return Err(KaoError::InvalidArgument(format!("risk of expert {m} is not positive")));
        }
        Ok(())
    }
}

/// Weights and learning-rate accumulators of one aggregation stream.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    pub rule: Rule,
    /// Current weights `rho_t`.
    pub rho: Vec<f64>,
    /// Prior weights.
    pub rho_tilde0: Vec<f64>,
    /// Σ pseudo-losses (EWA: Σ losses, MLPoly: Σ instantaneous regrets).
    pub cum_pseudo: Vec<f64>,
    /// Σ squared pseudo-losses (MLPoly: Σ squared regrets).
    pub cum_pseudo_sq: Vec<f64>,
    /// Σ `L_s (1 + eta_{s-1} L_s)` with the rate in force when `L_s` arrived.
    pub cum_surrogate: Vec<f64>,
    /// Per-expert learning rates currently in force.
    pub eta: Vec<f64>,
    /// Number of updates applied.
    pub t: usize,
    /// Updates where some `|eta L|` exceeded 1/2.
    pub rate_violations: usize,
    /// Fixed EWA rate; `None` selects the anytime rate.
    pub ewa_eta: Option<f64>,
    /// Largest loss range seen so far (EWA anytime rate).
    pub loss_range: f64,
}

impl WeightState {
    /// Uniform prior with every rate set to `eta`.
    pub fn uniform(rule: Rule, m: usize, eta: f64) -> Result<Self> {
        if m == 0 {
            return Err(KaoError::InvalidArgument("need at least one expert".into()));
        }
        Self::with_prior(rule, vec![1.0 / m as f64; m], eta)
    }

    pub fn with_prior(rule: Rule, rho_tilde0: Vec<f64>, eta: f64) -> Result<Self> {
        check_simplex(&rho_tilde0)?;
        let m = rho_tilde0.len();
        Ok(Self {
            rule,
            rho: rho_tilde0.clone(),
            rho_tilde0,
            cum_pseudo: vec![0.0; m],
            cum_pseudo_sq: vec![0.0; m],
            cum_surrogate: vec![0.0; m],
            eta: vec![eta; m],
            t: 0,
            rate_violations: 0,
            ewa_eta: None,
            loss_range: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub(crate) fn expect_rule(&self, rules: &[Rule]) -> Result<()> {
        if rules.contains(&self.rule) {
            Ok(())
        } else {
            Err(KaoError::InvalidArgument(format!(
                "state built for rule {} used with a {} update",
                self.rule,
                rules.iter().map(|r| r.name()).collect::<Vec<_>>().join("/")
            )))
        }
    }
}

pub fn check_simplex(rho: &[f64]) -> Result<()> {
    if rho.is_empty() {
        return Err(KaoError::InvalidArgument("empty weight vector".into()));
    }
    if rho.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) {
        return Err(KaoError::InvalidArgument(
            "weights must be finite and non-negative".into(),
        ));
    }
    let s: f64 = rho.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(KaoError::InvalidArgument(format!("weights sum to {s}, expected 1")));
    }
    Ok(())
}

/// `rho'_m ∝ exp(log_base_m + exponent_m)`, computed with a max shift.
/// Falls back to uniform if nothing survives normalisation.
pub(crate) fn softmax_reweight(log_base: &[f64], exponent: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = log_base.iter().zip(exponent).map(|(b, e)| b + e).collect();
    let top = logits
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let m = logits.len();
    if !top.is_finite() {
        return vec![1.0 / m as f64; m];
    }
    let w: Vec<f64> = logits
        .iter()
        .map(|&l| {
            if l.is_finite() || l == f64::NEG_INFINITY {
                (l - top).exp()
            } else {
                0.0
            }
        })
        .collect();
    normalize(w)
}

/// Scale non-negative weights to sum to one; uniform when the sum vanishes.
pub(crate) fn normalize(w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    let m = w.len();
    if !(s > 0.0) || !s.is_finite() {
        return vec![1.0 / m as f64; m];
    }
    w.into_iter().map(|v| v / s).collect()
}

pub(crate) fn ln_weights(rho: &[f64]) -> Vec<f64> {
    rho.iter().map(|r| r.ln()).collect()
}

/// `Σ rho_m y_hat_m`, clamped into `[min y_hat, max y_hat]`.
pub fn aggregate(rho: &[f64], y_hat: &[f64]) -> f64 {
    let s: f64 = rho.iter().zip(y_hat).map(|(r, y)| r * y).sum();
    let lo = y_hat.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    s.clamp(lo, hi)
}

/// Centred linearised risk:
/// `raw_m = risk_m - (y_agg - y_hat_m)²`, `L_m = raw_m - Σ rho_m' raw_m'`.
pub fn pseudo_loss(snap: &ExpertSnapshot, rho: &[f64]) -> Result<Vec<f64>> {
    snap.validate()?;
    if rho.len() != snap.len() {
        return Err(KaoError::Dimension(format!(
            "{} weights for {} experts",
            rho.len(),
            snap.len()
        )));
    }
    let y_agg: f64 = rho.iter().zip(&snap.y_hat).map(|(r, y)| r * y).sum();
    let raw: Vec<f64> = snap
        .risk
        .iter()
        .zip(&snap.y_hat)
        .map(|(r, y)| r - (y_agg - y).powi(2))
        .collect();
    Ok(center(&raw, rho))
}

/// `v - Σ rho v`, with one correction pass so that `Σ rho (v - c)` is at
/// rounding level of the centred values rather than of `v`.
pub(crate) fn center(v: &[f64], rho: &[f64]) -> Vec<f64> {
    let mean: f64 = rho.iter().zip(v).map(|(r, x)| r * x).sum();
    let mut out: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let resid: f64 = rho.iter().zip(&out).map(|(r, x)| r * x).sum();
    for x in &mut out {
        *x -= resid;
    }
    out
}
