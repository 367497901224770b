//! Synthetic study: 5 covariates on `[0, 1]`, a 2-dimensional random-walk
//! truth on (square of the first, cube of the second), and a bank of
//! covariate-subset experts refitted by EM on a sliding window.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bank::{auto_subsets, build_subset_bank, BankTemplate};
use super::run::{aggregate_trace, run_experts, ExpertTrace, RateSpec, Refit, RuleSpec, RunRecord};
use crate::aggregation::Rule;
use crate::error::{KaoError, Result};
use crate::model::{simulate_ssm, transform_design, uniform_design, ObservationStream, StateSpaceModel, Transform};
use crate::rng;
use crate::smoother::EmOptions;

pub const COVARIATE_NAMES: [&str; 5] = ["temperature2", "gas3", "fuel", "charcoal", "nebulosity"];
pub const TRANSFORMS: [Transform; 5] = [
    Transform::Square,
    Transform::Cube,
    Transform::Identity,
    Transform::Identity,
    Transform::Identity,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub horizon: usize,
    /// Diagonal of the true `Q`.
    pub q_diag: f64,
    /// Off-diagonal of the true `Q`.
    pub q_off: f64,
    /// Observation noise standard deviation.
    pub sigma: f64,
    /// Mean of every coordinate of the random `theta_0`.
    pub theta0_mean: f64,
    /// Covariates (after transform) driving the truth.
    pub true_columns: Vec<usize>,
    pub n_experts: usize,
    /// Starting parameters of every expert.
    pub template: BankTemplate,
    /// EM refit period.
    pub window: usize,
    /// Refit by EM every `window` steps; otherwise filter with the template.
    pub refit: bool,
    pub em_iter: usize,
    pub em_tol: f64,
    pub estimate_theta0: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            horizon: 5000,
            q_diag: 1.0,
            q_off: 0.9,
            sigma: 1.5,
            theta0_mean: 500.0,
            true_columns: vec![0, 1],
            n_experts: 28,
            template: BankTemplate {
                q: 1.0,
                p0: 1e6,
                sigma2: 1.0,
                theta0: 0.0,
            },
            window: 500,
            refit: true,
            em_iter: 10,
            em_tol: 1e-6,
            estimate_theta0: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(KaoError::Config("horizon must be positive".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(KaoError::Config("sigma must be positive".into()));
        }
        if self.true_columns.is_empty() || self.true_columns.iter().any(|&c| c >= COVARIATE_NAMES.len()) {
            return Err(KaoError::Config(
                "true_columns must be a non-empty subset of 0..5".into(),
            ));
        }
        if self.window == 0 {
            return Err(KaoError::Config("window must be positive".into()));
        }
        if self.em_iter == 0 {
            return Err(KaoError::Config("em_iter must be >= 1".into()));
        }
        Ok(())
    }

    /// `Q` with `q_diag` on the diagonal and `q_off` elsewhere.
    pub fn true_q(&self) -> DMatrix<f64> {
        let d = self.true_columns.len();
        DMatrix::from_fn(d, d, |i, j| if i == j { self.q_diag } else { self.q_off })
    }

    pub fn refit(&self) -> Refit {
        if !self.refit {
            return Refit::None;
        }
        Refit::Em {
            window: self.window,
            options: EmOptions {
                fixed_k: true,
                estimate_theta0: self.estimate_theta0,
                n_iter: self.em_iter,
                tol: self.em_tol,
            },
        }
    }

    /// Steps before the first fitted forecast; dropped from evaluation.
    pub fn warm_up(&self) -> usize {
        if self.refit {
            self.window.min(self.horizon)
        } else {
            0
        }
    }
}

/// Simulated data: the transformed covariates, the response and the truth.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub stream: ObservationStream,
    pub true_model: StateSpaceModel,
}

/// `theta_0 ~ N(theta0_mean 1, I)`, drawn once from the seed.
pub fn draw_theta0(seed: u64, d: usize, mean: f64) -> DVector<f64> {
    let mut r = rng::stream(seed, rng::STREAM_THETA0);
    DVector::from_fn(d, |_, _| {
        mean + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)
    })
}

pub fn simulate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let d = spec.true_columns.len();
    let x = transform_design(&uniform_design(spec.horizon, COVARIATE_NAMES.len(), seed), &TRANSFORMS)?;
    let true_model = StateSpaceModel::new(
        DMatrix::identity(d, d),
        spec.true_q(),
        spec.sigma * spec.sigma,
        draw_theta0(seed, d, spec.theta0_mean),
        DMatrix::zeros(d, d),
    )?;
    let x_true = crate::model::select_columns(&x, &spec.true_columns);
    let sim = simulate_ssm(&true_model, &x_true, seed)?;
    let stream = ObservationStream {
        x,
        y: sim.y,
        truth: sim.truth,
        names: COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    Ok(SyntheticData { stream, true_model })
}

/// Covariate-subset experts on `stream`, starting after the warm-up window
/// (the first fitted forecast). `true_columns` is listed first.
pub fn synthetic_trace(spec: &SyntheticSpec, stream: &ObservationStream) -> Result<ExpertTrace> {
    spec.validate()?;
    stream.validate()?;
    let d = stream.dim();
    if spec.true_columns.iter().any(|&c| c >= d) {
        return Err(KaoError::Config(format!(
            "true_columns reach past the {d} design columns"
        )));
    }
    let subsets = auto_subsets(d, &spec.true_columns, spec.n_experts)?;
    let names: Vec<String> = if stream.names.len() == d {
        stream.names.clone()
    } else {
        (0..d).map(|j| format!("x{j}")).collect()
    };
    let bank = build_subset_bank(&names, &subsets, &spec.template)?;
    let trace = run_experts(&bank, stream, &spec.refit())?;
    Ok(trace.slice(spec.warm_up()))
}

/// Learning-rate grid `10^(k/4)`, `k = -24..=8`.
pub fn default_grid() -> Vec<f64> {
    (-24..=8).map(|k| 10f64.powf(k as f64 / 4.0)).collect()
}

/// Rule settings of the study: the fixed-rate KAO rules tuned on `grid` in
/// hindsight, everything else adaptive, no gradient trick.
pub fn study_rules(burn_in: usize, grid: &[f64]) -> Vec<RuleSpec> {
    Rule::ALL
        .iter()
        .map(|&rule| {
            let mut spec = RuleSpec::default_for(rule, burn_in);
            if spec.rate == RateSpec::Theory {
                spec.rate = RateSpec::Grid(grid.to_vec());
            }
            spec
        })
        .collect()
}

/// Run every rule on `trace`; each record is cut at its burn-in so all
/// rules (and the experts inside the records) are scored on the same steps.
pub fn run_study(trace: &ExpertTrace, specs: &[RuleSpec]) -> Result<Vec<RunRecord>> {
    specs
        .iter()
        .map(|spec| Ok(aggregate_trace(trace, spec)?.slice(spec.burn_in)))
        .collect()
}
