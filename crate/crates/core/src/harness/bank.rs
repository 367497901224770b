//! Banks of Kalman experts sharing one observation stream.
//!
//! Expert parameters are held in natural units (`Q`, `P0` and `sigma2` as
//! fitted by EM). The recursion normalises innovations by `xᵀPx + 1`, so each
//! expert runs it on the model rescaled by `1 / sigma2` and reports
//! `sigma2 (xᵀP'x + 1) = xᵀPx + sigma2`. With `sigma2 = 1` nothing changes.

use std::collections::HashSet;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{KaoError, Result};
use crate::kalman::{kalman_predict, kalman_step, KalmanState};
use crate::model::{Design, StateSpaceModel};

/// How an expert reads its own design vector off the global row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// Sub-vector of the global covariates.
    Columns(Vec<usize>),
    /// Correction of a black-box forecast stored in `column`:
    /// `(1, f_t, e_{t-1})` with `e_{t-1} = y_{t-1} - f_{t-1}`.
    Correction { column: usize },
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        match self {
            FeatureMap::Columns(c) => c.len(),
            FeatureMap::Correction { .. } => 3,
        }
    }

    fn max_column(&self) -> usize {
        match self {
            FeatureMap::Columns(c) => c.iter().copied().max().unwrap_or(0),
            FeatureMap::Correction { column } => *column,
        }
    }

    /// Feature row at time `t` given the previous error (0 at the first step).
    pub fn row(&self, x: &DVector<f64>, last_error: f64) -> Result<DVector<f64>> {
        if self.max_column() >= x.len() {
            return Err(KaoError::Dimension(format!(
                "feature map reads column {} of a row of width {}",
                self.max_column(),
                x.len()
            )));
        }
        Ok(match self {
            FeatureMap::Columns(c) => DVector::from_iterator(c.len(), c.iter().map(|&j| x[j])),
            FeatureMap::Correction { column } => ExpertFeatureRow {
                intercept: 1.0,
                forecast: x[*column],
                last_error,
            }
            .to_vector(),
        })
    }

    /// The error carried to the next step after observing `y`.
    fn next_error(&self, x: &DVector<f64>, y: f64) -> f64 {
        match self {
            FeatureMap::Columns(_) => 0.0,
            FeatureMap::Correction { column } => y - x[*column],
        }
    }

    /// The whole feature design for a stream prefix.
    pub fn design(&self, x: &[DVector<f64>], y: &[f64]) -> Result<Design> {
        let mut last = 0.0;
        let mut out = Vec::with_capacity(x.len());
        for (xt, &yt) in x.iter().zip(y) {
            out.push(self.row(xt, last)?);
            last = self.next_error(xt, yt);
        }
        Ok(out)
    }
}

/// Design of a corrected black-box expert.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertFeatureRow {
    pub intercept: f64,
    pub forecast: f64,
    pub last_error: f64,
}

impl ExpertFeatureRow {
    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_vec(vec![self.intercept, self.forecast, self.last_error])
    }
}

#[derive(Debug, Clone)]
pub struct Expert {
    pub name: String,
    /// Parameters in natural units.
    pub model: StateSpaceModel,
    /// Filter state of the rescaled model; `P` is in units of `sigma2`.
    pub state: KalmanState,
    pub features: FeatureMap,
    scaled: StateSpaceModel,
    last_error: f64,
}

/// `(K, Q / sigma2, sigma2, theta0, P0 / sigma2)`.
pub fn noise_units(model: &StateSpaceModel) -> StateSpaceModel {
    StateSpaceModel {
        k: model.k.clone(),
        q: &model.q / model.sigma2,
        sigma2: model.sigma2,
        theta0: model.theta0.clone(),
        p0: &model.p0 / model.sigma2,
    }
}

impl Expert {
    pub fn new(name: impl Into<String>, model: StateSpaceModel, features: FeatureMap) -> Result<Self> {
        model.validate()?;
        if model.dim() != features.dim() {
            return Err(KaoError::Dimension(format!(
                "model dim {} but the feature map yields {}",
                model.dim(),
                features.dim()
            )));
        }
        let scaled = noise_units(&model);
        Ok(Self {
            name: name.into(),
            state: KalmanState::new(&scaled),
            scaled,
            model,
            features,
            last_error: 0.0,
        })
    }

    /// `(y_hat, xᵀPx)` for the global row `x`, with `P` in natural units.
    pub fn predict_parts(&self, x: &DVector<f64>) -> Result<(f64, f64)> {
        let xm = self.features.row(x, self.last_error)?;
        let (y_hat, r) = kalman_predict(&self.state, &xm, 0.0)?;
        Ok((y_hat, r * self.model.sigma2))
    }

    /// `(y_hat, risk)` for the global row `x`.
    pub fn predict(&self, x: &DVector<f64>) -> Result<(f64, f64)> {
        let (y_hat, v) = self.predict_parts(x)?;
        Ok((y_hat, v + self.model.sigma2))
    }

    pub fn observe(&mut self, x: &DVector<f64>, y: f64) -> Result<()> {
        let xm = self.features.row(x, self.last_error)?;
        self.state = kalman_step(&self.scaled, &self.state, &xm, y)?;
        self.last_error = self.features.next_error(x, y);
        Ok(())
    }

    /// Restart from `model` and replay `x`, `y` so the state is the one the
    /// new parameters would have produced online.
    pub fn refilter(&mut self, model: StateSpaceModel, x: &[DVector<f64>], y: &[f64]) -> Result<()> {
        let mut fresh = Expert::new(self.name.clone(), model, self.features.clone())?;
        for (xt, &yt) in x.iter().zip(y) {
            fresh.observe(xt, yt)?;
        }
        *self = fresh;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ExpertBank {
    pub experts: Vec<Expert>,
}

impl ExpertBank {
    pub fn new(experts: Vec<Expert>) -> Result<Self> {
        if experts.is_empty() {
            return Err(KaoError::InvalidArgument("a bank needs at least one expert".into()));
        }
        Ok(Self { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.experts.iter().map(|e| e.name.clone()).collect()
    }

    pub fn max_dim(&self) -> usize {
        self.experts.iter().map(|e| e.model.dim()).max().unwrap_or(0)
    }

    pub fn predict_all(&self, x: &DVector<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut y_hat = Vec::with_capacity(self.len());
        let mut risk = Vec::with_capacity(self.len());
        for e in &self.experts {
            let (p, r) = e.predict(x)?;
            y_hat.push(p);
            risk.push(r);
        }
        Ok((y_hat, risk))
    }

    pub fn observe_all(&mut self, x: &DVector<f64>, y: f64) -> Result<()> {
        self.experts.iter_mut().try_for_each(|e| e.observe(x, y))
    }
}

/// Scalar parameters shared by every expert of a bank:
/// `K = I`, `Q = q I`, `P0 = p0 I`, `theta0 = theta0 * 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankTemplate {
    pub q: f64,
    pub p0: f64,
    pub sigma2: f64,
    pub theta0: f64,
}

impl BankTemplate {
    pub fn model(&self, dim: usize) -> Result<StateSpaceModel> {
        StateSpaceModel::random_walk(
            dim,
            self.q,
            self.sigma2,
            DVector::from_element(dim, self.theta0),
            self.p0,
        )
    }
}

/// One expert per covariate subset, named after its columns.
pub fn build_subset_bank(names: &[String], subsets: &[Vec<usize>], template: &BankTemplate) -> Result<ExpertBank> {
    let mut seen = HashSet::new();
    let mut experts = Vec::with_capacity(subsets.len());
    for s in subsets {
        if s.is_empty() {
            return Err(KaoError::InvalidArgument("empty covariate subset".into()));
        }
        if let Some(&bad) = s.iter().find(|&&j| j >= names.len()) {
            return Err(KaoError::InvalidArgument(format!(
                "covariate index {bad} out of range ({} covariates)",
                names.len()
            )));
        }
        let mut key = s.clone();
        key.sort_unstable();
        if key.windows(2).any(|w| w[0] == w[1]) {
            return Err(KaoError::InvalidArgument(format!("subset {s:?} repeats a covariate")));
        }
        if !seen.insert(key) {
            return Err(KaoError::InvalidArgument(format!("duplicate subset {s:?}")));
        }
        let name = s.iter().map(|&j| names[j].as_str()).collect::<Vec<_>>().join("+");
        experts.push(Expert::new(
            name,
            template.model(s.len())?,
            FeatureMap::Columns(s.clone()),
        )?);
    }
    ExpertBank::new(experts)
}

/// `m` subsets of `0..n_covariates`: `true_subset` first, then the other
/// non-empty subsets by size and lexicographic order.
pub fn auto_subsets(n_covariates: usize, true_subset: &[usize], m: usize) -> Result<Vec<Vec<usize>>> {
    if n_covariates == 0 || n_covariates > 20 {
        return Err(KaoError::InvalidArgument(format!(
            "need 1..=20 covariates, got {n_covariates}"
        )));
    }
    let mut truth = true_subset.to_vec();
    truth.sort_unstable();
    let mut all: Vec<Vec<usize>> = (1u32..(1 << n_covariates))
        .map(|mask| (0..n_covariates).filter(|j| mask & (1 << j) != 0).collect::<Vec<_>>())
        .filter(|s| *s != truth)
        .collect();
    all.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    if m == 0 || m > all.len() + 1 {
        return Err(KaoError::InvalidArgument(format!(
            "cannot pick {m} distinct subsets of {n_covariates} covariates"
        )));
    }
    let mut out = vec![true_subset.to_vec()];
    out.extend(all.into_iter().take(m - 1));
    Ok(out)
}

/// One corrected expert per forecast column.
pub fn build_correction_bank(names: &[String], template: &BankTemplate) -> Result<ExpertBank> {
    let experts = names
        .iter()
        .enumerate()
        .map(|(j, n)| Expert::new(n.clone(), template.model(3)?, FeatureMap::Correction { column: j }))
        .collect::<Result<Vec<_>>>()?;
    ExpertBank::new(experts)
}
