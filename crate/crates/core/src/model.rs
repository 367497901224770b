//! Linear-Gaussian state-space models and simulated observation streams.
//!
//! A model is the pair
//!
//! ```text
//! theta_t = K theta_{t-1} + z_t,   z_t ~ N(0, Q)
//! y_t     = X_tᵀ theta_t + eps_t,  eps_t ~ N(0, sigma2)
//! ```
//!
//! with a deterministic `theta_0`. `P0` is the covariance the filter assigns
//! to `theta_0`; the simulator ignores it.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{KaoError, Result};
use crate::linalg::{self, MODEL_PSD_TOL};
use crate::rng;

/// Sequence of design vectors `X_1, ..., X_T`.
pub type Design = Vec<DVector<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub k: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub sigma2: f64,
    pub theta0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

impl StateSpaceModel {
    pub fn new(k: DMatrix<f64>, q: DMatrix<f64>, sigma2: f64, theta0: DVector<f64>, p0: DMatrix<f64>) -> Result<Self> {
        let model = Self {
            k,
            q,
            sigma2,
            theta0,
            p0,
        };
        model.validate()?;
        Ok(model)
    }

    /// Random-walk model `K = I`, `Q = q I`, `P0 = p0 I`.
    pub fn random_walk(dim: usize, q: f64, sigma2: f64, theta0: DVector<f64>, p0: f64) -> Result<Self> {
        Self::new(
            DMatrix::identity(dim, dim),
            DMatrix::identity(dim, dim) * q,
            sigma2,
            theta0,
            DMatrix::identity(dim, dim) * p0,
        )
    }

    /// Static model (`K = I`, `Q = 0`) with `P0 = I / lambda`: the filter is
    /// then online ridge regression started at `theta0`.
    pub fn static_ridge(dim: usize, lambda: f64, sigma2: f64, theta0: DVector<f64>) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(KaoError::InvalidModel(format!(
                "ridge lambda must be > 0, got {lambda}"
            )));
        }
        Self::new(
            DMatrix::identity(dim, dim),
            DMatrix::zeros(dim, dim),
            sigma2,
            theta0,
            DMatrix::identity(dim, dim) / lambda,
        )
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.k.nrows();
        if d == 0 || !self.k.is_square() {
            return Err(KaoError::InvalidModel("K must be square with dim > 0".into()));
        }
        for (name, m) in [("Q", &self.q), ("P0", &self.p0)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(KaoError::InvalidModel(format!("{name} must be {d}x{d}")));
            }
        }
        if self.theta0.len() != d {
            return Err(KaoError::InvalidModel(format!("theta0 must have length {d}")));
        }
        if !(linalg::all_finite_mat(&self.k)
            && linalg::all_finite_mat(&self.q)
            && linalg::all_finite_mat(&self.p0)
            && linalg::all_finite_vec(&self.theta0))
        {
            return Err(KaoError::InvalidModel("model entries must be finite".into()));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(KaoError::InvalidModel(format!(
                "sigma2 must be positive and finite, got {}",
                self.sigma2
            )));
        }
        for (name, m) in [("Q", &self.q), ("P0", &self.p0)] {
            if linalg::asymmetry(m) > MODEL_PSD_TOL {
                return Err(KaoError::InvalidModel(format!("{name} is not symmetric")));
            }
            let lmin = linalg::min_eigenvalue(m);
            if lmin < -MODEL_PSD_TOL {
                return Err(KaoError::InvalidModel(format!(
                    "{name} is not positive semidefinite (min eigenvalue {lmin:e})"
                )));
            }
        }
        Ok(())
    }

    /// Analytic `E[y_t] = X_tᵀ Kᵗ theta_0`.
    pub fn mean_at(&self, x: &DVector<f64>, t: usize) -> f64 {
        (linalg::mat_pow(&self.k, t) * &self.theta0).dot(x)
    }

    /// Analytic `Var(y_t) = X_tᵀ (Σ_{k<t} Kᵏ Q Kᵏᵀ) X_t + sigma2`.
    pub fn variance_at(&self, x: &DVector<f64>, t: usize) -> f64 {
        let d = self.dim();
        let mut sigma = DMatrix::zeros(d, d);
        let mut kp = DMatrix::identity(d, d);
        for _ in 0..t {
            sigma += &kp * &self.q * kp.transpose();
            kp = &self.k * kp;
        }
        linalg::quad_form(&sigma, x) + self.sigma2
    }
}

/// Latent quantities retained by the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTruth {
    /// `theta_1, ..., theta_T`.
    pub theta_path: Vec<DVector<f64>>,
    /// `mu_t = X_tᵀ theta_t`.
    pub mu: Vec<f64>,
    /// `z_1, ..., z_T`.
    pub state_noise: Vec<DVector<f64>>,
    pub theta0: DVector<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationStream {
    pub x: Design,
    pub y: Vec<f64>,
    pub truth: Option<SimulationTruth>,
    /// Column names of the design, when known.
    pub names: Vec<String>,
}

impl ObservationStream {
    pub fn new(x: Design, y: Vec<f64>) -> Result<Self> {
        let s = Self {
            x,
            y,
            truth: None,
            names: Vec::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn horizon(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, |x| x.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.y.len() {
            return Err(KaoError::Dimension(format!(
                "{} design rows but {} responses",
                self.x.len(),
                self.y.len()
            )));
        }
        if self.x.is_empty() {
            return Err(KaoError::InvalidArgument("empty stream".into()));
        }
        let d = self.dim();
        if let Some(t) = self.x.iter().position(|x| x.len() != d) {
            return Err(KaoError::Dimension(format!(
                "design row {} has length {}, expected {d}",
                t + 1,
                self.x[t].len()
            )));
        }
        Ok(())
    }

    /// First `n` steps.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.horizon());
        Self {
            x: self.x[..n].to_vec(),
            y: self.y[..n].to_vec(),
            truth: self.truth.as_ref().map(|tr| SimulationTruth {
                theta_path: tr.theta_path[..n].to_vec(),
                mu: tr.mu[..n].to_vec(),
                state_noise: tr.state_noise[..n].to_vec(),
                theta0: tr.theta0.clone(),
                sigma2: tr.sigma2,
            }),
            names: self.names.clone(),
        }
    }
}

fn check_design(model: &StateSpaceModel, x: &Design) -> Result<()> {
    if x.is_empty() {
        return Err(KaoError::InvalidArgument("design is empty".into()));
    }
    if let Some(t) = x.iter().position(|row| row.len() != model.dim()) {
        return Err(KaoError::Dimension(format!(
            "design row {} has length {}, model dim is {}",
            t + 1,
            x[t].len(),
            model.dim()
        )));
    }
    Ok(())
}

fn normal_vec<R: Rng>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Simulate `y_1..y_T` from `model` along the design `x`.
///
/// State noise comes from stream 2 of `seed`, observation noise from stream 3.
pub fn simulate_ssm(model: &StateSpaceModel, x: &Design, seed: u64) -> Result<ObservationStream> {
    model.validate()?;
    check_design(model, x)?;
    let d = model.dim();
    let q_sqrt = linalg::psd_sqrt(&model.q);
    let sd = model.sigma2.sqrt();
    let mut state_rng = rng::stream(seed, rng::STREAM_STATE_NOISE);
    let mut obs_rng = rng::stream(seed, rng::STREAM_OBS_NOISE);

    let horizon = x.len();
    let mut theta = model.theta0.clone();
    let mut theta_path = Vec::with_capacity(horizon);
    let mut state_noise = Vec::with_capacity(horizon);
    let mut mu = Vec::with_capacity(horizon);
    let mut y = Vec::with_capacity(horizon);
    for xt in x {
        let z = &q_sqrt * normal_vec(&mut state_rng, d);
        theta = &model.k * theta + &z;
        let m = xt.dot(&theta);
        let eps: f64 = obs_rng.sample(StandardNormal);
        y.push(m + sd * eps);
        mu.push(m);
        theta_path.push(theta.clone());
        state_noise.push(z);
    }
    Ok(ObservationStream {
        x: x.clone(),
        y,
        truth: Some(SimulationTruth {
            theta_path,
            mu,
            state_noise,
            theta0: model.theta0.clone(),
            sigma2: model.sigma2,
        }),
        names: Vec::new(),
    })
}

/// Closed form `theta_t = Kᵗ theta_0 + Σ_{k<t} Kᵏ z_{t-k}` evaluated on stored noise.
pub fn explicit_state(model: &StateSpaceModel, noise: &[DVector<f64>], t: usize) -> DVector<f64> {
    let mut theta = linalg::mat_pow(&model.k, t) * &model.theta0;
    let mut kp = DMatrix::identity(model.dim(), model.dim());
    for k in 0..t {
        theta += &kp * &noise[t - k - 1];
        kp = &model.k * kp;
    }
    theta
}

/// Monte-Carlo check of the mean-variance identity at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentCheck {
    pub mean_gap: f64,
    pub var_gap: f64,
    /// Standard error of the empirical mean.
    pub mean_se: f64,
    /// Standard error of the empirical variance.
    pub var_se: f64,
    pub analytic_mean: f64,
    pub analytic_var: f64,
}

/// Compare the empirical mean/variance of `y_t` over `n_mc` independent
/// simulations with `X_tᵀ Kᵗ theta_0` and `X_tᵀ Σ_t X_t + sigma2`.
/// `t` is 1-based.
pub fn check_mean_variance_identity(
    model: &StateSpaceModel,
    x: &Design,
    t: usize,
    n_mc: usize,
    seed: u64,
) -> Result<MomentCheck> {
    model.validate()?;
    check_design(model, x)?;
    if t == 0 || t > x.len() {
        return Err(KaoError::InvalidArgument(format!(
            "time index {t} outside 1..={}",
            x.len()
        )));
    }
    if n_mc < 1000 {
        return Err(KaoError::InvalidArgument(format!("n_mc must be >= 1000, got {n_mc}")));
    }
    let d = model.dim();
    let xt = &x[t - 1];
    let q_sqrt = linalg::psd_sqrt(&model.q);
    let sd = model.sigma2.sqrt();
    let mut state_rng = rng::stream(seed, rng::STREAM_STATE_NOISE);
    let mut obs_rng = rng::stream(seed, rng::STREAM_OBS_NOISE);

    let mut samples = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let mut theta = model.theta0.clone();
        for _ in 0..t {
            theta = &model.k * theta + &q_sqrt * normal_vec(&mut state_rng, d);
        }
        let eps: f64 = obs_rng.sample(StandardNormal);
        samples.push(xt.dot(&theta) + sd * eps);
    }
    let n = n_mc as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = samples.iter().map(|s| (s - mean).powi(4)).sum::<f64>() / n;

    let analytic_mean = model.mean_at(xt, t);
    let analytic_var = model.variance_at(xt, t);
    Ok(MomentCheck {
        mean_gap: (mean - analytic_mean).abs(),
        var_gap: (var - analytic_var).abs(),
        mean_se: (var / n).sqrt(),
        var_se: ((m4 - var * var).max(0.0) / n).sqrt(),
        analytic_mean,
        analytic_var,
    })
}

/// `n` design rows with iid `U[0,1]` coordinates (stream 1 of `seed`).
pub fn uniform_design(n: usize, d: usize, seed: u64) -> Design {
    let mut r = rng::stream(seed, rng::STREAM_DESIGN);
    (0..n).map(|_| DVector::from_fn(d, |_, _| r.random::<f64>())).collect()
}

/// Elementwise covariate transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Square,
    Cube,
}

impl Transform {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Transform::Identity => v,
            Transform::Square => v * v,
            Transform::Cube => v * v * v,
        }
    }
}

pub fn transform_design(x: &Design, transforms: &[Transform]) -> Result<Design> {
    x.iter()
        .map(|row| {
            if row.len() != transforms.len() {
                return Err(KaoError::Dimension(format!(
                    "{} transforms for a design of width {}",
                    transforms.len(),
                    row.len()
                )));
            }
            Ok(DVector::from_fn(row.len(), |i, _| transforms[i].apply(row[i])))
        })
        .collect()
}

/// Project every row onto `columns`.
pub fn select_columns(x: &Design, columns: &[usize]) -> Design {
    x.iter()
        .map(|row| DVector::from_iterator(columns.len(), columns.iter().map(|&c| row[c])))
        .collect()
}

/// Read a stream from a CSV with a header row. `response` names the `y`
/// column; every other column becomes a design coordinate, in file order.
/// With `normalize`, each design column is min-max scaled to `[0, 1]`.
pub fn read_stream_csv(path: impl AsRef<Path>, response: &str, normalize: bool) -> Result<ObservationStream> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| KaoError::csv(path, e))?;
    let headers = reader.headers().map_err(|e| KaoError::csv(path, e))?.clone();
    let resp_idx = headers
        .iter()
        .position(|h| h == response)
        .ok_or_else(|| KaoError::Parse {
            path: path.display().to_string(),
            reason: format!("response column '{response}' not found"),
        })?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != resp_idx)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut x = Vec::new();
    let mut y = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| KaoError::csv(path, e))?;
        let mut values = Vec::with_capacity(record.len());
        for field in record.iter() {
            let v: f64 = field.trim().parse().map_err(|_| KaoError::Parse {
                path: path.display().to_string(),
                reason: format!("row {}: '{field}' is not a number", row_no + 1),
            })?;
            if !v.is_finite() {
                return Err(KaoError::Parse {
                    path: path.display().to_string(),
                    reason: format!("row {}: non-finite value", row_no + 1),
                });
            }
            values.push(v);
        }
        y.push(values[resp_idx]);
        x.push(DVector::from_iterator(
            names.len(),
            values
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != resp_idx)
                .map(|(_, v)| *v),
        ));
    }
    if normalize {
        min_max_normalize(&mut x);
    }
    let mut stream = ObservationStream::new(x, y)?;
    stream.names = names;
    Ok(stream)
}

/// Rescale each coordinate to `[0, 1]`; constant columns map to 0.
pub fn min_max_normalize(x: &mut Design) {
    let Some(d) = x.first().map(|r| r.len()) else {
        return;
    };
    for j in 0..d {
        let lo = x.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
        let hi = x.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for row in x.iter_mut() {
            row[j] = if span > 0.0 { (row[j] - lo) / span } else { 0.0 };
        }
    }
}
