//! Brute-force references for the recursive filter and smoother.
//!
//! These build dense normal equations or the full joint Gaussian of
//! `(theta_0..theta_T, y_1..y_T)` and condition by direct linear solves. They
//! share no code path with [`crate::kalman`] or [`crate::smoother`] and are
//! only meant for small test instances.

use nalgebra::{DMatrix, DVector};

use crate::error::{KaoError, Result};
use crate::linalg;
use crate::model::StateSpaceModel;

pub const MAX_ORACLE_HORIZON: usize = 50;
pub const MAX_ORACLE_DIM: usize = 4;

/// `argmin_θ Σ (y_s - X_sᵀθ)² + λ ‖θ - θ_start‖²` by a direct `d x d` solve.
pub fn ridge_oracle(lambda: f64, theta_start: &DVector<f64>, x: &[DVector<f64>], y: &[f64]) -> Result<DVector<f64>> {
    if !(lambda > 0.0) {
        return Err(KaoError::InvalidArgument(format!("lambda must be > 0, got {lambda}")));
    }
    if x.len() != y.len() {
        return Err(KaoError::Dimension(format!(
            "{} rows vs {} responses",
            x.len(),
            y.len()
        )));
    }
    let d = theta_start.len();
    let mut a = DMatrix::identity(d, d) * lambda;
    let mut b = theta_start * lambda;
    for (xs, &ys) in x.iter().zip(y) {
        if xs.len() != d {
            return Err(KaoError::Dimension(format!("row of length {} for dim {d}", xs.len())));
        }
        a += xs * xs.transpose();
        b += xs * ys;
    }
    a.lu()
        .solve(&b)
        .ok_or_else(|| KaoError::Numerical("singular ridge system".into()))
}

/// Gaussian moments of one latent state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

struct JointPrior {
    d: usize,
    /// Prior means of `theta_0..theta_T`.
    mean: Vec<DVector<f64>>,
    /// `cross[t][s] = Cov(theta_t, theta_s)`.
    cross: Vec<Vec<DMatrix<f64>>>,
}

impl JointPrior {
    fn new(model: &StateSpaceModel, horizon: usize) -> Self {
        let d = model.dim();
        let mut mean = vec![model.theta0.clone()];
        let mut diag = vec![model.p0.clone()];
        for t in 1..=horizon {
            mean.push(&model.k * &mean[t - 1]);
            diag.push(&model.k * &diag[t - 1] * model.k.transpose() + &model.q);
        }
        let mut cross = vec![vec![DMatrix::zeros(d, d); horizon + 1]; horizon + 1];
        for s in 0..=horizon {
            let mut kp = DMatrix::identity(d, d);
            for t in s..=horizon {
                let c = &kp * &diag[s];
                cross[s][t] = c.transpose();
                cross[t][s] = c;
                kp = &model.k * kp;
            }
        }
        Self { d, mean, cross }
    }

    /// Moments of `theta_t` given `y_1..y_n` (1-based times, `n` may be 0).
    fn condition(&self, model: &StateSpaceModel, x: &[DVector<f64>], y: &[f64], t: usize, n: usize) -> StateMoments {
        let prior_mean = self.mean[t].clone();
        let prior_cov = self.cross[t][t].clone();
        if n == 0 {
            return StateMoments {
                mean: prior_mean,
                cov: prior_cov,
            };
        }
        let mut s_yy = DMatrix::zeros(n, n);
        let mut c_ty = DMatrix::zeros(self.d, n);
        let mut resid = DVector::zeros(n);
        for i in 1..=n {
            resid[i - 1] = y[i - 1] - x[i - 1].dot(&self.mean[i]);
            c_ty.set_column(i - 1, &(&self.cross[t][i] * &x[i - 1]));
            for j in 1..=n {
                s_yy[(i - 1, j - 1)] = (x[i - 1].transpose() * &self.cross[i][j] * &x[j - 1])[(0, 0)];
            }
            s_yy[(i - 1, i - 1)] += model.sigma2;
        }
        let gain_t = linalg::solve_spd(&s_yy, &c_ty.transpose());
        let mean = prior_mean + gain_t.transpose() * resid;
        let cov = linalg::symmetrize(&(prior_cov - &c_ty * gain_t));
        StateMoments { mean, cov }
    }
}

fn check_scale(model: &StateSpaceModel, x: &[DVector<f64>], y: &[f64]) -> Result<()> {
    model.validate()?;
    if x.len() != y.len() || x.is_empty() {
        return Err(KaoError::Dimension(format!(
            "{} rows vs {} responses",
            x.len(),
            y.len()
        )));
    }
    if x.iter().any(|r| r.len() != model.dim()) {
        return Err(KaoError::Dimension("design rows must match model dim".into()));
    }
    if x.len() > MAX_ORACLE_HORIZON || model.dim() > MAX_ORACLE_DIM {
        return Err(KaoError::InvalidArgument(format!(
            "oracle limited to T <= {MAX_ORACLE_HORIZON}, d <= {MAX_ORACLE_DIM} (got T={}, d={})",
            x.len(),
            model.dim()
        )));
    }
    Ok(())
}

/// `E[theta_t | y_1..y_{t-1}]` and its covariance for `t = 1..T`.
pub fn exact_filter_oracle(model: &StateSpaceModel, x: &[DVector<f64>], y: &[f64]) -> Result<Vec<StateMoments>> {
    check_scale(model, x, y)?;
    let prior = JointPrior::new(model, x.len());
    Ok((1..=x.len()).map(|t| prior.condition(model, x, y, t, t - 1)).collect())
}

/// `E[theta_t | y_1..y_T]` and its covariance for `t = 1..T`.
pub fn exact_smoother_oracle(model: &StateSpaceModel, x: &[DVector<f64>], y: &[f64]) -> Result<Vec<StateMoments>> {
    check_scale(model, x, y)?;
    let prior = JointPrior::new(model, x.len());
    let n = x.len();
    Ok((1..=n).map(|t| prior.condition(model, x, y, t, n)).collect())
}

/// Exact Gaussian log-likelihood of `y_1..y_T` from the dense joint covariance.
pub fn exact_loglik(model: &StateSpaceModel, x: &[DVector<f64>], y: &[f64]) -> Result<f64> {
    check_scale(model, x, y)?;
    let n = x.len();
    let prior = JointPrior::new(model, n);
    let mut s = DMatrix::zeros(n, n);
    let mut r = DVector::zeros(n);
    for i in 1..=n {
        r[i - 1] = y[i - 1] - x[i - 1].dot(&prior.mean[i]);
        for j in 1..=n {
            s[(i - 1, j - 1)] = (x[i - 1].transpose() * &prior.cross[i][j] * &x[j - 1])[(0, 0)];
        }
        s[(i - 1, i - 1)] += model.sigma2;
    }
    let chol = s
        .cholesky()
        .ok_or_else(|| KaoError::Numerical("joint covariance not positive definite".into()))?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = r.dot(&chol.solve(&r));
    Ok(-0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridge_one_step_scalar() {
        // (1-θ)² + θ² is minimised at θ = 1/2
        let th = ridge_oracle(1.0, &DVector::zeros(1), &[DVector::from_element(1, 1.0)], &[1.0]).unwrap();
        assert!((th[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ridge_zero_response_and_large_penalty() {
        let x: Vec<_> = (0..10)
            .map(|t| DVector::from_row_slice(&[1.0, t as f64 / 10.0]))
            .collect();
        let th = ridge_oracle(0.3, &DVector::zeros(2), &x, &[0.0; 10]).unwrap();
        assert!(th.amax() < 1e-15);

        let start = DVector::from_row_slice(&[2.0, -1.0]);
        let y: Vec<f64> = (0..10).map(|t| t as f64).collect();
        let th = ridge_oracle(1e6, &start, &x, &y).unwrap();
        assert!((th - start).amax() <= 1e-3);
        assert!(ridge_oracle(0.0, &DVector::zeros(2), &x, &y).is_err());
    }

    #[test]
    fn single_step_oracle_is_prior() {
        let k = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, -0.1, 0.9]);
        let q = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let p0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]);
        let th0 = DVector::from_row_slice(&[1.0, -2.0]);
        let m = StateSpaceModel::new(k.clone(), q.clone(), 1.3, th0.clone(), p0.clone()).unwrap();
        let out = exact_filter_oracle(&m, &[DVector::from_row_slice(&[1.0, 1.0])], &[3.0]).unwrap();
        assert!((&out[0].mean - &k * &th0).amax() < 1e-14);
        assert!((&out[0].cov - (&k * &p0 * k.transpose() + q)).amax() < 1e-14);
    }

    #[test]
    fn uninformative_observations_leave_prior() {
        let m = StateSpaceModel::random_walk(2, 0.5, 1e8, DVector::from_row_slice(&[1.0, 2.0]), 1.0).unwrap();
        let x: Vec<_> = (0..3).map(|t| DVector::from_row_slice(&[1.0, t as f64])).collect();
        let y = [50.0, -20.0, 30.0];
        let post = exact_smoother_oracle(&m, &x, &y).unwrap();
        let prior = JointPrior::new(&m, 3);
        for t in 1..=3 {
            let rel_mean = (&post[t - 1].mean - &prior.mean[t]).amax() / prior.mean[t].amax();
            let rel_cov = (&post[t - 1].cov - &prior.cross[t][t]).amax() / prior.cross[t][t].amax();
            assert!(rel_mean <= 1e-3 && rel_cov <= 1e-3, "t={t}: {rel_mean} {rel_cov}");
        }
    }

    #[test]
    fn rejects_oversized_instances() {
        let m = StateSpaceModel::random_walk(1, 1.0, 1.0, DVector::zeros(1), 1.0).unwrap();
        let x = vec![DVector::from_element(1, 1.0); 51];
        assert!(exact_filter_oracle(&m, &x, &[0.0; 51]).is_err());
    }
}
