//! Per-expert Kalman recursion.
//!
//! The update normalises the innovation by `xᵀPx + 1`, so the observation
//! variance never enters `theta_hat` or `P`. It only appears in the predictive
//! risk `xᵀPx + sigma2`. With `sigma2 = 1` the recursion is the exact Gaussian
//! filter; for other values it is the exact filter of the model whose `Q` and
//! `P0` are expressed in units of `sigma2`.

use nalgebra::{DMatrix, DVector};

use crate::error::{KaoError, Result};
use crate::linalg;
use crate::model::StateSpaceModel;

/// One-step-ahead filter state: the moments used to predict the next response.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub theta_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    /// Number of observations absorbed so far.
    pub t: usize,
    pub last_pred: f64,
    pub last_risk: f64,
}

impl KalmanState {
    /// Prior predictive state for `theta_1`: `(K theta_0, K P0 Kᵀ + Q)`.
    pub fn new(model: &StateSpaceModel) -> Self {
        let theta_hat = &model.k * &model.theta0;
        let p = linalg::symmetrize(&(&model.k * &model.p0 * model.k.transpose() + &model.q));
        Self {
            theta_hat,
            p,
            t: 0,
            last_pred: f64::NAN,
            last_risk: f64::NAN,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }
}

fn check_x(state: &KalmanState, x: &DVector<f64>) -> Result<()> {
    if x.len() != state.dim() {
        return Err(KaoError::Dimension(format!(
            "design of length {} for a state of dim {}",
            x.len(),
            state.dim()
        )));
    }
    Ok(())
}

/// `(xᵀ theta_hat, xᵀ P x + sigma2)`. Does not modify the state.
pub fn kalman_predict(state: &KalmanState, x_next: &DVector<f64>, sigma2: f64) -> Result<(f64, f64)> {
    check_x(state, x_next)?;
    Ok((
        x_next.dot(&state.theta_hat),
        linalg::quad_form(&state.p, x_next) + sigma2,
    ))
}

/// Absorb `(x_t, y_t)` and return the predictive state for `t + 1`.
pub fn kalman_step(model: &StateSpaceModel, state: &KalmanState, x_t: &DVector<f64>, y_t: f64) -> Result<KalmanState> {
    check_x(state, x_t)?;
    if model.dim() != state.dim() {
        return Err(KaoError::Dimension(format!(
            "model dim {} vs state dim {}",
            model.dim(),
            state.dim()
        )));
    }
    if !y_t.is_finite() || !linalg::all_finite_vec(x_t) {
        return Err(KaoError::NonFinite(format!("observation at step {}", state.t + 1)));
    }
    let (y_hat, risk) = kalman_predict(state, x_t, model.sigma2)?;
    let px = &state.p * x_t;
    let g = 1.0 / (x_t.dot(&px) + 1.0);
    let theta_hat = &model.k * (&state.theta_hat + &px * (g * (y_t - y_hat)));
    let inner = &state.p - (&px * px.transpose()) * g;
    let p = linalg::symmetrize(&(&model.k * inner * model.k.transpose() + &model.q));
    Ok(KalmanState {
        theta_hat,
        p,
        t: state.t + 1,
        last_pred: y_hat,
        last_risk: risk,
    })
}

/// Run the recursion over a whole stream. Returns the predictions and risks
/// issued before each observation, and the final state.
pub fn filter(model: &StateSpaceModel, x: &[DVector<f64>], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>, KalmanState)> {
    if x.len() != y.len() {
        return Err(KaoError::Dimension(format!(
            "{} rows vs {} responses",
            x.len(),
            y.len()
        )));
    }
    let mut state = KalmanState::new(model);
    let mut preds = Vec::with_capacity(y.len());
    let mut risks = Vec::with_capacity(y.len());
    for (xt, &yt) in x.iter().zip(y) {
        let (p, r) = kalman_predict(&state, xt, model.sigma2)?;
        preds.push(p);
        risks.push(r);
        state = kalman_step(model, &state, xt, yt)?;
    }
    Ok((preds, risks, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(theta: f64, p: f64) -> KalmanState {
        KalmanState {
            theta_hat: DVector::from_element(1, theta),
            p: DMatrix::from_element(1, 1, p),
            t: 0,
            last_pred: f64::NAN,
            last_risk: f64::NAN,
        }
    }

    #[test]
    fn predict_examples() {
        let s = scalar_state(0.5, 0.5);
        assert_eq!(
            kalman_predict(&s, &DVector::from_element(1, 1.0), 1.0).unwrap(),
            (0.5, 1.5)
        );

        let s2 = KalmanState {
            theta_hat: DVector::from_row_slice(&[1.0, -1.0]),
            p: DMatrix::identity(2, 2),
            t: 0,
            last_pred: 0.0,
            last_risk: 0.0,
        };
        assert_eq!(
            kalman_predict(&s2, &DVector::from_row_slice(&[1.0, 1.0]), 2.0).unwrap(),
            (0.0, 4.0)
        );

        let zero = KalmanState {
            theta_hat: DVector::zeros(2),
            p: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            ..s2
        };
        let x = DVector::from_row_slice(&[0.3, -2.0]);
        let (y, r) = kalman_predict(&zero, &x, 0.25).unwrap();
        assert_eq!(y, 0.0);
        assert!((r - (linalg::quad_form(&zero.p, &x) + 0.25)).abs() < 1e-15);
        assert!(kalman_predict(&zero, &DVector::zeros(3), 1.0).is_err());
    }

    #[test]
    fn single_scalar_update() {
        let m = StateSpaceModel::new(
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            1.0,
            DVector::zeros(1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let s0 = KalmanState::new(&m);
        let s1 = kalman_step(&m, &s0, &DVector::from_element(1, 1.0), 1.0).unwrap();
        assert!((s1.theta_hat[0] - 0.5).abs() < 1e-15);
        assert!((s1.p[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(s1.t, 1);
        assert_eq!(s1.last_pred, 0.0);
        assert_eq!(s1.last_risk, 2.0);
    }

    #[test]
    fn zero_design_only_propagates() {
        let k = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 1.0]);
        let q = DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.1]);
        let m = StateSpaceModel::new(
            k.clone(),
            q.clone(),
            1.0,
            DVector::from_row_slice(&[1.0, 2.0]),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let s0 = KalmanState::new(&m);
        let s1 = kalman_step(&m, &s0, &DVector::zeros(2), 123.0).unwrap();
        assert!((&s1.theta_hat - &k * &s0.theta_hat).amax() < 1e-14);
        let expect = &k * &s0.p * k.transpose() + q;
        assert!((&s1.p - expect).amax() < 1e-14);
    }

    #[test]
    fn rejects_non_finite_observations() {
        let m = StateSpaceModel::random_walk(1, 1.0, 1.0, DVector::zeros(1), 1.0).unwrap();
        let s = KalmanState::new(&m);
        let x = DVector::from_element(1, 1.0);
        assert!(matches!(kalman_step(&m, &s, &x, f64::NAN), Err(KaoError::NonFinite(_))));
        assert!(kalman_step(&m, &s, &DVector::from_element(1, f64::INFINITY), 0.0).is_err());
    }

    #[test]
    fn risk_is_at_least_sigma2() {
        let m = StateSpaceModel::random_walk(3, 0.3, 0.7, DVector::zeros(3), 2.0).unwrap();
        let x: Vec<_> = (0..50)
            .map(|t| DVector::from_fn(3, |i, _| ((t * 7 + i * 3) % 11) as f64 / 11.0 - 0.4))
            .collect();
        let y: Vec<f64> = (0..50).map(|t| (t as f64 * 0.3).sin()).collect();
        let (_, risks, last) = filter(&m, &x, &y).unwrap();
        assert!(risks.iter().all(|&r| r >= 0.7));
        assert!(linalg::asymmetry(&last.p) <= 1e-12);
    }
}
