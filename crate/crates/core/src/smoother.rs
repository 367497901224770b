//! Fixed-interval (Rauch-Tung-Striebel) smoothing and EM estimation of the
//! noise parameters of a linear-Gaussian state-space model.
//!
//! Unlike [`crate::kalman`], the forward pass here normalises innovations by
//! `xᵀPx + sigma2`, so the smoother and the log-likelihood refer to the model
//! in its natural units. Both coincide when `sigma2 = 1`.

use nalgebra::{DMatrix, DVector};

use crate::error::{KaoError, Result};
use crate::linalg;
use crate::model::StateSpaceModel;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedPath {
    /// `E[theta_t | y_1..y_T]`, `t = 1..T`.
    pub theta_smooth: Vec<DVector<f64>>,
    /// `Var(theta_t | y_1..y_T)`.
    pub v_smooth: Vec<DMatrix<f64>>,
    /// `v_lag[t-1] = Cov(theta_t, theta_{t-1} | y_1..y_T)`; the first entry
    /// pairs `theta_1` with the initial state.
    pub v_lag: Vec<DMatrix<f64>>,
    /// Smoothed moments of the initial state `theta_0`.
    pub theta0_smooth: DVector<f64>,
    pub v0_smooth: DMatrix<f64>,
    /// Filtered means `E[theta_t | y_1..y_t]`.
    pub theta_filtered: Vec<DVector<f64>>,
    pub loglik: f64,
}

impl SmoothedPath {
    pub fn horizon(&self) -> usize {
        self.theta_smooth.len()
    }
}

fn check_inputs(model: &StateSpaceModel, x: &[DVector<f64>], y: &[f64]) -> Result<()> {
    model.validate()?;
    if x.len() != y.len() || x.is_empty() {
        return Err(KaoError::Dimension(format!(
            "{} rows vs {} responses",
            x.len(),
            y.len()
        )));
    }
    if let Some(t) = x.iter().position(|r| r.len() != model.dim()) {
        return Err(KaoError::Dimension(format!(
            "row {} has length {}, model dim {}",
            t + 1,
            x[t].len(),
            model.dim()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) || x.iter().any(|r| !linalg::all_finite_vec(r)) {
        return Err(KaoError::NonFinite("smoother inputs".into()));
    }
    Ok(())
}

pub fn rts_smooth(model: &StateSpaceModel, x: &[DVector<f64>], y: &[f64]) -> Result<SmoothedPath> {
    check_inputs(model, x, y)?;
    let n = x.len();
    let k = &model.k;
    let kt = k.transpose();
    // random-walk experts: skip the products with K
    let identity = k.is_identity(0.0);

    // forward pass: predicted (a_t, P_t) and filtered (af_t, Pf_t)
    let mut a_pred = Vec::with_capacity(n);
    let mut p_pred = Vec::with_capacity(n);
    let mut a_filt = Vec::with_capacity(n);
    let mut p_filt = Vec::with_capacity(n);
    let mut a = k * &model.theta0;
    let mut p = linalg::symmetrize(&(k * &model.p0 * &kt + &model.q));
    let mut loglik = 0.0;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    for (t, (xt, &yt)) in x.iter().zip(y).enumerate() {
        let px = &p * xt;
        let f = xt.dot(&px) + model.sigma2;
        if !(f > 0.0) || !f.is_finite() {
            return Err(KaoError::Numerical(format!(
                "innovation variance {f} at step {} (covariance lost positive semidefiniteness)",
                t + 1
            )));
        }
        let v = yt - xt.dot(&a);
        loglik -= 0.5 * (ln2pi + f.ln() + v * v / f);
        let mut af = a.clone();
        af.axpy(v / f, &px, 1.0);
        let mut pf = p.clone();
        pf.ger(-1.0 / f, &px, &px, 1.0);
        linalg::symmetrize_mut(&mut pf);
        a_pred.push(a);
        p_pred.push(p);
        if identity {
            a = af.clone();
            p = &pf + &model.q;
            linalg::symmetrize_mut(&mut p);
        } else {
            a = k * &af;
            p = linalg::symmetrize(&(k * &pf * &kt + &model.q));
        }
        a_filt.push(af);
        p_filt.push(pf);
    }

    // backward pass
    let mut theta_smooth = vec![DVector::zeros(0); n];
    let mut v_smooth = vec![DMatrix::zeros(0, 0); n];
    let mut v_lag = vec![DMatrix::zeros(0, 0); n];
    theta_smooth[n - 1] = a_filt[n - 1].clone();
    v_smooth[n - 1] = p_filt[n - 1].clone();
    for t in (0..n - 1).rev() {
        // J_t = Pf_t Kᵀ P_{t+1}⁻¹
        let jt = if identity {
            linalg::solve_spd(&p_pred[t + 1], &p_filt[t])
        } else {
            linalg::solve_spd(&p_pred[t + 1], &(k * &p_filt[t]))
        };
        let mut th = a_filt[t].clone();
        th.gemv_tr(1.0, &jt, &(&theta_smooth[t + 1] - &a_pred[t + 1]), 1.0);
        theta_smooth[t] = th;
        let dj = (&v_smooth[t + 1] - &p_pred[t + 1]) * &jt;
        let mut vs = p_filt[t].clone();
        vs.gemm_tr(1.0, &jt, &dj, 1.0);
        linalg::symmetrize_mut(&mut vs);
        v_smooth[t] = vs;
        v_lag[t + 1] = &v_smooth[t + 1] * &jt;
    }
    let j0 = linalg::solve_spd(&p_pred[0], &(k * &model.p0)).transpose();
    let theta0_smooth = &model.theta0 + &j0 * (&theta_smooth[0] - &a_pred[0]);
    let v0_smooth = linalg::symmetrize(&(&model.p0 + &j0 * (&v_smooth[0] - &p_pred[0]) * j0.transpose()));
    v_lag[0] = &v_smooth[0] * j0.transpose();

    Ok(SmoothedPath {
        theta_smooth,
        v_smooth,
        v_lag,
        theta0_smooth,
        v0_smooth,
        theta_filtered: a_filt,
        loglik,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    /// Keep `K` at its initial value.
    pub fixed_k: bool,
    /// Re-estimate the initial mean `theta_0`.
    pub estimate_theta0: bool,
    pub n_iter: usize,
    /// Stop once the log-likelihood gain of an iteration falls below this.
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            fixed_k: true,
            estimate_theta0: false,
            n_iter: 50,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: StateSpaceModel,
    /// Log-likelihood of the initial model followed by that of each update.
    pub loglik: Vec<f64>,
    pub iterations: usize,
}

const SIGMA2_FLOOR: f64 = 1e-8;

fn m_step(
    model: &StateSpaceModel,
    x: &[DVector<f64>],
    y: &[f64],
    sm: &SmoothedPath,
    opts: &EmOptions,
) -> Result<StateSpaceModel> {
    let n = x.len();
    let d = model.dim();
    let nf = n as f64;
    let mut s11 = DMatrix::zeros(d, d);
    let mut s10 = DMatrix::zeros(d, d);
    let mut s00 = DMatrix::zeros(d, d);
    let mut sigma2 = 0.0;
    for t in 0..n {
        let m = &sm.theta_smooth[t];
        let (m_prev, v_prev) = if t == 0 {
            (&sm.theta0_smooth, &sm.v0_smooth)
        } else {
            (&sm.theta_smooth[t - 1], &sm.v_smooth[t - 1])
        };
        s11 += &sm.v_smooth[t] + m * m.transpose();
        s10 += &sm.v_lag[t] + m * m_prev.transpose();
        s00 += v_prev + m_prev * m_prev.transpose();
        let r = y[t] - x[t].dot(m);
        sigma2 += r * r + linalg::quad_form(&sm.v_smooth[t], &x[t]);
    }
    let k = if opts.fixed_k {
        model.k.clone()
    } else {
        linalg::solve_spd(&s00, &s10.transpose()).transpose()
    };
    let q = (&s11 - &s10 * k.transpose() - &k * s10.transpose() + &k * &s00 * k.transpose()) / nf;
    let q = clamp_psd(&linalg::symmetrize(&q));
    let theta0 = if opts.estimate_theta0 {
        sm.theta0_smooth.clone()
    } else {
        model.theta0.clone()
    };
    StateSpaceModel::new(k, q, (sigma2 / nf).max(SIGMA2_FLOOR), theta0, model.p0.clone())
}

fn clamp_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    if linalg::min_eigenvalue(a) >= 0.0 {
        return a.clone();
    }
    let s = linalg::psd_sqrt(a);
    linalg::symmetrize(&(&s * s.transpose()))
}

/// EM estimation of `Q` and `sigma2` (and optionally `theta_0`, `K`).
pub fn em_fit(x: &[DVector<f64>], y: &[f64], init: &StateSpaceModel, opts: &EmOptions) -> Result<EmFit> {
    if opts.n_iter == 0 {
        return Err(KaoError::InvalidArgument("n_iter must be >= 1".into()));
    }
    check_inputs(init, x, y)?;
    let mut model = init.clone();
    let mut sm = rts_smooth(&model, x, y).map_err(|e| KaoError::Em {
        iteration: 0,
        reason: e.to_string(),
    })?;
    let mut loglik = vec![sm.loglik];
    let mut iterations = 0;
    for it in 1..=opts.n_iter {
        let next = m_step(&model, x, y, &sm, opts).map_err(|e| KaoError::Em {
            iteration: it,
            reason: e.to_string(),
        })?;
        let next_sm = rts_smooth(&next, x, y).map_err(|e| KaoError::Em {
            iteration: it,
            reason: e.to_string(),
        })?;
        if !next_sm.loglik.is_finite() {
            return Err(KaoError::Em {
                iteration: it,
                reason: format!("log-likelihood {}", next_sm.loglik),
            });
        }
        let prev = *loglik.last().expect("non-empty trace");
        let gain = next_sm.loglik - prev;
        if gain < -1e-9 * prev.abs().max(1.0) {
            log::warn!("EM log-likelihood decreased by {:e} at iteration {it}", -gain);
        }
        model = next;
        sm = next_sm;
        loglik.push(sm.loglik);
        iterations = it;
        if gain < opts.tol {
            break;
        }
    }
    Ok(EmFit {
        model,
        loglik,
        iterations,
    })
}
