//! Error metrics, regrets and the best convex combination in hindsight.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::run::RunRecord;
use crate::error::{KaoError, Result};
use crate::rng;

/// Lower bound applied to residual variance estimates.
pub const SIGMA2_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sigma2Estimate {
    pub value: f64,
    /// The raw estimate was below the floor.
    pub degenerate: bool,
}

/// Mean squared residual over the first `burn_in` steps.
pub fn estimate_sigma2(y: &[f64], y_hat: &[f64], burn_in: usize) -> Result<Sigma2Estimate> {
    if burn_in == 0 {
        return Err(KaoError::InvalidArgument("burn-in must be positive".into()));
    }
    if burn_in > y.len().min(y_hat.len()) {
        return Err(KaoError::InvalidArgument(format!(
            "burn-in {burn_in} exceeds the horizon {}",
            y.len().min(y_hat.len())
        )));
    }
    let raw = y[..burn_in]
        .iter()
        .zip(&y_hat[..burn_in])
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / burn_in as f64;
    Ok(Sigma2Estimate {
        value: raw.max(SIGMA2_FLOOR),
        degenerate: raw < SIGMA2_FLOOR,
    })
}

impl RunRecord {
    pub fn estimate_sigma2(&self, expert: usize, burn_in: usize) -> Result<Sigma2Estimate> {
        estimate_sigma2(&self.y, &self.expert_column(expert), burn_in)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexFit {
    pub pi: Vec<f64>,
    pub mse: f64,
}

const RESTARTS: usize = 20;
const STATIONARITY_TOL: f64 = 1e-9;
const MAX_ITER: usize = 20_000;

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

struct Quadratic {
    /// `Σ ŷ ŷᵀ / T`
    a: DMatrix<f64>,
    /// `Σ ŷ y / T`
    b: DVector<f64>,
    lipschitz: f64,
}

impl Quadratic {
    fn new(y: &[f64], preds: &[Vec<f64>]) -> Self {
        let m = preds[0].len();
        let n = y.len() as f64;
        let mut a = DMatrix::zeros(m, m);
        let mut b = DVector::zeros(m);
        for (row, &yt) in preds.iter().zip(y) {
            let v = DVector::from_column_slice(row);
            a += &v * v.transpose();
            b += &v * yt;
        }
        a /= n;
        b /= n;
        let lipschitz = 2.0 * a.clone().symmetric_eigenvalues().max().max(f64::MIN_POSITIVE);
        Self { a, b, lipschitz }
    }

    fn grad(&self, pi: &DVector<f64>) -> DVector<f64> {
        (&self.a * pi - &self.b) * 2.0
    }

    /// Norm of the projected-gradient step, scaled back to gradient units.
    fn stationarity(&self, pi: &DVector<f64>) -> f64 {
        let g = self.grad(pi);
        let step: Vec<f64> = pi.iter().zip(g.iter()).map(|(p, gi)| p - gi / self.lipschitz).collect();
        let proj = DVector::from_vec(project_simplex(&step));
        (pi - proj).norm() * self.lipschitz
    }

    fn fista(&self, start: DVector<f64>) -> DVector<f64> {
        let mut x = start.clone();
        let mut z = start;
        let mut t = 1.0_f64;
        for _ in 0..MAX_ITER {
            let g = self.grad(&z);
            let step: Vec<f64> = z
                .iter()
                .zip(g.iter())
                .map(|(zi, gi)| zi - gi / self.lipschitz)
                .collect();
            let x_next = DVector::from_vec(project_simplex(&step));
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            z = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
            x = x_next;
            t = t_next;
            if self.stationarity(&x) <= STATIONARITY_TOL {
                break;
            }
        }
        x
    }

    /// Minimiser over `{z : Σz = 1, z_j = 0 off the working set}`, or `None`
    /// if the working-set system is numerically singular beyond repair.
    fn face_minimiser(&self, working: &[usize]) -> Option<DVector<f64>> {
        let k = working.len();
        let mut kkt = DMatrix::zeros(k + 1, k + 1);
        let mut rhs = DVector::zeros(k + 1);
        for (i, &si) in working.iter().enumerate() {
            for (j, &sj) in working.iter().enumerate() {
                kkt[(i, j)] = 2.0 * self.a[(si, sj)];
            }
            kkt[(i, k)] = 1.0;
            kkt[(k, i)] = 1.0;
            rhs[i] = 2.0 * self.b[si];
        }
        rhs[k] = 1.0;
        let scale = kkt.amax().max(1.0);
        let sol = kkt.svd(true, true).solve(&rhs, 1e-13 * scale).ok()?;
        let mut z = DVector::zeros(self.b.len());
        for (i, &si) in working.iter().enumerate() {
            z[si] = sol[i];
        }
        z.iter().all(|v| v.is_finite()).then_some(z)
    }

    /// Primal active-set refinement started from a feasible `pi`; ends at an
    /// exact KKT point up to rounding.
    fn active_set(&self, pi: &DVector<f64>) -> DVector<f64> {
        let m = pi.len();
        let mut x = pi.map(|v| if v > 1e-12 { v } else { 0.0 });
        x /= x.sum();
        let mut working: Vec<usize> = (0..m).filter(|&j| x[j] > 0.0).collect();
        for _ in 0..(50 * m + 100) {
            let Some(z) = self.face_minimiser(&working) else {
                break;
            };
            let d = &z - &x;
            if d.amax() <= 1e-14 {
                let g = self.grad(&x);
                let level = working.iter().map(|&j| g[j]).sum::<f64>() / working.len() as f64;
                let tol = 1e-12 * g.amax().max(1.0);
                let entering = (0..m)
                    .filter(|j| !working.contains(j))
                    .min_by(|&i, &j| g[i].total_cmp(&g[j]))
                    .filter(|&j| g[j] < level - tol);
                match entering {
                    Some(j) => working.push(j),
                    None => break,
                }
                continue;
            }
            let mut alpha = 1.0;
            let mut blocking = None;
            for &j in &working {
                if d[j] < 0.0 {
                    let a = -x[j] / d[j];
                    if a < alpha {
                        alpha = a;
                        blocking = Some(j);
                    }
                }
            }
            x += &d * alpha;
            if let Some(j) = blocking {
                x[j] = 0.0;
                working.retain(|&i| i != j);
            }
            for v in x.iter_mut() {
                *v = v.max(0.0);
            }
            x /= x.sum();
        }
        x
    }
}

fn convex_mse(y: &[f64], preds: &[Vec<f64>], pi: &[f64]) -> f64 {
    y.iter()
        .zip(preds)
        .map(|(yt, row)| {
            let f: f64 = row.iter().zip(pi).map(|(p, w)| p * w).sum();
            (yt - f).powi(2)
        })
        .sum::<f64>()
        / y.len() as f64
}

/// `min_{pi in simplex} mean_t (y_t - Σ pi_m y_hat_{t,m})²` by accelerated
/// projected gradient from the barycentre and random restarts, each finished
/// by an active-set pass.
pub fn best_convex(y: &[f64], preds: &[Vec<f64>], seed: u64) -> Result<ConvexFit> {
    if y.is_empty() || preds.len() != y.len() {
        return Err(KaoError::Dimension(format!(
            "{} responses vs {} forecast rows",
            y.len(),
            preds.len()
        )));
    }
    let m = preds[0].len();
    if m == 0 || preds.iter().any(|r| r.len() != m) {
        return Err(KaoError::Dimension("ragged forecast rows".into()));
    }
    let quad = Quadratic::new(y, preds);
    let mut starts = vec![DVector::from_element(m, 1.0 / m as f64)];
    let mut r = rng::stream(seed, rng::STREAM_EXPERT_BASE);
    for _ in 1..RESTARTS {
        let w: Vec<f64> = (0..m).map(|_| -r.random::<f64>().ln()).collect();
        let s: f64 = w.iter().sum();
        starts.push(DVector::from_iterator(m, w.into_iter().map(|v| v / s)));
    }
    let mut best: Option<ConvexFit> = None;
    for start in starts {
        let x = quad.fista(start);
        for cand in [quad.active_set(&x), x] {
            let pi = project_simplex(cand.as_slice());
            let mse = convex_mse(y, preds, &pi);
            if best.as_ref().is_none_or(|b| mse < b.mse) {
                best = Some(ConvexFit { pi, mse });
            }
        }
    }
    // a vertex can only tie or lose, but check so the dominance holds exactly
    for v in 0..m {
        let mut pi = vec![0.0; m];
        pi[v] = 1.0;
        let mse = convex_mse(y, preds, &pi);
        if best.as_ref().is_none_or(|b| mse < b.mse) {
            best = Some(ConvexFit { pi, mse });
        }
    }
    Ok(best.expect("at least one start"))
}

/// Best convex combination of the record's experts.
pub fn best_convex_oracle(record: &RunRecord) -> Result<ConvexFit> {
    best_convex(&record.y, &record.y_hat, record.seed)
}

/// Regrets on the exact risks `L_t(y) = (y - mu_t)² + sigma2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub cum_risk_agg: f64,
    pub cum_risk_experts: Vec<f64>,
    /// `R_T^S(m)` for every expert.
    pub selection: Vec<f64>,
    pub best_expert: usize,
    /// `R_T^A(pi*)` against the best convex combination of the forecasts.
    pub aggregation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rule: String,
    pub horizon: usize,
    pub mse: f64,
    pub expert_mse: Vec<f64>,
    pub best_expert: usize,
    pub best_expert_mse: f64,
    pub best_convex_mse: f64,
    pub best_convex_pi: Vec<f64>,
    /// RMSE of the aggregate relative to the best convex RMSE.
    pub relative_rmse: f64,
    pub rate_violations: usize,
    pub regret: Option<RegretReport>,
}

/// Running sum.
pub fn cumulative(v: &[f64]) -> Vec<f64> {
    v.iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

pub fn exact_risk(y: f64, mu: f64, sigma2: f64) -> f64 {
    (y - mu).powi(2) + sigma2
}

pub fn metrics(record: &RunRecord) -> Result<MetricsReport> {
    let m = record.n_experts();
    let expert_mse: Vec<f64> = (0..m)
        .map(|j| {
            record
                .y
                .iter()
                .zip(&record.y_hat)
                .map(|(y, r)| (r[j] - y).powi(2))
                .sum::<f64>()
                / record.horizon() as f64
        })
        .collect();
    let best_expert = argmin(&expert_mse);
    let convex = best_convex_oracle(record)?;
    let mse = record.mse();
    let regret = match (&record.mu, record.sigma2_truth) {
        (Some(mu), Some(s2)) => Some(regret_report(record, mu, s2, &convex.pi)),
        _ => None,
    };
    Ok(MetricsReport {
        rule: record.rule.name().to_string(),
        horizon: record.horizon(),
        mse,
        best_expert,
        best_expert_mse: expert_mse[best_expert],
        expert_mse,
        best_convex_mse: convex.mse,
        relative_rmse: (mse / convex.mse).sqrt(),
        best_convex_pi: convex.pi,
        rate_violations: record.rate_violations,
        regret,
    })
}

fn argmin(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

fn regret_report(record: &RunRecord, mu: &[f64], sigma2: f64, pi: &[f64]) -> RegretReport {
    let m = record.n_experts();
    let mut cum_agg = 0.0;
    let mut cum_exp = vec![0.0; m];
    let mut cum_pi = 0.0;
    for t in 0..record.horizon() {
        cum_agg += exact_risk(record.agg[t], mu[t], sigma2);
        for (j, c) in cum_exp.iter_mut().enumerate() {
            *c += exact_risk(record.y_hat[t][j], mu[t], sigma2);
        }
        let f: f64 = record.y_hat[t].iter().zip(pi).map(|(p, w)| p * w).sum();
        cum_pi += exact_risk(f, mu[t], sigma2);
    }
    let best = argmin(&cum_exp);
    RegretReport {
        cum_risk_agg: cum_agg,
        selection: cum_exp.iter().map(|c| cum_agg - c).collect(),
        cum_risk_experts: cum_exp,
        best_expert: best,
        aggregation: cum_agg - cum_pi,
    }
}

/// One row of a relative-RMSE table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRmse {
    pub procedure: String,
    pub rmse: f64,
    pub relative: f64,
}

/// RMSE of each record, of the best expert, of the uniform mean and of the
/// best convex combination, all relative to the last. Every record must be
/// built on the same forecasts.
pub fn relative_rmse_table(records: &[RunRecord], labels: &[String]) -> Result<Vec<RelativeRmse>> {
    let first = records
        .first()
        .ok_or_else(|| KaoError::InvalidArgument("no records to tabulate".into()))?;
    let convex = best_convex_oracle(first)?;
    let base = convex.mse.sqrt();
    let m = first.n_experts();
    let expert_rmse: Vec<f64> = (0..m)
        .map(|j| convex_mse(&first.y, &first.y_hat, &unit(m, j)).sqrt())
        .collect();
    let uniform = convex_mse(&first.y, &first.y_hat, &vec![1.0 / m as f64; m]).sqrt();
    let mut rows = vec![
        row("best expert", expert_rmse[argmin(&expert_rmse)], base),
        row("uniform", uniform, base),
    ];
    for (rec, label) in records.iter().zip(labels) {
        if rec.y != first.y || rec.y_hat != first.y_hat {
            return Err(KaoError::InvalidArgument(format!(
                "record {label} uses different forecasts"
            )));
        }
        rows.push(row(label, rec.mse().sqrt(), base));
    }
    rows.push(row("best convex", base, base));
    Ok(rows)
}

fn unit(m: usize, j: usize) -> Vec<f64> {
    let mut v = vec![0.0; m];
    v[j] = 1.0;
    v
}

fn row(name: &str, rmse: f64, base: f64) -> RelativeRmse {
    RelativeRmse {
        procedure: name.to_string(),
        rmse,
        relative: rmse / base,
    }
}
