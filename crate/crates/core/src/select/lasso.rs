use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LASSO_TOL: f64 = 1e-8;
pub const LASSO_MAX_SWEEPS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub sweeps: usize,
    /// Objective value after each sweep.
    pub objective: Vec<f64>,
}

impl LassoFit {
    pub fn support(&self) -> Vec<usize> {
        self.coef.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(j, _)| j).collect()
    }

    pub fn predict_row(&self, row: ArrayView1<'_, f64>) -> f64 {
        self.intercept + row.iter().zip(&self.coef).map(|(x, c)| x * c).sum::<f64>()
    }
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

fn check_xy(x: &Array2<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::invalid(format!("lasso: {} rows vs {} targets", x.nrows(), y.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lasso design".into()));
    }
    Ok(())
}

/// Smallest alpha at which every coefficient is zero: `max |X^T y| / N`
/// over the centred design.
pub fn alpha_max(x: &Array2<f64>, y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let y_mean = y.iter().sum::<f64>() / n;
    let x_mean = x.mean_axis(Axis(0)).expect("rows");
    x.columns()
        .into_iter()
        .zip(x_mean.iter())
        .map(|(col, m)| (col.iter().zip(y).map(|(a, b)| (a - m) * (b - y_mean)).sum::<f64>() / n).abs())
        .fold(0.0, f64::max)
}

/// Cyclic coordinate descent for
/// `(1 / 2N) ||y - b0 - X b||^2 + alpha ||b||_1`, with the intercept
/// absorbed by centring. Stops when the largest coefficient change in a
/// sweep is below 1e-8, or after 10,000 sweeps.
pub fn fit_l1_probe(x: &Array2<f64>, y: &[f64], alpha: f64) -> Result<LassoFit> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "lasso alpha must be > 0 (got {alpha}); use ordinary least squares explicitly instead"
        )));
    }
    check_xy(x, y)?;
    let (n, p) = x.dim();
    let nf = n as f64;
    let x_mean = x.mean_axis(Axis(0)).expect("rows");
    let xc = x - &x_mean.view().insert_axis(Axis(0));
    let y_mean = y.iter().sum::<f64>() / nf;
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let col_sq: Vec<f64> = xc.columns().into_iter().map(|c| c.dot(&c) / nf).collect();
    let mut coef = vec![0.0; p];

    let objective = |resid: &[f64], coef: &[f64]| -> f64 {
        resid.iter().map(|r| r * r).sum::<f64>() / (2.0 * nf) + alpha * coef.iter().map(|c| c.abs()).sum::<f64>()
    };

    let mut trace: Vec<f64> = Vec::new();
    let mut sweeps = 0;
    while sweeps < LASSO_MAX_SWEEPS {
        sweeps += 1;
        let mut max_delta: f64 = 0.0;
        for j in 0..p {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = xc.column(j);
            let rho = col.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / nf + col_sq[j] * coef[j];
            let new = soft_threshold(rho, alpha) / col_sq[j];
            let delta = new - coef[j];
            if delta != 0.0 {
                for (r, a) in resid.iter_mut().zip(col.iter()) {
                    *r -= a * delta;
                }
                coef[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        let obj = objective(&resid, &coef);
        if let Some(prev) = trace.last() {
            debug_assert!(obj <= prev + 1e-12 * (1.0 + prev.abs()), "lasso objective increased");
        }
        trace.push(obj);
        if max_delta < LASSO_TOL {
            break;
        }
    }
    let intercept = y_mean - x_mean.iter().zip(&coef).map(|(m, c)| m * c).sum::<f64>();
    Ok(LassoFit {
        coef,
        intercept,
        sweeps,
        objective: trace,
    })
}

/// Pick alpha from a log-spaced grid by k-fold validation MSE (folds are
/// assigned round-robin by row). Ties go to the larger alpha.
pub fn select_alpha_cv(x: &Array2<f64>, y: &[f64], folds: usize, n_alphas: usize) -> Result<(f64, Vec<(f64, f64)>)> {
    check_xy(x, y)?;
    let folds = folds.clamp(2, y.len().max(2));
    if y.len() < folds {
        return Err(Error::invalid("fewer rows than cross-validation folds"));
    }
    let a_max = alpha_max(x, y);
    if a_max <= 0.0 {
        return Ok((1.0, vec![(1.0, 0.0)]));
    }
    let n_alphas = n_alphas.max(1);
    let grid: Vec<f64> = (0..n_alphas)
        .map(|i| {
            let t = if n_alphas == 1 { 0.0 } else { i as f64 / (n_alphas - 1) as f64 };
            a_max * 10f64.powf(-3.0 * t)
        })
        .collect();
    let mut scores = Vec::with_capacity(grid.len());
    for &alpha in &grid {
        let mut se = 0.0;
        for f in 0..folds {
            let train: Vec<usize> = (0..y.len()).filter(|i| i % folds != f).collect();
            let test: Vec<usize> = (0..y.len()).filter(|i| i % folds == f).collect();
            let xt = x.select(Axis(0), &train);
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let fit = fit_l1_probe(&xt, &yt, alpha)?;
            for &i in &test {
                let r = y[i] - fit.predict_row(x.row(i));
                se += r * r;
            }
        }
        scores.push((alpha, se / y.len() as f64));
    }
    // grid is descending in alpha, so strict < keeps the larger alpha on ties
    let best = scores
        .iter()
        .fold(None::<(f64, f64)>, |acc, &(a, s)| match acc {
            Some((_, bs)) if s >= bs => acc,
            _ => Some((a, s)),
        })
        .expect("non-empty grid");
    Ok((best.0, scores))
}
