//! Linear estimator of the extra tokens Think spends over Non-Think, usable
//! before either generation happens.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSample {
    pub prompt_tokens: f64,
    pub n_candidates: f64,
    pub delta_tokens: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearCost {
    pub intercept: f64,
    pub prompt_coef: f64,
    pub candidates_coef: f64,
    pub residual_scale: f64,
    pub n_train: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum CostModel {
    #[default]
    Unfitted,
    Fitted(LinearCost),
}

impl CostModel {
    pub fn constant(delta: f64) -> Self {
        CostModel::Fitted(LinearCost {
            intercept: delta,
            prompt_coef: 0.0,
            candidates_coef: 0.0,
            residual_scale: 0.0,
            n_train: 0,
        })
    }

    /// Raw (unclamped) prediction.
    pub fn predict_raw(&self, prompt_tokens: f64, n_candidates: f64) -> Result<f64> {
        match self {
            CostModel::Unfitted => Err(Error::NotFitted),
            CostModel::Fitted(m) => Ok(m.intercept + m.prompt_coef * prompt_tokens + m.candidates_coef * n_candidates),
        }
    }
}

/// Predicted extra tokens, clamped to at least 1.
pub fn estimate_delta_cost(model: &CostModel, prompt_tokens: u64, n_candidates: usize) -> Result<f64> {
    Ok(model.predict_raw(prompt_tokens as f64, n_candidates as f64)?.max(1.0))
}

/// Least squares of delta tokens on `(1, prompt_tokens, n_candidates)`.
///
/// Columns without variance are dropped; if the remaining design is still
/// rank deficient the slopes are dropped one at a time, ending at the
/// intercept-only model (mean delta).
pub fn fit_cost_model(samples: &[CostSample]) -> Result<CostModel> {
    if samples.len() < 2 {
        return Err(Error::invalid("cost model needs at least 2 training records"));
    }
    let n = samples.len() as f64;
    let y: Vec<f64> = samples.iter().map(|s| s.delta_tokens).collect();
    let cols: [Vec<f64>; 2] = [
        samples.iter().map(|s| s.prompt_tokens).collect(),
        samples.iter().map(|s| s.n_candidates).collect(),
    ];
    if y.iter().chain(cols.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost model training data".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let y_mean = mean(&y);
    let means = [mean(&cols[0]), mean(&cols[1])];
    let varies = |j: usize| cols[j].iter().any(|&x| (x - means[j]).abs() > 1e-12 * (1.0 + means[j].abs()));

    let candidates: Vec<Vec<usize>> = vec![vec![0, 1], vec![0], vec![1]];
    let mut coef = [0.0, 0.0];
    for set in candidates {
        let set: Vec<usize> = set.into_iter().filter(|&j| varies(j)).collect();
        if set.is_empty() {
            continue;
        }
        let x = DMatrix::from_fn(samples.len(), set.len(), |i, c| cols[set[c]][i] - means[set[c]]);
        let yc = DVector::from_iterator(samples.len(), y.iter().map(|v| v - y_mean));
        let svd = x.clone().svd(true, true);
        let sv = &svd.singular_values;
        let (max, min) = (sv.max(), sv.min());
        if max <= 0.0 || min / max < 1e-10 {
            continue;
        }
        let beta = svd.solve(&yc, 0.0).map_err(|e| Error::invalid(e.to_string()))?;
        for (c, &j) in set.iter().enumerate() {
            coef[j] = beta[c];
        }
        break;
    }
    let intercept = y_mean - coef[0] * means[0] - coef[1] * means[1];
    let rss: f64 = samples
        .iter()
        .map(|s| {
            let r = s.delta_tokens - (intercept + coef[0] * s.prompt_tokens + coef[1] * s.n_candidates);
            r * r
        })
        .sum();
    Ok(CostModel::Fitted(LinearCost {
        intercept,
        prompt_coef: coef[0],
        candidates_coef: coef[1],
        residual_scale: (rss / n).sqrt(),
        n_train: samples.len(),
    }))
}
