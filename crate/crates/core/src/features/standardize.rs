use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_STD: f64 = 1e-12;

/// Per-feature z-score fitted on a training matrix (population std).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features whose training std fell below 1e-12; they are centred only.
    pub constant: Vec<bool>,
}

impl Standardizer {
    pub fn fit(x: &Array2<f64>) -> Result<(Self, Array2<f64>)> {
        if x.nrows() < 2 {
            return Err(Error::invalid("standardize needs at least 2 vectors"));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let std = x.std_axis(Axis(0), 0.0).to_vec();
        let constant = std.iter().map(|&s| s < MIN_STD).collect();
        let s = Standardizer { mean, std, constant };
        let t = s.transform(x)?;
        Ok((s, t))
    }

    pub fn transform(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::invalid(format!(
                "standardizer fitted on {} features, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        let mut out = x.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            if self.constant[j] {
                col.mapv_inplace(|v| v - m);
            } else {
                col.mapv_inplace(|v| (v - m) / s);
            }
        }
        Ok(out)
    }
}
