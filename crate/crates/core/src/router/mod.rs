//! Gradient-boosted regression trees for the advantage regressor, with a
//! monotone-decreasing constraint on the extra-cost feature.

mod tree;
mod tukey;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::features::{FeatureSchema, FeatureVector, DELTA_COST_FEATURE};
use crate::io::{decode_sealed, encode_sealed, Header};

pub use tree::{Node, Tree};
pub use tukey::{reweight_tukey, MAD_TO_SIGMA, TUKEY_C, WEIGHT_FLOOR};

pub const MODEL_KIND: &str = "router-model";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reweight {
    None,
    #[default]
    Tukey,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub subsample: f64,
    pub seed: u64,
    pub reweight: Reweight,
    pub monotone_decreasing: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_rounds: 200,
            max_depth: 3,
            learning_rate: 0.05,
            min_samples_leaf: 5,
            subsample: 0.8,
            seed: 0x5EED,
            reweight: Reweight::Tukey,
            monotone_decreasing: vec![DELTA_COST_FEATURE.to_string()],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rounds < 1 {
            return Err(Error::invalid("n_rounds must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::invalid(format!("learning_rate must lie in (0, 1], got {}", self.learning_rate)));
        }
        if self.max_depth < 1 {
            return Err(Error::invalid("max_depth must be >= 1"));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::invalid(format!("subsample must lie in (0, 1], got {}", self.subsample)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub n_rounds: usize,
    pub max_depth: usize,
    pub reweight: Reweight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterModel {
    pub schema: Vec<String>,
    pub schema_hash: String,
    pub monotone_decreasing: Vec<String>,
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    pub meta: TrainMeta,
}

/// Weighted training loss after each round; entry 0 is the base score alone.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

fn weighted_sse(y: &[f64], pred: &[f64], w: &[f64]) -> f64 {
    y.iter().zip(pred).zip(w).map(|((a, b), w)| w * (a - b) * (a - b)).sum()
}

fn check_training_data(x: &Array2<f64>, y: &[f64], w: &[f64], schema: &FeatureSchema) -> Result<()> {
    let n = x.nrows();
    if n < 2 || y.len() != n || w.len() != n {
        return Err(Error::invalid(format!(
            "training needs >= 2 aligned rows (X {n}, y {}, w {})",
            y.len(),
            w.len()
        )));
    }
    if x.ncols() != schema.names.len() {
        return Err(Error::invalid(format!("X has {} columns, schema {}", x.ncols(), schema.names.len())));
    }
    if let Some((i, _)) = x.indexed_iter().find(|(_, v)| v.is_nan()) {
        return Err(Error::NonFinite(format!("feature `{}` in row {}", schema.names[i.1], i.0)));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training target".into()));
    }
    if let Some(v) = w.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::invalid(format!("weights must be positive, got {v}")));
    }
    Ok(())
}

/// Fit the ensemble. With `Reweight::Tukey` a warm-up fit with the given
/// weights runs first and its residuals rescale the weights of the final fit.
pub fn train(
    exec: Execution,
    x: &Array2<f64>,
    y: &[f64],
    w: &[f64],
    schema: &FeatureSchema,
    cfg: &TrainConfig,
) -> Result<(RouterModel, TrainLog)> {
    cfg.validate()?;
    check_training_data(x, y, w, schema)?;
    for m in &cfg.monotone_decreasing {
        if schema.index_of(m).is_none() {
            return Err(Error::SchemaMismatch { missing: vec![m.clone()] });
        }
    }
    match cfg.reweight {
        Reweight::None => boost(exec, x, y, w, schema, cfg),
        Reweight::Tukey => {
            let (warm, _) = boost(exec, x, y, w, schema, cfg)?;
            let residuals: Vec<f64> = x
                .rows()
                .into_iter()
                .zip(y)
                .map(|(row, t)| t - warm.predict_row(row.as_slice().expect("standard layout")))
                .collect();
            let robust: Vec<f64> = reweight_tukey(&residuals).iter().zip(w).map(|(a, b)| a * b).collect();
            boost(exec, x, y, &robust, schema, cfg)
        }
    }
}

fn boost(
    exec: Execution,
    x: &Array2<f64>,
    y: &[f64],
    w: &[f64],
    schema: &FeatureSchema,
    cfg: &TrainConfig,
) -> Result<(RouterModel, TrainLog)> {
    let x = x.as_standard_layout().into_owned();
    let n = y.len();
    let base_score = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>();
    let decreasing: Vec<bool> = schema.names.iter().map(|f| cfg.monotone_decreasing.contains(f)).collect();
    let params = tree::TreeParams {
        max_depth: cfg.max_depth,
        min_samples_leaf: cfg.min_samples_leaf,
        decreasing: &decreasing,
        exec,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sample_size = ((cfg.subsample * n as f64).round() as usize).clamp(1, n);

    let mut pred = vec![base_score; n];
    let mut log = TrainLog {
        losses: vec![weighted_sse(y, &pred, w)],
    };
    let mut trees = Vec::with_capacity(cfg.n_rounds);
    for _ in 0..cfg.n_rounds {
        let resid: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
        let rows = if sample_size == n {
            (0..n).collect()
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, n, sample_size).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut t = tree::fit_tree(&x, &resid, w, rows, &params);
        let out: Vec<f64> = x.rows().into_iter().map(|r| t.predict(r.as_slice().expect("standard layout"))).collect();

        // A tree fitted on a subsample (or with clamped leaves) can raise the
        // full training loss at the nominal step. Shrink it to the best step
        // in [0, lr] along its own direction so the loss never goes up.
        let sw_rt: f64 = (0..n).map(|i| w[i] * resid[i] * out[i]).sum();
        let sw_tt: f64 = (0..n).map(|i| w[i] * out[i] * out[i]).sum();
        let lr = cfg.learning_rate;
        let step = if sw_tt <= 0.0 {
            lr
        } else if lr * lr * sw_tt - 2.0 * lr * sw_rt > 0.0 {
            (sw_rt / sw_tt).clamp(0.0, lr)
        } else {
            lr
        };
        if step != lr {
            t.scale_leaves(step / lr);
        }
        for i in 0..n {
            pred[i] += step * out[i];
        }
        let loss = weighted_sse(y, &pred, w);
        let prev = *log.losses.last().expect("seeded");
        // absorb floating-point noise in the incremental update
        log.losses.push(loss.min(prev));
        trees.push(t);
    }
    let model = RouterModel {
        schema: schema.names.clone(),
        schema_hash: schema.hash(),
        monotone_decreasing: cfg.monotone_decreasing.clone(),
        base_score,
        learning_rate: cfg.learning_rate,
        trees,
        meta: TrainMeta {
            seed: cfg.seed,
            n_rounds: cfg.n_rounds,
            max_depth: cfg.max_depth,
            reweight: cfg.reweight,
        },
    };
    Ok((model, log))
}

impl RouterModel {
    /// Model with no trees: predicts `base_score` everywhere.
    pub fn constant(schema: &FeatureSchema, base_score: f64) -> Self {
        RouterModel {
            schema: schema.names.clone(),
            schema_hash: schema.hash(),
            monotone_decreasing: Vec::new(),
            base_score,
            learning_rate: 1.0,
            trees: Vec::new(),
            meta: TrainMeta {
                seed: 0,
                n_rounds: 0,
                max_depth: 0,
                reweight: Reweight::None,
            },
        }
    }

    pub fn feature_schema(&self) -> FeatureSchema {
        FeatureSchema::new(self.schema.clone())
    }

    /// Prediction for a row already ordered by the model schema.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.base_score + self.learning_rate * self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }

    pub fn predict(&self, v: &FeatureVector) -> Result<f64> {
        let row = v.values_for(&self.schema)?;
        if row.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite(format!("features of `{}`", v.instance_id)));
        }
        Ok(self.predict_row(&row))
    }

    pub fn predict_batch(&self, exec: Execution, vs: &[FeatureVector]) -> Result<Vec<f64>> {
        exec.map(vs, |v| self.predict(v)).into_iter().collect()
    }

    /// Total split gain per feature, in schema order; features never split
    /// on are absent.
    pub fn feature_importance(&self) -> IndexMap<String, f64> {
        let mut gains = vec![0.0; self.schema.len()];
        for t in &self.trees {
            for n in &t.nodes {
                if let Node::Split { feature, gain, .. } = n {
                    gains[*feature] += gain.max(0.0);
                }
            }
        }
        self.schema
            .iter()
            .zip(gains)
            .filter(|(_, g)| *g > 0.0)
            .map(|(n, g)| (n.clone(), g))
            .collect()
    }

    pub fn feature_importance_normalized(&self) -> IndexMap<String, f64> {
        let raw = self.feature_importance();
        let total: f64 = raw.values().sum();
        raw.into_iter().map(|(k, v)| (k, v / total)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let schema = self.feature_schema();
        if schema.hash() != self.schema_hash {
            return Err(Error::invalid("model schema hash does not match its feature list"));
        }
        if let Some(m) = self.monotone_decreasing.iter().find(|m| schema.index_of(m).is_none()) {
            return Err(Error::SchemaMismatch { missing: vec![m.clone()] });
        }
        if !self.base_score.is_finite() || !self.learning_rate.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        for t in &self.trees {
            if t.nodes.is_empty() {
                return Err(Error::invalid("empty tree"));
            }
            for n in &t.nodes {
                match n {
                    Node::Leaf { value } if !value.is_finite() => {
                        return Err(Error::NonFinite("leaf value".into()));
                    }
                    Node::Split {
                        feature, left, right, ..
                    } if *feature >= self.schema.len() || *left >= t.nodes.len() || *right >= t.nodes.len() => {
                        return Err(Error::invalid("split references a missing feature or node"));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Fail unless the model was trained on exactly this schema.
    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        if schema.hash() == self.schema_hash {
            return Ok(());
        }
        let missing: Vec<String> = self.schema.iter().filter(|n| schema.index_of(n).is_none()).cloned().collect();
        if missing.is_empty() {
            Err(Error::invalid(format!(
                "schema hash mismatch: model {} vs manifest {}",
                self.schema_hash,
                schema.hash()
            )))
        } else {
            Err(Error::SchemaMismatch { missing })
        }
    }

    pub fn save(&self) -> Result<String> {
        self.save_with_inputs([])
    }

    /// Sealed document whose header also records the hashes of the files
    /// the model was trained from.
    pub fn save_with_inputs<'a>(&self, inputs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<String> {
        let mut header = Header::new(MODEL_KIND);
        for (name, hash) in inputs {
            header = header.with_input(name, hash);
        }
        header = header.with_input("schema", self.schema_hash.clone());
        encode_sealed(header, self)
    }

    pub fn load(text: &str) -> Result<Self> {
        Ok(Self::load_with_header(text)?.1)
    }

    pub fn load_with_header(text: &str) -> Result<(Header, Self)> {
        let (header, model): (Header, RouterModel) = decode_sealed(text, MODEL_KIND)?;
        if header.inputs.get("schema") != Some(&model.schema_hash) {
            return Err(Error::invalid("model header schema hash disagrees with body"));
        }
        model.validate()?;
        Ok((header, model))
    }
}
