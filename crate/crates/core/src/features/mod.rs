//! Ranking-aware features computed from pooled segment embeddings, plus the
//! estimated extra cost of reasoning.

mod cost;
mod pool;
mod standardize;
mod stats;

use std::collections::BTreeSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::io::sha256_hex;

pub use cost::{estimate_delta_cost, fit_cost_model, CostModel, CostSample, LinearCost};
pub use pool::{pool_segment, HiddenStates, Pooling};
pub use standardize::Standardizer;
pub use stats::{
    alignment_features, complexity_features, context_vector, cosine, entropy, kmeans_cluster_entropy,
    spectral_entropy, FeatureFlag, KMeansConfig, NamedFeatures, ALIGNMENT_FEATURES, COMPLEXITY_FEATURES,
};

pub const SCHEMA_VERSION: &str = "reasonroute-features/1";
/// Name of the extra-cost feature the router is constrained to be
/// non-increasing in.
pub const DELTA_COST_FEATURE: &str = "delta_cost_est";
pub const CHECKLIST_PREFIX: &str = "chk_";

/// Pooled embeddings for one instance, produced outside this crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDump {
    pub instance_id: String,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<Vec<Vec<f64>>>,
    pub candidates: Vec<Vec<f64>>,
    pub prompt_tokens: u64,
}

impl EmbeddingDump {
    pub fn validate(&self) -> Result<()> {
        let id = &self.instance_id;
        if self.dim == 0 {
            return Err(Error::invalid(format!("dump `{id}` has dim 0")));
        }
        match (&self.context, &self.history) {
            (Some(_), None) => {}
            (None, Some(h)) if !h.is_empty() => {}
            _ => return Err(Error::invalid(format!("dump `{id}` needs exactly one of context/history"))),
        }
        let all = self
            .context
            .iter()
            .chain(self.history.iter().flatten())
            .chain(self.candidates.iter());
        for v in all {
            if v.len() != self.dim {
                return Err(Error::invalid(format!("dump `{id}`: vector of length {} != dim {}", v.len(), self.dim)));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("dump `{id}`")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub instance_id: String,
    pub features: IndexMap<String, f64>,
    pub schema_version: String,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub flags: BTreeSet<FeatureFlag>,
}

impl FeatureVector {
    pub fn names(&self) -> Vec<String> {
        self.features.keys().cloned().collect()
    }

    /// Values in the order of `schema`; errors list every missing name.
    pub fn values_for(&self, schema: &[String]) -> Result<Vec<f64>> {
        let missing: Vec<String> = schema.iter().filter(|n| !self.features.contains_key(*n)).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::SchemaMismatch { missing });
        }
        Ok(schema.iter().map(|n| self.features[n]).collect())
    }

    /// Append checklist difficulty signals as `chk_<pair_id>` features.
    pub fn join_signals<'a>(&mut self, signals: impl IntoIterator<Item = (&'a String, &'a f64)>) {
        for (pair, v) in signals {
            self.features.insert(format!("{CHECKLIST_PREFIX}{pair}"), *v);
        }
    }
}

/// Ordered list of feature names shared by every vector of a split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub names: Vec<String>,
}

impl FeatureSchema {
    pub fn new(names: Vec<String>) -> Self {
        FeatureSchema { names }
    }

    /// One name per line; this text is what the schema hash covers.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        for n in &self.names {
            s.push_str(n);
            s.push('\n');
        }
        s
    }

    pub fn parse_manifest(text: &str) -> Self {
        FeatureSchema {
            names: text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.manifest().as_bytes())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Complexity block, alignment block, then `delta_cost_est`.
pub fn extract_features(dump: &EmbeddingDump, cost_model: &CostModel, kmeans: &KMeansConfig) -> Result<FeatureVector> {
    dump.validate()?;
    let complexity = complexity_features(dump, kmeans)?;
    let alignment = alignment_features(dump)?;
    let delta = estimate_delta_cost(cost_model, dump.prompt_tokens, dump.candidates.len())?;
    let mut features = complexity.values;
    features.extend(alignment.values);
    features.insert(DELTA_COST_FEATURE.to_string(), delta);
    if let Some((name, _)) = features.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("feature `{name}` of `{}`", dump.instance_id)));
    }
    Ok(FeatureVector {
        instance_id: dump.instance_id.clone(),
        features,
        schema_version: SCHEMA_VERSION.to_string(),
        flags: complexity.flags.union(&alignment.flags).copied().collect(),
    })
}

pub fn extract_features_batch(
    exec: Execution,
    dumps: &[EmbeddingDump],
    cost_model: &CostModel,
    kmeans: &KMeansConfig,
) -> Result<Vec<FeatureVector>> {
    exec.map(dumps, |d| extract_features(d, cost_model, kmeans)).into_iter().collect()
}
