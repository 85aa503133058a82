//! Cost-aware routing between direct ("Non-Think") and reasoning ("Think")
//! inference for LLM-based ranking.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`ranking`]: domain types, listwise metrics, advantage labels.
//! * [`features`]: segment pooling, embedding statistics, the extra-cost estimator.
//! * [`probe`]: diagnostic checklist layout, block-diagonal masks, Yes/No aggregation.
//! * [`select`]: lasso probe, cross-setting consistency, redundancy pruning.
//! * [`router`]: monotone-constrained gradient-boosted regression trees.
//! * [`policy`]: threshold sweeps, Pareto frontier, deployment anchors.
//! * [`io`]: line-delimited record files with provenance headers.
//!
//! Data-parallel loops go through [`exec::Execution`]; building without the
//! default `parallel` feature drops the rayon dependency and runs everything
//! sequentially.

pub mod error;
pub mod exec;
pub mod features;
pub mod io;
pub mod policy;
pub mod probe;
pub mod ranking;
pub mod router;
pub mod select;

pub use error::{Error, Result};
pub use exec::Execution;
