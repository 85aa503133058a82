//! Pipeline orchestration for cost-aware Think/Non-Think routing: synthetic
//! data, ingestion, the stage sequence from labels to a frozen policy, and
//! offline evaluation with relative-delta reports.

pub mod artifacts;
pub mod config;
pub mod eval;
pub mod stages;
pub mod synth;

use reasonroute_core::Error as CoreError;
use reasonroute_gateway::GatewayError;

pub use config::PipelineConfig;

/// Short machine-readable category for an error chain.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if cause.downcast_ref::<artifacts::StaleInput>().is_some() {
            return "provenance";
        }
        if cause.downcast_ref::<artifacts::MissingInput>().is_some() {
            return "missing-input";
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::SchemaMismatch { .. } => "schema-mismatch",
                CoreError::Infeasible { .. } => "infeasible",
                CoreError::Parse { .. } | CoreError::Json(_) => "parse",
                CoreError::VersionMismatch { .. } => "version-mismatch",
                CoreError::Checksum => "checksum",
                CoreError::Io(_) => "io",
                CoreError::NonFinite(_) => "non-finite",
                CoreError::NotFitted => "not-fitted",
                _ => "invalid-input",
            };
        }
        if cause.downcast_ref::<GatewayError>().is_some() {
            return "gateway";
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return "config";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}
