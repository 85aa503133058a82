use thiserror::Error;

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gateway config: {0}")]
    Config(String),

    #[error("API key variable `{0}` is not set")]
    MissingApiKey(String),

    #[error("request failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("no ranking in model output: {0}")]
    Parse(String),

    #[error("malformed provider response: {0}")]
    Response(String),

    #[error(transparent)]
    Core(#[from] reasonroute_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
