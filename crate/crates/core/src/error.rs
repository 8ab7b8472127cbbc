use alloc::string::String;

/// Errors raised by the pipeline stages.
///
/// Each variant names the kind of failure; the message carries the detail.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
