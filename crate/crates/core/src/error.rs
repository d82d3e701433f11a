//! Crate-wide error type.

/// Errors surfaced by every layer of the crate.
///
/// The CLI maps these onto its exit-code contract: `Config`/`ConfigParse`
/// become exit 2, `Divergence` becomes exit 3, everything else exit 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid configuration (bad hyperparameters, impossible combinations).
    #[error("config error: {0}")]
    Config(String),

    /// Config-file syntax or schema problem, with the offending line.
    #[error("config error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    /// Non-finite values or other numeric breakdown outside training.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss; names the optimizer step.
    #[error("numeric divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// An API precondition was violated (e.g. non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Gradient-flow audit failure; names the offending parameter or input.
    #[error("audit failure: {0}")]
    Audit(String),

    /// Malformed weights file.
    #[error("weights file error: {0}")]
    Weights(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
