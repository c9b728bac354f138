//! Error type shared across the whole pipeline.
//!
//! Everything fallible in this crate returns [`Error`]. The variants are
//! deliberately coarse: callers mostly care about *which contract* was
//! violated (shape, config, file format, ...) and want a message they can
//! print, not a taxonomy to match on.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor had the wrong shape for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller violated a documented precondition.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Input values are outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A binary artifact could not be decoded. `offset` is the byte position
    /// at which decoding failed.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// A numeric quantity became non-finite during iteration.
    #[error("diverged in {op} at step {step}: {detail}")]
    Diverged {
        op: &'static str,
        step: usize,
        detail: String,
    },

    /// A latent channel has (numerically) zero variance and cannot be
    /// normalized.
    #[error("degenerate latent channel {channel}: std {std:.3e} below threshold")]
    DegenerateChannel { channel: usize, std: f64 },

    /// Pearson correlation is undefined because one input has zero variance.
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    /// An expected artifact produced by an earlier stage is missing.
    #[error("missing artifact {path}: run stage `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: String },

    /// An artifact on disk was produced under a different configuration.
    #[error("stale artifact {path}: {detail} (re-run the producing stage or pass --force)")]
    StaleArtifact { path: PathBuf, detail: String },

    /// A sampling pool was exhausted before the requested count was reached.
    #[error("quota not met: {0}")]
    Quota(String),

    /// General numeric failure (non-finite input, failed decomposition, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw io error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
