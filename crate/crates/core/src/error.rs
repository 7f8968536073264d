use std::path::PathBuf;

use crate::predictor::protocol::ProtocolError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate channel {channel}: standard deviation {std} over {count} masked voxels")]
    DegenerateChannel { channel: usize, std: f64, count: usize },

    #[error("{path}: not a NIfTI-1 single-file image ({reason})")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: unsupported NIfTI datatype code {code}")]
    UnsupportedDatatype { path: PathBuf, code: i16 },

    #[error("{path}: truncated file, expected {expected} bytes, found {actual}")]
    Truncated { path: PathBuf, expected: u64, actual: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid augmentation prior: {0}")]
    InvalidPrior(String),

    #[error("affine matrix is singular (|det| = {det:e})")]
    SingularMatrix { det: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("predictor {name}: expected {expected} input channels, got {actual}")]
    ChannelMismatch { name: String, expected: usize, actual: usize },

    #[error("invalid predictor configuration: {0}")]
    InvalidPredictor(String),

    #[error("invalid phantom specification: {0}")]
    InvalidPhantom(String),

    #[error(transparent)]
    Protocol(#[from] ProtocolError),

    #[error("sample {index} failed: {source}")]
    SampleFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("no boundary voxels in label map")]
    NoBoundary,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by the caller's inputs (missing or malformed
    /// files, bad configuration) rather than by a failure inside the pipeline.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::UnsupportedDatatype { .. }
                | Error::Truncated { .. }
                | Error::Io { .. }
                | Error::InvalidPrior(_)
                | Error::InvalidPredictor(_)
                | Error::InvalidPhantom(_)
                | Error::Config(_)
                | Error::Json { .. }
                | Error::DegenerateChannel { .. }
                | Error::ChannelMismatch { .. }
                | Error::Protocol(ProtocolError::Spawn { .. })
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidVolume(_) => "invalid_volume",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::DegenerateChannel { .. } => "degenerate_channel",
            Error::Format { .. } => "format",
            Error::UnsupportedDatatype { .. } => "unsupported_datatype",
            Error::Truncated { .. } => "truncated",
            Error::Io { .. } => "io",
            Error::InvalidPrior(_) => "invalid_prior",
            Error::SingularMatrix { .. } => "singular_matrix",
            Error::Contract(_) => "contract",
            Error::ChannelMismatch { .. } => "channel_mismatch",
            Error::InvalidPredictor(_) => "invalid_predictor",
            Error::InvalidPhantom(_) => "invalid_phantom",
            Error::Protocol(_) => "protocol",
            Error::SampleFailed { .. } => "sample_failed",
            Error::Empty(_) => "empty",
            Error::NoBoundary => "no_boundary",
            Error::Config(_) => "config",
            Error::Json { .. } => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// The file path the error refers to, if any.
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::Format { path, .. }
            | Error::UnsupportedDatatype { path, .. }
            | Error::Truncated { path, .. }
            | Error::Io { path, .. }
            | Error::Json { path, .. } => Some(path),
            _ => None,
        }
    }
}
