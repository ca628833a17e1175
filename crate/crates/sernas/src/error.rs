//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    #[error("non-finite value at {context}, first bad index {index}")]
    NonFinite { context: String, index: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape has no trainable parameters")]
    DegenerateTape,

    #[error("unbound input `{0}`")]
    UnboundInput(String),

    #[error("adam step count overflow")]
    StepCountOverflow,

    #[error("invalid genotype: {0}")]
    InvalidGenotype(String),

    #[error("invalid cell graph: {0}")]
    InvalidCell(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("unsupported audio: {0}")]
    UnsupportedAudio(String),

    #[error("corrupt feature file {path}: {detail}")]
    CorruptFeatureFile { path: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Msg(String),
}

impl Error {
    pub fn msg(s: impl Into<String>) -> Self {
        Error::Msg(s.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::DegenerateTape => "degenerate_tape",
            Error::UnboundInput(_) => "unbound_input",
            Error::StepCountOverflow => "step_count_overflow",
            Error::InvalidGenotype(_) => "invalid_genotype",
            Error::InvalidCell(_) => "invalid_cell",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidData(_) => "invalid_data",
            Error::Divergence(_) => "divergence",
            Error::UnsupportedAudio(_) => "unsupported_audio",
            Error::CorruptFeatureFile { .. } => "corrupt_feature_file",
            Error::Io { .. } => "io",
            Error::Msg(_) => "error",
        }
    }
}
