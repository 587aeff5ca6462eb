use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset source not found: {0}")]
    MissingSource(String),

    #[error("dataset shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} at index {index} is outside [0, {num_classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("unknown parameter name: {0}")]
    UnknownParameter(String),

    #[error("snapshot does not cover parameter {0}")]
    SnapshotMissing(String),

    #[error("onset stage {onset} outside [1, {max}]")]
    OnsetOutOfRange { onset: usize, max: usize },

    #[error("empty index set: {0}")]
    EmptyIndices(&'static str),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f32 },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("tap mismatch: {0}")]
    TapMismatch(String),

    #[error("cohort missing at tap {0}")]
    CohortMissing(String),

    #[error("member and non-member index sets overlap at index {0}")]
    OverlappingSets(usize),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error at {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("phase `{phase}` failed: {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("manifest parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("manifest serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    /// Short machine-readable tag, used in structured error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingSource(_) => "missing_source",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::InvalidSplit(_) => "invalid_split",
            Error::InvalidArchitecture(_) => "invalid_architecture",
            Error::UnknownParameter(_) => "unknown_parameter",
            Error::SnapshotMissing(_) => "snapshot_missing",
            Error::OnsetOutOfRange { .. } => "onset_out_of_range",
            Error::EmptyIndices(_) => "empty_indices",
            Error::Diverged { .. } => "diverged",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::TapMismatch(_) => "tap_mismatch",
            Error::CohortMissing(_) => "cohort_missing",
            Error::OverlappingSets(_) => "overlapping_sets",
            Error::Degenerate(_) => "degenerate",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Phase { .. } => "phase",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Toml(_) | Error::TomlSer(_) => "manifest",
        }
    }
}
