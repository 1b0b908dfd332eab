use std::path::PathBuf;

use crate::graph::LayerKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("layer `{layer}` is missing its {what}")]
    MissingWeight { layer: String, what: &'static str },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("empty input")]
    EmptyInput,

    #[error("input contains a non-finite value")]
    NonFiniteInput,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("model format version {found} is not supported (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },

    #[error("weight blob checksum mismatch (file truncated or corrupted)")]
    ChecksumMismatch,

    #[error("malformed model file: {0}")]
    MalformedModel(String),

    #[error("layer `{layer}` has unsupported kind {kind} for this operation")]
    UnsupportedLayerKind { layer: String, kind: LayerKind },

    #[error("graph rewrite conflict: {0}")]
    GraphRewriteConflict(String),

    #[error("non-finite quantization range [{min}, {max}]")]
    NonFiniteRange { min: f32, max: f32 },

    #[error("calibration set is empty")]
    EmptyCalibrationSet,

    #[error("quantization plan does not cover {0}")]
    PlanCoverage(String),

    #[error("unknown attach point `{0}`")]
    UnknownAttachPoint(String),

    #[error("cannot attach an exit at the terminal output `{0}`")]
    AttachAtTerminal(String),

    #[error("attach point `{0}` is bypassed by a skip connection and cannot split the graph")]
    AttachNotACut(String),

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("label {label} is out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("exit head {0} has not been trained")]
    UntrainedHead(usize),

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("no evaluation records")]
    EmptyRecords,

    #[error("record lists differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },

    #[error("model size must be positive")]
    ZeroSize,

    #[error("bad IDX magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },

    #[error("IDX image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("truncated file {}", .0.display())]
    TruncatedFile(PathBuf),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: String, source: Box<Error> },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidGraph(msg.into())
    }
}

/// Tags an error with the pipeline stage it came from.
pub trait StageContext<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| match e {
            Error::Stage { .. } => e,
            other => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(other),
            },
        })
    }
}
