use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{axis} = {value} is not divisible by stride {stride}")]
    Divisibility {
        axis: &'static str,
        value: usize,
        stride: usize,
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("channel mismatch: features carry {features} channels, tokens carry {tokens}")]
    ChannelMismatch { features: usize, tokens: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown ablation row `{0}` (expected one of B0..B4)")]
    UnknownRow(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint schema version {found} is not supported (this build reads version {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("parameter `{name}` has shape {found:?} in checkpoint, config expects {expected:?}")]
    ParamShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("missing file: {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("malformed annotation: {0}")]
    MalformedAnnotation(String),

    #[error("cannot place {count} objects under IoU cap {iou_cap} in record {index}")]
    InfeasiblePacking {
        index: u64,
        count: usize,
        iou_cap: f64,
    },

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("length mismatch: {predictions} predictions vs {targets} targets")]
    LengthMismatch { predictions: usize, targets: usize },

    #[error("exemplar-guided loss requires auxiliary predictions")]
    MissingAuxiliary,

    #[error("non-finite loss {loss} at step {step} (batch records {batch:?})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        batch: Vec<String>,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
