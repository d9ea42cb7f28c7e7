use std::path::PathBuf;

use crate::imaging::RoiBox;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("ROI box {roi} violates {bound}")]
    RoiOutOfBounds { roi: RoiBox, bound: &'static str },

    #[error("ROI box {0} is degenerate")]
    DegenerateRoi(RoiBox),

    #[error("ROI boxes {0} and {1} overlap")]
    OverlappingRois(RoiBox, RoiBox),

    #[error("cannot parse ROI box `{0}`; expected x0,y0,x1,y1")]
    RoiParse(String),

    #[error("pyramid: {0}")]
    Pyramid(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown augmentation kind `{0}`")]
    UnknownAugmentKind(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },

    #[error("input of {size}px is smaller than the {field}px receptive field")]
    BelowReceptiveField { size: usize, field: usize },

    #[error("zero-norm vector has no direction")]
    ZeroNorm,

    #[error("mask hides every element")]
    EmptyMask,

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),

    #[error("scale {0} is not trained")]
    UntrainedScale(usize),

    #[error("operation requires a fully trained, frozen stack")]
    NotFrozen,

    #[error("non-finite {term} loss at scale {scale}, step {step}")]
    NonFiniteLoss { scale: usize, step: usize, term: &'static str },

    #[error("checkpoint digest mismatch for {0}")]
    DigestMismatch(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Codec(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
