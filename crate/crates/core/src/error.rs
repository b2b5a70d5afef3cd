use std::io;

use thiserror::Error;

use crate::geometry::ImageShape;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image shape {height}x{width}")]
    InvalidShape { height: usize, width: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch {
        expected: ImageShape,
        actual: ImageShape,
    },

    #[error("length mismatch: expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("negative disparity {value} at pixel {index}")]
    NegativeDisparity { index: usize, value: f64 },

    #[error("mask value {value} at pixel {index} is not binary")]
    NonBinaryMask { index: usize, value: f64 },

    #[error("embedding norm {norm} at pixel {index} deviates from 1 by more than {tolerance}")]
    EmbeddingNorm {
        index: usize,
        norm: f64,
        tolerance: f64,
    },

    #[error("embedding dimension {0} outside 1..=16")]
    EmbeddingDim(usize),

    #[error("basis is empty")]
    EmptyBasis,

    #[error("duplicate basis label {0}")]
    DuplicateLabel(String),

    #[error("SVD did not converge")]
    SvdNonConvergence,

    #[error(
        "singular value {sigma:e} lies within the guard band {guard:e} of threshold {threshold:e}"
    )]
    NearThresholdSingularValue {
        sigma: f64,
        threshold: f64,
        guard: f64,
    },

    #[error("point behind the camera after motion at pixel {index} (z = {z})")]
    BehindCamera { index: usize, z: f64 },

    #[error("masks overlap at pixel {0}")]
    OverlappingMasks(usize),

    #[error("depth must be positive: {0}")]
    NonPositiveDepth(String),

    #[error("no valid pixels")]
    NoValidPixels,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic in .flo header: {0}")]
    BadMagic(f32),

    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("dimension {0} exceeds the .flo limit")]
    DimensionOverflow(u64),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}
