use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image is not square ({width}x{height})")]
    NonSquareImage { width: usize, height: usize },

    #[error("{num_beams} beams exceed the bound of {max} for this length and thickness")]
    BeamBoundExceeded { num_beams: usize, max: usize },

    #[error("beam mask leaves the {grid_size}x{grid_size} grid (needs a radius of {needed} around the center)")]
    MaskOutOfGrid { grid_size: usize, needed: usize },

    #[error("size mismatch: expected {expected}, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("{degrees} degrees is not an element of the rotation group of order {order}")]
    NotInSubgroup { degrees: f64, order: usize },

    #[error("degenerate distribution: probability {0} at a target index")]
    DegenerateDistribution(f64),

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),

    #[error("gradient check failed: max relative error {max_rel_error:e} above tolerance {tolerance:e} ({location})")]
    GradCheckFailure {
        max_rel_error: f64,
        tolerance: f64,
        location: String,
    },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("images have mixed sizes: {first} and {other} ({path})")]
    MixedSizes {
        first: usize,
        other: usize,
        path: PathBuf,
    },

    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
