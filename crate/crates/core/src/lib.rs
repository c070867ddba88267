//! Radial beam image canonicalization.
//!
//! Square images are sampled along a fixed fan of thickened Bresenham rays
//! ("beams") radiating from the image center. A rotation of the image about
//! its center by a multiple of the beam spacing becomes a circular shift of
//! the sampled beams, which a small beam encoder, a wheel-graph context
//! encoder and a recurrent decoder turn into a unit vector `(cos θ, sin θ)`.
//! Rotating the input by `-θ` then yields its canonical orientation.
//!
//! Module map:
//!
//! * [`imageops`] – image container, padding and center rotation.
//! * [`beams`] – beam mask construction, sampling and coverage analytics.
//! * [`angles`] – angle arithmetic, the unit-circle loss and the prior loss.
//! * [`toeplitz`] – beam similarity matrix and wrapped-diagonal logits.
//! * [`net`] – reverse-mode tape and the angle regressor.
//! * [`train`] – augmentation, Adam, training and evaluation harnesses.
//! * [`data`] – procedural datasets and image directory loading.
//! * [`rbt`] – the raw little-endian tensor container used for all tensor files.
//!
//! Conventions shared by every module: positive angles rotate
//! counter-clockwise on screen, beam 0 points straight up and beam indices
//! increase clockwise.

pub mod angles;
pub mod beams;
pub mod cli;
pub mod data;
pub mod error;
pub mod imageops;
pub mod net;
pub mod rbt;
pub mod toeplitz;
pub mod train;

pub use error::{Error, Result};
