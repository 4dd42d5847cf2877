//! Neural 3D lookup tables for photorealistic video color transfer.
//!
//! A small network looks at a content image and a style image and predicts
//! the mixing weights of a bank of compressed LUTs. The mixed LUT is
//! reconstructed to a dense 3D lattice and then applied to every frame of a
//! video with plain trilinear interpolation, so the expensive part runs once
//! per video rather than once per frame.
//!
//! The crate is organized bottom-up:
//!
//! - [`lut`]: dense 3D LUTs, trilinear application and its gradient, `.cube` I/O.
//! - [`clut`]: compressed LUTs, basis banks and reconstruction to a dense lattice.
//! - [`tensor`]: a small reverse-mode differentiation tape over dense tensors.
//! - [`features`]: the frozen multi-scale feature extractor.
//! - [`network`]: splatting blocks, AdaIN fusion and the weight classifier.
//! - [`losses`]: style, content and lattice regularization losses.
//! - [`trainer`]: Adam, pretraining, test-time fine-tuning and checkpoints.
//! - [`video`]: frame sequences, LUT application over video, benchmarking and
//!   temporal consistency checks.

pub mod clut;
pub mod cube;
pub mod error;
pub mod features;
pub mod losses;
pub mod lut;
pub mod network;
pub mod real;
pub mod tensor;
pub mod trainer;
pub mod video;

pub use error::{Error, Result};
pub use real::Real;
