//! Window attention with learned rotated, varied-size windows, on a small
//! reverse-mode autodiff engine.
//!
//! The crate covers full, fixed-window, varied-size (VSA) and rotated
//! varied-size (RVSA, and RVSA with separate key/value transforms)
//! attention, window geometry and bilinear sampling, ViT and ViTAE blocks,
//! a toy masked-image-modeling trainer and an analytic cost model.

pub mod analysis;
pub mod attention;
mod error;
pub mod geometry;
pub mod mim;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
