//! Joint SWIR/LWIR image fusion and ship detection at desk scale.
//!
//! The crate couples an attention-based fusion network with a small
//! anchor-free detector and trains both jointly: the detector consumes the
//! preliminary fused feature, and the fusion branch receives an aggregated
//! detection feature back through a residual connection. Everything runs on
//! CPU over a hand-rolled reverse-mode autodiff core that is generic over
//! `f32`/`f64`, so the same network code that trains fast in `f32` is
//! verified against central finite differences in `f64`.

pub mod cli;
pub mod data;
pub mod detect;
pub mod error;
pub mod extract;
pub mod fusion;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
