//! View-wise diffusion over coordinate-signal fields.
//!
//! A field is a function from coordinates to signals (an image, a video, a
//! set of camera renderings). Fields are cut into views, each view into
//! latent tokens; a decoder-only transformer predicts the noise of a DDPM
//! forward process that shares one noise draw across all views of a field.
//!
//! The math is generic over [`Scalar`] (`f32` for training, `f64` for
//! verification). Concrete aliases are exported at the crate root.

pub mod checkpoint;
pub mod codec;
pub mod conditioning;
pub mod config;
pub mod container;
pub mod costmodel;
pub mod datasets;
pub mod diffusion;
pub mod error;
pub mod evalsuite;
pub mod field;
pub mod imageio;
pub mod numerics;
pub mod pipeline;
pub mod scalar;
pub mod scorenet;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{ParamStore, Tape, Tensor, Var};
pub use scalar::{DType, Scalar};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
