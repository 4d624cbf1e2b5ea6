//! Text-driven 3D point-cloud style transfer.
//!
//! The pipeline: lift posed RGB-D views into a feature point cloud
//! ([`cloud`]), embed a style phrase through prompt templates ([`text`]),
//! re-center the cloud's feature statistics onto the style via a learned
//! linear transform with a global-feature complement ([`transform`]),
//! splat and decode novel views differentiably ([`render`]), train the
//! decoder and the transform in two stages ([`train`]) against the
//! directional, patch, divergence and content losses ([`losses`]), and
//! score results with CLIP-style similarity and reprojection consistency
//! ([`eval`]).

pub mod autodiff;
pub mod cli;
pub mod cloud;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod render;
pub mod scene;
pub mod serialize;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
