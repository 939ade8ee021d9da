//! Semi-supervised domain adaptation for semantic segmentation with a mean
//! teacher and simultaneous inter-domain and intra-domain ClassMix.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`numerics`]), a resolution-preserving convolutional segmenter
//! ([`model`]), a synthetic two-domain benchmark ([`data`]), the mixing
//! operators ([`mixing`]), the EMA teacher ([`teacher`]), the four-stream
//! objective ([`losses`]), the training loop ([`trainer`]) and segmentation
//! metrics ([`eval`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mixing;
pub mod model;
pub mod numerics;
pub mod seeds;
pub mod selfcheck;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Graph, Real, Tensor, Var};
