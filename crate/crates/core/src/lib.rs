//! Transformer transducer toolkit.
//!
//! An RNN-T style speech recognizer whose audio and label encoders are
//! Transformer stacks with bounded left/right attention windows:
//!
//! - [`tensor`]: dense tensors and reverse-mode differentiation
//! - [`attention`]: windowed self-attention encoders with relative positions
//! - [`transducer`]: joint network, alignment lattice and transducer loss
//! - [`model`]: the assembled audio encoder + label encoder + joint network
//! - [`decode`]: greedy, beam (with shallow fusion) and streaming decoding
//! - [`frontend`]: frame stacking/subsampling and spectral masking
//! - [`train`]: learning-rate schedule, weight noise, optimizer, checkpoints
//! - [`tasks`]: synthetic alignment tasks, dataset files, error rates
//! - [`selftest`]: consistency suites run by `tt selftest`

pub mod attention;
mod binio;
pub mod model;
pub mod decode;
pub mod error;
pub mod frontend;
pub mod params;
pub mod selftest;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod transducer;

pub use error::{Error, Result};
