//! Compute core for the `gradscale` toolkit.
//!
//! Everything in this crate is pure computation over in-memory values:
//! dense `f64` tensors with a reverse-mode autodiff tape, MBConv-style
//! convolutional networks, compound model scaling, label-smoothed training
//! with Adam and a plateau scheduler, patient-wise cross-validated
//! evaluation, and GradCAM / activation-map extraction.
//!
//! The crate is `no_std`-compatible (it requires `alloc`); file formats,
//! the CLI, and anything touching the filesystem or the clock live in the
//! companion `gradscale-cli` crate. With `--no-default-features` the float
//! math routes through `libm` instead of the platform runtime.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod colormap;
pub mod cv;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod layers;
pub mod loss;
pub(crate) mod math;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod rng;
pub mod scaling;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::Error;
pub use tensor::Tensor;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
