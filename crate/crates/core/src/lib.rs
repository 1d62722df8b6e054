//! Expert-routed deformable 3D image registration.
//!
//! The engine aligns a moving volume to a fixed volume by predicting a dense
//! displacement field with an encoder-decoder network: a dual-stream windowed
//! transformer encoder whose attention layers route each token to a sparse
//! subset of attention-head experts, and a coarse-to-fine pyramid decoder
//! whose finest stages predict each displacement direction per voxel through
//! convolution experts of different kernel sizes. Everything runs on CPU in
//! f64 on top of a small tape-based reverse-mode differentiation core.

#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod decoder;
pub mod encoder;
pub mod gradcheck;
pub mod interp;
pub mod losses;
pub mod metrics;
pub mod moa;
pub mod model;
pub mod params;
pub mod report;
pub mod rng;
pub mod shmoe;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod volume;
pub mod warpfield;

pub use rng::Rng;
pub use tape::{Tape, TensorId};
pub use tensor::{topk, Tensor, TensorError, TensorResult};
