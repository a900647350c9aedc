//! Learned multi-scale voxel radiance-field video, frame by frame under a
//! joint rate-distortion objective.
//!
//! The crate holds the pure algorithmic half of the codec:
//!
//! - [`grid`]: coefficient/basis feature grids, trilinear sampling with
//!   exact gradients, Hadamard fusion, occupancy grids;
//! - [`render`]: cameras, occupancy-skipped ray sampling, transmittance
//!   compositing and the small rendering MLP, with manual backprop;
//! - [`entropy`]: the per-frame implicit entropy model over causal
//!   spatial-temporal context, Laplace rate estimation and parameter
//!   discretization;
//! - [`quant`]: noise-simulated quantization for training, hard rounding for
//!   coding;
//! - [`coder`]: a 64-bit range coder, fixed-point CDFs, causal grid coding
//!   and MLP parameter coding — everything needed for bit-exact streams;
//! - [`train`]: per-frame rate-distortion training with a decode buffer that
//!   always holds the decoder's exact reconstruction.
//!
//! File formats, LZMA occupancy compression, dataset handling and the CLI
//! live in the companion `voxvid` crate. The crate is `no_std`-compatible
//! (with `alloc`) when built without the `std` feature; the `libm` feature
//! then supplies the float intrinsics.

#![cfg_attr(not(feature = "std"), no_std)]

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("voxvid-core needs either the `std` or the `libm` feature");

extern crate alloc;

pub mod coder;
pub mod entropy;
pub mod error;
pub mod grid;
pub mod math;
pub mod quant;
pub mod render;
pub mod train;

pub use error::{CoreError, Result};
pub use grid::{FeatureGrid, FieldFrame, FrameType, OccupancyGrid};
pub use math::{Aabb, Vec3};
pub use render::{Camera, Ray, RenderMlp};
pub use train::{CodedFrame, DecodeBuffer, LossReport, TrainConfig, TrainView};
