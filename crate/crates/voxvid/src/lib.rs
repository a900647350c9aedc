//! Volumetric video codec on learned voxel radiance fields: the std half.
//!
//! Builds on `voxvid-core` (representation, renderer, entropy model, trainer,
//! entropy coder) and adds everything that touches files and processes: the
//! `.vxv` bitstream container, synthetic scene generation and dataset IO,
//! PPM images, PSNR/SSIM/BD-rate metrics, run manifests, and the CLI
//! commands.

pub mod bitstream;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fields;
pub mod image;
pub mod manifest;
pub mod metrics;
pub mod scene;
pub mod view;

pub use error::{Result, VoxvidError};
