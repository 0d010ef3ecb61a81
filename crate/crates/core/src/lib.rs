//! Sparse-view novel view synthesis with a 3D geometry prior and a spatial
//! guidance adapter over a frozen latent diffusion denoiser.
//!
//! Pipeline shape: posed context images are encoded into pixel-aligned
//! feature volumes ([`volumes`]), sampled along target-view rays and fused by
//! two transformers ([`aggregation`]) into a feature map `F` and coarse color
//! estimate `E`; a zero-initialized adapter ([`guidance`]) turns `F` into
//! residual signals injected into the frozen denoiser during DDIM sampling
//! ([`diffusion`]). Training ([`training`]) jointly optimizes geometry and
//! adapter while the denoiser stays frozen; [`evaluation`] scores results
//! under a reproducible protocol.

pub mod aggregation;
pub mod camera;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod guidance;
pub mod training;
pub mod volumes;

pub use error::{Error, Result};
