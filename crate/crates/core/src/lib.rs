//! Multi-weather Gaussian splatting.
//!
//! Scenes are sets of anisotropic 3D Gaussians carrying a shared appearance
//! feature; a small decoder per weather turns features into colors, so every
//! weather shares one geometry. The crate provides the scene graph, a
//! differentiable CPU rasterizer, rain/snow particles and fog, the training
//! loop, and the on-disk formats.

#![allow(clippy::needless_range_loop)]

pub mod buffer;
pub mod error;
pub mod io;
pub mod math;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod train;
pub mod weather;

pub use error::{Error, Result};
