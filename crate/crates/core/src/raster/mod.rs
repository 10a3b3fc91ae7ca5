//! Differentiable tile-based software splatting.
//!
//! Gaussians are projected to screen space with the pinhole Jacobian,
//! binned into square tiles by their 3σ screen bounds, and alpha-blended
//! front to back per pixel. The backward pass replays each pixel's blend
//! list and propagates analytic gradients to every Gaussian parameter.

mod camera;
mod project;
mod sky;
mod tiles;

pub use camera::{Camera, CameraSpec, DEFAULT_FAR, DEFAULT_NEAR};
pub use project::{project, project_backward, Splat2D, LOW_PASS};
pub use sky::{composite_sky, composite_sky_backward, SkyBackward};
pub use tiles::{
    rasterize, render, PixelBlend, RenderPass, RenderStats, ALPHA_MAX, SUPPORT_SIGMAS,
    TRANSMITTANCE_MIN,
};

use crate::buffer::{ColorImage, ScalarMap};
use crate::error::{Error, Result};
use crate::math::{Mat3, Quat, Vec3};
use crate::scene::gaussian::covariance_from_scale;

pub const DEFAULT_TILE_SIZE: usize = 16;

/// A world-space Gaussian ready for rendering, with activated parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub position: Vec3,
    /// Per-axis standard deviation, meters.
    pub scale: Vec3,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: Quat,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Gaussian3D {
    pub fn covariance(&self) -> Mat3 {
        covariance_from_scale(&self.scale, &self.rotation)
    }
}

/// Gradient of a scalar loss w.r.t. one [`Gaussian3D`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gaussian3DGrad {
    pub position: Vec3,
    pub scale: Vec3,
    pub rotation: Quat,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Sum over pixels of `|dL/d mean2d|`, per screen axis (pixels).
    pub abs_mean2d: [f64; 2],
    /// Whether the Gaussian touched any pixel in this pass.
    pub visible: bool,
}

impl Gaussian3DGrad {
    /// Gradient w.r.t. the log-scale given the forward scale.
    pub fn log_scale(&self, scale: &Vec3) -> Vec3 {
        self.scale.component_mul(scale)
    }

    /// Gradient w.r.t. the opacity logit given the forward opacity.
    pub fn opacity_logit(&self, opacity: f64) -> f64 {
        self.opacity * opacity * (1.0 - opacity)
    }
}

/// One rasterization result: color, Eq.-5 depth and accumulated alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: ColorImage,
    pub depth: ScalarMap,
    pub alpha: ScalarMap,
}

impl RenderOutput {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            rgb: ColorImage::new(width, height),
            depth: ScalarMap::new(width, height),
            alpha: ScalarMap::new(width, height),
        }
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }
}

/// Upstream gradients w.r.t. a [`RenderOutput`]. Absent buffers are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrad {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl OutputGrad {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            rgb: vec![0.0; n * 3],
            depth: vec![0.0; n],
            alpha: vec![0.0; n],
        }
    }

    pub(crate) fn check(&self, width: usize, height: usize) -> Result<()> {
        let n = width * height;
        if self.rgb.len() != n * 3 || self.depth.len() != n || self.alpha.len() != n {
            return Err(Error::dimension(
                "upstream gradient",
                format!("{n} pixels"),
                format!("rgb {} / depth {} / alpha {}", self.rgb.len(), self.depth.len(), self.alpha.len()),
            ));
        }
        Ok(())
    }
}

/// Rasterizer knobs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderOptions {
    pub tile_size: usize,
    /// Run tiles on the rayon pool. Results are identical either way.
    pub parallel: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            parallel: true,
        }
    }
}

impl RenderOptions {
    pub fn serial() -> Self {
        Self {
            parallel: false,
            ..Self::default()
        }
    }
}

/// Keeps the most recent forward pass so that a backward pass can follow.
#[derive(Debug, Default)]
pub struct Rasterizer {
    pub options: RenderOptions,
    last: Option<(Vec<Gaussian3D>, Camera, RenderPass)>,
}

impl Rasterizer {
    pub fn new(options: RenderOptions) -> Self {
        Self { options, last: None }
    }

    pub fn forward(&mut self, gaussians: Vec<Gaussian3D>, camera: &Camera) -> Result<&RenderOutput> {
        let pass = render(&gaussians, camera, self.options)?;
        self.last = Some((gaussians, camera.clone(), pass));
        Ok(&self.last.as_ref().map(|l| &l.2).expect("just stored").output)
    }

    pub fn backward(&self, upstream: &OutputGrad) -> Result<Vec<Gaussian3DGrad>> {
        let (gaussians, camera, pass) = self
            .last
            .as_ref()
            .ok_or_else(|| Error::State("backward called without a retained forward pass".into()))?;
        pass.backward(gaussians, camera, upstream)
    }

    pub fn clear(&mut self) {
        self.last = None;
    }
}
