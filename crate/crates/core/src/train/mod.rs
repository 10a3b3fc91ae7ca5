//! Multi-weather optimization: losses, Adam, densification and the loop.

mod adam;
mod config;
mod densify;
mod gradients;
mod losses;
mod ssim;
mod trainer;

pub use adam::{adam_step, AdamHyper, Moments, NodeMoments, Optimizer};
pub use config::{LearningRates, LossWeights, TrainingConfig};
pub use densify::{
    densify_and_prune, selected_for_densification, should_prune, DensifyAccum, DensifyStats,
    NodeRemap, SPLIT_SCALE_DIVISOR,
};
pub use gradients::{
    evaluate, flatten_backward, normalize_rotations, render_view, Evaluation, NodeGrads,
    SceneGradients,
};
pub use losses::{
    content_features, content_loss, depth_loss, depth_valid, opacity_loss, regularization_loss,
    rgb_loss, LossBreakdown, CONTENT_LEVELS, MAX_SCALE_RATIO, OPACITY_EPS,
};
pub use ssim::{ssim, ssim_with_grad};
pub use trainer::{scene_extent, train, view_psnr, StepRecord, Trainer};

use crate::buffer::{ColorImage, ScalarMap};
use crate::error::{Error, Result};
use crate::raster::Camera;
use crate::scene::WeatherLabel;

/// One supervised view: target image of frame `t` under weather `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionFrame {
    /// Camera view this target belongs to; targets of different weathers
    /// seen from the same view share it.
    pub view: usize,
    pub frame: usize,
    pub weather: WeatherLabel,
    pub image: ColorImage,
    /// Sparse metric depth; non-positive or NaN entries are invalid.
    pub depth: Option<ScalarMap>,
    /// `1.0` on sky pixels, `0.0` elsewhere.
    pub sky_mask: Option<ScalarMap>,
    pub camera: Camera,
    /// Excluded from training; used for evaluation only.
    pub held_out: bool,
}

impl SupervisionFrame {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let (w, h) = (self.camera.width, self.camera.height);
        let name = format!("frame {} ({})", self.frame, self.weather);
        if self.image.width != w || self.image.height != h {
            return Err(Error::dimension(
                format!("image of {name}"),
                format!("{w}x{h}"),
                format!("{}x{}", self.image.width, self.image.height),
            ));
        }
        for (what, m) in [("depth", &self.depth), ("sky mask", &self.sky_mask)] {
            if let Some(m) = m {
                if m.width != w || m.height != h {
                    return Err(Error::dimension(
                        format!("{what} of {name}"),
                        format!("{w}x{h}"),
                        format!("{}x{}", m.width, m.height),
                    ));
                }
            }
        }
        Ok(())
    }
}
