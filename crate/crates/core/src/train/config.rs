use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::WeatherLabel;

/// Per-group Adam learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    /// Everything not listed below: positions, scales, opacities, features,
    /// offsets, decoders and sky texels.
    pub base: f64,
    pub rotation_nonrigid: f64,
    /// Rotations of background and rigid nodes.
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            base: 1e-4,
            rotation_nonrigid: 5e-5,
            rotation: 1e-5,
        }
    }
}

/// Loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// SSIM share of the RGB loss.
    pub ssim: f64,
    pub content: f64,
    pub depth: f64,
    pub opacity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ssim: 0.2,
            content: 1.0,
            depth: 0.01,
            opacity: 0.05,
        }
    }
}

/// Training hyperparameters; defaults are the published values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub weights: LossWeights,
    pub lr: LearningRates,
    /// Mean accumulated screen-space gradient (NDC units) above which a
    /// Gaussian is densified.
    pub densify_grad_threshold: f64,
    /// Split/clone boundary on the largest world scale, as a fraction of
    /// the scene extent.
    pub prune_scale_threshold: f64,
    /// Gaussians larger than this fraction of the extent are pruned.
    pub prune_max_scale: f64,
    pub prune_opacity: f64,
    pub densify_interval: usize,
    /// Densification stops once this fraction of the iterations has run.
    pub densify_until: f64,
    /// Weathers to train; empty means every weather in the supervision.
    pub weathers: Vec<WeatherLabel>,
    pub seed: u64,
    /// Run the rasterizer on the thread pool. Results are identical.
    pub parallel: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            weights: LossWeights::default(),
            lr: LearningRates::default(),
            densify_grad_threshold: 3e-4,
            prune_scale_threshold: 3e-3,
            prune_max_scale: 0.1,
            prune_opacity: 0.005,
            densify_interval: 500,
            densify_until: 0.8,
            weathers: Vec::new(),
            seed: 0,
            parallel: true,
        }
    }
}

impl TrainingConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for (name, v) in [
            ("weights.ssim", w.ssim),
            ("weights.content", w.content),
            ("weights.depth", w.depth),
            ("weights.opacity", w.opacity),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0")));
            }
        }
        if w.ssim > 1.0 {
            return Err(Error::Config("weights.ssim must be ≤ 1".into()));
        }
        for (name, v) in [
            ("lr.base", self.lr.base),
            ("lr.rotation_nonrigid", self.lr.rotation_nonrigid),
            ("lr.rotation", self.lr.rotation),
            ("densify_grad_threshold", self.densify_grad_threshold),
            ("prune_scale_threshold", self.prune_scale_threshold),
            ("prune_max_scale", self.prune_max_scale),
            ("prune_opacity", self.prune_opacity),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and > 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.densify_until) {
            return Err(Error::Config("densify_until must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Whether densification runs after `step` (1-based).
    pub fn densify_at(&self, step: usize) -> bool {
        self.densify_interval > 0
            && step.is_multiple_of(self.densify_interval)
            && (step as f64) <= self.densify_until * self.iterations as f64
    }
}
