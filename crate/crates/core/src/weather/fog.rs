use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RenderOutput;

/// Pixels with accumulated alpha at or below this are treated as sky.
pub const FOG_ALPHA_THRESHOLD: f64 = 0.01;

/// Beer–Lambert fog.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FogParams {
    /// Extinction per meter.
    pub density: f64,
    pub color: [f64; 3],
    /// Depth assumed for uncovered (sky) pixels, meters.
    #[serde(default = "default_sky_depth")]
    pub sky_depth: f64,
}

fn default_sky_depth() -> f64 {
    500.0
}

impl Default for FogParams {
    fn default() -> Self {
        Self {
            density: 0.2,
            color: [0.8, 0.8, 0.85],
            sky_depth: default_sky_depth(),
        }
    }
}

impl FogParams {
    /// Fog with zero density: the identity.
    pub fn clear() -> Self {
        Self {
            density: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density >= 0.0 && self.density.is_finite()) {
            return Err(Error::invalid("fog.density", "must be finite and ≥ 0"));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("fog.color", "channels must lie in [0, 1]"));
        }
        if self.sky_depth.is_nan() || self.sky_depth < 0.0 {
            return Err(Error::invalid("fog.sky_depth", "must be ≥ 0"));
        }
        Ok(())
    }
}

/// `e^{−d_f·d}·rgb + (1 − e^{−d_f·d})·c_fog` for a single pixel.
#[inline]
pub fn fog_pixel(rgb: [f64; 3], depth: f64, fog: &FogParams) -> [f64; 3] {
    let f = (-fog.density * depth).exp();
    std::array::from_fn(|c| f * rgb[c] + (1.0 - f) * fog.color[c])
}

/// Fogs a composited frame using its depth buffer; sky pixels use `sky_depth`.
pub fn apply_fog(out: &RenderOutput, fog: &FogParams) -> Result<RenderOutput> {
    fog.validate()?;
    let mut res = out.clone();
    if fog.density == 0.0 {
        return Ok(res);
    }
    for (p, px) in res.rgb.data.chunks_exact_mut(3).enumerate() {
        let d = if out.alpha.data[p] > FOG_ALPHA_THRESHOLD {
            out.depth.data[p]
        } else {
            fog.sky_depth
        };
        let v = fog_pixel([px[0], px[1], px[2]], d, fog);
        px.copy_from_slice(&v);
    }
    Ok(res)
}
