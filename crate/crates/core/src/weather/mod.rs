//! Physics-driven rain and snow particles plus depth-aware fog.

mod fog;
mod particles;

pub use fog::{apply_fog, fog_pixel, FogParams, FOG_ALPHA_THRESHOLD};
pub use particles::{
    BoundingBox, ParticleKind, ParticleParams, ParticleSystem, RngState, TurbulenceParams, DEFAULT_DT,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

/// Global wind. Tilt is the elevation below the horizontal (positive bends
/// the wind downward), azimuth is measured from +x toward +y, z is up.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindParams {
    pub magnitude: f64,
    #[serde(default)]
    pub tilt: f64,
    #[serde(default)]
    pub azimuth: f64,
}

impl WindParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(Error::invalid("wind.magnitude", "must be finite and ≥ 0"));
        }
        if !self.tilt.is_finite() || !self.azimuth.is_finite() {
            return Err(Error::invalid("wind", "angles must be finite"));
        }
        Ok(())
    }
}

/// `v_mag·(cosθ·cosφ, cosθ·sinφ, −sinθ)`.
pub fn wind_vector(p: &WindParams) -> Vec3 {
    let (st, ct) = p.tilt.sin_cos();
    let (sp, cp) = p.azimuth.sin_cos();
    p.magnitude * Vec3::new(ct * cp, ct * sp, -st)
}
