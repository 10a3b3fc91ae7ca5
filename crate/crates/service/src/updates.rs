//! Request bodies, their documented ranges, and the errors they map to.

use std::f64::consts::{FRAC_PI_2, TAU};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use weathercity_core::pipeline::{PoseSpec, WeatherState};
use weathercity_core::scene::WeatherLabel;
use weathercity_core::Error as CoreError;

/// Largest accepted particle count per system.
pub const MAX_PARTICLES: usize = 1_000_000;
/// Largest accepted camera image side.
pub const MAX_IMAGE_SIDE: usize = 4096;

/// Inclusive numeric ranges enforced on updates, also published in
/// `/state` so clients can size their controls.
pub const RANGES: &[(&str, f64, f64)] = &[
    ("fog.density", 0.0, 2.0),
    ("fog.color", 0.0, 1.0),
    ("fog.sky_depth", 0.0, 10_000.0),
    ("wind.magnitude", 0.0, 50.0),
    ("wind.tilt", -FRAC_PI_2, FRAC_PI_2),
    ("wind.azimuth", -TAU, TAU),
    ("rain_count", 0.0, MAX_PARTICLES as f64),
    ("snow_count", 0.0, MAX_PARTICLES as f64),
    ("fall_speed.rain", 0.0, 50.0),
    ("fall_speed.snow", 0.0, 50.0),
    ("turbulence.rho", -1.0, 1.0),
    ("turbulence.sigma", 0.0, 10.0),
    ("fps", 0.1, 60.0),
    ("intrinsics.width", 1.0, MAX_IMAGE_SIDE as f64),
    ("intrinsics.height", 1.0, MAX_IMAGE_SIDE as f64),
];

pub fn ranges_json() -> Value {
    let map: serde_json::Map<String, Value> = RANGES.iter().map(|(k, lo, hi)| (k.to_string(), json!([lo, hi]))).collect();
    Value::Object(map)
}

/// A rejected request: HTTP status, offending field, message.
#[derive(Clone, Debug, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub field: Option<String>,
    pub message: String,
}

impl ApiError {
    pub fn bad(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status: 400,
            field: Some(field.into()),
            message: message.into(),
        }
    }

    pub fn not_found(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status: 404,
            field: Some(field.into()),
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            status: 500,
            field: None,
            message: message.into(),
        }
    }

    pub fn unavailable(message: impl Into<String>) -> Self {
        Self {
            status: 503,
            field: None,
            message: message.into(),
        }
    }

    /// Maps a core error raised while applying the update to `field`.
    pub fn from_core(field: &str, e: CoreError) -> Self {
        match e {
            CoreError::Lookup { .. } => Self::not_found(field, e.to_string()),
            CoreError::InvalidParameter { name, .. } => Self::bad(name, e.to_string()),
            CoreError::Range { .. } | CoreError::Unsupported(_) | CoreError::Dimension { .. } => {
                Self::bad(field, e.to_string())
            }
            other => Self::internal(other.to_string()),
        }
    }

    pub fn body(&self) -> Value {
        json!({ "error": self.message, "field": self.field })
    }
}

fn check(field: &str, v: f64) -> Result<(), ApiError> {
    let (_, lo, hi) = RANGES.iter().find(|r| r.0 == field).copied().expect("documented range");
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(ApiError::bad(field, format!("{field} = {v} is outside [{lo}, {hi}]")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FogPatch {
    #[serde(alias = "d_f")]
    pub density: Option<f64>,
    pub color: Option<[f64; 3]>,
    pub sky_depth: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindPatch {
    pub magnitude: Option<f64>,
    pub tilt: Option<f64>,
    pub azimuth: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FallSpeedPatch {
    pub rain: Option<f64>,
    pub snow: Option<f64>,
}

/// Snow turbulence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurbulencePatch {
    pub rho: Option<f64>,
    pub sigma: Option<f64>,
}

/// Body of `POST /weather`; every field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeatherPatch {
    pub label: Option<WeatherLabel>,
    pub fog: Option<FogPatch>,
    pub wind: Option<WindPatch>,
    pub rain_count: Option<usize>,
    pub snow_count: Option<usize>,
    pub fall_speed: Option<FallSpeedPatch>,
    pub turbulence: Option<TurbulencePatch>,
}

impl WeatherPatch {
    /// Range checks that need no scene.
    pub fn check(&self) -> Result<(), ApiError> {
        if let Some(f) = &self.fog {
            f.density.map(|v| check("fog.density", v)).transpose()?;
            f.sky_depth.map(|v| check("fog.sky_depth", v)).transpose()?;
            for c in f.color.iter().flatten() {
                check("fog.color", *c)?;
            }
        }
        if let Some(w) = &self.wind {
            w.magnitude.map(|v| check("wind.magnitude", v)).transpose()?;
            w.tilt.map(|v| check("wind.tilt", v)).transpose()?;
            w.azimuth.map(|v| check("wind.azimuth", v)).transpose()?;
        }
        self.rain_count.map(|v| check("rain_count", v as f64)).transpose()?;
        self.snow_count.map(|v| check("snow_count", v as f64)).transpose()?;
        if let Some(f) = &self.fall_speed {
            f.rain.map(|v| check("fall_speed.rain", v)).transpose()?;
            f.snow.map(|v| check("fall_speed.snow", v)).transpose()?;
        }
        if let Some(t) = &self.turbulence {
            t.rho.map(|v| check("turbulence.rho", v)).transpose()?;
            t.sigma.map(|v| check("turbulence.sigma", v)).transpose()?;
        }
        Ok(())
    }

    /// `state` with this patch applied. Both particle systems must be
    /// present (a disabled system is one with zero particles).
    pub fn apply(&self, state: &WeatherState) -> WeatherState {
        let mut s = state.clone();
        if let Some(l) = &self.label {
            s.label = l.clone();
        }
        if let Some(f) = &self.fog {
            if let Some(v) = f.density {
                s.fog.density = v;
            }
            if let Some(v) = f.color {
                s.fog.color = v;
            }
            if let Some(v) = f.sky_depth {
                s.fog.sky_depth = v;
            }
        }
        if let Some(w) = &self.wind {
            if let Some(v) = w.magnitude {
                s.wind.magnitude = v;
            }
            if let Some(v) = w.tilt {
                s.wind.tilt = v;
            }
            if let Some(v) = w.azimuth {
                s.wind.azimuth = v;
            }
        }
        let rain = s.rain.as_mut().expect("rain params present");
        if let Some(n) = self.rain_count {
            rain.count = n;
        }
        if let Some(v) = self.fall_speed.as_ref().and_then(|f| f.rain) {
            rain.fall_speed = v;
        }
        let snow = s.snow.as_mut().expect("snow params present");
        if let Some(n) = self.snow_count {
            snow.count = n;
        }
        if let Some(v) = self.fall_speed.as_ref().and_then(|f| f.snow) {
            snow.fall_speed = v;
        }
        if let Some(t) = &self.turbulence {
            if let Some(v) = t.rho {
                snow.turbulence.rho = v;
            }
            if let Some(v) = t.sigma {
                snow.turbulence.sigma = v;
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookAt {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    #[serde(default = "z_up")]
    pub up: [f64; 3],
}

fn z_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

/// Body of `POST /camera`: a world-to-camera `pose` or a `look_at`, plus
/// optional intrinsics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraUpdate {
    pub pose: Option<PoseSpec>,
    pub look_at: Option<LookAt>,
    pub intrinsics: Option<Intrinsics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodePose {
    /// Scene frame to edit; defaults to the frame currently shown.
    pub frame: Option<usize>,
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

/// Body of `POST /nodes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeUpdate {
    pub id: String,
    pub visible: Option<bool>,
    pub pose: Option<NodePose>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlaybackMode {
    Paused,
    Playing,
}

/// Body of `POST /playback`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaybackUpdate {
    pub mode: PlaybackMode,
    pub fps: Option<f64>,
}

impl PlaybackUpdate {
    pub fn check(&self) -> Result<(), ApiError> {
        self.fps.map(|v| check("fps", v)).transpose()?;
        Ok(())
    }
}

/// Body of `POST /save`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaveRequest {
    pub path: Option<String>,
}

/// A quaternion usable as a rotation.
pub fn check_rotation(field: &str, q: &[f64; 4]) -> Result<(), ApiError> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if q.iter().all(|v| v.is_finite()) && n > 1e-9 {
        Ok(())
    } else {
        Err(ApiError::bad(field, "rotation must be a finite, non-zero quaternion [w, x, y, z]"))
    }
}

pub fn check_vector(field: &str, v: &[f64; 3]) -> Result<(), ApiError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ApiError::bad(field, "components must be finite"))
    }
}
