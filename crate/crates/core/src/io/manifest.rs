//! Supervision manifest: cameras plus per-weather image paths.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::codec::{read_file, write_atomic};
use super::raster::{load_depth, load_image, load_mask};
use crate::error::{Error, Result};
use crate::raster::{Camera, CameraSpec};
use crate::scene::{SceneGraph, WeatherLabel};
use crate::train::SupervisionFrame;

pub const MANIFEST_VERSION: u32 = 1;

/// One camera view at one frame, with a target image per weather.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub frame: usize,
    #[serde(default)]
    pub held_out: bool,
    pub camera: CameraSpec,
    /// Weather label → image path.
    pub images: BTreeMap<WeatherLabel, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

/// Paths are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(default)]
    pub views: Vec<ViewEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        for (i, v) in m.views.iter().enumerate() {
            if v.images.is_empty() {
                return Err(Error::Config(format!("manifest view {i} lists no images")));
            }
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Decode {
            path: path.to_owned(),
            reason: "manifest is not UTF-8".into(),
        })?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_toml().as_bytes())
    }

    /// Distinct weather labels referenced by any view.
    pub fn weathers(&self) -> Vec<WeatherLabel> {
        let mut w: Vec<WeatherLabel> = self.views.iter().flat_map(|v| v.images.keys().cloned()).collect();
        w.sort();
        w.dedup();
        w
    }
}

/// Loads every target referenced by the manifest at `path`: one
/// [`SupervisionFrame`] per `(view, weather)`, in manifest order.
pub fn load_supervision(path: impl AsRef<Path>) -> Result<Vec<SupervisionFrame>> {
    let path = path.as_ref();
    let manifest = Manifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_owned() } else { base.join(p) };

    let mut out = Vec::new();
    for (view, entry) in manifest.views.iter().enumerate() {
        let camera = Camera::try_from(entry.camera.clone())?;
        let (w, h) = (camera.width, camera.height);
        let name = format!("view {view} (frame {})", entry.frame);
        let check = |what: &str, got: (usize, usize)| -> Result<()> {
            if got != (w, h) {
                return Err(Error::dimension(
                    format!("{what} of {name}"),
                    format!("{w}x{h}"),
                    format!("{}x{}", got.0, got.1),
                ));
            }
            Ok(())
        };
        let depth = match &entry.depth {
            Some(p) => {
                let d = load_depth(resolve(p))?;
                check("depth", (d.width, d.height))?;
                Some(d)
            }
            None => None,
        };
        let mask = match &entry.mask {
            Some(p) => {
                let m = load_mask(resolve(p))?;
                check("mask", (m.width, m.height))?;
                Some(m)
            }
            None => None,
        };
        for (weather, p) in &entry.images {
            let image = load_image(resolve(p))?;
            check(&format!("{weather} image"), (image.width, image.height))?;
            out.push(SupervisionFrame {
                view,
                frame: entry.frame,
                weather: weather.clone(),
                image,
                depth: depth.clone(),
                sky_mask: mask.clone(),
                camera: camera.clone(),
                held_out: entry.held_out,
            });
        }
    }
    Ok(out)
}

/// Checks that every weather and frame index used by `frames` exists in
/// `graph`.
pub fn check_supervision(graph: &SceneGraph, frames: &[SupervisionFrame]) -> Result<()> {
    for f in frames {
        graph.decoder(&f.weather)?;
        if f.frame >= graph.frame_count {
            return Err(Error::Range {
                what: "supervision frame",
                index: f.frame,
                len: graph.frame_count,
            });
        }
    }
    Ok(())
}
