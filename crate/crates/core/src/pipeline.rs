//! Frame pipeline shared by batch rendering and the live service: weather
//! state, timelines that script it per frame, and a simulator that steps
//! particles and produces fogged, sky-composited frames.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::buffer::{ColorImage, ScalarMap};
use crate::error::{Error, Result};
use crate::math::{Quat, Vec3};
use crate::raster::{composite_sky, render, Camera, CameraSpec, RenderOptions, RenderOutput};
use crate::scene::{Pose, SceneGraph, WeatherLabel, SKY_ID};
use crate::weather::{
    apply_fog, BoundingBox, FogParams, ParticleKind, ParticleParams, ParticleSystem, TurbulenceParams, WindParams,
    DEFAULT_DT,
};

/// Weather node ids managed by [`Simulator`].
pub const RAIN_NODE: &str = "rain";
pub const SNOW_NODE: &str = "snow";

/// Everything that decides how a frame looks besides the camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeatherState {
    pub label: WeatherLabel,
    pub fog: FogParams,
    pub wind: WindParams,
    /// `None` disables the system. The `wind` field inside is ignored in
    /// favor of the global wind above.
    pub rain: Option<ParticleParams>,
    pub snow: Option<ParticleParams>,
}

impl Default for WeatherState {
    fn default() -> Self {
        Self {
            label: WeatherLabel::Raw,
            fog: FogParams::clear(),
            wind: WindParams::default(),
            rain: None,
            snow: None,
        }
    }
}

impl WeatherState {
    /// Range checks plus the label lookup against `graph`.
    pub fn validate(&self, graph: &SceneGraph) -> Result<()> {
        self.fog.validate()?;
        self.wind.validate()?;
        for p in self.rain.iter().chain(&self.snow) {
            p.validate()?;
        }
        graph.decoder(&self.label)?;
        Ok(())
    }

    pub fn particles(&self, kind: ParticleKind) -> Option<&ParticleParams> {
        match kind {
            ParticleKind::Rain => self.rain.as_ref(),
            ParticleKind::Snow => self.snow.as_ref(),
        }
    }

    fn particles_mut(&mut self, kind: ParticleKind) -> &mut Option<ParticleParams> {
        match kind {
            ParticleKind::Rain => &mut self.rain,
            ParticleKind::Snow => &mut self.snow,
        }
    }

    /// Merges `ov` into the system of `kind`, enabling it with the published
    /// defaults first if it was off.
    pub fn override_particles(&mut self, kind: ParticleKind, ov: &ParticleOverride) {
        let slot = self.particles_mut(kind);
        let mut p = slot.take().unwrap_or_else(|| ParticleParams::for_kind(kind));
        ov.apply(&mut p);
        *slot = Some(p);
    }
}

/// Partial [`ParticleParams`]; unset fields keep their current value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleOverride {
    pub count: Option<usize>,
    pub fall_speed: Option<f64>,
    pub turbulence: Option<TurbulenceParams>,
    pub color: Option<[f64; 3]>,
    pub scale: Option<[f64; 3]>,
    pub opacity: Option<f64>,
}

impl ParticleOverride {
    pub fn apply(&self, p: &mut ParticleParams) {
        if let Some(v) = self.count {
            p.count = v;
        }
        if let Some(v) = self.fall_speed {
            p.fall_speed = v;
        }
        if let Some(v) = self.turbulence {
            p.turbulence = v;
        }
        if let Some(v) = self.color {
            p.color = v;
        }
        if let Some(v) = self.scale {
            p.scale = v;
        }
        if let Some(v) = self.opacity {
            p.opacity = v;
        }
    }
}

/// Rotation `[w, x, y, z]` and translation of a node pose in text formats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl From<PoseSpec> for Pose {
    fn from(p: PoseSpec) -> Self {
        let [w, x, y, z] = p.rotation;
        Pose::new(Quat::new(w, x, y, z), Vec3::from(p.translation))
    }
}

impl From<Pose> for PoseSpec {
    fn from(p: Pose) -> Self {
        let q = p.rotation;
        Self {
            rotation: [q[0], q[1], q[2], q[3]],
            translation: p.translation.into(),
        }
    }
}

/// Weather changes taking effect at `frame` and persisting afterwards.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keyframe {
    pub frame: usize,
    pub weather: Option<WeatherLabel>,
    pub fog: Option<FogParams>,
    pub wind: Option<WindParams>,
    pub rain: Option<ParticleOverride>,
    pub snow: Option<ParticleOverride>,
}

impl Keyframe {
    /// Applies the fields this key sets on top of `s`.
    pub fn apply_to(&self, s: &mut WeatherState) {
        if let Some(l) = &self.weather {
            s.label = l.clone();
        }
        if let Some(f) = self.fog {
            s.fog = f;
        }
        if let Some(w) = self.wind {
            s.wind = w;
        }
        if let Some(ov) = &self.rain {
            s.override_particles(ParticleKind::Rain, ov);
        }
        if let Some(ov) = &self.snow {
            s.override_particles(ParticleKind::Snow, ov);
        }
    }
}

/// A node edit at one sequence frame. Visibility persists; a pose replaces
/// the node's pose at the scene frame shown by that sequence frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEdit {
    pub frame: usize,
    pub node: String,
    pub visible: Option<bool>,
    pub pose: Option<PoseSpec>,
}

/// Per-frame weather script for a rendered sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeatherTimeline {
    /// Sequence length; defaults to the number of cameras.
    pub frames: Option<usize>,
    pub seed: u64,
    /// Simulated seconds per frame.
    pub dt: f64,
    /// Particle volume; defaults to a box around the background.
    pub volume: Option<BoundingBox>,
    pub weather: WeatherLabel,
    /// Absent means no fog.
    pub fog: Option<FogParams>,
    pub wind: WindParams,
    /// Present enables the system with defaults plus these overrides.
    pub rain: Option<ParticleOverride>,
    pub snow: Option<ParticleOverride>,
    pub keys: Vec<Keyframe>,
    pub edits: Vec<NodeEdit>,
}

impl Default for WeatherTimeline {
    fn default() -> Self {
        Self {
            frames: None,
            seed: 0,
            dt: DEFAULT_DT,
            volume: None,
            weather: WeatherLabel::Raw,
            fog: None,
            wind: WindParams::default(),
            rain: None,
            snow: None,
            keys: Vec::new(),
            edits: Vec::new(),
        }
    }
}

impl WeatherTimeline {
    /// A timeline holding one weather label for the whole sequence.
    pub fn constant(label: WeatherLabel) -> Self {
        Self {
            weather: label,
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("timeline: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("timeline serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn initial_state(&self) -> WeatherState {
        let mut s = WeatherState {
            label: self.weather.clone(),
            fog: self.fog.unwrap_or_else(FogParams::clear),
            wind: self.wind,
            rain: None,
            snow: None,
        };
        if let Some(ov) = &self.rain {
            s.override_particles(ParticleKind::Rain, ov);
        }
        if let Some(ov) = &self.snow {
            s.override_particles(ParticleKind::Snow, ov);
        }
        s
    }

    /// The state in force at sequence frame `t`: the base settings with
    /// every keyframe at or before `t` applied in frame order.
    pub fn state_at(&self, t: usize) -> WeatherState {
        let mut s = self.initial_state();
        let mut keys: Vec<&Keyframe> = self.keys.iter().filter(|k| k.frame <= t).collect();
        keys.sort_by_key(|k| k.frame);
        for k in keys {
            k.apply_to(&mut s);
        }
        s
    }

    pub fn edits_at(&self, t: usize) -> impl Iterator<Item = &NodeEdit> {
        self.edits.iter().filter(move |e| e.frame == t)
    }

    /// Checks frame bounds against a sequence of `len` frames, and every
    /// reachable state and edit against `graph`.
    pub fn validate(&self, len: usize, graph: &SceneGraph) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt", "must be finite and > 0"));
        }
        if let Some(v) = &self.volume {
            v.validate()?;
        }
        let frames = self.keys.iter().map(|k| (k.frame, "keyframe")).chain(self.edits.iter().map(|e| (e.frame, "edit")));
        for (frame, what) in frames {
            if frame >= len {
                return Err(Error::Range { what, index: frame, len });
            }
        }
        self.initial_state().validate(graph)?;
        for k in &self.keys {
            self.state_at(k.frame).validate(graph)?;
        }
        for e in &self.edits {
            let known = e.node == SKY_ID
                || graph.find_node(&e.node).is_some()
                || graph.weather_nodes.iter().any(|w| w.id == e.node);
            if !known {
                return Err(Error::lookup("node", e.node.clone()));
            }
            if let Some(p) = e.pose {
                Pose::from(p).validate()?;
            }
        }
        Ok(())
    }
}

/// One camera of a render path, optionally pinned to a scene frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub frame: Option<usize>,
    #[serde(flatten)]
    pub camera: CameraSpec,
}

/// Camera list for batch rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPath {
    pub cameras: Vec<CameraEntry>,
}

impl CameraPath {
    pub fn parse(text: &str) -> Result<Self> {
        let p: CameraPath = toml::from_str(text).map_err(|e| Error::Config(format!("cameras: {e}")))?;
        if p.cameras.is_empty() {
            return Err(Error::Config("cameras: the list is empty".into()));
        }
        for c in &p.cameras {
            Camera::try_from(c.camera.clone())?;
        }
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("camera path serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Rescales intrinsics so `camera` renders at `width × height`.
pub fn resize_camera(camera: &Camera, width: usize, height: usize) -> Camera {
    let (sx, sy) = (width as f64 / camera.width as f64, height as f64 / camera.height as f64);
    Camera {
        fx: camera.fx * sx,
        fy: camera.fy * sy,
        cx: camera.cx * sx,
        cy: camera.cy * sy,
        width,
        height,
        ..camera.clone()
    }
}

/// A finished frame: composited, fogged color plus the geometry buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub rgb: ColorImage,
    pub depth: ScalarMap,
    pub alpha: ScalarMap,
}

/// Owns a scene plus its live weather state.
#[derive(Clone, Debug)]
pub struct Simulator {
    pub graph: SceneGraph,
    pub options: RenderOptions,
    state: WeatherState,
    volume: BoundingBox,
    seed: u64,
    dt: f64,
}

fn default_volume(graph: &SceneGraph) -> BoundingBox {
    let points: Vec<Vec3> = graph.background.gaussians.iter().map(|g| g.position).collect();
    BoundingBox::around_points(&points)
        .unwrap_or_else(|_| BoundingBox::new([-10.0, -10.0, 0.0], [10.0, 10.0, 15.0]).expect("valid box"))
}

impl Simulator {
    pub fn new(graph: SceneGraph, volume: Option<BoundingBox>, seed: u64, dt: f64) -> Result<Self> {
        graph.validate()?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("dt", "must be finite and > 0"));
        }
        let volume = match volume {
            Some(v) => {
                v.validate()?;
                v
            }
            None => default_volume(&graph),
        };
        let label = graph
            .decoders
            .keys()
            .find(|l| l.is_raw())
            .or_else(|| graph.decoders.keys().next())
            .cloned()
            .ok_or_else(|| Error::State("scene has no registered weather".into()))?;
        Ok(Self {
            graph,
            options: RenderOptions::default(),
            state: WeatherState {
                label,
                ..WeatherState::default()
            },
            volume,
            seed,
            dt,
        })
    }

    /// A simulator set up from `timeline`'s frame-0 state.
    pub fn from_timeline(graph: SceneGraph, timeline: &WeatherTimeline) -> Result<Self> {
        let mut sim = Self::new(graph, timeline.volume, timeline.seed, timeline.dt)?;
        sim.set_state(timeline.state_at(0))?;
        Ok(sim)
    }

    pub fn state(&self) -> &WeatherState {
        &self.state
    }

    pub fn volume(&self) -> &BoundingBox {
        &self.volume
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Validates and installs `state`, spawning, reconfiguring or removing
    /// the rain and snow nodes. Nothing changes on error.
    pub fn set_state(&mut self, state: WeatherState) -> Result<()> {
        state.validate(&self.graph)?;
        for (id, kind) in [(RAIN_NODE, ParticleKind::Rain), (SNOW_NODE, ParticleKind::Snow)] {
            if let Some(w) = self.graph.weather_nodes.iter().find(|w| w.id == id) {
                if w.system.kind != kind {
                    return Err(Error::State(format!("weather node `{id}` holds {} particles", w.system.kind.as_str())));
                }
            }
        }
        for (id, kind, salt) in [(RAIN_NODE, ParticleKind::Rain, 0x5241_494e), (SNOW_NODE, ParticleKind::Snow, 0x534e_4f57)] {
            let wanted = state.particles(kind).map(|p| ParticleParams {
                wind: state.wind,
                ..p.clone()
            });
            let at = self.graph.weather_nodes.iter().position(|w| w.id == id);
            match (at, wanted) {
                (Some(i), Some(p)) => {
                    let sys = &mut self.graph.weather_nodes[i].system;
                    if sys.params != p {
                        sys.set_params(p)?;
                    }
                }
                (None, Some(p)) => {
                    let sys = ParticleSystem::spawn(kind, p, self.volume, self.seed ^ salt)?;
                    self.graph.add_weather_node(id, sys)?;
                }
                (Some(i), None) => {
                    self.graph.weather_nodes.remove(i);
                }
                (None, None) => {}
            }
        }
        self.state = state;
        Ok(())
    }

    pub fn apply_edit(&mut self, edit: &NodeEdit, scene_frame: usize) -> Result<()> {
        if let Some(v) = edit.visible {
            self.graph.set_node_visibility(&edit.node, v)?;
        }
        if let Some(p) = edit.pose {
            self.graph.set_node_pose(&edit.node, scene_frame, p.into())?;
        }
        Ok(())
    }

    /// Advances every particle system by one frame.
    pub fn step(&mut self) -> Result<()> {
        for w in &mut self.graph.weather_nodes {
            w.system.step(self.dt)?;
        }
        Ok(())
    }

    /// Renders scene frame `frame` (clamped to the last frame) through
    /// flatten, rasterize, sky and fog.
    pub fn render(&self, frame: usize, camera: &Camera) -> Result<Frame> {
        let frame = frame.min(self.graph.frame_count - 1);
        let flat = self.graph.flatten(frame, &self.state.label)?;
        let pass = render(&flat.gaussians, camera, self.options)?;
        let RenderOutput { rgb, depth, alpha } = pass.output;
        let out = RenderOutput {
            rgb: if self.graph.sky_visible {
                let raw = RenderOutput {
                    rgb,
                    depth: depth.clone(),
                    alpha: alpha.clone(),
                };
                composite_sky(&raw, camera, self.graph.sky(&self.state.label)?)?
            } else {
                rgb
            },
            depth,
            alpha,
        };
        let out = apply_fog(&out, &self.state.fog)?;
        Ok(Frame {
            rgb: out.rgb,
            depth: out.depth,
            alpha: out.alpha,
        })
    }
}
