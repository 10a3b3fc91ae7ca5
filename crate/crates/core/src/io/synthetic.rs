//! Procedural street scene with exact multi-weather ground truth.
//!
//! Raw targets are renders of a known scene; every other weather's target
//! is a fixed per-channel affine map of the raw render, so the ground truth
//! is exact by construction.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::archive::save_scene;
use super::manifest::{Manifest, ViewEntry, MANIFEST_VERSION};
use super::raster::{save_depth, save_image, save_mask, BitDepth};
use crate::buffer::{ColorImage, ScalarMap};
use crate::error::{Error, Result};
use crate::math::{logit, quat_from_axis_angle, Vec3};
use crate::raster::{composite_sky, render, Camera, RenderOptions, RenderOutput};
use crate::scene::{GaussianNode, GaussianPrimitive, Pose, SceneGraph, SkyNode, WeatherDecoder, WeatherLabel, FEATURE_DIM};
use crate::train::SupervisionFrame;

/// Sky mask threshold on the rendered alpha.
pub const SKY_ALPHA: f64 = 0.5;
/// Depth is kept only where the render is this opaque.
pub const DEPTH_ALPHA: f64 = 0.95;
/// Every `DEPTH_STRIDE`-th pixel in each direction carries depth.
pub const DEPTH_STRIDE: usize = 2;

const SKY_TEXTURE: (usize, usize) = (32, 16);
const CAR_ID: &str = "car";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub gaussians: usize,
    pub frames: usize,
    pub weathers: Vec<WeatherLabel>,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            gaussians: 500,
            frames: 10,
            weathers: vec![WeatherLabel::Raw, WeatherLabel::Rainy, WeatherLabel::Snowy],
            seed: 7,
            width: 64,
            height: 48,
        }
    }
}

/// Per-channel `gain · c + offset` map from raw colors to one weather.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorTransform {
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

impl ColorTransform {
    pub const IDENTITY: Self = Self {
        gain: [1.0; 3],
        offset: [0.0; 3],
    };

    /// The fixed transform of a built-in weather label.
    pub fn for_weather(label: &WeatherLabel) -> Result<Self> {
        Ok(match label {
            WeatherLabel::Raw => Self::IDENTITY,
            WeatherLabel::Rainy => Self {
                gain: [0.8, 0.85, 0.9],
                offset: [0.02, 0.03, 0.08],
            },
            WeatherLabel::Snowy => Self {
                gain: [0.75, 0.75, 0.75],
                offset: [0.25, 0.25, 0.27],
            },
            WeatherLabel::Foggy => Self {
                gain: [0.6, 0.6, 0.6],
                offset: [0.32, 0.32, 0.34],
            },
            WeatherLabel::Custom(s) => {
                return Err(Error::invalid("weathers", format!("no synthetic transform for `{s}`")));
            }
        })
    }

    pub fn apply(&self, img: &ColorImage) -> ColorImage {
        let mut out = img.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            let c = i % 3;
            *v = self.gain[c] * *v + self.offset[c];
        }
        out
    }
}

/// One camera of the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticView {
    pub frame: usize,
    pub camera: Camera,
    pub held_out: bool,
}

/// A generated dataset: the generating scene, a perturbed starting point
/// for training, and every target.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub spec: SyntheticSpec,
    pub truth: SceneGraph,
    pub init: SceneGraph,
    pub views: Vec<SyntheticView>,
    /// One entry per `(view, weather)`, views outer.
    pub frames: Vec<SupervisionFrame>,
    /// Raw-weather render outputs per view (depth and alpha of the truth).
    pub raw_outputs: Vec<RenderOutput>,
}

impl Synthetic {
    pub fn training_frames(&self) -> impl Iterator<Item = &SupervisionFrame> {
        self.frames.iter().filter(|f| !f.held_out)
    }

    pub fn held_out_frames(&self) -> impl Iterator<Item = &SupervisionFrame> {
        self.frames.iter().filter(|f| f.held_out)
    }
}

fn spec_check(spec: &SyntheticSpec) -> Result<()> {
    if spec.gaussians < 10 {
        return Err(Error::invalid("gaussians", "need at least 10"));
    }
    if spec.frames < 2 {
        return Err(Error::invalid("frames", "need at least 2"));
    }
    if spec.width < 8 || spec.height < 8 {
        return Err(Error::invalid("image size", "need at least 8x8"));
    }
    if !spec.weathers.contains(&WeatherLabel::Raw) {
        return Err(Error::invalid("weathers", "must include raw"));
    }
    for w in &spec.weathers {
        ColorTransform::for_weather(w)?;
    }
    Ok(())
}

fn jitter<R: Rng>(rng: &mut R, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-amount..amount)).clamp(0.15, 0.85))
}

fn primitive<R: Rng>(rng: &mut R, position: Vec3, scale: [f64; 3], yaw: f64, color: [f64; 3], spread: f64) -> GaussianPrimitive {
    let color = jitter(rng, color, spread);
    let rot = quat_from_axis_angle(&Vec3::z(), yaw);
    let log_scale = Vec3::new(scale[0].ln(), scale[1].ln(), scale[2].ln());
    let mut feature = [0.0; FEATURE_DIM];
    for c in 0..3 {
        feature[c] = logit(color[c]);
    }
    for f in &mut feature[3..] {
        *f = 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    GaussianPrimitive::new(position, log_scale, rot, logit(0.92)).with_feature(feature)
}

fn street<R: Rng>(rng: &mut R, n: usize) -> Vec<GaussianPrimitive> {
    let mut out = Vec::with_capacity(n);
    let ground = n * 2 / 5;
    let walls = n * 2 / 5;
    for i in 0..n {
        let yaw = rng.random_range(-0.4..0.4);
        let g = if i < ground {
            let p = Vec3::new(rng.random_range(4.5..18.0), rng.random_range(-4.0..4.0), rng.random_range(-0.02..0.02));
            primitive(rng, p, [0.4, 0.4, 0.05], yaw, [0.42, 0.42, 0.45], 0.1)
        } else if i < ground + walls {
            let side = if i % 2 == 0 { 4.0 } else { -4.0 };
            let p = Vec3::new(rng.random_range(4.5..18.0), side + rng.random_range(-0.05..0.05), rng.random_range(0.0..4.5));
            primitive(rng, p, [0.45, 0.06, 0.45], 0.0, [0.62, 0.46, 0.36], 0.15)
        } else {
            let p = Vec3::new(rng.random_range(9.0..18.0), rng.random_range(-3.2..3.2), rng.random_range(0.3..3.0));
            let s = rng.random_range(0.25..0.45);
            primitive(rng, p, [s, s, s * 1.2], yaw, [0.28, 0.52, 0.27], 0.1)
        };
        out.push(g);
    }
    out
}

fn car<R: Rng>(rng: &mut R, n: usize) -> Vec<GaussianPrimitive> {
    (0..n)
        .map(|_| {
            let p = Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.4..0.4), rng.random_range(0.1..0.7));
            primitive(rng, p, [0.18, 0.14, 0.12], 0.0, [0.75, 0.22, 0.2], 0.06)
        })
        .collect()
}

fn camera_at(spec: &SyntheticSpec, eye: Vec3) -> Camera {
    let f = 0.75 * spec.width as f64;
    Camera::new(f, f, spec.width as f64 / 2.0, spec.height as f64 / 2.0, spec.width, spec.height).look_at(
        eye,
        eye + Vec3::new(10.0, 0.0, -0.2),
        Vec3::z(),
    )
}

/// Renders `graph` at `frame` under `weather` with sky compositing.
pub fn render_composited(
    graph: &SceneGraph,
    frame: usize,
    weather: &WeatherLabel,
    camera: &Camera,
) -> Result<(ColorImage, RenderOutput)> {
    let flat = graph.flatten_scene_only(frame, weather)?;
    let pass = render(&flat.gaussians, camera, RenderOptions::serial())?;
    let rgb = composite_sky(&pass.output, camera, graph.sky(weather)?)?;
    Ok((rgb, pass.output))
}

fn sparse_depth(out: &RenderOutput) -> ScalarMap {
    let (w, h) = (out.depth.width, out.depth.height);
    let mut d = ScalarMap::new(w, h);
    for y in (0..h).step_by(DEPTH_STRIDE) {
        for x in (0..w).step_by(DEPTH_STRIDE) {
            if out.alpha.get(x, y) > DEPTH_ALPHA {
                // Stored as f32 on disk; round here so memory and disk agree.
                d.set(x, y, out.depth.get(x, y) as f32 as f64);
            }
        }
    }
    d
}

fn sky_mask(out: &RenderOutput) -> ScalarMap {
    let mut m = out.alpha.clone();
    m.data.iter_mut().for_each(|a| *a = if *a < SKY_ALPHA { 1.0 } else { 0.0 });
    m
}

/// Builds the dataset described by `spec`. Deterministic in the seed.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec_check(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let car_n = (spec.gaussians / 12).max(1);
    let mut truth = SceneGraph::new(spec.frames);
    truth.background = GaussianNode::background(street(&mut rng, spec.gaussians - car_n));
    let poses = (0..spec.frames)
        .map(|t| Pose::from_translation(Vec3::new(8.0 + 0.4 * t as f64, -1.6, 0.0)))
        .collect();
    truth.add_rigid(GaussianNode::rigid(CAR_ID, car(&mut rng, car_n), poses))?;
    let raw_sky = SkyNode::gradient(SKY_TEXTURE.0, SKY_TEXTURE.1, [0.3, 0.5, 0.85], [0.75, 0.8, 0.88]);
    truth.register_weather(WeatherDecoder::passthrough(WeatherLabel::Raw), raw_sky.clone())?;
    for w in spec.weathers.iter().filter(|w| !w.is_raw()) {
        let t = ColorTransform::for_weather(w)?;
        let mut sky = raw_sky.clone();
        for (i, v) in sky.texels.iter_mut().enumerate() {
            *v = t.gain[i % 3] * *v + t.offset[i % 3];
        }
        // The decoder is a stand-in: targets come from the affine map, not
        // from decoding, and training learns this weather's decoder.
        truth.register_weather(WeatherDecoder::passthrough(w.clone()), sky)?;
    }

    let mut views: Vec<SyntheticView> = (0..spec.frames)
        .map(|t| SyntheticView {
            frame: t,
            camera: camera_at(spec, Vec3::new(0.3 * t as f64, 0.0, 1.6)),
            held_out: false,
        })
        .collect();
    let mid = spec.frames / 2;
    views.push(SyntheticView {
        frame: mid,
        camera: camera_at(spec, Vec3::new(0.3 * mid as f64 + 0.15, 0.3, 1.7)),
        held_out: true,
    });

    let mut frames = Vec::new();
    let mut raw_outputs = Vec::new();
    for (v, view) in views.iter().enumerate() {
        let (raw, out) = render_composited(&truth, view.frame, &WeatherLabel::Raw, &view.camera)?;
        let depth = sparse_depth(&out);
        let mask = sky_mask(&out);
        for w in &spec.weathers {
            frames.push(SupervisionFrame {
                view: v,
                frame: view.frame,
                weather: w.clone(),
                image: ColorTransform::for_weather(w)?.apply(&raw),
                depth: Some(depth.clone()),
                sky_mask: Some(mask.clone()),
                camera: view.camera.clone(),
                held_out: view.held_out,
            });
        }
        raw_outputs.push(out);
    }

    let init = perturbed_init(&truth, &frames, spec.seed ^ 0x5eed)?;
    Ok(Synthetic {
        spec: spec.clone(),
        truth,
        init,
        views,
        frames,
        raw_outputs,
    })
}

/// Starting point for training: the true geometry and features with
/// Gaussian noise, every weather decoder a copy of the raw decoder, and
/// each sky a constant at the mean sky-pixel color of its targets.
pub fn perturbed_init(truth: &SceneGraph, frames: &[SupervisionFrame], seed: u64) -> Result<SceneGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = |s: f64| Normal::new(0.0, s).expect("valid std");
    let (dp, ds, dop, df) = (n(0.05), n(0.15), n(0.5), n(0.4));
    let mut g = truth.clone();
    for r in g.node_refs() {
        for p in &mut g.node_mut(r).gaussians {
            p.position += Vec3::from_fn(|_, _| dp.sample(&mut rng));
            p.log_scale += Vec3::from_fn(|_, _| ds.sample(&mut rng));
            p.opacity_logit += dop.sample(&mut rng);
            p.feature.iter_mut().for_each(|f| *f += df.sample(&mut rng));
        }
    }
    let raw = g.decoder(&WeatherLabel::Raw)?.clone();
    let labels: Vec<WeatherLabel> = g.decoders.keys().cloned().collect();
    for w in labels {
        let mut d = raw.clone();
        d.label = w.clone();
        let sky = SkyNode::constant(SKY_TEXTURE.0, SKY_TEXTURE.1, mean_sky_color(frames, &w));
        g.register_weather(d, sky)?;
    }
    Ok(g)
}

/// Mean color of sky-masked training pixels of one weather (mid-gray if
/// there are none).
pub fn mean_sky_color(frames: &[SupervisionFrame], weather: &WeatherLabel) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for f in frames.iter().filter(|f| &f.weather == weather && !f.held_out) {
        let Some(mask) = &f.sky_mask else { continue };
        for (i, m) in mask.data.iter().enumerate() {
            if *m > 0.5 {
                for c in 0..3 {
                    sum[c] += f.image.data[i * 3 + c];
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        [0.5; 3]
    } else {
        sum.map(|s| (s / n as f64).clamp(0.0, 1.0))
    }
}

/// Paths written by [`write_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFiles {
    pub manifest: PathBuf,
    pub truth: PathBuf,
    pub init: PathBuf,
}

/// Writes the dataset under `dir`: `manifest.toml`, `truth.wcty`,
/// `init.wcty`, 16-bit PNG targets, f32 depth rasters and PNG masks.
pub fn write_synthetic(data: &Synthetic, dir: impl AsRef<Path>) -> Result<SyntheticFiles> {
    let dir = dir.as_ref();
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&dir.join("depth"))?;
    mkdir(&dir.join("masks"))?;
    for w in &data.spec.weathers {
        mkdir(&dir.join("images").join(w.as_str()))?;
    }
    let mut entries = Vec::new();
    for (v, view) in data.views.iter().enumerate() {
        let depth = PathBuf::from(format!("depth/{v:04}.wdep"));
        let mask = PathBuf::from(format!("masks/{v:04}.png"));
        let mut images = std::collections::BTreeMap::new();
        for f in data.frames.iter().filter(|f| f.view == v) {
            let p = PathBuf::from(format!("images/{}/{v:04}.png", f.weather));
            save_image(&f.image, dir.join(&p), BitDepth::Sixteen)?;
            images.insert(f.weather.clone(), p);
            if f.weather.is_raw() {
                save_depth(f.depth.as_ref().expect("synthetic depth"), dir.join(&depth))?;
                save_mask(f.sky_mask.as_ref().expect("synthetic mask"), dir.join(&mask))?;
            }
        }
        entries.push(ViewEntry {
            frame: view.frame,
            held_out: view.held_out,
            camera: view.camera.to_spec(),
            images,
            depth: Some(depth),
            mask: Some(mask),
        });
    }
    let files = SyntheticFiles {
        manifest: dir.join("manifest.toml"),
        truth: dir.join("truth.wcty"),
        init: dir.join("init.wcty"),
    };
    Manifest {
        version: MANIFEST_VERSION,
        views: entries,
    }
    .save(&files.manifest)?;
    save_scene(&data.truth, &files.truth)?;
    save_scene(&data.init, &files.init)?;
    Ok(files)
}
