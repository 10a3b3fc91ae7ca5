//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::Matrix2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use weathercity_core::buffer::{ColorImage, ScalarMap};
use weathercity_core::math::{quat_normalize, Quat, Vec3, QUAT_IDENTITY};
use weathercity_core::raster::{render, Camera, Gaussian3D, RenderOptions, RenderOutput, Splat2D};
use weathercity_core::scene::{
    GaussianNode, GaussianPrimitive, NodeKind, NodeRef, Pose, SceneGraph, SkyNode, WeatherDecoder, WeatherLabel,
    FEATURE_DIM,
};
use weathercity_core::train::{content_features, evaluate, SceneGradients, SupervisionFrame, TrainingConfig, OPACITY_EPS};

// ---------------------------------------------------------------------------
// Naive rasterizer: every splat tested at every pixel, one global sort.

const SIGMAS: f64 = 3.0;
const CLIP: f64 = 0.99;
const T_MIN: f64 = 1e-4;

pub fn naive_rasterize(splats: &[Splat2D], width: usize, height: usize) -> RenderOutput {
    struct S {
        idx: usize,
        mean: [f64; 2],
        inv: Matrix2<f64>,
        half: f64,
        depth: f64,
        opacity: f64,
        color: [f64; 3],
    }
    let mut list: Vec<S> = Vec::new();
    for s in splats {
        let m = s.cov_matrix();
        if m.determinant() <= 0.0 || m[(0, 0)] <= 0.0 {
            continue;
        }
        let eig = m.symmetric_eigenvalues();
        list.push(S {
            idx: s.index,
            mean: s.mean,
            inv: m.try_inverse().unwrap(),
            half: SIGMAS * eig.max().sqrt(),
            depth: s.depth,
            opacity: s.opacity,
            color: s.color,
        });
    }
    list.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.idx.cmp(&b.idx)));
    let mut out = RenderOutput::empty(width, height);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64, y as f64);
            let mut c = [0.0; 3];
            let mut d = 0.0;
            let mut t = 1.0;
            for s in &list {
                let (dx, dy) = (px - s.mean[0], py - s.mean[1]);
                if dx.abs() > s.half || dy.abs() > s.half {
                    continue;
                }
                let v = nalgebra::Vector2::new(dx, dy);
                let q = (v.transpose() * s.inv * v)[(0, 0)];
                let a = (s.opacity * (-0.5 * q).exp()).clamp(0.0, CLIP);
                for k in 0..3 {
                    c[k] += s.color[k] * a * t;
                }
                d += s.depth * a * t;
                t *= 1.0 - a;
                if t < T_MIN {
                    break;
                }
            }
            out.rgb.set(x, y, c);
            out.depth.set(x, y, d);
            out.alpha.set(x, y, 1.0 - t);
        }
    }
    out
}

pub fn random_quat<R: Rng>(rng: &mut R) -> Quat {
    loop {
        let q = Quat::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if q.norm() > 0.2 {
            return quat_normalize(&q);
        }
    }
}

/// Camera at the origin looking down +z.
pub fn front_camera(width: usize, height: usize, f: f64) -> Camera {
    Camera::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
}

pub fn random_gaussians<R: Rng>(rng: &mut R, n: usize) -> Vec<Gaussian3D> {
    (0..n)
        .map(|_| {
            let z = rng.random_range(2.0..12.0);
            Gaussian3D {
                position: Vec3::new(rng.random_range(-0.6..0.6) * z, rng.random_range(-0.6..0.6) * z, z),
                scale: Vec3::from_fn(|_, _| rng.random_range(0.02..0.6)),
                rotation: random_quat(rng),
                opacity: rng.random_range(0.05..1.0),
                color: [rng.random(), rng.random(), rng.random()],
            }
        })
        .collect()
}

pub fn max_abs_diff(a: &RenderOutput, b: &RenderOutput) -> f64 {
    let rgb = a.rgb.data.iter().zip(&b.rgb.data);
    let depth = a.depth.data.iter().zip(&b.depth.data);
    let alpha = a.alpha.data.iter().zip(&b.alpha.data);
    rgb.chain(depth).chain(alpha).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Tiny training problems for gradient checks.

pub struct Problem {
    pub graph: SceneGraph,
    pub frame: SupervisionFrame,
    pub raw: ColorImage,
    pub config: TrainingConfig,
}

fn prim<R: Rng>(rng: &mut R, cam_z: f64) -> GaussianPrimitive {
    let z = rng.random_range(3.0..6.0) + cam_z;
    let mut feature = [0.0; FEATURE_DIM];
    feature.iter_mut().for_each(|f| *f = rng.random_range(-1.0..1.0));
    GaussianPrimitive {
        position: Vec3::new(rng.random_range(-0.35..0.35) * z, rng.random_range(-0.35..0.35) * z, z),
        log_scale: Vec3::from_fn(|_, _| rng.random_range(-1.6..-0.7)),
        // Deliberately unnormalized: the gradient goes through normalization.
        rotation: random_quat(rng) * rng.random_range(0.7..1.4),
        opacity_logit: rng.random_range(-1.0..2.0),
        feature,
    }
}

fn random_decoder<R: Rng>(label: WeatherLabel, rng: &mut R) -> WeatherDecoder {
    let mut d = WeatherDecoder::xavier(label, rng);
    d.b1.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
    d.b2.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    d
}

/// A ≤10-Gaussian, 16×16 problem with every loss term active: non-raw
/// weather with a raw reference (content), sparse depth, sky mask, an
/// elongated Gaussian (scale regularizer) and a non-rigid node (offset
/// smoothness).
pub fn tiny_problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (16, 16);
    let mut g = SceneGraph::new(2);
    let nb = rng.random_range(2..=4);
    let mut bg: Vec<_> = (0..nb).map(|_| prim(&mut rng, 0.0)).collect();
    bg[0].log_scale = Vec3::new(-0.8, -1.0, -3.5);
    g.background = GaussianNode::background(bg);

    let pose = |rng: &mut ChaCha8Rng| {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Pose::new(
            weathercity_core::math::quat_from_axis_angle(&axis, rng.random_range(-0.3..0.3)),
            Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.5..0.5)),
        )
    };
    let nr = rng.random_range(1..=3);
    let rigid: Vec<_> = (0..nr).map(|_| prim(&mut rng, 0.0)).collect();
    let poses = vec![pose(&mut rng), pose(&mut rng)];
    g.add_rigid(GaussianNode::rigid("rigid", rigid, poses)).unwrap();

    let nn = rng.random_range(1..=3);
    let nonrigid: Vec<_> = (0..nn).map(|_| prim(&mut rng, 0.0)).collect();
    let poses = vec![pose(&mut rng), pose(&mut rng)];
    let mut node = GaussianNode::nonrigid("walker", nonrigid, poses);
    for frame in &mut node.offsets {
        for o in frame.iter_mut() {
            *o = Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1));
        }
    }
    g.add_nonrigid(node).unwrap();

    for label in [WeatherLabel::Raw, WeatherLabel::Rainy] {
        let texels = (0..8 * 4 * 3).map(|_| rng.random_range(0.1..0.9)).collect();
        let d = random_decoder(label, &mut rng);
        g.register_weather(d, SkyNode::from_texels(8, 4, texels).unwrap()).unwrap();
    }

    let camera = front_camera(w, h, 18.0);
    let image = ColorImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]);
    let raw = ColorImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]);
    let depth = ScalarMap::from_data(
        w,
        h,
        (0..w * h).map(|_| if rng.random_bool(0.4) { rng.random_range(2.0..8.0) } else { 0.0 }).collect(),
    )
    .unwrap();
    let mask = ScalarMap::from_data(w, h, (0..w * h).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect())
        .unwrap();
    let frame = SupervisionFrame {
        view: 0,
        frame: 1,
        weather: WeatherLabel::Rainy,
        image,
        depth: Some(depth),
        sky_mask: Some(mask),
        camera,
        held_out: false,
    };
    let config = TrainingConfig {
        parallel: false,
        ..TrainingConfig::default()
    };
    Problem { graph: g, frame, raw, config }
}

// ---------------------------------------------------------------------------
// Parameter addressing.

#[derive(Clone, Debug, PartialEq)]
pub enum Param {
    Position(NodeRef, usize, usize),
    LogScale(NodeRef, usize, usize),
    Rotation(NodeRef, usize, usize),
    Opacity(NodeRef, usize),
    Feature(NodeRef, usize, usize),
    Offset(NodeRef, usize, usize, usize),
    Decoder(WeatherLabel, usize, usize),
    Sky(WeatherLabel, usize),
}

impl Param {
    pub fn group(&self) -> &'static str {
        match self {
            Param::Position(..) => "position",
            Param::LogScale(..) => "log_scale",
            Param::Rotation(..) => "rotation",
            Param::Opacity(..) => "opacity",
            Param::Feature(..) => "feature",
            Param::Offset(..) => "offset",
            Param::Decoder(..) => "decoder",
            Param::Sky(..) => "sky",
        }
    }
}

fn decoder_slot(d: &mut WeatherDecoder, which: usize) -> &mut Vec<f64> {
    match which {
        0 => &mut d.w1,
        1 => &mut d.b1,
        2 => &mut d.w2,
        _ => &mut d.b2,
    }
}

pub fn param_mut<'a>(g: &'a mut SceneGraph, p: &Param) -> &'a mut f64 {
    match p {
        Param::Position(r, i, k) => &mut g.node_mut(*r).gaussians[*i].position[*k],
        Param::LogScale(r, i, k) => &mut g.node_mut(*r).gaussians[*i].log_scale[*k],
        Param::Rotation(r, i, k) => &mut g.node_mut(*r).gaussians[*i].rotation[*k],
        Param::Opacity(r, i) => &mut g.node_mut(*r).gaussians[*i].opacity_logit,
        Param::Feature(r, i, k) => &mut g.node_mut(*r).gaussians[*i].feature[*k],
        Param::Offset(r, t, i, k) => &mut g.node_mut(*r).offsets[*t][*i][*k],
        Param::Decoder(l, which, k) => &mut decoder_slot(g.decoders.get_mut(l).unwrap(), *which)[*k],
        Param::Sky(l, k) => &mut g.skies.get_mut(l).unwrap().texels[*k],
    }
}

pub fn analytic(grads: &SceneGradients, p: &Param) -> f64 {
    match p {
        Param::Position(r, i, k) => grads.node(*r).position[*i][*k],
        Param::LogScale(r, i, k) => grads.node(*r).log_scale[*i][*k],
        Param::Rotation(r, i, k) => grads.node(*r).rotation[*i][*k],
        Param::Opacity(r, i) => grads.node(*r).opacity_logit[*i],
        Param::Feature(r, i, k) => grads.node(*r).feature[*i][*k],
        Param::Offset(r, t, i, k) => grads.node(*r).offsets[*t][*i][*k],
        Param::Decoder(l, which, k) => {
            let d = &grads.decoders[l];
            [&d.w1, &d.b1, &d.w2, &d.b2][*which][*k]
        }
        Param::Sky(l, k) => grads.skies[l][*k],
    }
}

/// Parameters worth probing: all geometry of every Gaussian, a few feature
/// entries each, every offset of the non-rigid node, a sample of decoder
/// weights of the active weather, and sky texels.
pub fn probe_set<R: Rng>(g: &SceneGraph, weather: &WeatherLabel, rng: &mut R) -> Vec<Param> {
    let mut out = Vec::new();
    for r in g.node_refs() {
        let node = g.node(r);
        for i in 0..node.len() {
            for k in 0..3 {
                out.push(Param::Position(r, i, k));
                out.push(Param::LogScale(r, i, k));
            }
            for k in 0..4 {
                out.push(Param::Rotation(r, i, k));
            }
            out.push(Param::Opacity(r, i));
            for _ in 0..3 {
                out.push(Param::Feature(r, i, rng.random_range(0..FEATURE_DIM)));
            }
            if node.kind == NodeKind::NonRigid {
                for t in 0..node.offsets.len() {
                    for k in 0..3 {
                        out.push(Param::Offset(r, t, i, k));
                    }
                }
            }
        }
    }
    let d = g.decoder(weather).unwrap();
    for (which, len) in [(0, d.w1.len()), (1, d.b1.len()), (2, d.w2.len()), (3, d.b2.len())] {
        for _ in 0..4 {
            out.push(Param::Decoder(weather.clone(), which, rng.random_range(0..len)));
        }
    }
    let sky = g.sky(weather).unwrap();
    for _ in 0..8 {
        out.push(Param::Sky(weather.clone(), rng.random_range(0..sky.texels.len())));
    }
    out
}

// ---------------------------------------------------------------------------
// Finite differences guarded by a fingerprint of every discrete decision.

/// Hash of everything that makes the objective piecewise: per-pixel blend
/// lists (membership, order, clipping, early stop), decoder ReLU patterns,
/// L1/content/opacity-clamp signs, and the scale-regularizer branch.
pub fn fingerprint(p: &Problem, g: &SceneGraph) -> u64 {
    let mut h = DefaultHasher::new();
    let f = &p.frame;
    let flat = g.flatten_scene_only(f.frame, &f.weather).unwrap();
    let pass = render(&flat.gaussians, &f.camera, RenderOptions::serial()).unwrap();
    for y in 0..f.camera.height {
        for x in 0..f.camera.width {
            for b in pass.pixel_blends(x, y) {
                (b.gaussian, b.clipped).hash(&mut h);
            }
            u8::MAX.hash(&mut h);
        }
    }
    let d = g.decoder(&f.weather).unwrap();
    for r in g.node_refs() {
        for prim in &g.node(r).gaussians {
            for v in d.forward(&prim.feature).hidden {
                (v > 0.0).hash(&mut h);
            }
            let ls = prim.log_scale;
            (ls.imax(), ls.imin(), (ls.max() - ls.min()).exp() > 10.0).hash(&mut h);
        }
    }
    let eval = evaluate(g, f, Some(&p.raw), &p.config, false).unwrap();
    for (a, b) in eval.rgb.data.iter().zip(&f.image.data) {
        (a > b).hash(&mut h);
    }
    for (a, b) in content_features(&eval.rgb).iter().zip(content_features(&p.raw).iter()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            (x > y).hash(&mut h);
        }
    }
    for a in &eval.output.alpha.data {
        (*a < OPACITY_EPS, *a > 1.0 - OPACITY_EPS).hash(&mut h);
    }
    h.finish()
}

pub fn loss(p: &Problem, g: &SceneGraph) -> f64 {
    evaluate(g, &p.frame, Some(&p.raw), &p.config, false).unwrap().loss.total
}

pub enum FdOutcome {
    /// `(central difference, step used)`.
    Value(f64, f64),
    /// Every step straddled a discontinuity.
    Kink,
}

/// Central difference at `param`, shrinking the step until both probes
/// share the base point's fingerprint.
pub fn central_difference(p: &Problem, param: &Param, base_fp: u64) -> FdOutcome {
    let x0 = *param_mut(&mut p.graph.clone(), param);
    let mut step = 1e-5 * x0.abs().max(1.0);
    for _ in 0..4 {
        let mut gp = p.graph.clone();
        *param_mut(&mut gp, param) = x0 + step;
        let mut gm = p.graph.clone();
        *param_mut(&mut gm, param) = x0 - step;
        if fingerprint(p, &gp) == base_fp && fingerprint(p, &gm) == base_fp {
            return FdOutcome::Value((loss(p, &gp) - loss(p, &gm)) / (2.0 * step), step);
        }
        step *= 0.1;
    }
    FdOutcome::Kink
}

/// Relative-error acceptance with an absolute floor for vanishing
/// gradients, where the difference quotient is dominated by round-off.
pub const GRAD_REL_TOL: f64 = 1e-3;
pub const GRAD_ABS_FLOOR: f64 = 1e-8;

pub fn grad_close(a: f64, fd: f64) -> bool {
    (a - fd).abs() <= GRAD_REL_TOL * a.abs().max(fd.abs()) + GRAD_ABS_FLOOR
}

pub fn identity_pose() -> Pose {
    Pose::new(QUAT_IDENTITY, Vec3::zeros())
}

// ---------------------------------------------------------------------------
// Full scenes for format round trips.

fn random_prim<R: Rng>(rng: &mut R) -> GaussianPrimitive {
    let mut feature = [0.0; FEATURE_DIM];
    feature.iter_mut().for_each(|f| *f = rng.random_range(-2.0..2.0));
    GaussianPrimitive {
        position: Vec3::from_fn(|_, _| rng.random_range(-50.0..50.0)),
        log_scale: Vec3::from_fn(|_, _| rng.random_range(-5.0..0.0)),
        rotation: random_quat(rng),
        opacity_logit: rng.random_range(-4.0..4.0),
        feature,
    }
}

/// A scene exercising every archive section: `n` background Gaussians,
/// rigid and non-rigid nodes, two weathers and a snow system mid-run.
pub fn random_scene(seed: u64, n: usize) -> SceneGraph {
    use weathercity_core::weather::{BoundingBox, ParticleKind, ParticleParams, ParticleSystem};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = 3;
    let mut g = SceneGraph::new(frames);
    g.background = GaussianNode::background((0..n).map(|_| random_prim(&mut rng)).collect());
    let poses: Vec<Pose> = (0..frames)
        .map(|_| Pose::new(random_quat(&mut rng), Vec3::from_fn(|_, _| rng.random_range(-5.0..5.0))))
        .collect();
    let rigid = (0..5).map(|_| random_prim(&mut rng)).collect();
    g.add_rigid(GaussianNode::rigid("car", rigid, poses.clone())).unwrap();
    let mut walker = GaussianNode::nonrigid("walker", (0..4).map(|_| random_prim(&mut rng)).collect(), poses);
    for o in walker.offsets.iter_mut().flatten() {
        *o = Vec3::from_fn(|_, _| rng.random_range(-0.2..0.2));
    }
    g.add_nonrigid(walker).unwrap();
    for label in [WeatherLabel::Raw, WeatherLabel::Snowy] {
        let texels = (0..6 * 3 * 3).map(|_| rng.random()).collect();
        let d = WeatherDecoder::xavier(label, &mut rng);
        g.register_weather(d, SkyNode::from_texels(6, 3, texels).unwrap()).unwrap();
    }
    let params = ParticleParams {
        count: 64,
        ..ParticleParams::snow()
    };
    let volume = BoundingBox::new([-5.0, -5.0, 0.0], [5.0, 5.0, 10.0]).unwrap();
    let mut snow = ParticleSystem::spawn(ParticleKind::Snow, params, volume, seed).unwrap();
    snow.step(1.0 / 30.0).unwrap();
    g.add_weather_node("snow", snow).unwrap();
    g
}
