//! Full forward/backward evaluation of the training objective on one frame.

use std::collections::BTreeMap;

use super::losses::{
    check_image, content_loss, depth_loss, min_max, opacity_loss, regularization_loss, rgb_loss,
    LossBreakdown, MAX_SCALE_RATIO,
};
use super::{SupervisionFrame, TrainingConfig};
use crate::buffer::ColorImage;
use crate::error::{Error, Result};
use crate::math::{quat_left_matrix, quat_normalize, quat_normalize_backward, quat_to_rotation, Quat, Vec3};
use crate::raster::{composite_sky, composite_sky_backward, render, Gaussian3DGrad, OutputGrad, RenderOptions, RenderOutput};
use crate::scene::{DecoderGrad, Feature, FlatScene, NodeKind, NodeRef, SceneGraph, Source, WeatherLabel, FEATURE_DIM};

/// Gradients for the Gaussians of one node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeGrads {
    pub position: Vec<Vec3>,
    pub log_scale: Vec<Vec3>,
    /// W.r.t. the stored (possibly unnormalized) quaternion.
    pub rotation: Vec<Quat>,
    pub opacity_logit: Vec<f64>,
    pub feature: Vec<Feature>,
    /// Non-rigid only: `[frame][gaussian]`.
    pub offsets: Vec<Vec<Vec3>>,
    /// Screen-space absolute positional gradient, NDC units.
    pub screen: Vec<f64>,
    pub visible: Vec<bool>,
}

impl NodeGrads {
    fn zeros(n: usize, offset_frames: usize) -> Self {
        Self {
            position: vec![Vec3::zeros(); n],
            log_scale: vec![Vec3::zeros(); n],
            rotation: vec![Quat::zeros(); n],
            opacity_logit: vec![0.0; n],
            feature: vec![[0.0; FEATURE_DIM]; n],
            offsets: vec![vec![Vec3::zeros(); n]; offset_frames],
            screen: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }
}

/// Gradients of the objective w.r.t. every trainable parameter of a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGradients {
    /// Aligned with [`SceneGraph::node_refs`].
    pub nodes: Vec<(NodeRef, NodeGrads)>,
    pub decoders: BTreeMap<WeatherLabel, DecoderGrad>,
    pub skies: BTreeMap<WeatherLabel, Vec<f64>>,
}

impl SceneGradients {
    pub fn zeros_like(graph: &SceneGraph) -> Self {
        let nodes = graph
            .node_refs()
            .into_iter()
            .map(|r| {
                let n = graph.node(r);
                let frames = if n.kind == NodeKind::NonRigid { n.offsets.len() } else { 0 };
                (r, NodeGrads::zeros(n.len(), frames))
            })
            .collect();
        Self {
            nodes,
            decoders: graph.decoders.keys().map(|k| (k.clone(), DecoderGrad::default())).collect(),
            skies: graph.skies.iter().map(|(k, s)| (k.clone(), vec![0.0; s.texels.len()])).collect(),
        }
    }

    pub fn node(&self, r: NodeRef) -> &NodeGrads {
        &self.nodes.iter().find(|(x, _)| *x == r).expect("node present").1
    }

    pub fn node_mut(&mut self, r: NodeRef) -> &mut NodeGrads {
        &mut self.nodes.iter_mut().find(|(x, _)| *x == r).expect("node present").1
    }
}

/// Result of [`evaluate`]: the loss terms, the composited render and (when
/// requested) the parameter gradients.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub rgb: ColorImage,
    pub output: RenderOutput,
    pub grads: Option<SceneGradients>,
}

/// Renders `frame` from `graph` and evaluates the full objective. With
/// `with_grads`, also back-propagates to every trainable parameter.
///
/// `raw` is the raw-weather target of the same frame index; the content
/// term is active only for non-raw weathers when it is given.
pub fn evaluate(
    graph: &SceneGraph,
    frame: &SupervisionFrame,
    raw: Option<&ColorImage>,
    config: &TrainingConfig,
    with_grads: bool,
) -> Result<Evaluation> {
    let cam = &frame.camera;
    let (w, h) = (cam.width, cam.height);
    check_image("target image", &frame.image, w, h)?;
    let opts = RenderOptions {
        parallel: config.parallel,
        ..RenderOptions::default()
    };
    let flat = graph.flatten_scene_only(frame.frame, &frame.weather)?;
    let pass = render(&flat.gaussians, cam, opts)?;
    let sky = graph.sky(&frame.weather)?;
    let rgb = if graph.sky_visible {
        composite_sky(&pass.output, cam, sky)?
    } else {
        pass.output.rgb.clone()
    };

    let wts = &config.weights;
    let (l_rgb, g_rgb) = rgb_loss(&rgb, &frame.image, wts.ssim)?;
    let mut d_rgb = g_rgb;
    let mut l_cc = 0.0;
    if let (false, Some(raw)) = (frame.weather.is_raw(), raw) {
        check_image("raw image", raw, w, h)?;
        let (l, g) = content_loss(&rgb, raw)?;
        l_cc = l;
        axpy(&mut d_rgb, wts.content, &g);
    }
    let mut d_depth = vec![0.0; w * h];
    let mut l_depth = 0.0;
    if let Some(sparse) = &frame.depth {
        let (l, g) = depth_loss(&pass.output.depth, sparse)?;
        l_depth = l;
        axpy(&mut d_depth, wts.depth, &g);
    }
    let mut d_alpha = vec![0.0; w * h];
    let mut l_opacity = 0.0;
    if let Some(mask) = &frame.sky_mask {
        let (l, g) = opacity_loss(&pass.output.alpha, Some(mask))?;
        l_opacity = l;
        axpy(&mut d_alpha, wts.opacity, &g);
    }
    let l_reg = regularization_loss(graph);
    let loss = LossBreakdown::combine(l_rgb, l_cc, l_depth, l_opacity, l_reg, wts);
    if !loss.total.is_finite() {
        return Err(Error::State(format!("non-finite loss at frame {} ({})", frame.frame, frame.weather)));
    }

    let grads = if with_grads {
        let mut grads = SceneGradients::zeros_like(graph);
        if graph.sky_visible {
            let sb = composite_sky_backward(&pass.output, cam, sky, &d_rgb)?;
            axpy(&mut d_alpha, 1.0, &sb.alpha);
            let gs = grads.skies.get_mut(&frame.weather).expect("sky registered");
            axpy(gs, 1.0, &sb.texels);
        }
        let upstream = OutputGrad {
            rgb: d_rgb,
            depth: d_depth,
            alpha: d_alpha,
        };
        let g3 = pass.backward(&flat.gaussians, cam, &upstream)?;
        let ndc = [0.5 * w as f64, 0.5 * h as f64];
        flatten_backward(graph, &flat, &g3, ndc, &mut grads)?;
        regularization_backward(graph, &mut grads);
        Some(grads)
    } else {
        None
    };

    Ok(Evaluation {
        loss,
        rgb,
        output: pass.output,
        grads,
    })
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (p, q) in y.iter_mut().zip(x) {
        *p += a * q;
    }
}

/// Pulls per-Gaussian render gradients back to the graph parameters that
/// produced `flat`. `ndc` converts pixel gradients to NDC units.
pub fn flatten_backward(
    graph: &SceneGraph,
    flat: &FlatScene,
    g3: &[Gaussian3DGrad],
    ndc: [f64; 2],
    out: &mut SceneGradients,
) -> Result<()> {
    if g3.len() != flat.gaussians.len() {
        return Err(Error::dimension("render gradients", flat.gaussians.len(), g3.len()));
    }
    let decoder = graph.decoder(&flat.weather)?;
    let mut dgrad = DecoderGrad::default();
    let t = flat.frame;
    for ((src, g), fg) in flat.sources.iter().zip(g3).zip(&flat.gaussians) {
        let Source::Trainable { node: r, index: i } = *src else {
            continue;
        };
        let node = graph.node(r);
        let prim = &node.gaussians[i];
        let ng = out.node_mut(r);

        let (d_pos_local, d_unit_local) = match node.kind {
            NodeKind::Background => (g.position, g.rotation),
            _ => {
                let pose = node.pose_at(t);
                let rot = quat_to_rotation(&pose.rotation);
                let d_local = rot.transpose() * g.position;
                // q_world = L(q_pose)·q_local
                let d_q = quat_left_matrix(&pose.rotation).transpose() * g.rotation;
                (d_local, d_q)
            }
        };
        ng.position[i] += d_pos_local;
        if node.kind == NodeKind::NonRigid {
            ng.offsets[t][i] += d_pos_local;
        }
        ng.rotation[i] += quat_normalize_backward(&prim.rotation, &d_unit_local);
        ng.log_scale[i] += g.log_scale(&fg.scale);
        ng.opacity_logit[i] += g.opacity_logit(fg.opacity);

        let trace = decoder.forward(&prim.feature);
        let df = decoder.backward(&prim.feature, &trace, &g.color, &mut dgrad);
        for (a, b) in ng.feature[i].iter_mut().zip(df) {
            *a += b;
        }
        if g.visible {
            ng.visible[i] = true;
            ng.screen[i] += (g.abs_mean2d[0] * ndc[0]).hypot(g.abs_mean2d[1] * ndc[1]);
        }
    }
    let acc = out.decoders.get_mut(&flat.weather).expect("decoder registered");
    for (a, b) in [
        (&mut acc.w1, &dgrad.w1),
        (&mut acc.b1, &dgrad.b1),
        (&mut acc.w2, &dgrad.w2),
        (&mut acc.b2, &dgrad.b2),
    ] {
        axpy(a, 1.0, b);
    }
    Ok(())
}

fn regularization_backward(graph: &SceneGraph, out: &mut SceneGradients) {
    for r in graph.node_refs() {
        let node = graph.node(r);
        let ng = out.node_mut(r);
        for (i, g) in node.gaussians.iter().enumerate() {
            let (lo, hi) = min_max(&g.log_scale);
            let e = (hi.1 - lo.1).exp();
            if e > MAX_SCALE_RATIO && lo.0 != hi.0 {
                ng.log_scale[i][hi.0] += e;
                ng.log_scale[i][lo.0] -= e;
            }
        }
        if node.kind == NodeKind::NonRigid {
            let f = node.offsets.len();
            for t in 0..f.saturating_sub(1) {
                for i in 0..node.len() {
                    let d = 2.0 * (node.offsets[t + 1][i] - node.offsets[t][i]);
                    ng.offsets[t + 1][i] += d;
                    ng.offsets[t][i] -= d;
                }
            }
        }
    }
}

/// Renders `frame`'s view under its weather, sky included, for metrics.
pub fn render_view(graph: &SceneGraph, frame: &SupervisionFrame, parallel: bool) -> Result<(ColorImage, RenderOutput)> {
    let flat = graph.flatten_scene_only(frame.frame, &frame.weather)?;
    let pass = render(
        &flat.gaussians,
        &frame.camera,
        RenderOptions {
            parallel,
            ..RenderOptions::default()
        },
    )?;
    let rgb = if graph.sky_visible {
        composite_sky(&pass.output, &frame.camera, graph.sky(&frame.weather)?)?
    } else {
        pass.output.rgb.clone()
    };
    Ok((rgb, pass.output))
}

/// Unit-normalizes stored quaternions (used after every optimizer step).
pub fn normalize_rotations(graph: &mut SceneGraph) {
    for r in graph.node_refs() {
        for g in &mut graph.node_mut(r).gaussians {
            g.rotation = quat_normalize(&g.rotation);
        }
    }
}
