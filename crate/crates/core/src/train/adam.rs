//! Adam with per-group learning rates over the trainable parameters of a
//! [`SceneGraph`].

use std::collections::BTreeMap;

use super::gradients::{NodeGrads, SceneGradients};
use super::LearningRates;
use crate::error::{Error, Result};
use crate::math::{Quat, Vec3};
use crate::scene::{NodeKind, NodeRef, SceneGraph, WeatherLabel, FEATURE_DIM};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First and second moments for one parameter block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Rebuilds the moments for a new element order. `mapping[j]` names the
    /// old element behind new element `j`, or `None` for a fresh element;
    /// each element spans `stride` consecutive entries.
    pub fn remap(&self, mapping: &[Option<usize>], stride: usize) -> Self {
        let mut out = Self::zeros(mapping.len() * stride);
        for (j, src) in mapping.iter().enumerate() {
            if let Some(i) = src {
                out.m[j * stride..(j + 1) * stride].copy_from_slice(&self.m[i * stride..(i + 1) * stride]);
                out.v[j * stride..(j + 1) * stride].copy_from_slice(&self.v[i * stride..(i + 1) * stride]);
            }
        }
        out
    }
}

/// One Adam update at (1-based) step `t`.
///
/// Entries whose gradient is exactly zero only decay their moments; the
/// parameter itself is left untouched, so parameters that did not take part
/// in a step do not drift.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut Moments,
    lr: f64,
    t: u64,
    hp: &AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::dimension(
            "adam block",
            params.len(),
            format!("grads {} / moments {}", grads.len(), state.m.len()),
        ));
    }
    if t == 0 {
        return Err(Error::invalid("t", "Adam steps are 1-based"));
    }
    let bc1 = 1.0 - hp.beta1.powi(t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - hp.beta2.powi(t.min(i32::MAX as u64) as i32);
    for k in 0..params.len() {
        let g = grads[k];
        let m = hp.beta1 * state.m[k] + (1.0 - hp.beta1) * g;
        let v = hp.beta2 * state.v[k] + (1.0 - hp.beta2) * g * g;
        state.m[k] = m;
        state.v[k] = v;
        if g != 0.0 {
            params[k] -= lr * (m / bc1) / ((v / bc2).sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Moments of every parameter group of one node.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeMoments {
    pub position: Moments,
    pub log_scale: Moments,
    pub rotation: Moments,
    pub opacity_logit: Moments,
    pub feature: Moments,
    pub offsets: Moments,
}

impl NodeMoments {
    fn for_node(n: usize, offset_frames: usize) -> Self {
        Self {
            position: Moments::zeros(3 * n),
            log_scale: Moments::zeros(3 * n),
            rotation: Moments::zeros(4 * n),
            opacity_logit: Moments::zeros(n),
            feature: Moments::zeros(FEATURE_DIM * n),
            offsets: Moments::zeros(3 * n * offset_frames),
        }
    }

    pub fn remap(&self, mapping: &[Option<usize>], old_len: usize, offset_frames: usize) -> Self {
        // offsets are stored frame-major: [frame][gaussian][3]
        let mut offsets = Moments::zeros(3 * mapping.len() * offset_frames);
        for f in 0..offset_frames {
            let old = Moments {
                m: self.offsets.m[f * 3 * old_len..(f + 1) * 3 * old_len].to_vec(),
                v: self.offsets.v[f * 3 * old_len..(f + 1) * 3 * old_len].to_vec(),
            };
            let new = old.remap(mapping, 3);
            let span = f * 3 * mapping.len()..(f + 1) * 3 * mapping.len();
            offsets.m[span.clone()].copy_from_slice(&new.m);
            offsets.v[span].copy_from_slice(&new.v);
        }
        Self {
            position: self.position.remap(mapping, 3),
            log_scale: self.log_scale.remap(mapping, 3),
            rotation: self.rotation.remap(mapping, 4),
            opacity_logit: self.opacity_logit.remap(mapping, 1),
            feature: self.feature.remap(mapping, FEATURE_DIM),
            offsets,
        }
    }
}

/// Optimizer state for a whole graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub hyper: AdamHyper,
    pub lr: LearningRates,
    pub t: u64,
    pub nodes: Vec<(NodeRef, NodeMoments)>,
    pub decoders: BTreeMap<WeatherLabel, Moments>,
    pub skies: BTreeMap<WeatherLabel, Moments>,
}

fn offset_frames(graph: &SceneGraph, r: NodeRef) -> usize {
    let n = graph.node(r);
    if n.kind == NodeKind::NonRigid {
        n.offsets.len()
    } else {
        0
    }
}

impl Optimizer {
    pub fn new(graph: &SceneGraph, lr: LearningRates) -> Self {
        Self {
            hyper: AdamHyper::default(),
            lr,
            t: 0,
            nodes: graph
                .node_refs()
                .into_iter()
                .map(|r| (r, NodeMoments::for_node(graph.node(r).len(), offset_frames(graph, r))))
                .collect(),
            decoders: graph
                .decoders
                .iter()
                .map(|(k, d)| (k.clone(), Moments::zeros(d.params().count())))
                .collect(),
            skies: graph
                .skies
                .iter()
                .map(|(k, s)| (k.clone(), Moments::zeros(s.texels.len())))
                .collect(),
        }
    }

    /// Learning rate of the rotation group of node `r`.
    pub fn rotation_lr(&self, graph: &SceneGraph, r: NodeRef) -> f64 {
        match graph.node(r).kind {
            NodeKind::NonRigid => self.lr.rotation_nonrigid,
            _ => self.lr.rotation,
        }
    }

    /// Applies one Adam step to every parameter, then renormalizes
    /// quaternions and clamps sky texels to `[0, 1]`.
    pub fn step(&mut self, graph: &mut SceneGraph, grads: &SceneGradients) -> Result<()> {
        self.t += 1;
        let t = self.t;
        let hp = self.hyper;
        let base = self.lr.base;
        for (r, g) in &grads.nodes {
            let rot_lr = self.rotation_lr(graph, *r);
            let mom = &mut self
                .nodes
                .iter_mut()
                .find(|(x, _)| x == r)
                .ok_or_else(|| Error::State("optimizer lacks a node".into()))?
                .1;
            step_node(graph, *r, g, mom, base, rot_lr, t, &hp)?;
        }
        for (label, dg) in &grads.decoders {
            let dec = graph.decoders.get_mut(label).ok_or_else(|| Error::lookup("weather", label.as_str()))?;
            let mom = self.decoders.get_mut(label).ok_or_else(|| Error::State("optimizer lacks a decoder".into()))?;
            let g: Vec<f64> = dg.params().copied().collect();
            let mut p: Vec<f64> = dec.params().copied().collect();
            adam_step(&mut p, &g, mom, base, t, &hp)?;
            for (dst, src) in dec.params_mut().zip(p) {
                *dst = src;
            }
        }
        for (label, g) in &grads.skies {
            let sky = graph.skies.get_mut(label).ok_or_else(|| Error::lookup("sky", label.as_str()))?;
            let mom = self.skies.get_mut(label).ok_or_else(|| Error::State("optimizer lacks a sky".into()))?;
            adam_step(&mut sky.texels, g, mom, base, t, &hp)?;
            sky.clamp_texels();
        }
        super::gradients::normalize_rotations(graph);
        Ok(())
    }

    /// Re-indexes a node's moments after densification.
    pub fn remap_node(&mut self, r: NodeRef, mapping: &[Option<usize>], old_len: usize, offset_frames: usize) {
        if let Some((_, m)) = self.nodes.iter_mut().find(|(x, _)| *x == r) {
            *m = m.remap(mapping, old_len, offset_frames);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn step_node(
    graph: &mut SceneGraph,
    r: NodeRef,
    g: &NodeGrads,
    mom: &mut NodeMoments,
    base: f64,
    rot_lr: f64,
    t: u64,
    hp: &AdamHyper,
) -> Result<()> {
    let node = graph.node_mut(r);
    let n = node.len();
    if g.len() != n {
        return Err(Error::dimension(format!("gradients of node `{}`", node.id), n, g.len()));
    }

    let mut p: Vec<f64> = node.gaussians.iter().flat_map(|x| [x.position.x, x.position.y, x.position.z]).collect();
    let d: Vec<f64> = g.position.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    adam_step(&mut p, &d, &mut mom.position, base, t, hp)?;
    for (x, c) in node.gaussians.iter_mut().zip(p.chunks_exact(3)) {
        x.position = Vec3::new(c[0], c[1], c[2]);
    }

    let mut p: Vec<f64> = node.gaussians.iter().flat_map(|x| [x.log_scale.x, x.log_scale.y, x.log_scale.z]).collect();
    let d: Vec<f64> = g.log_scale.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    adam_step(&mut p, &d, &mut mom.log_scale, base, t, hp)?;
    for (x, c) in node.gaussians.iter_mut().zip(p.chunks_exact(3)) {
        x.log_scale = Vec3::new(c[0], c[1], c[2]);
    }

    let mut p: Vec<f64> = node.gaussians.iter().flat_map(|x| [x.rotation[0], x.rotation[1], x.rotation[2], x.rotation[3]]).collect();
    let d: Vec<f64> = g.rotation.iter().flat_map(|v| [v[0], v[1], v[2], v[3]]).collect();
    adam_step(&mut p, &d, &mut mom.rotation, rot_lr, t, hp)?;
    for (x, c) in node.gaussians.iter_mut().zip(p.chunks_exact(4)) {
        x.rotation = Quat::new(c[0], c[1], c[2], c[3]);
    }

    let mut p: Vec<f64> = node.gaussians.iter().map(|x| x.opacity_logit).collect();
    adam_step(&mut p, &g.opacity_logit, &mut mom.opacity_logit, base, t, hp)?;
    for (x, v) in node.gaussians.iter_mut().zip(p) {
        x.opacity_logit = v;
    }

    let mut p: Vec<f64> = node.gaussians.iter().flat_map(|x| x.feature).collect();
    let d: Vec<f64> = g.feature.iter().flatten().copied().collect();
    adam_step(&mut p, &d, &mut mom.feature, base, t, hp)?;
    for (x, c) in node.gaussians.iter_mut().zip(p.chunks_exact(FEATURE_DIM)) {
        x.feature.copy_from_slice(c);
    }

    if node.kind == NodeKind::NonRigid && !node.offsets.is_empty() {
        let mut p: Vec<f64> = node.offsets.iter().flatten().flat_map(|v| [v.x, v.y, v.z]).collect();
        let d: Vec<f64> = g.offsets.iter().flatten().flat_map(|v| [v.x, v.y, v.z]).collect();
        adam_step(&mut p, &d, &mut mom.offsets, base, t, hp)?;
        let mut it = p.chunks_exact(3);
        for frame in node.offsets.iter_mut() {
            for o in frame.iter_mut() {
                let c = it.next().expect("offset count");
                *o = Vec3::new(c[0], c[1], c[2]);
            }
        }
    }
    Ok(())
}
