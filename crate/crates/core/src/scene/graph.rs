use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::math::{quat_mul, quat_normalize, quat_to_rotation, Quat, Vec3, QUAT_IDENTITY};
use crate::raster::Gaussian3D;
use crate::scene::decoder::{WeatherDecoder, WeatherLabel};
use crate::scene::gaussian::GaussianPrimitive;
use crate::scene::sky::SkyNode;
use crate::weather::ParticleSystem;

pub const BACKGROUND_ID: &str = "background";
pub const SKY_ID: &str = "sky";

/// Rigid transform from node-local to world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: QUAT_IDENTITY,
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        Self {
            rotation: quat_normalize(&rotation),
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(QUAT_IDENTITY, t)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        quat_to_rotation(&self.rotation) * p + self.translation
    }

    pub fn validate(&self) -> Result<()> {
        if !self.translation.iter().chain(self.rotation.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("pose", "non-finite component"));
        }
        if self.rotation.norm() < 1e-12 {
            return Err(Error::invalid("pose", "zero rotation quaternion"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Background,
    Rigid,
    NonRigid,
}

/// A set of trainable Gaussians sharing one motion model.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianNode {
    pub id: String,
    pub kind: NodeKind,
    pub gaussians: Vec<GaussianPrimitive>,
    /// One pose per frame; empty for the background.
    pub poses: Vec<Pose>,
    /// Non-rigid only: `offsets[frame][gaussian]`, node-local meters.
    pub offsets: Vec<Vec<Vec3>>,
    pub visible: bool,
}

impl GaussianNode {
    pub fn background(gaussians: Vec<GaussianPrimitive>) -> Self {
        Self {
            id: BACKGROUND_ID.to_owned(),
            kind: NodeKind::Background,
            gaussians,
            poses: Vec::new(),
            offsets: Vec::new(),
            visible: true,
        }
    }

    pub fn rigid(id: impl Into<String>, gaussians: Vec<GaussianPrimitive>, poses: Vec<Pose>) -> Self {
        Self {
            id: id.into(),
            kind: NodeKind::Rigid,
            gaussians,
            poses,
            offsets: Vec::new(),
            visible: true,
        }
    }

    /// Non-rigid node with zero offsets for every frame.
    pub fn nonrigid(
        id: impl Into<String>,
        gaussians: Vec<GaussianPrimitive>,
        poses: Vec<Pose>,
    ) -> Self {
        let offsets = vec![vec![Vec3::zeros(); gaussians.len()]; poses.len()];
        Self {
            id: id.into(),
            kind: NodeKind::NonRigid,
            gaussians,
            poses,
            offsets,
            visible: true,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn pose_at(&self, frame: usize) -> Pose {
        match self.kind {
            NodeKind::Background => Pose::identity(),
            _ => self.poses[frame],
        }
    }

    /// Node-local position of Gaussian `i` at `frame`, offsets included.
    pub fn local_position(&self, frame: usize, i: usize) -> Vec3 {
        let p = self.gaussians[i].position;
        match self.kind {
            NodeKind::NonRigid => p + self.offsets[frame][i],
            _ => p,
        }
    }

    fn validate(&self, frame_count: usize) -> Result<()> {
        if self.kind != NodeKind::Background && self.poses.len() != frame_count {
            return Err(Error::dimension(
                format!("pose list of node `{}`", self.id),
                frame_count,
                self.poses.len(),
            ));
        }
        if self.kind == NodeKind::NonRigid {
            if self.offsets.len() != frame_count {
                return Err(Error::dimension(
                    format!("offset frames of node `{}`", self.id),
                    frame_count,
                    self.offsets.len(),
                ));
            }
            if let Some(bad) = self.offsets.iter().find(|o| o.len() != self.gaussians.len()) {
                return Err(Error::dimension(
                    format!("offsets of node `{}`", self.id),
                    self.gaussians.len(),
                    bad.len(),
                ));
            }
        }
        for p in &self.poses {
            p.validate()?;
        }
        Ok(())
    }
}

/// An attached rain or snow particle system.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherNode {
    pub id: String,
    pub system: ParticleSystem,
    pub visible: bool,
}

/// Identifies a trainable node inside a [`SceneGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeRef {
    Background,
    Rigid(usize),
    NonRigid(usize),
}

/// Where a flattened Gaussian came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Trainable { node: NodeRef, index: usize },
    Particle { node: usize, index: usize },
}

/// Renderable Gaussians for one `(frame, weather)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatScene {
    pub frame: usize,
    pub weather: WeatherLabel,
    pub gaussians: Vec<Gaussian3D>,
    pub sources: Vec<Source>,
}

impl FlatScene {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

/// Summary row used by node listings.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeInfo {
    pub id: String,
    pub kind: &'static str,
    pub visible: bool,
    pub gaussians: usize,
}

/// Dynamic scene graph: sky, static background, rigid and non-rigid object
/// nodes, attached weather particle nodes, and one decoder plus sky texture
/// per registered weather.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    pub frame_count: usize,
    pub background: GaussianNode,
    pub rigid_nodes: Vec<GaussianNode>,
    pub nonrigid_nodes: Vec<GaussianNode>,
    pub weather_nodes: Vec<WeatherNode>,
    pub decoders: BTreeMap<WeatherLabel, WeatherDecoder>,
    pub skies: BTreeMap<WeatherLabel, SkyNode>,
    pub sky_visible: bool,
}

impl SceneGraph {
    pub fn new(frame_count: usize) -> Self {
        Self {
            frame_count,
            background: GaussianNode::background(Vec::new()),
            rigid_nodes: Vec::new(),
            nonrigid_nodes: Vec::new(),
            weather_nodes: Vec::new(),
            decoders: BTreeMap::new(),
            skies: BTreeMap::new(),
            sky_visible: true,
        }
    }

    /// Registers (or replaces) the decoder and sky texture of one weather.
    pub fn register_weather(&mut self, mut decoder: WeatherDecoder, sky: SkyNode) -> Result<()> {
        decoder.check_shape()?;
        let label = decoder.label.clone();
        decoder.label = label.clone();
        self.decoders.insert(label.clone(), decoder);
        self.skies.insert(label, sky);
        Ok(())
    }

    pub fn weathers(&self) -> impl Iterator<Item = &WeatherLabel> {
        self.decoders.keys()
    }

    pub fn decoder(&self, label: &WeatherLabel) -> Result<&WeatherDecoder> {
        self.decoders
            .get(label)
            .ok_or_else(|| Error::lookup("weather", label.as_str()))
    }

    pub fn sky(&self, label: &WeatherLabel) -> Result<&SkyNode> {
        self.skies
            .get(label)
            .ok_or_else(|| Error::lookup("sky for weather", label.as_str()))
    }

    pub fn add_rigid(&mut self, node: GaussianNode) -> Result<NodeRef> {
        self.check_new_id(&node.id)?;
        self.rigid_nodes.push(node);
        Ok(NodeRef::Rigid(self.rigid_nodes.len() - 1))
    }

    pub fn add_nonrigid(&mut self, node: GaussianNode) -> Result<NodeRef> {
        self.check_new_id(&node.id)?;
        self.nonrigid_nodes.push(node);
        Ok(NodeRef::NonRigid(self.nonrigid_nodes.len() - 1))
    }

    pub fn add_weather_node(&mut self, id: impl Into<String>, system: ParticleSystem) -> Result<usize> {
        let id = id.into();
        self.check_new_id(&id)?;
        self.weather_nodes.push(WeatherNode {
            id,
            system,
            visible: true,
        });
        Ok(self.weather_nodes.len() - 1)
    }

    fn check_new_id(&self, id: &str) -> Result<()> {
        if id.is_empty() || self.all_ids().any(|x| x == id) {
            return Err(Error::invalid("node id", format!("`{id}` is empty or already used")));
        }
        Ok(())
    }

    fn all_ids(&self) -> impl Iterator<Item = &str> {
        [BACKGROUND_ID, SKY_ID]
            .into_iter()
            .chain(self.rigid_nodes.iter().map(|n| n.id.as_str()))
            .chain(self.nonrigid_nodes.iter().map(|n| n.id.as_str()))
            .chain(self.weather_nodes.iter().map(|n| n.id.as_str()))
    }

    pub fn node(&self, r: NodeRef) -> &GaussianNode {
        match r {
            NodeRef::Background => &self.background,
            NodeRef::Rigid(i) => &self.rigid_nodes[i],
            NodeRef::NonRigid(i) => &self.nonrigid_nodes[i],
        }
    }

    pub fn node_mut(&mut self, r: NodeRef) -> &mut GaussianNode {
        match r {
            NodeRef::Background => &mut self.background,
            NodeRef::Rigid(i) => &mut self.rigid_nodes[i],
            NodeRef::NonRigid(i) => &mut self.nonrigid_nodes[i],
        }
    }

    /// All trainable nodes in a fixed order: background, rigid, non-rigid.
    pub fn node_refs(&self) -> Vec<NodeRef> {
        std::iter::once(NodeRef::Background)
            .chain((0..self.rigid_nodes.len()).map(NodeRef::Rigid))
            .chain((0..self.nonrigid_nodes.len()).map(NodeRef::NonRigid))
            .collect()
    }

    pub fn find_node(&self, id: &str) -> Option<NodeRef> {
        if id == BACKGROUND_ID {
            return Some(NodeRef::Background);
        }
        if let Some(i) = self.rigid_nodes.iter().position(|n| n.id == id) {
            return Some(NodeRef::Rigid(i));
        }
        self.nonrigid_nodes
            .iter()
            .position(|n| n.id == id)
            .map(NodeRef::NonRigid)
    }

    pub fn gaussian_count(&self) -> usize {
        self.node_refs().iter().map(|r| self.node(*r).len()).sum()
    }

    pub fn node_list(&self) -> Vec<NodeInfo> {
        let mut out = vec![NodeInfo {
            id: SKY_ID.to_owned(),
            kind: "sky",
            visible: self.sky_visible,
            gaussians: 0,
        }];
        for r in self.node_refs() {
            let n = self.node(r);
            out.push(NodeInfo {
                id: n.id.clone(),
                kind: match n.kind {
                    NodeKind::Background => "background",
                    NodeKind::Rigid => "rigid",
                    NodeKind::NonRigid => "nonrigid",
                },
                visible: n.visible,
                gaussians: n.len(),
            });
        }
        for w in &self.weather_nodes {
            out.push(NodeInfo {
                id: w.id.clone(),
                kind: w.system.kind.as_str(),
                visible: w.visible,
                gaussians: w.system.emitted_count(),
            });
        }
        out
    }

    /// Shows or hides a node. Hidden nodes contribute nothing to
    /// [`SceneGraph::flatten`] (and a hidden sky renders black).
    pub fn set_node_visibility(&mut self, id: &str, visible: bool) -> Result<()> {
        if id == SKY_ID {
            self.sky_visible = visible;
            return Ok(());
        }
        if let Some(r) = self.find_node(id) {
            self.node_mut(r).visible = visible;
            return Ok(());
        }
        if let Some(w) = self.weather_nodes.iter_mut().find(|w| w.id == id) {
            w.visible = visible;
            return Ok(());
        }
        Err(Error::lookup("node", id))
    }

    pub fn set_node_pose(&mut self, id: &str, frame: usize, pose: Pose) -> Result<()> {
        pose.validate()?;
        let frame_count = self.frame_count;
        match self.find_node(id) {
            Some(NodeRef::Background) => Err(Error::Unsupported(
                "the background node has a fixed identity pose".into(),
            )),
            Some(r) => {
                if frame >= frame_count {
                    return Err(Error::Range {
                        what: "frame",
                        index: frame,
                        len: frame_count,
                    });
                }
                self.node_mut(r).poses[frame] = Pose::new(pose.rotation, pose.translation);
                Ok(())
            }
            None if id == SKY_ID => Err(Error::Unsupported("the sky node has no pose".into())),
            None if self.weather_nodes.iter().any(|w| w.id == id) => Err(Error::Unsupported(
                "weather nodes are positioned by their bounding volume".into(),
            )),
            None => Err(Error::lookup("node", id)),
        }
    }

    /// Checks every structural invariant of the graph.
    pub fn validate(&self) -> Result<()> {
        if self.frame_count == 0 {
            return Err(Error::invalid("frame_count", "must be positive"));
        }
        let mut seen = HashSet::new();
        for id in self.all_ids() {
            if !seen.insert(id) {
                return Err(Error::invalid("node id", format!("duplicate `{id}`")));
            }
        }
        for r in self.node_refs() {
            self.node(r).validate(self.frame_count)?;
        }
        if self.decoders.keys().ne(self.skies.keys()) {
            return Err(Error::invalid("weathers", "decoder and sky registries differ"));
        }
        for (label, d) in &self.decoders {
            if &d.label != label {
                return Err(Error::invalid("decoders", format!("decoder keyed `{label}` is labelled `{}`", d.label)));
            }
            d.check_shape()?;
        }
        Ok(())
    }

    /// Produces the renderable Gaussian set for `frame` under `weather`.
    ///
    /// Geometry (positions, covariances, opacities) depends only on the
    /// frame; colors come from the selected weather decoder. Particles of
    /// visible weather nodes are appended with their fixed base colors.
    pub fn flatten(&self, frame: usize, weather: &WeatherLabel) -> Result<FlatScene> {
        self.flatten_impl(frame, weather, true)
    }

    /// Like [`SceneGraph::flatten`] but without weather particles.
    pub fn flatten_scene_only(&self, frame: usize, weather: &WeatherLabel) -> Result<FlatScene> {
        self.flatten_impl(frame, weather, false)
    }

    fn flatten_impl(&self, frame: usize, weather: &WeatherLabel, particles: bool) -> Result<FlatScene> {
        if frame >= self.frame_count {
            return Err(Error::Range {
                what: "frame",
                index: frame,
                len: self.frame_count,
            });
        }
        let decoder = self.decoder(weather)?;
        let mut gaussians = Vec::with_capacity(self.gaussian_count());
        let mut sources = Vec::with_capacity(self.gaussian_count());

        for r in self.node_refs() {
            let node = self.node(r);
            if !node.visible {
                continue;
            }
            let pose = node.pose_at(frame);
            let rot = quat_to_rotation(&pose.rotation);
            for (i, g) in node.gaussians.iter().enumerate() {
                let local_q = quat_normalize(&g.rotation);
                let (position, rotation) = match node.kind {
                    NodeKind::Background => (g.position, local_q),
                    _ => (
                        rot * node.local_position(frame, i) + pose.translation,
                        quat_mul(&pose.rotation, &local_q),
                    ),
                };
                gaussians.push(Gaussian3D {
                    position,
                    scale: g.scale(),
                    rotation,
                    opacity: g.opacity(),
                    color: decoder.forward(&g.feature).color,
                });
                sources.push(Source::Trainable { node: r, index: i });
            }
        }

        if particles {
            for (n, w) in self.weather_nodes.iter().enumerate() {
                if !w.visible {
                    continue;
                }
                for (i, g) in w.system.emit_gaussians().into_iter().enumerate() {
                    gaussians.push(g);
                    sources.push(Source::Particle { node: n, index: i });
                }
            }
        }

        Ok(FlatScene {
            frame,
            weather: weather.clone(),
            gaussians,
            sources,
        })
    }
}
