//! The `WCTY` scene archive.

use std::path::Path;

use super::codec::{read_file, tag_str, write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::scene::{
    GaussianNode, GaussianPrimitive, NodeKind, Pose, SceneGraph, SkyNode, WeatherDecoder, WeatherLabel, FEATURE_DIM,
};
use crate::weather::{
    BoundingBox, ParticleKind, ParticleParams, ParticleSystem, RngState, TurbulenceParams, WindParams,
};

pub const MAGIC: &[u8; 4] = b"WCTY";
pub const VERSION: u32 = 1;

const TAG_META: &[u8; 4] = b"META";
const TAG_NODE: &[u8; 4] = b"NODE";
const TAG_DECODER: &[u8; 4] = b"DECO";
const TAG_SKY: &[u8; 4] = b"SKY ";
const TAG_PARTICLES: &[u8; 4] = b"PRTC";
const TAG_END: &[u8; 4] = b"END ";

/// Serializes a graph to archive bytes.
pub fn encode_scene(graph: &SceneGraph) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.section(TAG_META, |s| {
        s.u64(graph.frame_count as u64);
        s.bool(graph.sky_visible);
    });
    for r in graph.node_refs() {
        w.section(TAG_NODE, |s| write_node(s, graph.node(r)));
    }
    for d in graph.decoders.values() {
        w.section(TAG_DECODER, |s| {
            s.str(d.label.as_str());
            for a in [&d.w1, &d.b1, &d.w2, &d.b2] {
                s.f64s(a);
            }
        });
    }
    for (label, sky) in &graph.skies {
        w.section(TAG_SKY, |s| {
            s.str(label.as_str());
            s.u64(sky.width as u64);
            s.u64(sky.height as u64);
            s.f64s(&sky.texels);
        });
    }
    for n in &graph.weather_nodes {
        w.section(TAG_PARTICLES, |s| {
            s.str(&n.id);
            s.bool(n.visible);
            write_particles(s, &n.system);
        });
    }
    w.section(TAG_END, |_| {});
    w.buf
}

fn write_node(s: &mut Writer, n: &GaussianNode) {
    s.u8(match n.kind {
        NodeKind::Background => 0,
        NodeKind::Rigid => 1,
        NodeKind::NonRigid => 2,
    });
    s.str(&n.id);
    s.bool(n.visible);
    s.u64(n.gaussians.len() as u64);
    for g in &n.gaussians {
        s.vec3(&g.position);
        s.vec3(&g.log_scale);
        s.quat(&g.rotation);
        s.f64(g.opacity_logit);
        g.feature.iter().for_each(|f| s.f64(*f));
    }
    s.u64(n.poses.len() as u64);
    for p in &n.poses {
        s.quat(&p.rotation);
        s.vec3(&p.translation);
    }
    s.u64(n.offsets.len() as u64);
    for frame in &n.offsets {
        s.u64(frame.len() as u64);
        frame.iter().for_each(|o| s.vec3(o));
    }
}

fn write_particles(s: &mut Writer, p: &ParticleSystem) {
    s.u8(match p.kind {
        ParticleKind::Rain => 0,
        ParticleKind::Snow => 1,
    });
    let q = &p.params;
    s.u64(q.count as u64);
    for v in [q.fall_speed, q.wind.magnitude, q.wind.tilt, q.wind.azimuth, q.turbulence.rho, q.turbulence.sigma] {
        s.f64(v);
    }
    q.color.iter().chain(&q.scale).for_each(|v| s.f64(*v));
    s.f64(q.opacity);
    p.volume.min.iter().chain(&p.volume.max).for_each(|v| s.f64(*v));
    s.u64(p.seed);
    let rng = p.rng_state();
    s.bytes(&rng.seed);
    s.u64(rng.stream);
    s.u128(rng.word_pos);
    for arr in [&p.positions, &p.velocities, &p.turbulence] {
        s.u64(arr.len() as u64);
        arr.iter().for_each(|v| s.vec3(v));
    }
}

/// Parses archive bytes. Either the whole graph is returned or an error
/// carrying the byte offset of the first problem.
pub fn decode_scene(data: &[u8]) -> Result<SceneGraph> {
    let mut r = Reader::new(data);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"WCTY\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}, expected {VERSION}")));
    }

    let (tag, mut meta) = r.section()?;
    if &tag != TAG_META {
        return Err(Error::format(8, format!("expected META section, found `{}`", tag_str(&tag))));
    }
    let frames = meta.u64("frame count")?;
    let mut graph = SceneGraph::new(frames as usize);
    graph.sky_visible = meta.bool("sky visibility")?;
    meta.finish("META")?;

    let mut background_seen = false;
    loop {
        let at = r.offset();
        let (tag, mut s) = r.section()?;
        match &tag {
            TAG_NODE => {
                let node = read_node(&mut s)?;
                match node.kind {
                    NodeKind::Background if background_seen => {
                        return Err(Error::format(at, "second background node"));
                    }
                    NodeKind::Background => {
                        background_seen = true;
                        graph.background = node;
                    }
                    NodeKind::Rigid => graph.rigid_nodes.push(node),
                    NodeKind::NonRigid => graph.nonrigid_nodes.push(node),
                }
            }
            TAG_DECODER => {
                let label = read_label(&mut s)?;
                let d = WeatherDecoder {
                    label: label.clone(),
                    w1: s.f64s("decoder w1")?,
                    b1: s.f64s("decoder b1")?,
                    w2: s.f64s("decoder w2")?,
                    b2: s.f64s("decoder b2")?,
                };
                d.check_shape().map_err(|e| Error::format(at, e.to_string()))?;
                if graph.decoders.insert(label.clone(), d).is_some() {
                    return Err(Error::format(at, format!("duplicate decoder `{label}`")));
                }
            }
            TAG_SKY => {
                let label = read_label(&mut s)?;
                let w = s.u64("sky width")? as usize;
                let h = s.u64("sky height")? as usize;
                let texels = s.f64s("sky texels")?;
                let sky = SkyNode::from_texels(w, h, texels).map_err(|e| Error::format(at, e.to_string()))?;
                if graph.skies.insert(label.clone(), sky).is_some() {
                    return Err(Error::format(at, format!("duplicate sky `{label}`")));
                }
            }
            TAG_PARTICLES => {
                let id = s.str("node id")?;
                let visible = s.bool("visibility")?;
                let system = read_particles(&mut s)?;
                let i = graph.add_weather_node(id, system).map_err(|e| Error::format(at, e.to_string()))?;
                graph.weather_nodes[i].visible = visible;
            }
            TAG_END => {
                s.finish("END")?;
                break;
            }
            other => {
                return Err(Error::format(at, format!("unknown section `{}`", tag_str(other))));
            }
        }
        s.finish(&tag_str(&tag))?;
    }
    r.finish("archive")?;
    graph.validate().map_err(|e| Error::format(data.len() as u64, format!("inconsistent scene: {e}")))?;
    Ok(graph)
}

fn read_label(s: &mut Reader) -> Result<WeatherLabel> {
    let at = s.offset();
    s.str("weather label")?
        .parse()
        .map_err(|e: Error| Error::format(at, e.to_string()))
}

fn read_node(s: &mut Reader) -> Result<GaussianNode> {
    let at = s.offset();
    let kind = match s.u8("node kind")? {
        0 => NodeKind::Background,
        1 => NodeKind::Rigid,
        2 => NodeKind::NonRigid,
        k => return Err(Error::format(at, format!("invalid node kind {k}"))),
    };
    let id = s.str("node id")?;
    let visible = s.bool("visibility")?;
    let n = s.count(8 * (3 + 3 + 4 + 1 + FEATURE_DIM), "gaussian")?;
    let mut gaussians = Vec::with_capacity(n);
    for _ in 0..n {
        let position = s.vec3("position")?;
        let log_scale = s.vec3("log scale")?;
        let rotation = s.quat("rotation")?;
        let opacity_logit = s.f64("opacity")?;
        let mut feature = [0.0; FEATURE_DIM];
        for f in &mut feature {
            *f = s.f64("feature")?;
        }
        gaussians.push(GaussianPrimitive {
            position,
            log_scale,
            rotation,
            opacity_logit,
            feature,
        });
    }
    let np = s.count(8 * 7, "pose")?;
    let mut poses = Vec::with_capacity(np);
    for _ in 0..np {
        poses.push(Pose {
            rotation: s.quat("pose rotation")?,
            translation: s.vec3("pose translation")?,
        });
    }
    let nf = s.count(8, "offset frame")?;
    let mut offsets = Vec::with_capacity(nf);
    for _ in 0..nf {
        let k = s.count(24, "offset")?;
        offsets.push((0..k).map(|_| s.vec3("offset")).collect::<Result<Vec<_>>>()?);
    }
    Ok(GaussianNode {
        id,
        kind,
        gaussians,
        poses,
        offsets,
        visible,
    })
}

fn read_particles(s: &mut Reader) -> Result<ParticleSystem> {
    let at = s.offset();
    let kind = match s.u8("particle kind")? {
        0 => ParticleKind::Rain,
        1 => ParticleKind::Snow,
        k => return Err(Error::format(at, format!("invalid particle kind {k}"))),
    };
    let count = s.u64("particle count")? as usize;
    let mut v = [0.0; 6];
    for x in &mut v {
        *x = s.f64("particle parameter")?;
    }
    let mut c = [0.0; 7];
    for x in &mut c {
        *x = s.f64("particle appearance")?;
    }
    let params = ParticleParams {
        count,
        fall_speed: v[0],
        wind: WindParams {
            magnitude: v[1],
            tilt: v[2],
            azimuth: v[3],
        },
        turbulence: TurbulenceParams { rho: v[4], sigma: v[5] },
        color: [c[0], c[1], c[2]],
        scale: [c[3], c[4], c[5]],
        opacity: c[6],
    };
    let mut b = [0.0; 6];
    for x in &mut b {
        *x = s.f64("particle volume")?;
    }
    let volume = BoundingBox {
        min: [b[0], b[1], b[2]],
        max: [b[3], b[4], b[5]],
    };
    let seed = s.u64("particle seed")?;
    let rng = RngState {
        seed: s.take(32, "rng seed")?.try_into().expect("32 bytes"),
        stream: s.u64("rng stream")?,
        word_pos: s.u128("rng position")?,
    };
    let mut arrays = Vec::with_capacity(3);
    for what in ["particle positions", "particle velocities", "particle turbulence"] {
        let n = s.count(24, what)?;
        arrays.push((0..n).map(|_| s.vec3(what)).collect::<Result<Vec<_>>>()?);
    }
    let turbulence = arrays.pop().expect("three arrays");
    let velocities = arrays.pop().expect("three arrays");
    let positions = arrays.pop().expect("three arrays");
    ParticleSystem::from_parts(kind, params, volume, positions, velocities, turbulence, seed, rng)
        .map_err(|e| Error::format(at, e.to_string()))
}

/// Writes `graph` to `path` atomically.
pub fn save_scene(graph: &SceneGraph, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_scene(graph))
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneGraph> {
    let path = path.as_ref();
    decode_scene(&read_file(path)?).map_err(|e| match e {
        Error::Format { offset, reason } => Error::Decode {
            path: path.to_owned(),
            reason: format!("format error at byte {offset}: {reason}"),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec3;

    fn small() -> SceneGraph {
        let mut g = SceneGraph::new(2);
        g.background = GaussianNode::background(vec![GaussianPrimitive::new(
            Vec3::new(0.1, 0.2, 0.3),
            Vec3::repeat(-2.0),
            crate::math::QUAT_IDENTITY,
            0.4,
        )]);
        g.register_weather(WeatherDecoder::passthrough(WeatherLabel::Raw), SkyNode::constant(4, 2, [0.5; 3]))
            .unwrap();
        g
    }

    #[test]
    fn empty_scene_round_trips() {
        let g = SceneGraph::new(1);
        assert_eq!(decode_scene(&encode_scene(&g)).unwrap(), g);
    }

    #[test]
    fn small_scene_round_trips() {
        let g = small();
        let bytes = encode_scene(&g);
        assert_eq!(decode_scene(&bytes).unwrap(), g);
        assert_eq!(encode_scene(&decode_scene(&bytes).unwrap()), bytes);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = encode_scene(&small());
        b[0] = b'X';
        assert!(matches!(decode_scene(&b), Err(Error::Format { offset: 0, .. })));
        let mut b = encode_scene(&small());
        b[4] = 9;
        assert!(matches!(decode_scene(&b), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn every_truncation_is_an_error() {
        let b = encode_scene(&small());
        for n in 0..b.len() {
            match decode_scene(&b[..n]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= n as u64, "cut {n}: offset {offset}"),
                other => panic!("cut {n}: {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut b = encode_scene(&small());
        b.push(0);
        assert!(decode_scene(&b).is_err());
    }
}
