//! Import of binary little-endian splat PLY files.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::codec::read_file;
use crate::error::{Error, Result};
use crate::math::{logit, Quat, Vec3};
use crate::scene::{GaussianNode, GaussianPrimitive, FEATURE_DIM};

/// Zeroth-order spherical-harmonic constant: `color = 0.5 + SH_C0 · f_dc`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Standard deviation of the random tail of imported features.
pub const FEATURE_TAIL_STD: f64 = 0.01;

/// Colors are clamped into `[COLOR_EPS, 1 - COLOR_EPS]` before the logit.
const COLOR_EPS: f64 = 1e-4;

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity", "f_dc_0",
    "f_dc_1", "f_dc_2",
];

#[derive(Clone, Copy, Debug)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Header {
    vertices: usize,
    props: Vec<(String, Scalar, usize)>,
    stride: usize,
    body: usize,
}

fn parse_header(data: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut next_line = |pos: &mut usize| -> Result<(u64, String)> {
        let start = *pos;
        let end = data[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| Error::format(start as u64, "unterminated PLY header"))?;
        *pos = end + 1;
        line_no += 1;
        let line = std::str::from_utf8(&data[start..end])
            .map_err(|_| Error::format(start as u64, "non-ASCII PLY header"))?;
        Ok((start as u64, line.trim_end_matches('\r').to_owned()))
    };

    let (at, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(Error::format(at, "missing `ply` magic"));
    }
    let mut format_seen = false;
    let mut vertices = None;
    let mut in_vertex = false;
    let mut props = Vec::new();
    let mut stride = 0;
    loop {
        let (at, line) = next_line(&mut pos)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::format(at, format!("unsupported PLY format `{fmt}`")));
                }
                format_seen = true;
            }
            ["element", name, count] => {
                if vertices.is_some() {
                    // Elements after the vertex block are never read.
                    in_vertex = false;
                    continue;
                }
                if *name != "vertex" {
                    return Err(Error::format(at, format!("element `{name}` before vertex is unsupported")));
                }
                let n = count
                    .parse()
                    .map_err(|_| Error::format(at, format!("invalid vertex count `{count}`")))?;
                vertices = Some(n);
                in_vertex = true;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::format(at, "list properties on vertices are unsupported"));
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| Error::format(at, format!("unknown property type `{ty}`")))?;
                props.push((name.to_string(), s, stride));
                stride += s.size();
            }
            ["property", ..] => {}
            _ => return Err(Error::format(at, format!("malformed header line `{line}`"))),
        }
    }
    if !format_seen {
        return Err(Error::format(0, "missing format line"));
    }
    let vertices = vertices.ok_or_else(|| Error::Schema("element vertex".into()))?;
    Ok(Header {
        vertices,
        props,
        stride,
        body: pos,
    })
}

/// Parses a splat PLY into a background node. Feature entries 0..3 hold
/// the logit of the DC color, so a pass-through raw decoder reproduces it;
/// the remaining entries are small seeded noise.
pub fn decode_splat_ply(data: &[u8], seed: u64) -> Result<GaussianNode> {
    let h = parse_header(data)?;
    let col = |name: &str| -> Result<(Scalar, usize)> {
        h.props
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, o)| (*s, *o))
            .ok_or_else(|| Error::Schema(name.to_owned()))
    };
    let cols = REQUIRED.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;
    let need = h
        .vertices
        .checked_mul(h.stride)
        .ok_or_else(|| Error::format(h.body as u64, "vertex block size overflows"))?;
    let avail = data.len() - h.body;
    if avail < need {
        let at = h.body + avail / h.stride.max(1) * h.stride;
        return Err(Error::format(
            at as u64,
            format!("truncated vertex data: {} of {} vertices present", avail / h.stride.max(1), h.vertices),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tail = Normal::new(0.0, FEATURE_TAIL_STD).expect("valid std");
    let mut gaussians = Vec::with_capacity(h.vertices);
    for i in 0..h.vertices {
        let row = &data[h.body + i * h.stride..h.body + (i + 1) * h.stride];
        let v: Vec<f64> = cols.iter().map(|(s, o)| s.read(&row[*o..])).collect();
        let at = (h.body + i * h.stride) as u64;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(at, format!("non-finite value in vertex {i}")));
        }
        let rotation = Quat::new(v[6], v[7], v[8], v[9]);
        if rotation.norm() < 1e-12 {
            return Err(Error::format(at, format!("zero rotation in vertex {i}")));
        }
        let mut feature = [0.0; FEATURE_DIM];
        for c in 0..3 {
            feature[c] = logit((0.5 + SH_C0 * v[11 + c]).clamp(COLOR_EPS, 1.0 - COLOR_EPS));
        }
        for f in &mut feature[3..] {
            *f = tail.sample(&mut rng);
        }
        gaussians.push(GaussianPrimitive {
            position: Vec3::new(v[0], v[1], v[2]),
            log_scale: Vec3::new(v[3], v[4], v[5]),
            rotation,
            opacity_logit: v[10],
            feature,
        });
    }
    Ok(GaussianNode::background(gaussians))
}

pub fn import_splat_ply(path: impl AsRef<Path>, seed: u64) -> Result<GaussianNode> {
    let path = path.as_ref();
    decode_splat_ply(&read_file(path)?, seed).map_err(|e| match e {
        Error::Format { offset, reason } => Error::Decode {
            path: path.to_owned(),
            reason: format!("format error at byte {offset}: {reason}"),
        },
        other => other,
    })
}

/// Writes vertices as a float32 splat PLY with exactly the required
/// properties; used by tests and tooling.
pub fn encode_splat_ply(rows: &[[f32; 14]]) -> Vec<u8> {
    let mut out = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", rows.len()).into_bytes();
    for p in REQUIRED {
        out.extend_from_slice(format!("property float {p}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for r in rows {
        r.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::sigmoid;

    fn row() -> [f32; 14] {
        [1.0, 2.0, 3.0, 2f32.ln(), 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, -0.5]
    }

    #[test]
    fn single_vertex_maps_directly() {
        let node = decode_splat_ply(&encode_splat_ply(&[row()]), 0).unwrap();
        let g = &node.gaussians[0];
        assert_eq!(g.opacity(), 0.5);
        assert!((g.scale().x - 2.0).abs() < 1e-6);
        assert_eq!(g.position, Vec3::new(1.0, 2.0, 3.0));
        assert!((sigmoid(g.feature[0]) - (0.5 + SH_C0 * 0.5)).abs() < 1e-9);
        assert!(g.feature[3..].iter().all(|f| f.abs() < 0.1));
    }

    #[test]
    fn missing_property_is_named() {
        let bytes = encode_splat_ply(&[row()]);
        let text = String::from_utf8_lossy(&bytes).replace("property float rot_2\n", "property float other\n");
        match decode_splat_ply(text.as_bytes(), 0) {
            Err(Error::Schema(p)) => assert_eq!(p, "rot_2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ascii_format_is_rejected() {
        let b = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(decode_splat_ply(b, 0), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_body_is_rejected() {
        let b = encode_splat_ply(&[row(), row()]);
        assert!(matches!(decode_splat_ply(&b[..b.len() - 3], 0), Err(Error::Format { .. })));
    }

    #[test]
    fn extra_properties_are_skipped() {
        let mut b = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty double nx\n".to_vec();
        let full = encode_splat_ply(&[row()]);
        let header_end = full.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        let props_start = full.windows(8).position(|w| w == b"property").unwrap();
        b.extend_from_slice(&full[props_start..header_end]);
        b.extend_from_slice(&7.0f64.to_le_bytes());
        b.extend_from_slice(&full[header_end..]);
        let node = decode_splat_ply(&b, 0).unwrap();
        assert_eq!(node.gaussians[0].position, Vec3::new(1.0, 2.0, 3.0));
    }
}
