//! Depth rasters, color images and sky masks on disk.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Rgb};

use super::codec::{read_file, write_atomic, Reader};
use crate::buffer::{ColorImage, ScalarMap};
use crate::error::{Error, Result};

pub const DEPTH_MAGIC: &[u8; 8] = b"WCDEPTH\0";
pub const DEPTH_HEADER_LEN: usize = 16;

/// Encodes a depth map as `magic, u32 width, u32 height` then row-major
/// little-endian `f32`. Values are rounded to `f32`.
pub fn encode_depth(map: &ScalarMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(DEPTH_HEADER_LEN + map.data.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    for v in &map.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_depth(data: &[u8]) -> Result<ScalarMap> {
    let mut r = Reader::new(data);
    if r.take(8, "depth magic")? != DEPTH_MAGIC {
        return Err(Error::format(0, "bad depth magic"));
    }
    let w = r.u32("depth width")? as usize;
    let h = r.u32("depth height")? as usize;
    let n = w
        .checked_mul(h)
        .filter(|n| n.checked_mul(4) == Some(r.remaining()))
        .ok_or_else(|| {
            Error::format(
                DEPTH_HEADER_LEN as u64,
                format!("expected {w}x{h} f32 values, found {} bytes", r.remaining()),
            )
        })?;
    let body = r.take(n * 4, "depth values")?;
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    ScalarMap::from_data(w, h, data)
}

pub fn save_depth(map: &ScalarMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_depth(map))
}

pub fn load_depth(path: impl AsRef<Path>) -> Result<ScalarMap> {
    let path = path.as_ref();
    decode_depth(&read_file(path)?).map_err(|e| with_path(path, e))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Format { offset, reason } => Error::Decode {
            path: path.to_owned(),
            reason: format!("format error at byte {offset}: {reason}"),
        },
        other => other,
    }
}

fn decode_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Decode {
        path: path.to_owned(),
        reason: e.to_string(),
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    let bytes = read_file(path)?;
    image::load_from_memory(&bytes).map_err(|e| decode_err(path, e))
}

/// Loads a PNG or PPM color image into `[0, 1]`; 16-bit PNGs keep full
/// precision.
pub fn load_image(path: impl AsRef<Path>) -> Result<ColorImage> {
    let path = path.as_ref();
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
        }
        _ => img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    };
    ColorImage::from_data(w, h, data)
}

/// Bit depth used when writing PNG images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Writes a color image; the format follows the extension (`.png` or
/// `.ppm`). PPM output is always 8-bit.
pub fn save_image(img: &ColorImage, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path).map_err(|e| decode_err(path, e))?;
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = match (format, depth) {
        (ImageFormat::Png, BitDepth::Sixteen) => {
            let raw: Vec<u16> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
            DynamicImage::ImageRgb16(ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, raw).expect("sized buffer"))
        }
        (ImageFormat::Png | ImageFormat::Pnm, _) => {
            DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, img.to_rgb8()).expect("sized buffer"))
        }
        _ => return Err(decode_err(path, "unsupported image extension (use .png or .ppm)")),
    };
    let mut bytes = std::io::Cursor::new(Vec::new());
    dynamic.write_to(&mut bytes, format).map_err(|e| decode_err(path, e))?;
    write_atomic(path, &bytes.into_inner())
}

/// Encodes an 8-bit RGB PNG in memory.
pub fn encode_png(img: &ColorImage) -> Vec<u8> {
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(img.width as u32, img.height as u32, img.to_rgb8()).expect("sized buffer");
    let mut bytes = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(buf)
        .write_to(&mut bytes, ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    bytes.into_inner()
}

/// Loads an 8-bit mask: values above 127 become `1.0` (sky).
pub fn load_mask(path: impl AsRef<Path>) -> Result<ScalarMap> {
    let path = path.as_ref();
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    ScalarMap::from_data(w, h, img.into_raw().into_iter().map(|v| if v > 127 { 1.0 } else { 0.0 }).collect())
}

/// Writes a mask as an 8-bit grayscale PNG (`255` where the map is ≥ 0.5).
pub fn save_mask(mask: &ScalarMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = mask.data.iter().map(|v| if *v >= 0.5 { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, raw).expect("sized buffer");
    let mut bytes = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageLuma8(buf)
        .write_to(&mut bytes, ImageFormat::Png)
        .map_err(|e| decode_err(path, e))?;
    write_atomic(path, &bytes.into_inner())
}
