//! On-disk formats: scene archives, splat PLY import, images, depth
//! rasters, supervision manifests and the synthetic dataset generator.

mod archive;
mod codec;
mod manifest;
mod ply;
mod raster;
mod synthetic;

pub use archive::{decode_scene, encode_scene, load_scene, save_scene, MAGIC, VERSION};
pub use manifest::{check_supervision, load_supervision, Manifest, ViewEntry, MANIFEST_VERSION};
pub use ply::{decode_splat_ply, encode_splat_ply, import_splat_ply, FEATURE_TAIL_STD, SH_C0};
pub use raster::{
    decode_depth, encode_depth, encode_png, load_depth, load_image, load_mask, save_depth, save_image, save_mask, BitDepth,
    DEPTH_HEADER_LEN, DEPTH_MAGIC,
};
pub use synthetic::{
    make_synthetic, mean_sky_color, perturbed_init, render_composited, write_synthetic, ColorTransform, Synthetic,
    SyntheticFiles, SyntheticSpec, SyntheticView, DEPTH_ALPHA, DEPTH_STRIDE, SKY_ALPHA,
};
