use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::math::Vec3;

pub const DEFAULT_SKY_HEIGHT: usize = 256;
pub const DEFAULT_SKY_WIDTH: usize = 512;

/// Equirectangular environment texture for the distant sky.
///
/// Row 0 is the zenith, the last row the nadir (z-up world); column 0 starts
/// at azimuth −π. Texels are RGB in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SkyNode {
    pub width: usize,
    pub height: usize,
    pub texels: Vec<f64>,
}

/// Four bilinear taps: `(texel index, weight)`.
pub type SkyTaps = [(usize, f64); 4];

impl SkyNode {
    pub fn constant(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let texels = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            texels,
        }
    }

    pub fn from_texels(width: usize, height: usize, texels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("sky", "texture must be at least 1×1"));
        }
        if texels.len() != width * height * 3 {
            return Err(Error::dimension("sky texels", width * height * 3, texels.len()));
        }
        if texels.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("sky", "texel outside [0,1]"));
        }
        Ok(Self {
            width,
            height,
            texels,
        })
    }

    /// Vertical gradient from `zenith` to `horizon` color, constant below the horizon.
    pub fn gradient(width: usize, height: usize, zenith: [f64; 3], horizon: [f64; 3]) -> Self {
        let mut sky = Self::constant(width, height, horizon);
        for row in 0..height {
            let elevation = FRAC_PI_2 - (row as f64 + 0.5) / height as f64 * PI;
            let t = (elevation / FRAC_PI_2).clamp(0.0, 1.0);
            for col in 0..width {
                let base = (row * width + col) * 3;
                for c in 0..3 {
                    sky.texels[base + c] = horizon[c] + (zenith[c] - horizon[c]) * t;
                }
            }
        }
        sky
    }

    pub fn texel(&self, row: usize, col: usize) -> [f64; 3] {
        let b = (row * self.width + col) * 3;
        [self.texels[b], self.texels[b + 1], self.texels[b + 2]]
    }

    /// Bilinear taps for a world-space direction (need not be normalized).
    pub fn taps(&self, dir: &Vec3) -> SkyTaps {
        let n = dir.norm();
        let d = if n > 0.0 { dir / n } else { Vec3::z() };
        let azimuth = d.y.atan2(d.x);
        let elevation = d.z.clamp(-1.0, 1.0).asin();
        let fx = (azimuth + PI) / (2.0 * PI) * self.width as f64 - 0.5;
        let fy = (FRAC_PI_2 - elevation) / PI * self.height as f64 - 0.5;

        let x0 = fx.floor();
        let tx = fx - x0;
        let w = self.width as i64;
        let xa = (x0 as i64).rem_euclid(w) as usize;
        let xb = (x0 as i64 + 1).rem_euclid(w) as usize;

        let fy = fy.clamp(0.0, (self.height - 1) as f64);
        let y0 = fy.floor();
        let ty = fy - y0;
        let ya = y0 as usize;
        let yb = (ya + 1).min(self.height - 1);

        [
            (ya * self.width + xa, (1.0 - tx) * (1.0 - ty)),
            (ya * self.width + xb, tx * (1.0 - ty)),
            (yb * self.width + xa, (1.0 - tx) * ty),
            (yb * self.width + xb, tx * ty),
        ]
    }

    pub fn sample_taps(&self, taps: &SkyTaps) -> [f64; 3] {
        let mut out = [0.0; 3];
        for &(idx, w) in taps {
            for c in 0..3 {
                out[c] += w * self.texels[idx * 3 + c];
            }
        }
        out
    }

    pub fn sample(&self, dir: &Vec3) -> [f64; 3] {
        self.sample_taps(&self.taps(dir))
    }

    pub fn clamp_texels(&mut self) {
        self.texels.iter_mut().for_each(|t| *t = t.clamp(0.0, 1.0));
    }
}
