use super::{Camera, RenderOutput};
use crate::buffer::ColorImage;
use crate::error::{Error, Result};
use crate::scene::sky::SkyNode;

/// Fills the transmitted remainder of every pixel with the sky:
/// `rgb + (1 − A)·sky(ray)`.
pub fn composite_sky(out: &RenderOutput, camera: &Camera, sky: &SkyNode) -> Result<ColorImage> {
    check(out, camera)?;
    let mut rgb = out.rgb.clone();
    for y in 0..out.height() {
        for x in 0..out.width() {
            let t = 1.0 - out.alpha.get(x, y);
            let s = sky.sample(&camera.ray_direction(x as f64, y as f64));
            let b = (y * out.width() + x) * 3;
            for c in 0..3 {
                rgb.data[b + c] += t * s[c];
            }
        }
    }
    Ok(rgb)
}

/// Gradients produced by [`composite_sky_backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct SkyBackward {
    /// Extra gradient on the rasterized alpha, per pixel.
    pub alpha: Vec<f64>,
    /// Gradient on the sky texels, same layout as [`SkyNode::texels`].
    pub texels: Vec<f64>,
}

/// Back-propagates `d_rgb` (gradient on the composited image). The gradient
/// on the rasterized color is `d_rgb` itself and is not repeated here.
pub fn composite_sky_backward(
    out: &RenderOutput,
    camera: &Camera,
    sky: &SkyNode,
    d_rgb: &[f64],
) -> Result<SkyBackward> {
    check(out, camera)?;
    let n = out.width() * out.height();
    if d_rgb.len() != n * 3 {
        return Err(Error::dimension("sky upstream", n * 3, d_rgb.len()));
    }
    let mut grad = SkyBackward {
        alpha: vec![0.0; n],
        texels: vec![0.0; sky.texels.len()],
    };
    for y in 0..out.height() {
        for x in 0..out.width() {
            let p = y * out.width() + x;
            let g = &d_rgb[p * 3..p * 3 + 3];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let taps = sky.taps(&camera.ray_direction(x as f64, y as f64));
            let s = sky.sample_taps(&taps);
            grad.alpha[p] -= g[0] * s[0] + g[1] * s[1] + g[2] * s[2];
            let t = 1.0 - out.alpha.data[p];
            for &(idx, w) in &taps {
                for c in 0..3 {
                    grad.texels[idx * 3 + c] += t * w * g[c];
                }
            }
        }
    }
    Ok(grad)
}

fn check(out: &RenderOutput, camera: &Camera) -> Result<()> {
    if out.width() != camera.width || out.height() != camera.height {
        return Err(Error::dimension(
            "sky composite",
            format!("{}x{}", camera.width, camera.height),
            format!("{}x{}", out.width(), out.height()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_render_shows_only_sky() {
        let cam = Camera::new(10.0, 10.0, 2.0, 2.0, 4, 4);
        let sky = SkyNode::constant(4, 2, [0.2, 0.4, 0.6]);
        let img = composite_sky(&RenderOutput::empty(4, 4), &cam, &sky).unwrap();
        assert!(img.data.chunks(3).all(|p| p == [0.2, 0.4, 0.6]));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cam = Camera::new(3.0, 3.0, 1.5, 1.0, 3, 2);
        let sky = SkyNode::gradient(6, 4, [0.1, 0.3, 0.9], [0.8, 0.7, 0.6]);
        let mut out = RenderOutput::empty(3, 2);
        for (i, a) in out.alpha.data.iter_mut().enumerate() {
            *a = 0.1 * i as f64;
        }
        let d: Vec<f64> = (0..18).map(|i| ((i * 7) % 5) as f64 * 0.1 - 0.2).collect();
        let loss = |out: &RenderOutput, sky: &SkyNode| -> f64 {
            composite_sky(out, &cam, sky).unwrap().data.iter().zip(&d).map(|(a, b)| a * b).sum()
        };
        let g = composite_sky_backward(&out, &cam, &sky, &d).unwrap();
        let h = 1e-6;
        for p in 0..6 {
            let mut a = out.clone();
            a.alpha.data[p] += h;
            let mut b = out.clone();
            b.alpha.data[p] -= h;
            let fd = (loss(&a, &sky) - loss(&b, &sky)) / (2.0 * h);
            assert!((fd - g.alpha[p]).abs() < 1e-7);
        }
        for k in 0..sky.texels.len() {
            let mut a = sky.clone();
            a.texels[k] += h;
            let mut b = sky.clone();
            b.texels[k] -= h;
            let fd = (loss(&out, &a) - loss(&out, &b)) / (2.0 * h);
            assert!((fd - g.texels[k]).abs() < 1e-7);
        }
    }
}
