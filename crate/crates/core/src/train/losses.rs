//! Loss terms, each with its analytic gradient.

use super::ssim::ssim_with_grad;
use crate::buffer::{ColorImage, ScalarMap};
use crate::error::{Error, Result};
use crate::scene::{NodeKind, SceneGraph};

/// Clamp applied to alpha inside the opacity loss.
pub const OPACITY_EPS: f64 = 1e-6;
/// Largest scale ratio tolerated before the scaling penalty starts.
pub const MAX_SCALE_RATIO: f64 = 10.0;
/// Pyramid depth of the content features.
pub const CONTENT_LEVELS: usize = 3;

/// `(1 − λ)·mean|a − b| + λ·(1 − SSIM(a, b))` and its gradient w.r.t. `a`.
pub fn rgb_loss(render: &ColorImage, target: &ColorImage, lambda: f64) -> Result<(f64, Vec<f64>)> {
    render.same_size(target, "rgb loss inputs")?;
    let n = render.data.len() as f64;
    let mut grad = vec![0.0; render.data.len()];
    let mut l1 = 0.0;
    for (k, (a, b)) in render.data.iter().zip(&target.data).enumerate() {
        let d = a - b;
        l1 += d.abs();
        grad[k] = (1.0 - lambda) * sign(d) / n;
    }
    l1 /= n;
    let mut loss = (1.0 - lambda) * l1;
    if lambda != 0.0 {
        let (s, gs) = ssim_with_grad(render, target)?;
        loss += lambda * (1.0 - s);
        for (g, d) in grad.iter_mut().zip(gs) {
            *g -= lambda * d;
        }
    }
    Ok((loss, grad))
}

#[inline]
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Structure-only image features: horizontal and vertical central
/// differences of luminance on a 3-level box pyramid (6 maps, finest first,
/// `gx` before `gy` on each level). Border rows/columns are zero.
pub fn content_features(img: &ColorImage) -> Vec<ScalarMap> {
    let mut out = Vec::with_capacity(2 * CONTENT_LEVELS);
    let mut lum = img.luminance();
    for level in 0..CONTENT_LEVELS {
        if level > 0 {
            lum = downsample(&lum);
        }
        let (gx, gy) = central_differences(&lum);
        out.push(gx);
        out.push(gy);
    }
    out
}

fn downsample(m: &ScalarMap) -> ScalarMap {
    let (w, h) = (m.width / 2, m.height / 2);
    let mut out = ScalarMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let s = m.get(2 * x, 2 * y) + m.get(2 * x + 1, 2 * y) + m.get(2 * x, 2 * y + 1) + m.get(2 * x + 1, 2 * y + 1);
            out.set(x, y, 0.25 * s);
        }
    }
    out
}

fn downsample_adjoint(d: &ScalarMap, w: usize, h: usize) -> ScalarMap {
    let mut out = ScalarMap::new(w, h);
    for y in 0..d.height {
        for x in 0..d.width {
            let v = 0.25 * d.get(x, y);
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                out.data[(2 * y + dy) * w + 2 * x + dx] += v;
            }
        }
    }
    out
}

fn central_differences(m: &ScalarMap) -> (ScalarMap, ScalarMap) {
    let (w, h) = (m.width, m.height);
    let mut gx = ScalarMap::new(w, h);
    let mut gy = ScalarMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if x >= 1 && x + 1 < w {
                gx.set(x, y, 0.5 * (m.get(x + 1, y) - m.get(x - 1, y)));
            }
            if y >= 1 && y + 1 < h {
                gy.set(x, y, 0.5 * (m.get(x, y + 1) - m.get(x, y - 1)));
            }
        }
    }
    (gx, gy)
}

fn central_differences_adjoint(dx: &ScalarMap, dy: &ScalarMap) -> ScalarMap {
    let (w, h) = (dx.width, dx.height);
    let mut out = ScalarMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if x >= 1 && x + 1 < w {
                let v = 0.5 * dx.get(x, y);
                out.data[y * w + x + 1] += v;
                out.data[y * w + x - 1] -= v;
            }
            if y >= 1 && y + 1 < h {
                let v = 0.5 * dy.get(x, y);
                out.data[(y + 1) * w + x] += v;
                out.data[(y - 1) * w + x] -= v;
            }
        }
    }
    out
}

/// Mean absolute difference of [`content_features`] and its gradient w.r.t. `render`.
pub fn content_loss(render: &ColorImage, raw: &ColorImage) -> Result<(f64, Vec<f64>)> {
    render.same_size(raw, "content loss inputs")?;
    let fa = content_features(render);
    let fb = content_features(raw);
    let total: usize = fa.iter().map(|m| m.data.len()).sum();
    if total == 0 {
        return Ok((0.0, vec![0.0; render.data.len()]));
    }
    let n = total as f64;
    let mut loss = 0.0;
    let mut d_feat: Vec<ScalarMap> = Vec::with_capacity(fa.len());
    for (a, b) in fa.iter().zip(&fb) {
        let mut d = ScalarMap::new(a.width, a.height);
        for (k, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
            loss += (x - y).abs();
            d.data[k] = sign(x - y) / n;
        }
        d_feat.push(d);
    }

    // Back through the pyramid, coarsest level first.
    let mut sizes = vec![(render.width, render.height)];
    for l in 1..CONTENT_LEVELS {
        let (w, h) = sizes[l - 1];
        sizes.push((w / 2, h / 2));
    }
    let mut carry: Option<ScalarMap> = None;
    for l in (0..CONTENT_LEVELS).rev() {
        let mut d = central_differences_adjoint(&d_feat[2 * l], &d_feat[2 * l + 1]);
        if let Some(c) = carry.take() {
            for (a, b) in d.data.iter_mut().zip(&c.data) {
                *a += b;
            }
        }
        carry = Some(if l > 0 {
            downsample_adjoint(&d, sizes[l - 1].0, sizes[l - 1].1)
        } else {
            d
        });
    }
    let d_lum = carry.expect("at least one level");
    let mut grad = vec![0.0; render.data.len()];
    for (p, v) in d_lum.data.iter().enumerate() {
        grad[p * 3] = 0.299 * v;
        grad[p * 3 + 1] = 0.587 * v;
        grad[p * 3 + 2] = 0.114 * v;
    }
    Ok((loss / n, grad))
}

/// Whether a sparse depth sample is usable.
#[inline]
pub fn depth_valid(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// Mean `|render − sparse|` over valid sparse pixels (0 when none are valid).
pub fn depth_loss(render: &ScalarMap, sparse: &ScalarMap) -> Result<(f64, Vec<f64>)> {
    sparse.same_size(render.width, render.height, "sparse depth")?;
    let valid = sparse.data.iter().filter(|d| depth_valid(**d)).count();
    let mut grad = vec![0.0; render.data.len()];
    if valid == 0 {
        return Ok((0.0, grad));
    }
    let n = valid as f64;
    let mut loss = 0.0;
    for (k, (r, s)) in render.data.iter().zip(&sparse.data).enumerate() {
        if depth_valid(*s) {
            loss += (r - s).abs();
            grad[k] = sign(r - s) / n;
        }
    }
    Ok((loss / n, grad))
}

/// `(1/N)·Σ [−a·ln a − m·ln(1 − a)]` with `a` clamped to `[ε, 1 − ε]` and
/// `m` the binary sky mask (`> 0.5` is sky).
pub fn opacity_loss(alpha: &ScalarMap, sky_mask: Option<&ScalarMap>) -> Result<(f64, Vec<f64>)> {
    if let Some(m) = sky_mask {
        m.same_size(alpha.width, alpha.height, "sky mask")?;
    }
    let n = alpha.data.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; alpha.data.len()];
    for (k, a_raw) in alpha.data.iter().enumerate() {
        let a = a_raw.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
        let sky = sky_mask.is_some_and(|m| m.data[k] > 0.5);
        loss -= a * a.ln();
        if sky {
            loss -= (1.0 - a).ln();
        }
        if *a_raw > OPACITY_EPS && *a_raw < 1.0 - OPACITY_EPS {
            let mut d = -(a.ln() + 1.0);
            if sky {
                d += 1.0 / (1.0 - a);
            }
            grad[k] = d / n;
        }
    }
    Ok((loss / n, grad))
}

/// Scaling penalty `Σ max(exp(max s − min s) − 10, 0)` over every trainable
/// Gaussian plus the temporal term `Σ ‖δ_{t+1} − δ_t‖²` over non-rigid offsets.
pub fn regularization_loss(graph: &SceneGraph) -> f64 {
    let mut loss = 0.0;
    for r in graph.node_refs() {
        let node = graph.node(r);
        for g in &node.gaussians {
            let (lo, hi) = min_max(&g.log_scale);
            loss += ((hi.1 - lo.1).exp() - MAX_SCALE_RATIO).max(0.0);
        }
        if node.kind == NodeKind::NonRigid {
            for w in node.offsets.windows(2) {
                for (a, b) in w[0].iter().zip(&w[1]) {
                    loss += (b - a).norm_squared();
                }
            }
        }
    }
    loss
}

/// `(argmin, min), (argmax, max)` of a 3-vector; first index wins ties.
pub(crate) fn min_max(v: &crate::math::Vec3) -> ((usize, f64), (usize, f64)) {
    let mut lo = (0, v[0]);
    let mut hi = (0, v[0]);
    for k in 1..3 {
        if v[k] < lo.1 {
            lo = (k, v[k]);
        }
        if v[k] > hi.1 {
            hi = (k, v[k]);
        }
    }
    (lo, hi)
}

/// Individual loss terms of one evaluation (unweighted).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub content: f64,
    pub depth: f64,
    pub opacity: f64,
    pub regularization: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `rgb + λ_cc·content + λ_depth·depth + λ_opacity·opacity + reg`.
    pub fn combine(
        rgb: f64,
        content: f64,
        depth: f64,
        opacity: f64,
        regularization: f64,
        w: &super::LossWeights,
    ) -> Self {
        Self {
            rgb,
            content,
            depth,
            opacity,
            regularization,
            total: rgb + w.content * content + w.depth * depth + w.opacity * opacity + regularization,
        }
    }
}

pub(crate) fn check_image(what: &str, img: &ColorImage, w: usize, h: usize) -> Result<()> {
    if img.width != w || img.height != h {
        return Err(Error::dimension(what, format!("{w}x{h}"), format!("{}x{}", img.width, img.height)));
    }
    Ok(())
}
