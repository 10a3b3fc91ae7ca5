//! Structural similarity with an analytic gradient.
//!
//! Local statistics use an 11×11 Gaussian window (σ = 1.5). Near the border
//! the window is truncated and renormalized, so constant images have exactly
//! zero local variance everywhere.

use crate::buffer::ColorImage;
use crate::error::Result;

pub const WINDOW_RADIUS: usize = 5;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; 2 * WINDOW_RADIUS + 1] {
    std::array::from_fn(|i| {
        let d = i as f64 - WINDOW_RADIUS as f64;
        (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp()
    })
}

/// Separable truncated window for one image size.
struct Window {
    k: [f64; 2 * WINDOW_RADIUS + 1],
    zx: Vec<f64>,
    zy: Vec<f64>,
    w: usize,
    h: usize,
}

impl Window {
    fn new(w: usize, h: usize) -> Self {
        let k = kernel();
        let norm = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|x| {
                    (0..k.len())
                        .filter(|&i| {
                            let t = x as isize + i as isize - WINDOW_RADIUS as isize;
                            t >= 0 && (t as usize) < n
                        })
                        .map(|i| k[i])
                        .sum()
                })
                .collect()
        };
        Self {
            k,
            zx: norm(w),
            zy: norm(h),
            w,
            h,
        }
    }

    /// Zero-padded correlation along one axis.
    fn pass(&self, src: &[f64], horizontal: bool) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let r = WINDOW_RADIUS as isize;
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in self.k.iter().enumerate() {
                    let d = i as isize - r;
                    let (sx, sy) = if horizontal {
                        (x as isize + d, y as isize)
                    } else {
                        (x as isize, y as isize + d)
                    };
                    if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                        acc += kv * src[sy as usize * w + sx as usize];
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    fn scale(&self, v: &mut [f64], horizontal: bool) {
        for y in 0..self.h {
            for x in 0..self.w {
                v[y * self.w + x] /= if horizontal { self.zx[x] } else { self.zy[y] };
            }
        }
    }

    /// Normalized local mean.
    fn blur(&self, src: &[f64]) -> Vec<f64> {
        let mut a = self.pass(src, true);
        self.scale(&mut a, true);
        let mut b = self.pass(&a, false);
        self.scale(&mut b, false);
        b
    }

    /// Adjoint of [`Window::blur`].
    fn blur_adjoint(&self, src: &[f64]) -> Vec<f64> {
        let mut a = src.to_vec();
        self.scale(&mut a, false);
        let mut b = self.pass(&a, false);
        self.scale(&mut b, true);
        self.pass(&b, true)
    }
}

struct ChannelStats {
    mx: Vec<f64>,
    my: Vec<f64>,
    sxx: Vec<f64>,
    syy: Vec<f64>,
    sxy: Vec<f64>,
}

fn stats(win: &Window, x: &[f64], y: &[f64]) -> ChannelStats {
    let mx = win.blur(x);
    let my = win.blur(y);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let exx = win.blur(&xx);
    let eyy = win.blur(&yy);
    let exy = win.blur(&xy);
    let n = x.len();
    ChannelStats {
        sxx: (0..n).map(|p| exx[p] - mx[p] * mx[p]).collect(),
        syy: (0..n).map(|p| eyy[p] - my[p] * my[p]).collect(),
        sxy: (0..n).map(|p| exy[p] - mx[p] * my[p]).collect(),
        mx,
        my,
    }
}

fn ssim_channels(a: &ColorImage, b: &ColorImage, grad: Option<&mut Vec<f64>>) -> f64 {
    let (w, h) = (a.width, a.height);
    let n = w * h;
    let win = Window::new(w, h);
    let mut total = 0.0;
    let mut grad = grad;
    if let Some(g) = grad.as_deref_mut() {
        g.clear();
        g.resize(n * 3, 0.0);
    }
    for c in 0..3 {
        let x = a.channel(c).data;
        let y = b.channel(c).data;
        let s = stats(&win, &x, &y);
        let mut d_mx = vec![0.0; n];
        let mut d_exx = vec![0.0; n];
        let mut d_exy = vec![0.0; n];
        // dS/ds per pixel for the mean over pixels and channels
        let g = 1.0 / (3 * n) as f64;
        for p in 0..n {
            let (mx, my) = (s.mx[p], s.my[p]);
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * s.sxy[p] + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = s.sxx[p] + s.syy[p] + C2;
            let v = a1 * a2 / (b1 * b2);
            total += v;
            if grad.is_some() {
                d_mx[p] = g * ((2.0 * my * a2 - 2.0 * my * a1) / (b1 * b2) - 2.0 * mx * v / b1 + 2.0 * mx * v / b2);
                d_exx[p] = g * (-v / b2);
                d_exy[p] = g * (2.0 * a1 / (b1 * b2));
            }
        }
        if let Some(gr) = grad.as_deref_mut() {
            let t_mx = win.blur_adjoint(&d_mx);
            let t_exx = win.blur_adjoint(&d_exx);
            let t_exy = win.blur_adjoint(&d_exy);
            for p in 0..n {
                gr[p * 3 + c] = t_mx[p] + 2.0 * x[p] * t_exx[p] + y[p] * t_exy[p];
            }
        }
    }
    total / (3 * n) as f64
}

/// Mean SSIM over pixels and channels.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    a.same_size(b, "ssim inputs")?;
    Ok(ssim_channels(a, b, None))
}

/// SSIM and its gradient w.r.t. `a` (interleaved like `a.data`).
pub fn ssim_with_grad(a: &ColorImage, b: &ColorImage) -> Result<(f64, Vec<f64>)> {
    a.same_size(b, "ssim inputs")?;
    let mut g = Vec::new();
    let v = ssim_channels(a, b, Some(&mut g));
    Ok((v, g))
}
