use nalgebra::Matrix2;
use rayon::prelude::*;

use super::project::{project, project_backward_impl, Splat2D};
use super::{Camera, Gaussian3D, Gaussian3DGrad, OutputGrad, RenderOptions, RenderOutput};
use crate::error::{Error, Result};

/// Splat support half-width in standard deviations (along the major axis).
pub const SUPPORT_SIGMAS: f64 = 3.0;
/// Upper clip on per-splat evaluated opacity.
pub const ALPHA_MAX: f64 = 0.99;
/// Blending stops once transmittance falls below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

#[derive(Clone, Debug)]
struct Prepared {
    /// Index of the source Gaussian.
    gaussian: usize,
    mean: [f64; 2],
    /// Inverse screen covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    conic: [f64; 3],
    radius: f64,
    depth: f64,
    opacity: f64,
    color: [f64; 3],
    cov: [f64; 3],
}

impl Prepared {
    #[inline]
    fn covers(&self, px: f64, py: f64) -> bool {
        (px - self.mean[0]).abs() <= self.radius && (py - self.mean[1]).abs() <= self.radius
    }
}

/// Counters from one rasterization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub input: usize,
    pub culled: usize,
    /// Splats skipped because their regularized screen covariance was singular.
    pub singular: usize,
    pub rendered: usize,
    /// Total (tile, splat) pairs after binning.
    pub tile_entries: usize,
}

/// One step of a pixel's front-to-back blend.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelBlend {
    pub gaussian: usize,
    pub alpha: f64,
    /// Transmittance before this splat.
    pub transmittance: f64,
    /// Whether `alpha` hit the [`ALPHA_MAX`] clip.
    pub clipped: bool,
}

#[derive(Clone, Debug)]
struct TileGrid {
    size: usize,
    nx: usize,
    ny: usize,
    lists: Vec<Vec<u32>>,
}

impl TileGrid {
    fn pixels(&self, tile: usize, width: usize, height: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let tx = tile % self.nx;
        let ty = tile / self.nx;
        let x0 = tx * self.size;
        let y0 = ty * self.size;
        (x0..(x0 + self.size).min(width), y0..(y0 + self.size).min(height))
    }
}

/// A completed forward pass and everything the backward pass needs.
#[derive(Clone, Debug)]
pub struct RenderPass {
    pub output: RenderOutput,
    pub stats: RenderStats,
    prepared: Vec<Prepared>,
    grid: TileGrid,
}

/// Projects and rasterizes `gaussians` (Gaussian index = slice position).
pub fn render(gaussians: &[Gaussian3D], camera: &Camera, opts: RenderOptions) -> Result<RenderPass> {
    camera.validate()?;
    let project_one = |(i, g): (usize, &Gaussian3D)| project(i, g, camera);
    let splats: Vec<Splat2D> = if opts.parallel {
        gaussians.par_iter().enumerate().filter_map(project_one).collect()
    } else {
        gaussians.iter().enumerate().filter_map(project_one).collect()
    };
    let mut pass = rasterize(&splats, camera, opts)?;
    pass.stats.input = gaussians.len();
    pass.stats.culled = gaussians.len() - splats.len();
    Ok(pass)
}

/// Tile-based front-to-back blending of projected splats.
///
/// Per pixel, covering splats are blended in increasing depth (ties by
/// ascending index): `C = Σ cᵢ αᵢ Tᵢ`, `D = Σ dᵢ αᵢ Tᵢ`, alpha `= 1 − T`.
pub fn rasterize(splats: &[Splat2D], camera: &Camera, opts: RenderOptions) -> Result<RenderPass> {
    if opts.tile_size == 0 {
        return Err(Error::invalid("tile_size", "must be positive"));
    }
    let (width, height) = (camera.width, camera.height);
    let mut stats = RenderStats {
        input: splats.len(),
        ..Default::default()
    };

    let mut prepared = Vec::with_capacity(splats.len());
    for s in splats {
        if !s.mean.iter().chain(&s.cov).chain(&s.color).all(|v| v.is_finite())
            || !s.depth.is_finite()
            || !s.opacity.is_finite()
        {
            return Err(Error::invalid("splat", format!("non-finite splat {}", s.index)));
        }
        let [a, b, c] = s.cov;
        let det = a * c - b * b;
        if !(det > 0.0 && a > 0.0) || !det.is_finite() {
            stats.singular += 1;
            continue;
        }
        prepared.push(Prepared {
            gaussian: s.index,
            mean: s.mean,
            conic: [c / det, -b / det, a / det],
            radius: SUPPORT_SIGMAS * s.max_eigenvalue().sqrt(),
            depth: s.depth,
            opacity: s.opacity,
            color: s.color,
            cov: s.cov,
        });
    }
    stats.rendered = prepared.len();

    // One global (depth, index) sort; tile lists inherit the order.
    let mut order: Vec<u32> = (0..prepared.len() as u32).collect();
    order.sort_by(|&i, &j| {
        let (p, q) = (&prepared[i as usize], &prepared[j as usize]);
        p.depth.total_cmp(&q.depth).then(p.gaussian.cmp(&q.gaussian))
    });

    let size = opts.tile_size;
    let nx = width.div_ceil(size);
    let ny = height.div_ceil(size);
    let mut lists = vec![Vec::new(); nx * ny];
    for &k in &order {
        let p = &prepared[k as usize];
        let x_lo = (p.mean[0] - p.radius).ceil().max(0.0);
        let x_hi = (p.mean[0] + p.radius).floor().min((width - 1) as f64);
        let y_lo = (p.mean[1] - p.radius).ceil().max(0.0);
        let y_hi = (p.mean[1] + p.radius).floor().min((height - 1) as f64);
        if x_lo > x_hi || y_lo > y_hi {
            continue;
        }
        let (tx0, tx1) = (x_lo as usize / size, x_hi as usize / size);
        let (ty0, ty1) = (y_lo as usize / size, y_hi as usize / size);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * nx + tx].push(k);
            }
        }
    }
    stats.tile_entries = lists.iter().map(Vec::len).sum();
    let grid = TileGrid { size, nx, ny, lists };

    let tile_count = nx * ny;
    let shade_tile = |t: usize| -> Vec<([f64; 3], f64, f64)> {
        let (xs, ys) = grid.pixels(t, width, height);
        let list = &grid.lists[t];
        let mut out = Vec::with_capacity(xs.len() * ys.len());
        for y in ys {
            for x in xs.clone() {
                out.push(blend_pixel(list, &prepared, x as f64, y as f64, |_| {}));
            }
        }
        out
    };
    let shaded: Vec<Vec<([f64; 3], f64, f64)>> = if opts.parallel {
        (0..tile_count).into_par_iter().map(shade_tile).collect()
    } else {
        (0..tile_count).map(shade_tile).collect()
    };

    let mut output = RenderOutput::empty(width, height);
    for (t, pixels) in shaded.into_iter().enumerate() {
        let (xs, ys) = grid.pixels(t, width, height);
        let mut it = pixels.into_iter();
        for y in ys {
            for x in xs.clone() {
                let (rgb, depth, trans) = it.next().expect("pixel count");
                output.rgb.set(x, y, rgb);
                output.depth.set(x, y, depth);
                output.alpha.set(x, y, 1.0 - trans);
            }
        }
    }

    Ok(RenderPass {
        output,
        stats,
        prepared,
        grid,
    })
}

#[derive(Clone, Copy)]
struct Step {
    splat: u32,
    alpha: f64,
    trans: f64,
    gauss: f64,
    clipped: bool,
    dx: f64,
    dy: f64,
}

/// Blends one pixel; returns `(rgb, depth, final transmittance)`.
#[inline]
fn blend_pixel(
    list: &[u32],
    prepared: &[Prepared],
    px: f64,
    py: f64,
    mut visit: impl FnMut(Step),
) -> ([f64; 3], f64, f64) {
    let mut rgb = [0.0; 3];
    let mut depth = 0.0;
    let mut trans = 1.0;
    for &k in list {
        let p = &prepared[k as usize];
        if !p.covers(px, py) {
            continue;
        }
        let dx = px - p.mean[0];
        let dy = py - p.mean[1];
        let [a, b, c] = p.conic;
        let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        let gauss = (-0.5 * q).exp();
        let raw = p.opacity * gauss;
        let clipped = raw > ALPHA_MAX;
        let alpha = if clipped { ALPHA_MAX } else { raw.max(0.0) };
        let w = alpha * trans;
        for ch in 0..3 {
            rgb[ch] += p.color[ch] * w;
        }
        depth += p.depth * w;
        visit(Step {
            splat: k,
            alpha,
            trans,
            gauss,
            clipped,
            dx,
            dy,
        });
        trans *= 1.0 - alpha;
        if trans < TRANSMITTANCE_MIN {
            break;
        }
    }
    (rgb, depth, trans)
}

#[derive(Clone, Copy, Default)]
struct SplatAccum {
    mean: [f64; 2],
    /// Full-matrix gradient of the conic: `[g00, g01, g11]`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    abs_mean: [f64; 2],
    hit: bool,
}

impl SplatAccum {
    fn add(&mut self, o: &SplatAccum) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
            self.abs_mean[k] += o.abs_mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
        self.hit |= o.hit;
    }
}

impl RenderPass {
    pub fn width(&self) -> usize {
        self.output.width()
    }

    pub fn height(&self) -> usize {
        self.output.height()
    }

    /// The blend sequence of pixel `(x, y)`, front to back.
    pub fn pixel_blends(&self, x: usize, y: usize) -> Vec<PixelBlend> {
        let nx = self.grid.nx;
        let t = (y / self.grid.size) * nx + x / self.grid.size;
        let mut out = Vec::new();
        blend_pixel(&self.grid.lists[t], &self.prepared, x as f64, y as f64, |s| {
            out.push(PixelBlend {
                gaussian: self.prepared[s.splat as usize].gaussian,
                alpha: s.alpha,
                transmittance: s.trans,
                clipped: s.clipped,
            })
        });
        out
    }

    /// Radii of all rasterized splats keyed by Gaussian index.
    pub fn splat_radii(&self) -> Vec<(usize, f64)> {
        self.prepared.iter().map(|p| (p.gaussian, p.radius)).collect()
    }

    /// Analytic gradients of a scalar loss w.r.t. every Gaussian, given the
    /// loss gradient on this pass's output buffers. `gaussians` and `camera`
    /// must be the forward inputs.
    pub fn backward(
        &self,
        gaussians: &[Gaussian3D],
        camera: &Camera,
        upstream: &OutputGrad,
    ) -> Result<Vec<Gaussian3DGrad>> {
        let (width, height) = (self.width(), self.height());
        if camera.width != width || camera.height != height {
            return Err(Error::State("camera differs from the forward pass".into()));
        }
        upstream.check(width, height)?;
        if let Some(p) = self.prepared.iter().find(|p| p.gaussian >= gaussians.len()) {
            return Err(Error::State(format!(
                "forward pass references Gaussian {} but only {} were given",
                p.gaussian,
                gaussians.len()
            )));
        }

        let tile_count = self.grid.nx * self.grid.ny;
        let tile_grads = |t: usize| -> Vec<SplatAccum> {
            let list = &self.grid.lists[t];
            let mut acc = vec![SplatAccum::default(); list.len()];
            if list.is_empty() {
                return acc;
            }
            // Position of each prepared splat inside this tile's list.
            let local = |k: u32| list.iter().position(|&x| x == k).expect("splat in tile");
            let mut slot = std::collections::HashMap::with_capacity(list.len());
            let (xs, ys) = self.grid.pixels(t, width, height);
            let mut steps: Vec<Step> = Vec::with_capacity(32);
            for y in ys {
                for x in xs.clone() {
                    let pix = y * width + x;
                    let d_rgb = [upstream.rgb[pix * 3], upstream.rgb[pix * 3 + 1], upstream.rgb[pix * 3 + 2]];
                    let d_depth = upstream.depth[pix];
                    let d_alpha = upstream.alpha[pix];
                    if d_rgb == [0.0; 3] && d_depth == 0.0 && d_alpha == 0.0 {
                        continue;
                    }
                    steps.clear();
                    let (_, _, t_final) =
                        blend_pixel(list, &self.prepared, x as f64, y as f64, |s| steps.push(s));
                    // suffix sums Σ_{j>k} c_j α_j T_j and Σ_{j>k} d_j α_j T_j
                    let mut suffix_rgb = [0.0; 3];
                    let mut suffix_depth = 0.0;
                    for s in steps.iter().rev() {
                        let p = &self.prepared[s.splat as usize];
                        let w = s.alpha * s.trans;
                        let one_minus = 1.0 - s.alpha;
                        let mut d_a = 0.0;
                        for ch in 0..3 {
                            d_a += d_rgb[ch] * (p.color[ch] * s.trans - suffix_rgb[ch] / one_minus);
                        }
                        d_a += d_depth * (p.depth * s.trans - suffix_depth / one_minus);
                        d_a += d_alpha * t_final / one_minus;

                        let li = *slot.entry(s.splat).or_insert_with(|| local(s.splat));
                        let g = &mut acc[li];
                        g.hit = true;
                        for ch in 0..3 {
                            g.color[ch] += d_rgb[ch] * w;
                        }
                        g.depth += d_depth * w;
                        if !s.clipped {
                            g.opacity += d_a * s.gauss;
                            let d_q = d_a * (-0.5 * s.alpha);
                            let [a, b, c] = p.conic;
                            let dmx = d_q * -2.0 * (a * s.dx + b * s.dy);
                            let dmy = d_q * -2.0 * (b * s.dx + c * s.dy);
                            g.mean[0] += dmx;
                            g.mean[1] += dmy;
                            g.abs_mean[0] += dmx.abs();
                            g.abs_mean[1] += dmy.abs();
                            g.conic[0] += d_q * s.dx * s.dx;
                            g.conic[1] += d_q * s.dx * s.dy;
                            g.conic[2] += d_q * s.dy * s.dy;
                        }

                        for ch in 0..3 {
                            suffix_rgb[ch] += p.color[ch] * w;
                        }
                        suffix_depth += p.depth * w;
                    }
                }
            }
            acc
        };
        let per_tile: Vec<Vec<SplatAccum>> = if rayon::current_num_threads() > 1 {
            (0..tile_count).into_par_iter().map(tile_grads).collect()
        } else {
            (0..tile_count).map(tile_grads).collect()
        };

        // Deterministic reduction in tile order.
        let mut totals = vec![SplatAccum::default(); self.prepared.len()];
        for (t, acc) in per_tile.iter().enumerate() {
            for (li, &k) in self.grid.lists[t].iter().enumerate() {
                totals[k as usize].add(&acc[li]);
            }
        }

        let mut grads = vec![Gaussian3DGrad::default(); gaussians.len()];
        let per_splat: Vec<(usize, Gaussian3DGrad)> = self
            .prepared
            .par_iter()
            .zip(totals.par_iter())
            .filter(|(_, acc)| acc.hit)
            .map(|(p, acc)| (p.gaussian, splat_to_gaussian_grad(p, acc, &gaussians[p.gaussian], camera)))
            .collect();
        for (i, g) in per_splat {
            grads[i] = g;
        }
        Ok(grads)
    }
}

fn splat_to_gaussian_grad(p: &Prepared, acc: &SplatAccum, g: &Gaussian3D, camera: &Camera) -> Gaussian3DGrad {
    let conic = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let g_conic = Matrix2::new(acc.conic[0], acc.conic[1], acc.conic[1], acc.conic[2]);
    let d_cov2 = -(conic * g_conic * conic);
    debug_assert!(p.cov[0] > 0.0);
    let pg = project_backward_impl(g, camera, acc.mean, &d_cov2, acc.depth);
    Gaussian3DGrad {
        position: pg.position,
        scale: pg.scale,
        rotation: pg.rotation,
        opacity: acc.opacity,
        color: acc.color,
        abs_mean2d: acc.abs_mean,
        visible: true,
    }
}
