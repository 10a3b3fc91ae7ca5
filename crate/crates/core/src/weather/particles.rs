use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{wind_vector, WindParams};
use crate::error::{Error, Result};
use crate::math::{quat_from_axis_angle, quat_from_two_vectors, Quat, Vec3, QUAT_IDENTITY};
use crate::raster::Gaussian3D;

/// Simulation step per rendered frame, seconds.
pub const DEFAULT_DT: f64 = 1.0 / 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParticleKind {
    Rain,
    Snow,
}

impl ParticleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParticleKind::Rain => "rain",
            ParticleKind::Snow => "snow",
        }
    }

    /// Gaussians emitted per particle.
    pub fn gaussians_per_particle(&self) -> usize {
        match self {
            ParticleKind::Rain => 1,
            ParticleKind::Snow => 3,
        }
    }
}

impl FromStr for ParticleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rain" => Ok(ParticleKind::Rain),
            "snow" => Ok(ParticleKind::Snow),
            _ => Err(Error::Lookup {
                kind: "particle kind",
                key: s.to_string(),
            }),
        }
    }
}

/// First-order autoregressive horizontal turbulence: `v ← ρ·v + σ·ξ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurbulenceParams {
    pub rho: f64,
    /// Noise scale, m/s.
    pub sigma: f64,
}

impl TurbulenceParams {
    pub fn off() -> Self {
        Self { rho: 0.0, sigma: 0.0 }
    }
}

/// Per-system physical and appearance parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleParams {
    pub count: usize,
    /// m/s, downward.
    pub fall_speed: f64,
    #[serde(default)]
    pub wind: WindParams,
    pub turbulence: TurbulenceParams,
    pub color: [f64; 3],
    /// Per-axis standard deviation of each emitted ellipsoid, meters.
    pub scale: [f64; 3],
    pub opacity: f64,
}

impl ParticleParams {
    pub fn rain() -> Self {
        Self {
            count: 40_000,
            fall_speed: 9.0,
            wind: WindParams::default(),
            turbulence: TurbulenceParams::off(),
            color: [0.7, 0.7, 0.8],
            scale: [0.0025, 0.0025, 0.075],
            opacity: 0.13,
        }
    }

    pub fn snow() -> Self {
        Self {
            count: 16_000,
            fall_speed: 1.5,
            wind: WindParams::default(),
            turbulence: TurbulenceParams { rho: 0.9, sigma: 0.4 },
            color: [0.9, 0.9, 0.95],
            scale: [0.0064, 0.004, 0.004],
            opacity: 0.2,
        }
    }

    pub fn for_kind(kind: ParticleKind) -> Self {
        match kind {
            ParticleKind::Rain => Self::rain(),
            ParticleKind::Snow => Self::snow(),
        }
    }

    pub fn log_scale(&self) -> Vec3 {
        Vec3::from(self.scale).map(f64::ln)
    }

    pub fn validate(&self) -> Result<()> {
        self.wind.validate()?;
        if !(self.fall_speed.is_finite() && self.fall_speed >= 0.0) {
            return Err(Error::invalid("fall_speed", "must be finite and ≥ 0"));
        }
        let t = &self.turbulence;
        if !(t.rho.is_finite() && t.sigma.is_finite() && t.sigma >= 0.0 && t.rho.abs() <= 1.0) {
            return Err(Error::invalid("turbulence", "need |rho| ≤ 1 and sigma ≥ 0"));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("color", "channels must lie in [0, 1]"));
        }
        if self.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("scale", "must be finite and > 0"));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return Err(Error::invalid("opacity", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Axis-aligned box, half-open `[min, max)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoundingBox {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if !(self.min[k].is_finite() && self.max[k].is_finite() && self.max[k] > self.min[k]) {
                return Err(Error::invalid("volume", format!("degenerate extent on axis {k}")));
            }
        }
        Ok(())
    }

    pub fn extent(&self) -> Vec3 {
        Vec3::from(self.max) - Vec3::from(self.min)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] < self.max[k])
    }

    /// Box over the 1st–99th percentile of `points`, widened by 10% in x and
    /// y and raised by 15 m.
    pub fn around_points(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("volume", "no points to bound"));
        }
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for k in 0..3 {
            let mut v: Vec<f64> = points.iter().map(|p| p[k]).collect();
            v.sort_by(f64::total_cmp);
            let at = |q: f64| v[((v.len() - 1) as f64 * q).round() as usize];
            min[k] = at(0.01);
            max[k] = at(0.99);
        }
        for k in 0..2 {
            let pad = 0.05 * (max[k] - min[k]);
            min[k] -= pad;
            max[k] += pad;
        }
        max[2] += 15.0;
        for k in 0..3 {
            // Flat point sets still need a usable volume.
            if max[k] - min[k] < 1e-3 {
                max[k] = min[k] + 1e-3;
            }
        }
        Self::new(min, max)
    }

    fn wrap_axis(&self, k: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[k], self.max[k]);
        if v >= lo && v < hi {
            return v;
        }
        let w = lo + (v - lo).rem_euclid(hi - lo);
        if w >= hi || w < lo {
            lo
        } else {
            w
        }
    }
}

/// A seeded rain or snow particle system.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystem {
    pub kind: ParticleKind,
    pub params: ParticleParams,
    pub volume: BoundingBox,
    pub positions: Vec<Vec3>,
    /// Velocity used for the most recent step (or the initial estimate).
    pub velocities: Vec<Vec3>,
    /// Turbulence state, m/s; stays zero for rain.
    pub turbulence: Vec<Vec3>,
    pub seed: u64,
    rng: ChaCha8Rng,
}

/// Snapshot of a system's generator, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl ParticleSystem {
    /// Spawns `params.count` particles uniformly in `volume`.
    pub fn spawn(kind: ParticleKind, params: ParticleParams, volume: BoundingBox, seed: u64) -> Result<Self> {
        volume.validate()?;
        params.validate()?;
        let mut ps = Self {
            kind,
            params,
            volume,
            positions: Vec::new(),
            velocities: Vec::new(),
            turbulence: Vec::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let n = ps.params.count;
        ps.set_count(n);
        Ok(ps)
    }

    /// Spawns a system with the published defaults for `kind`.
    pub fn with_defaults(kind: ParticleKind, volume: BoundingBox, seed: u64) -> Result<Self> {
        Self::spawn(kind, ParticleParams::for_kind(kind), volume, seed)
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }

    pub fn emitted_count(&self) -> usize {
        self.count() * self.kind.gaussians_per_particle()
    }

    fn base_velocity(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, -self.params.fall_speed) + wind_vector(&self.params.wind)
    }

    fn uniform_point(&mut self) -> Vec3 {
        let (lo, hi) = (self.volume.min, self.volume.max);
        let mut p = Vec3::zeros();
        for k in 0..3 {
            p[k] = self.volume.wrap_axis(k, lo[k] + self.rng.random::<f64>() * (hi[k] - lo[k]));
        }
        p
    }

    /// Grows (with fresh uniform particles) or truncates the system.
    pub fn set_count(&mut self, n: usize) {
        let v = self.base_velocity();
        while self.positions.len() < n {
            let p = self.uniform_point();
            self.positions.push(p);
            self.velocities.push(v);
            self.turbulence.push(Vec3::zeros());
        }
        self.positions.truncate(n);
        self.velocities.truncate(n);
        self.turbulence.truncate(n);
        self.params.count = n;
    }

    /// Replaces the parameters; the count change (if any) is applied too.
    pub fn set_params(&mut self, params: ParticleParams) -> Result<()> {
        params.validate()?;
        let n = params.count;
        self.params = params;
        self.set_count(n);
        Ok(())
    }

    /// Advances by `dt` seconds: fall + wind (+ turbulence for snow), then
    /// wraps escaped particles back into the volume.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("dt", "must be finite and > 0"));
        }
        let base = self.base_velocity();
        let turb = self.params.turbulence;
        let snow = self.kind == ParticleKind::Snow;
        for i in 0..self.positions.len() {
            let mut v = base;
            if snow {
                let t = &mut self.turbulence[i];
                for k in 0..2 {
                    let xi: f64 = self.rng.sample(StandardNormal);
                    t[k] = turb.rho * t[k] + turb.sigma * xi;
                }
                v += *t;
            }
            self.velocities[i] = v;
            let mut p = self.positions[i] + v * dt;
            if p.z < self.volume.min[2] {
                // Out the bottom: back in at the top, new horizontal position.
                p.z = self.volume.wrap_axis(2, p.z);
                let (lo, hi) = (self.volume.min, self.volume.max);
                for k in 0..2 {
                    p[k] = self.volume.wrap_axis(k, lo[k] + self.rng.random::<f64>() * (hi[k] - lo[k]));
                }
            } else {
                p.z = self.volume.wrap_axis(2, p.z);
            }
            p.x = self.volume.wrap_axis(0, p.x);
            p.y = self.volume.wrap_axis(1, p.y);
            self.positions[i] = p;
        }
        Ok(())
    }

    /// Rotations applied to the particle template: one velocity-aligned
    /// rotation for rain, three in-plane rotations (0°, 60°, 120° about z)
    /// for snow.
    pub fn template_rotations(&self, velocity: &Vec3) -> Vec<Quat> {
        match self.kind {
            ParticleKind::Rain => {
                // Template long axis is +z; zero velocity keeps the default.
                let q = if velocity.norm() > 1e-12 {
                    quat_from_two_vectors(&Vec3::z(), velocity)
                } else {
                    QUAT_IDENTITY
                };
                vec![q]
            }
            ParticleKind::Snow => snow_rotations().to_vec(),
        }
    }

    /// Renderable Gaussians with the fixed base appearance.
    pub fn emit_gaussians(&self) -> Vec<Gaussian3D> {
        let mut out = Vec::with_capacity(self.emitted_count());
        let scale = Vec3::from(self.params.scale);
        let snow = snow_rotations();
        for (p, v) in self.positions.iter().zip(&self.velocities) {
            let rain_q;
            let rots: &[Quat] = match self.kind {
                ParticleKind::Rain => {
                    rain_q = [if v.norm() > 1e-12 {
                        quat_from_two_vectors(&Vec3::z(), v)
                    } else {
                        QUAT_IDENTITY
                    }];
                    &rain_q
                }
                ParticleKind::Snow => &snow,
            };
            for q in rots {
                out.push(Gaussian3D {
                    position: *p,
                    scale,
                    rotation: *q,
                    opacity: self.params.opacity,
                    color: self.params.color,
                });
            }
        }
        out
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    /// Reassembles a system from stored parts; the inverse of reading every
    /// public field plus [`ParticleSystem::rng_state`].
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        kind: ParticleKind,
        params: ParticleParams,
        volume: BoundingBox,
        positions: Vec<Vec3>,
        velocities: Vec<Vec3>,
        turbulence: Vec<Vec3>,
        seed: u64,
        rng: RngState,
    ) -> Result<Self> {
        volume.validate()?;
        params.validate()?;
        let n = positions.len();
        if velocities.len() != n || turbulence.len() != n || params.count != n {
            return Err(Error::dimension("particle arrays", n, velocities.len().max(turbulence.len())));
        }
        let mut r = ChaCha8Rng::from_seed(rng.seed);
        r.set_stream(rng.stream);
        r.set_word_pos(rng.word_pos);
        Ok(Self {
            kind,
            params,
            volume,
            positions,
            velocities,
            turbulence,
            seed,
            rng: r,
        })
    }
}

fn snow_rotations() -> [Quat; 3] {
    [0.0, 60.0, 120.0].map(|deg: f64| quat_from_axis_angle(&Vec3::z(), deg * PI / 180.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::quat_rotate;

    fn unit_box() -> BoundingBox {
        BoundingBox::new([0.0; 3], [1.0; 3]).unwrap()
    }

    fn small(kind: ParticleKind, n: usize) -> ParticleSystem {
        let mut p = ParticleParams::for_kind(kind);
        p.count = n;
        ParticleSystem::spawn(kind, p, BoundingBox::new([-5.0, -5.0, 0.0], [5.0, 5.0, 20.0]).unwrap(), 7).unwrap()
    }

    #[test]
    fn uniform_spawn_statistics() {
        let mut p = ParticleParams::rain();
        p.count = 100_000;
        let ps = ParticleSystem::spawn(ParticleKind::Rain, p, unit_box(), 3).unwrap();
        for k in 0..3 {
            let mean = ps.positions.iter().map(|p| p[k]).sum::<f64>() / ps.count() as f64;
            assert!((mean - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn degenerate_volume_rejected() {
        assert!(BoundingBox::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn zero_count_system_is_empty() {
        let ps = small(ParticleKind::Snow, 0);
        assert_eq!(ps.count(), 0);
        assert!(ps.emit_gaussians().is_empty());
    }

    #[test]
    fn rain_falls_point_three_per_frame() {
        let mut ps = small(ParticleKind::Rain, 500);
        let before = ps.positions.clone();
        ps.step(DEFAULT_DT).unwrap();
        for (a, b) in before.iter().zip(&ps.positions) {
            if a.z - 0.3 >= 0.0 {
                assert!((a.z - b.z - 0.3).abs() < 1e-12);
                assert_eq!((a.x, a.y), (b.x, b.y));
            }
        }
    }

    #[test]
    fn rain_aligns_to_fall_direction() {
        let ps = small(ParticleKind::Rain, 3);
        for g in ps.emit_gaussians() {
            let axis = quat_rotate(&g.rotation, &Vec3::z());
            assert!((axis - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn still_air_rain_keeps_default_orientation() {
        let mut p = ParticleParams::rain();
        p.count = 2;
        p.fall_speed = 0.0;
        let ps = ParticleSystem::spawn(ParticleKind::Rain, p, unit_box(), 1).unwrap();
        assert!(ps.emit_gaussians().iter().all(|g| g.rotation == QUAT_IDENTITY));
    }

    #[test]
    fn snow_rotation_axes_are_sixty_degrees_apart() {
        let r = snow_rotations();
        let d: Vec<Vec3> = r.iter().map(|q| quat_rotate(q, &Vec3::x())).collect();
        assert!((d[0].dot(&d[1]) - 0.5).abs() < 1e-12);
        assert!((d[1].dot(&d[2]) - 0.5).abs() < 1e-12);
        assert!((d[0].dot(&d[2]).abs() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rng_state_roundtrip_resumes_identically() {
        let mut a = small(ParticleKind::Snow, 50);
        a.step(DEFAULT_DT).unwrap();
        let mut b = ParticleSystem::from_parts(
            a.kind,
            a.params.clone(),
            a.volume,
            a.positions.clone(),
            a.velocities.clone(),
            a.turbulence.clone(),
            a.seed,
            a.rng_state(),
        )
        .unwrap();
        for _ in 0..5 {
            a.step(DEFAULT_DT).unwrap();
            b.step(DEFAULT_DT).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn bounding_box_from_points() {
        let pts: Vec<Vec3> = (0..=100).map(|i| Vec3::new(i as f64, 0.0, i as f64 * 0.1)).collect();
        let b = BoundingBox::around_points(&pts).unwrap();
        assert!((b.min[0] - (1.0 - 4.9)).abs() < 1e-9);
        assert!((b.max[0] - (99.0 + 4.9)).abs() < 1e-9);
        assert!((b.max[2] - (9.9 + 15.0)).abs() < 1e-9);
    }
}
