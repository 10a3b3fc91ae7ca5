use nalgebra::{Matrix2, Matrix2x3, Matrix3};

use super::{Camera, Gaussian3D};
use crate::math::{quat_to_rotation, quat_to_rotation_backward, Quat, Vec3};

/// Screen-space low-pass term added to every projected covariance, pixels².
pub const LOW_PASS: f64 = 0.3;

/// A Gaussian projected to the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    /// Index of the source Gaussian; also the depth tie-breaker.
    pub index: usize,
    /// Pixel coordinates of the projected mean.
    pub mean: [f64; 2],
    /// Screen covariance `[xx, xy, yy]`, pixels², low-pass included.
    pub cov: [f64; 3],
    /// Camera-space depth of the mean, meters.
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Splat2D {
    pub fn cov_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.cov[0], self.cov[1], self.cov[1], self.cov[2])
    }

    /// Largest eigenvalue of the screen covariance.
    pub fn max_eigenvalue(&self) -> f64 {
        let [a, b, c] = self.cov;
        let mid = 0.5 * (a + c);
        let det = a * c - b * b;
        mid + (mid * mid - det).max(0.0).sqrt()
    }
}

pub(crate) fn jacobian(camera: &Camera, t: &Vec3) -> Matrix2x3<f64> {
    let inv_z = 1.0 / t.z;
    let inv_z2 = inv_z * inv_z;
    Matrix2x3::new(
        camera.fx * inv_z,
        0.0,
        -camera.fx * t.x * inv_z2,
        0.0,
        camera.fy * inv_z,
        -camera.fy * t.y * inv_z2,
    )
}

/// Projects one Gaussian; `None` when culled by the near/far planes or when
/// its 3σ footprint lies entirely outside the image.
pub fn project(index: usize, g: &Gaussian3D, camera: &Camera) -> Option<Splat2D> {
    let w = camera.rotation_matrix();
    let t = w * g.position + camera.translation;
    if !(t.z > camera.near && t.z < camera.far) {
        return None;
    }
    let j = jacobian(camera, &t);
    let cov_cam = w * g.covariance() * w.transpose();
    let cov2 = j * cov_cam * j.transpose();
    let mean = [
        camera.fx * t.x / t.z + camera.cx,
        camera.fy * t.y / t.z + camera.cy,
    ];
    let splat = Splat2D {
        index,
        mean,
        cov: [cov2[(0, 0)] + LOW_PASS, 0.5 * (cov2[(0, 1)] + cov2[(1, 0)]), cov2[(1, 1)] + LOW_PASS],
        depth: t.z,
        opacity: g.opacity,
        color: g.color,
    };
    if !splat.mean.iter().chain(&splat.cov).all(|v| v.is_finite()) {
        return None;
    }
    let r = super::SUPPORT_SIGMAS * splat.max_eigenvalue().sqrt();
    let (wmax, hmax) = ((camera.width - 1) as f64, (camera.height - 1) as f64);
    if mean[0] + r < 0.0 || mean[0] - r > wmax || mean[1] + r < 0.0 || mean[1] - r > hmax {
        return None;
    }
    Some(splat)
}

/// Gradients of one Gaussian's geometry given gradients on its projection.
pub(crate) struct ProjectGrad {
    pub position: Vec3,
    pub scale: Vec3,
    pub rotation: Quat,
}

/// Back-propagates `dL/dmean2d`, `dL/dΣ'` (full symmetric 2×2) and `dL/ddepth`
/// through the projection to world position, scale and rotation.
pub fn project_backward(
    g: &Gaussian3D,
    camera: &Camera,
    d_mean: [f64; 2],
    d_cov2: &Matrix2<f64>,
    d_depth: f64,
) -> (Vec3, Vec3, Quat) {
    let p = project_backward_impl(g, camera, d_mean, d_cov2, d_depth);
    (p.position, p.scale, p.rotation)
}

pub(crate) fn project_backward_impl(
    g: &Gaussian3D,
    camera: &Camera,
    d_mean: [f64; 2],
    d_cov2: &Matrix2<f64>,
    d_depth: f64,
) -> ProjectGrad {
    let w = camera.rotation_matrix();
    let t = w * g.position + camera.translation;
    let (fx, fy) = (camera.fx, camera.fy);
    let (tx, ty, tz) = (t.x, t.y, t.z);
    let j = jacobian(camera, &t);

    let rot = quat_to_rotation(&g.rotation);
    let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    let sigma = rot * s2 * rot.transpose();
    let sigma_cam = w * sigma * w.transpose();

    // Σ' = J Σc Jᵀ
    let d_sigma_cam = j.transpose() * d_cov2 * j;
    let d_j = 2.0 * d_cov2 * j * sigma_cam;

    let mut d_t = Vec3::zeros();
    // mean2d
    d_t.x += d_mean[0] * fx / tz;
    d_t.y += d_mean[1] * fy / tz;
    d_t.z += -d_mean[0] * fx * tx / (tz * tz) - d_mean[1] * fy * ty / (tz * tz);
    // depth
    d_t.z += d_depth;
    // Jacobian entries
    let tz2 = tz * tz;
    let tz3 = tz2 * tz;
    d_t.z += d_j[(0, 0)] * (-fx / tz2);
    d_t.x += d_j[(0, 2)] * (-fx / tz2);
    d_t.z += d_j[(0, 2)] * (2.0 * fx * tx / tz3);
    d_t.z += d_j[(1, 1)] * (-fy / tz2);
    d_t.y += d_j[(1, 2)] * (-fy / tz2);
    d_t.z += d_j[(1, 2)] * (2.0 * fy * ty / tz3);

    let position = w.transpose() * d_t;

    // Σc = W Σ Wᵀ
    let d_sigma = w.transpose() * d_sigma_cam * w;
    // Σ = R S² Rᵀ
    let m = rot.transpose() * d_sigma * rot;
    let scale = Vec3::new(
        2.0 * g.scale.x * m[(0, 0)],
        2.0 * g.scale.y * m[(1, 1)],
        2.0 * g.scale.z * m[(2, 2)],
    );
    let d_rot = (d_sigma + d_sigma.transpose()) * rot * s2;
    let rotation = quat_to_rotation_backward(&g.rotation, &d_rot);

    ProjectGrad {
        position,
        scale,
        rotation,
    }
}
