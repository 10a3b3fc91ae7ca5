use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{quat_normalize, quat_to_rotation, Mat3, Quat, Vec3};

pub const DEFAULT_NEAR: f64 = 0.1;
pub const DEFAULT_FAR: f64 = 1000.0;

/// Pinhole camera with a world-to-camera pose.
///
/// Camera space follows the usual vision convention: +x right, +y down,
/// +z forward. Pixel `(x, y)` is sampled at coordinates `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Quat,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub near: f64,
    pub far: f64,
}

/// Plain-data form of a [`Camera`] used by text formats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation quaternion `[w, x, y, z]`.
    pub rotation: [f64; 4],
    /// World-to-camera translation.
    pub translation: [f64; 3],
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
}

fn default_near() -> f64 {
    DEFAULT_NEAR
}

fn default_far() -> f64 {
    DEFAULT_FAR
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation: crate::math::QUAT_IDENTITY,
            translation: Vec3::zeros(),
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }

    pub fn with_pose(mut self, rotation: Quat, translation: Vec3) -> Self {
        self.rotation = quat_normalize(&rotation);
        self.translation = translation;
        self
    }

    /// Places the camera at `eye` looking at `target` with world `up`.
    pub fn look_at(mut self, eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let r = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let q = nalgebra::UnitQuaternion::from_matrix(&r);
        let q = Quat::new(q.w, q.i, q.j, q.k);
        self.rotation = quat_normalize(&q);
        self.translation = -(quat_to_rotation(&self.rotation) * eye);
        self
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_rotation(&self.rotation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation_matrix() * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation_matrix().transpose() * self.translation)
    }

    /// World-space direction of the ray through pixel `(x, y)` (unnormalized).
    pub fn ray_direction(&self, x: f64, y: f64) -> Vec3 {
        let d = Vec3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0);
        self.rotation_matrix().transpose() * d
    }

    /// Pixel coordinates of a world point, if in front of the camera.
    pub fn project_point(&self, p: &Vec3) -> Option<[f64; 2]> {
        let t = self.to_camera(p);
        (t.z > self.near).then(|| [self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid("camera", "focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera", "image size must be at least 1×1"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid("camera", "need 0 < near < far"));
        }
        if !self.translation.iter().chain(self.rotation.iter()).all(|v| v.is_finite())
            || self.rotation.norm() < 1e-12
        {
            return Err(Error::invalid("camera", "invalid pose"));
        }
        Ok(())
    }

    pub fn to_spec(&self) -> CameraSpec {
        CameraSpec {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            rotation: [self.rotation[0], self.rotation[1], self.rotation[2], self.rotation[3]],
            translation: [self.translation.x, self.translation.y, self.translation.z],
            near: self.near,
            far: self.far,
        }
    }
}

impl TryFrom<CameraSpec> for Camera {
    type Error = Error;

    fn try_from(s: CameraSpec) -> Result<Self> {
        let cam = Camera {
            fx: s.fx,
            fy: s.fy,
            cx: s.cx,
            cy: s.cy,
            width: s.width,
            height: s.height,
            rotation: quat_normalize(&Quat::from(s.rotation)),
            translation: Vec3::from(s.translation),
            near: s.near,
            far: s.far,
        };
        cam.validate()?;
        Ok(cam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_puts_target_on_principal_point() {
        let cam = Camera::new(50.0, 50.0, 31.5, 23.5, 64, 48).look_at(
            Vec3::new(1.0, -2.0, 1.5),
            Vec3::new(3.0, 8.0, 0.5),
            Vec3::z(),
        );
        let p = cam.project_point(&Vec3::new(3.0, 8.0, 0.5)).unwrap();
        assert!((p[0] - 31.5).abs() < 1e-9 && (p[1] - 23.5).abs() < 1e-9);
        assert!((cam.center() - Vec3::new(1.0, -2.0, 1.5)).norm() < 1e-9);
        // world up projects upward in the image
        let above = cam.project_point(&Vec3::new(3.0, 8.0, 1.5)).unwrap();
        assert!(above[1] < p[1]);
    }

    #[test]
    fn validation() {
        assert!(Camera::new(0.0, 1.0, 0.0, 0.0, 4, 4).validate().is_err());
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, 0, 4).validate().is_err());
        let mut c = Camera::new(1.0, 1.0, 0.0, 0.0, 4, 4);
        c.near = 2000.0;
        assert!(c.validate().is_err());
    }
}
