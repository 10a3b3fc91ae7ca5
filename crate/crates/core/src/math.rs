//! Small linear-algebra helpers shared by the scene, rasterizer and trainer.
//!
//! Quaternions are stored as `Vector4` in `(w, x, y, z)` order so that raw,
//! unnormalized components can be optimized and differentiated directly.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
/// Quaternion in `(w, x, y, z)` order.
pub type Quat = Vector4<f64>;

pub const QUAT_IDENTITY: Quat = Vector4::new(1.0, 0.0, 0.0, 0.0);

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn quat_normalize(q: &Quat) -> Quat {
    let n = q.norm();
    if n > 0.0 && n.is_finite() {
        q / n
    } else {
        QUAT_IDENTITY
    }
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    quat_left_matrix(a) * b
}

/// Matrix `L(a)` with `a ⊗ b = L(a)·b`.
pub fn quat_left_matrix(a: &Quat) -> Matrix4<f64> {
    let (w, x, y, z) = (a[0], a[1], a[2], a[3]);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

pub fn quat_conjugate(q: &Quat) -> Quat {
    Vector4::new(q[0], -q[1], -q[2], -q[3])
}

pub fn quat_from_axis_angle(axis: &Vec3, angle: f64) -> Quat {
    let n = axis.norm();
    if n == 0.0 {
        return QUAT_IDENTITY;
    }
    let a = axis / n;
    let (s, c) = (0.5 * angle).sin_cos();
    Vector4::new(c, a.x * s, a.y * s, a.z * s)
}

/// Shortest-arc rotation taking unit direction `from` onto unit direction `to`.
pub fn quat_from_two_vectors(from: &Vec3, to: &Vec3) -> Quat {
    let f = from.normalize();
    let t = to.normalize();
    let d = f.dot(&t);
    if d > 1.0 - 1e-12 {
        return QUAT_IDENTITY;
    }
    if d < -1.0 + 1e-12 {
        // Antiparallel: rotate by π about any axis orthogonal to `from`.
        let mut axis = Vec3::x().cross(&f);
        if axis.norm_squared() < 1e-12 {
            axis = Vec3::y().cross(&f);
        }
        return quat_from_axis_angle(&axis, std::f64::consts::PI);
    }
    let c = f.cross(&t);
    quat_normalize(&Vector4::new(1.0 + d, c.x, c.y, c.z))
}

/// Rotation matrix of a unit quaternion (the polynomial form, evaluated as-is).
pub fn quat_to_rotation(q: &Quat) -> Mat3 {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn quat_rotate(q: &Quat, v: &Vec3) -> Vec3 {
    quat_to_rotation(q) * v
}

/// Pulls `dL/dR` back through [`quat_to_rotation`] to `dL/dq`.
pub fn quat_to_rotation_backward(q: &Quat, d_r: &Mat3) -> Quat {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let g = |m: Mat3| m.component_mul(d_r).sum();
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    );
    Vector4::new(g(dw), g(dx), g(dy), g(dz))
}

/// Pulls a gradient w.r.t. `q / |q|` back to the raw quaternion `q`.
pub fn quat_normalize_backward(q_raw: &Quat, d_unit: &Quat) -> Quat {
    let n = q_raw.norm();
    if n == 0.0 || !n.is_finite() {
        return Quat::zeros();
    }
    let u = q_raw / n;
    (d_unit - u * u.dot(d_unit)) / n
}

pub fn is_finite3(v: &Vec3) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Eigenvalues of a symmetric 3×3 matrix, ascending.
pub fn symmetric_eigenvalues(m: &Mat3) -> [f64; 3] {
    let e = m.symmetric_eigenvalues();
    let mut v = [e[0], e[1], e[2]];
    v.sort_by(f64::total_cmp);
    v
}
