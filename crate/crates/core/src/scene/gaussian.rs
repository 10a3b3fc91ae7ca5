use crate::error::{Error, Result};
use crate::math::{is_finite3, quat_normalize, quat_to_rotation, sigmoid, Mat3, Quat, Vec3};

/// Length of the shared appearance feature carried by every Gaussian.
pub const FEATURE_DIM: usize = 32;

pub type Feature = [f64; FEATURE_DIM];

/// A trainable Gaussian with a weather-independent appearance feature.
///
/// Scale and opacity are stored in unconstrained form (`log_scale`,
/// `opacity_logit`) so that gradient steps cannot leave the valid range.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub position: Vec3,
    pub log_scale: Vec3,
    pub rotation: Quat,
    pub opacity_logit: f64,
    pub feature: Feature,
}

impl GaussianPrimitive {
    pub fn new(position: Vec3, log_scale: Vec3, rotation: Quat, opacity_logit: f64) -> Self {
        Self {
            position,
            log_scale,
            rotation: quat_normalize(&rotation),
            opacity_logit,
            feature: [0.0; FEATURE_DIM],
        }
    }

    pub fn with_feature(mut self, feature: Feature) -> Self {
        self.feature = feature;
        self
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Result<Mat3> {
        covariance3d(&self.log_scale, &quat_normalize(&self.rotation))
    }

    pub fn normalize_rotation(&mut self) {
        self.rotation = quat_normalize(&self.rotation);
    }

    /// Checks the representation invariants.
    pub fn validate(&self) -> Result<()> {
        if !is_finite3(&self.position) {
            return Err(Error::invalid("position", "non-finite"));
        }
        let s = self.scale();
        if !s.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::invalid("log_scale", "scale must be finite and positive"));
        }
        if (self.rotation.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("rotation", "quaternion not normalized"));
        }
        let o = self.opacity();
        if !(o > 0.0 && o < 1.0) {
            return Err(Error::invalid("opacity_logit", format!("opacity {o} outside (0,1)")));
        }
        if !self.feature.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("feature", "non-finite entry"));
        }
        Ok(())
    }
}

/// `R·diag(exp(2·log_scale))·Rᵀ` for a normalized quaternion.
pub fn covariance3d(log_scale: &Vec3, rotation: &Quat) -> Result<Mat3> {
    if !is_finite3(log_scale) || !rotation.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("covariance3d", "non-finite input"));
    }
    let r = quat_to_rotation(rotation);
    let d = Mat3::from_diagonal(&log_scale.map(|s| (2.0 * s).exp()));
    let cov = r * d * r.transpose();
    // Symmetrize away rounding asymmetry from the triple product.
    Ok((cov + cov.transpose()) * 0.5)
}

/// Covariance from linear per-axis scales, used for particles whose scale is
/// configured directly.
pub(crate) fn covariance_from_scale(scale: &Vec3, rotation: &Quat) -> Mat3 {
    let r = quat_to_rotation(rotation);
    let d = Mat3::from_diagonal(&scale.component_mul(scale));
    let cov = r * d * r.transpose();
    (cov + cov.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{quat_from_axis_angle, symmetric_eigenvalues, QUAT_IDENTITY};
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, LN_2};

    #[test]
    fn unit_scale_identity_rotation_gives_identity() {
        let c = covariance3d(&Vec3::zeros(), &QUAT_IDENTITY).unwrap();
        assert_eq!(c, Mat3::identity());
    }

    #[test]
    fn axis_scaling() {
        let c = covariance3d(&Vec3::new(LN_2, 0.0, 0.0), &QUAT_IDENTITY).unwrap();
        assert!((c - Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn quarter_turn_about_z_permutes_axes() {
        let q = quat_from_axis_angle(&Vec3::z(), FRAC_PI_2);
        let c = covariance3d(&Vec3::new(LN_2, 0.0, 0.0), &q).unwrap();
        assert!((c - Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn non_finite_input_rejected() {
        assert!(covariance3d(&Vec3::new(f64::NAN, 0.0, 0.0), &QUAT_IDENTITY).is_err());
        let q = Quat::new(f64::INFINITY, 0.0, 0.0, 0.0);
        assert!(covariance3d(&Vec3::zeros(), &q).is_err());
    }

    proptest! {
        #[test]
        fn spectrum_is_rotation_invariant(
            s in prop::array::uniform3(-2.0f64..1.5),
            q in prop::array::uniform4(-1.0f64..1.0),
        ) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let q = quat_normalize(&Quat::from(q));
            let ls = Vec3::from(s);
            let c = covariance3d(&ls, &q).unwrap();
            prop_assert_eq!(c, c.transpose());
            let mut expect: Vec<f64> = s.iter().map(|v| (2.0 * v).exp()).collect();
            expect.sort_by(f64::total_cmp);
            let got = symmetric_eigenvalues(&c);
            for k in 0..3 {
                prop_assert!((got[k] - expect[k]).abs() <= 1e-9 * expect[2].max(1.0));
            }
        }
    }
}
