use nalgebra::{Isometry3, Matrix4, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on quaternion norms accepted as unit.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Rigid transform in SE(3). A pose of the ego vehicle maps ego-frame
/// coordinates to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Rotation about +z by `yaw` radians followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            translation,
        )
    }

    /// Builds a pose from raw (w, x, y, z) quaternion components without
    /// renormalizing; the caller must supply a unit quaternion.
    pub fn from_wxyz(wxyz: [f64; 4], translation: Vector3<f64>) -> Result<Self> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        let pose = Self::new(UnitQuaternion::new_unchecked(q), translation);
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rotation.quaternion().norm();
        if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::Invariant(format!(
                "pose quaternion norm {n} is not unit"
            )));
        }
        if !self.translation.iter().all(|t| t.is_finite()) {
            return Err(Error::Invariant("pose translation is not finite".into()));
        }
        Ok(())
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn inverse(&self) -> Self {
        let rot_inv = self.rotation.inverse();
        Self {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &SE3Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotates a free vector; translation does not apply.
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation).to_homogeneous()
    }

    pub fn yaw(&self) -> f64 {
        self.rotation.euler_angles().2
    }

    pub fn is_identity(&self) -> bool {
        self.translation == Vector3::zeros() && self.wxyz() == [1.0, 0.0, 0.0, 0.0]
    }
}

/// Maps last-frame ego coordinates into current-frame ego coordinates:
/// `cur⁻¹ ∘ prev`.
pub fn relative_transform(prev_pose: &SE3Pose, cur_pose: &SE3Pose) -> Result<SE3Pose> {
    prev_pose.validate()?;
    cur_pose.validate()?;
    Ok(cur_pose.inverse().compose(prev_pose))
}

/// Plain-data form used in human-readable files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation_wxyz: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&SE3Pose> for PoseRecord {
    fn from(p: &SE3Pose) -> Self {
        Self {
            rotation_wxyz: p.wxyz(),
            translation: p.translation.into(),
        }
    }
}

impl PoseRecord {
    /// Unit quaternions are taken verbatim so poses round-trip bit-exactly;
    /// slightly denormalized ones (from hand-edited files) are renormalized.
    pub fn to_pose(&self) -> Result<SE3Pose> {
        let [w, x, y, z] = self.rotation_wxyz;
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "pose quaternion norm {n} is not unit"
            )));
        }
        let rotation = if (n - 1.0).abs() <= UNIT_TOLERANCE {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        let pose = SE3Pose::new(rotation, self.translation.into());
        pose.validate()?;
        Ok(pose)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector4;
    use std::f64::consts::FRAC_PI_2;

    fn homogeneous(p: &Vector3<f64>) -> Vector4<f64> {
        Vector4::new(p.x, p.y, p.z, 1.0)
    }

    #[test]
    fn identity_relative_is_identity() {
        let id = SE3Pose::identity();
        let rel = relative_transform(&id, &id).unwrap();
        assert!(rel.is_identity());
    }

    #[test]
    fn pure_translation_inverse() {
        let prev = SE3Pose::identity();
        let cur = SE3Pose::from_translation(Vector3::new(2.0, 0.0, 0.0));
        let rel = relative_transform(&prev, &cur).unwrap();
        assert_eq!(rel.translation, Vector3::new(-2.0, 0.0, 0.0));
        assert!((rel.rotation.angle()).abs() < 1e-15);
    }

    #[test]
    fn yaw_relative_matches_matrix_composition() {
        let prev = SE3Pose::identity();
        let cur = SE3Pose::from_yaw(FRAC_PI_2, Vector3::zeros());
        let rel = relative_transform(&prev, &cur).unwrap();

        // Oracle: explicit homogeneous matrices, inverse by transposition.
        let cur_m = {
            let (s, c) = FRAC_PI_2.sin_cos();
            Matrix4::new(
                c, -s, 0.0, 0.0, s, c, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            )
        };
        let mut cur_inv = cur_m.transpose();
        cur_inv[(3, 0)] = 0.0;
        cur_inv[(3, 1)] = 0.0;
        cur_inv[(3, 2)] = 0.0;
        let expected = cur_inv * Matrix4::identity();
        assert!((rel.to_matrix() - expected).abs().max() < 1e-12);
        // A point ahead of the ego at the last frame is to its right now.
        let p = rel.transform_point(&Vector3::new(1.0, 0.0, 0.0));
        assert!((p - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
        let ph = expected * homogeneous(&Vector3::new(1.0, 0.0, 0.0));
        assert!((ph.xyz() - p).norm() < 1e-12);
    }

    #[test]
    fn rejects_non_unit_quaternion() {
        assert!(SE3Pose::from_wxyz([1.0, 0.1, 0.0, 0.0], Vector3::zeros()).is_err());
        let bad = SE3Pose::new(
            UnitQuaternion::new_unchecked(Quaternion::new(2.0, 0.0, 0.0, 0.0)),
            Vector3::zeros(),
        );
        assert!(relative_transform(&bad, &SE3Pose::identity()).is_err());
    }

    #[test]
    fn inverse_composes_to_identity() {
        let p = SE3Pose::new(
            UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1),
            Vector3::new(1.0, -4.0, 2.5),
        );
        let id = p.compose(&p.inverse());
        assert!((id.to_matrix() - Matrix4::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn record_round_trip() {
        let p = SE3Pose::from_yaw(0.7, Vector3::new(3.0, 1.0, 0.0));
        let back = PoseRecord::from(&p).to_pose().unwrap();
        assert_eq!(back, p);
    }
}
