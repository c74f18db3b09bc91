//! Rotation and rigid-transform math used for ground-tilt correction and
//! frame changes.
//!
//! The robot's IMU reports its orientation `R_geo` in a geo-referenced frame.
//! The cloud is re-expressed in the robot's "shadow" frame: a frame sitting on
//! the ground below the sensor, levelled to the ground plane, sharing the
//! robot's heading. Height thresholding is only meaningful in that frame.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const UNIT_TOL: f64 = 1e-9;
const PARALLEL_TOL: f64 = 1e-9;

/// A direction with Euclidean norm 1 (within `1e-9`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVec3(Vec3);

impl UnitVec3 {
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidInput(format!("vector norm {n} is not unit")));
        }
        Ok(UnitVec3(v))
    }

    /// Normalizes `v`; fails on zero or non-finite input.
    pub fn normalize(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n < f64::EPSILON {
            return Err(Error::InvalidInput("cannot normalize zero vector".into()));
        }
        Ok(UnitVec3(v / n))
    }

    pub fn z() -> Self {
        UnitVec3(Vec3::z())
    }

    pub fn into_inner(self) -> Vec3 {
        self.0
    }
}

impl std::ops::Deref for UnitVec3 {
    type Target = Vec3;
    fn deref(&self) -> &Vec3 {
        &self.0
    }
}

/// Proper rotation: orthonormal with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix(Matrix3::identity())
    }

    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if !(ortho <= 1e-9 && (det - 1.0).abs() <= 1e-9) {
            return Err(Error::InvalidInput(format!(
                "not a rotation: orthogonality error {ortho:e}, det {det}"
            )));
        }
        Ok(RotationMatrix(m))
    }

    /// Roll-pitch-yaw (intrinsic Z-Y-X) orientation: `Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        let rx = exp_map_raw(&Vec3::x(), roll);
        let ry = exp_map_raw(&Vec3::y(), pitch);
        let rz = exp_map_raw(&Vec3::z(), yaw);
        RotationMatrix(rz * ry * rx)
    }

    pub fn about_z(angle: f64) -> Self {
        RotationMatrix(exp_map_raw(&Vec3::z(), angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        RotationMatrix(self.0.transpose())
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn compose(&self, other: &RotationMatrix) -> Self {
        RotationMatrix(self.0 * other.0)
    }
}

fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn exp_map_raw(axis: &Vec3, angle: f64) -> Matrix3<f64> {
    let k = skew(axis);
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

/// Rodrigues rotation of `angle` radians about `axis`.
pub fn exp_map(axis: &UnitVec3, angle: f64) -> Result<RotationMatrix> {
    if !angle.is_finite() {
        return Err(Error::InvalidInput("rotation angle is not finite".into()));
    }
    // Re-check: UnitVec3 can be built from a Deref'd copy elsewhere.
    if (axis.norm() - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidInput("rotation axis is not unit".into()));
    }
    Ok(RotationMatrix(exp_map_raw(axis, angle)))
}

/// Axis-angle result of [`align_rotation`].
#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    pub axis: UnitVec3,
    pub angle: f64,
    pub rotation: RotationMatrix,
}

/// Rotation taking the robot base normal `n_r` onto the ground normal `n_g`.
///
/// Axis is the normalized cross product `n_r × n_g`; the angle uses the
/// `atan2(|n_r × n_g|, n_r · n_g)` form, which stays accurate near zero.
/// Parallel normals give the identity. Antiparallel normals are rejected:
/// a ground robot upside down means the IMU data is corrupt.
pub fn align_rotation(n_r: &UnitVec3, n_g: &UnitVec3) -> Result<Alignment> {
    let cross = n_r.cross(n_g);
    let sin = cross.norm();
    let cos = n_r.dot(n_g);
    if sin < PARALLEL_TOL {
        if cos < 0.0 {
            return Err(Error::DegenerateAxis);
        }
        return Ok(Alignment {
            axis: UnitVec3::z(),
            angle: 0.0,
            rotation: RotationMatrix::identity(),
        });
    }
    let axis = UnitVec3(cross / sin);
    let angle = sin.atan2(cos);
    Ok(Alignment {
        axis,
        angle,
        rotation: RotationMatrix(exp_map_raw(&axis, angle)),
    })
}

/// Orientation of the robot in its shadow frame, `Exp(-v_s θ)`.
///
/// `v_s = R_shadowᵀ v` with `R_shadow = R_align R_geo`. Applying the result to
/// body-frame points levels them against the ground; the robot's heading is
/// untouched, so the result does not depend on yaw.
pub fn shadow_frame_rotation(r_geo: &RotationMatrix, n_g: &UnitVec3) -> Result<RotationMatrix> {
    let n_r = UnitVec3::normalize(r_geo.matrix().column(2).into_owned())?;
    let align = align_rotation(&n_r, n_g)?;
    if align.angle == 0.0 {
        return Ok(RotationMatrix::identity());
    }
    let r_shadow = align.rotation.compose(r_geo);
    let v_s = UnitVec3::normalize(r_shadow.transpose().apply(&align.axis))?;
    exp_map(&v_s, -align.angle)
}

/// Rotation followed by translation: `p' = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: RotationMatrix,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: RotationMatrix::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: RotationMatrix, translation: Vec3) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        RigidTransform {
            rotation: RotationMatrix::identity(),
            translation,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -rt.apply(&self.translation),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn unit(x: f64, y: f64, z: f64) -> UnitVec3 {
        UnitVec3::normalize(Vec3::new(x, y, z)).unwrap()
    }

    #[test]
    fn exp_map_zero_angle_is_identity() {
        let r = exp_map(&UnitVec3::z(), 0.0).unwrap();
        assert_eq!(*r.matrix(), Matrix3::identity());
    }

    #[test]
    fn exp_map_quarter_turn_about_negative_y() {
        let r = exp_map(&unit(0.0, -1.0, 0.0), FRAC_PI_2).unwrap();
        let p = r.apply(&Vec3::x());
        assert!((p - Vec3::z()).norm() < 1e-15);
    }

    #[test]
    fn exp_map_rejects_non_unit_axis() {
        let bad = UnitVec3(Vec3::new(1.0, 1.0, 0.0));
        assert!(matches!(exp_map(&bad, 0.3), Err(Error::InvalidInput(_))));
        assert!(UnitVec3::new(Vec3::new(1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn align_parallel_is_identity() {
        let a = align_rotation(&UnitVec3::z(), &UnitVec3::z()).unwrap();
        assert_eq!(a.angle, 0.0);
        assert_eq!(a.rotation, RotationMatrix::identity());
    }

    #[test]
    fn align_x_onto_z() {
        let a = align_rotation(&unit(1.0, 0.0, 0.0), &UnitVec3::z()).unwrap();
        assert!((*a.axis - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-15);
        assert!((a.angle - FRAC_PI_2).abs() < 1e-15);
        assert!((a.rotation.apply(&Vec3::x()) - Vec3::z()).norm() < 1e-15);
    }

    #[test]
    fn align_antiparallel_is_error() {
        let r = align_rotation(&unit(0.0, 0.0, -1.0), &UnitVec3::z());
        assert_eq!(r.unwrap_err(), Error::DegenerateAxis);
    }

    #[test]
    fn shadow_rotation_untilted_is_identity() {
        let r_geo = RotationMatrix::identity();
        let r = shadow_frame_rotation(&r_geo, &UnitVec3::z()).unwrap();
        assert!((r.matrix() - Matrix3::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn shadow_rotation_ignores_yaw() {
        for yaw in [0.3, -2.0, PI, 5.5] {
            let r = shadow_frame_rotation(&RotationMatrix::about_z(yaw), &UnitVec3::z()).unwrap();
            assert!((r.matrix() - Matrix3::identity()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn shadow_rotation_levels_pitched_ground() {
        let r_geo = RotationMatrix::from_rpy(0.0, 10f64.to_radians(), 0.0);
        let r = shadow_frame_rotation(&r_geo, &UnitVec3::z()).unwrap();
        // Ground normal as the tilted body sees it.
        let seen = r_geo.transpose().apply(&Vec3::z());
        let levelled = r.apply(&seen);
        assert!(levelled.z >= 1.0 - 1e-9);
    }

    #[test]
    fn rigid_round_trip() {
        let t = RigidTransform::new(
            RotationMatrix::from_rpy(0.1, -0.4, 2.0),
            Vec3::new(3.0, -1.0, 0.5),
        );
        let p = Vec3::new(0.2, 7.0, -3.0);
        let q = t.inverse().apply(&t.apply(&p));
        assert!((p - q).norm() < 1e-12);
        let id = t.compose(&t.inverse());
        assert!((id.rotation.matrix() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
    }
}
