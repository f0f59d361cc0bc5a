//! Rotation, rigid and similarity transforms.
//!
//! Conventions used throughout the crate:
//! - [`Pose::compose`]`(a, b)` applies `b` first, then `a` (matrix product `a·b`).
//! - Twists are ordered rotation first: `[ω; v]`.
//! - Quaternions are kept with a non-negative scalar part so equal rotations
//!   compare equal component-wise.

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Twist = Vector6<f64>;

/// Rotations within this distance of pi have no unique logarithm.
pub const LOG_CUT_MARGIN: f64 = 1e-6;

/// Skew-symmetric cross-product matrix, `skew(a) * b == a × b`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Unit quaternion rotation, canonicalized to `w >= 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot3(UnitQuaternion<f64>);

impl Default for Rot3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rot3 {
    pub fn identity() -> Self {
        Rot3(UnitQuaternion::identity())
    }

    fn canonical(q: UnitQuaternion<f64>) -> Self {
        if q.w < 0.0 {
            Rot3(UnitQuaternion::new_unchecked(-q.into_inner()))
        } else {
            Rot3(q)
        }
    }

    /// Builds from `(w, x, y, z)`, normalizing.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::canonical(UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        Self::from_scaled_axis(&(axis.normalize() * angle))
    }

    /// Exponential map of `so(3)`.
    pub fn from_scaled_axis(omega: &Vec3) -> Self {
        Self::canonical(UnitQuaternion::from_scaled_axis(*omega))
    }

    /// Nearest rotation to a (numerically) orthonormal matrix.
    pub fn from_matrix(m: &Mat3) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*m);
        Self::canonical(UnitQuaternion::from_rotation_matrix(&rot))
    }

    /// Closest rotation in the Frobenius sense to an arbitrary matrix.
    pub fn nearest(m: &Mat3) -> Option<Self> {
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u?, svd.v_t?);
        let mut d = Mat3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Some(Self::from_matrix(&(u * d * v_t)))
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), angle)
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn matrix(&self) -> Mat3 {
        self.0.to_rotation_matrix().into_inner()
    }

    /// Applies `self` after `other`. No renormalization is performed.
    pub fn compose(&self, other: &Rot3) -> Rot3 {
        Self::canonical(self.0 * other.0)
    }

    pub fn inverse(&self) -> Rot3 {
        Self::canonical(self.0.inverse())
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let q = self.0.quaternion();
        let s = q.imag().norm();
        2.0 * s.atan2(q.w.abs())
    }

    /// Angle of `self · other⁻¹`.
    pub fn angle_to(&self, other: &Rot3) -> f64 {
        self.compose(&other.inverse()).angle()
    }

    /// Logarithm as a scaled axis; exact inverse of [`Rot3::from_scaled_axis`]
    /// for angles below `pi`.
    pub fn log(&self) -> Vec3 {
        let q = self.0.quaternion();
        let s = q.imag().norm();
        if s < 1e-300 {
            return Vec3::zeros();
        }
        let angle = 2.0 * s.atan2(q.w);
        q.imag() * (angle / s)
    }

    pub fn norm_error(&self) -> f64 {
        (self.0.quaternion().norm() - 1.0).abs()
    }
}

/// Rigid transform `x ↦ R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rot3,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Rot3, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::default()
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose::new(Rot3::identity(), t)
    }

    pub fn from_rotation(r: Rot3) -> Self {
        Pose::new(r, Vec3::zeros())
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose {
            rotation: r_inv,
            translation: -r_inv.rotate(&self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.rotate(v)
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    /// Parses a row-major homogeneous 4×4 matrix. The rotation block must be
    /// orthonormal within 1e-6 and the last row must be `0 0 0 1`.
    pub fn from_row_major(m: &[f64]) -> Result<Pose> {
        if m.len() != 16 {
            return Err(Error::InvalidInput(format!(
                "expected 16 matrix entries, got {}",
                m.len()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite matrix entry".into()));
        }
        let r = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
        if ortho > 1e-6 || r.determinant() <= 0.0 {
            return Err(Error::InvalidInput(
                "rotation block is not a proper rotation".into(),
            ));
        }
        if m[12].abs() > 1e-12 || m[13].abs() > 1e-12 || m[14].abs() > 1e-12 || (m[15] - 1.0).abs() > 1e-12
        {
            return Err(Error::InvalidInput("last row must be 0 0 0 1".into()));
        }
        Ok(Pose::new(Rot3::from_matrix(&r), Vec3::new(m[3], m[7], m[11])))
    }

    /// Rotation angle and translation norm of `self⁻¹ · other`.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let d = self.inverse().compose(other);
        (d.rotation.angle(), d.translation.norm())
    }
}

/// Left Jacobian of SO(3), `V(ω)` in the SE(3) exponential.
pub fn so3_left_jacobian(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    let (a, b) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Mat3::identity() + k * a + k * k * b
}

fn so3_left_jacobian_inverse(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    let c = if theta2 < 1e-10 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Mat3::identity() - k * 0.5 + k * k * c
}

/// SE(3) exponential of a twist `[ω; v]`.
pub fn exp_se3(twist: &Twist) -> Pose {
    let omega = twist.fixed_rows::<3>(0).into_owned();
    let v = twist.fixed_rows::<3>(3).into_owned();
    Pose {
        rotation: Rot3::from_scaled_axis(&omega),
        translation: so3_left_jacobian(&omega) * v,
    }
}

/// SE(3) logarithm. Fails within [`LOG_CUT_MARGIN`] of a half turn.
pub fn log_se3(pose: &Pose) -> Result<Twist> {
    let angle = pose.rotation.angle();
    if angle >= std::f64::consts::PI - LOG_CUT_MARGIN {
        return Err(Error::AngleNearPi { angle });
    }
    let omega = pose.rotation.log();
    let v = so3_left_jacobian_inverse(&omega) * pose.translation;
    let mut out = Twist::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&omega);
    out.fixed_rows_mut::<3>(3).copy_from(&v);
    Ok(out)
}

/// Similarity transform `x ↦ s·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3 {
    scale: f64,
    pub rotation: Rot3,
    pub translation: Vec3,
}

impl Default for Sim3 {
    fn default() -> Self {
        Sim3::identity()
    }
}

impl Sim3 {
    pub fn new(scale: f64, rotation: Rot3, translation: Vec3) -> Result<Sim3> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "Sim3 scale must be positive and finite, got {scale}"
            )));
        }
        Ok(Sim3 {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Sim3 {
        Sim3 {
            scale: 1.0,
            rotation: Rot3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_pose(pose: &Pose) -> Sim3 {
        Sim3 {
            scale: 1.0,
            rotation: pose.rotation,
            translation: pose.translation,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) * self.scale + self.translation
    }

    pub fn compose(&self, other: &Sim3) -> Sim3 {
        Sim3 {
            scale: self.scale * other.scale,
            rotation: self.rotation.compose(&other.rotation),
            translation: self.transform_point(&other.translation),
        }
    }

    pub fn inverse(&self) -> Sim3 {
        let r_inv = self.rotation.inverse();
        Sim3 {
            scale: 1.0 / self.scale,
            rotation: r_inv,
            translation: -r_inv.rotate(&self.translation) / self.scale,
        }
    }

    /// Re-expresses a camera-to-frame pose in the target frame of the
    /// similarity: the optical center moves as a point, the orientation is
    /// rotated, and the metric camera frame is unaffected by the scale.
    pub fn transform_pose(&self, pose: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&pose.rotation),
            translation: self.transform_point(&pose.translation),
        }
    }
}

/// Result of [`umeyama`].
#[derive(Clone, Copy, Debug)]
pub struct Alignment {
    pub transform: Sim3,
    /// Root-mean-square residual of the aligned source against the target.
    pub rms: f64,
}

/// Least-squares similarity (or rigid, when `with_scale` is false) alignment
/// minimizing `Σ ‖s·R·src_i + t − dst_i‖²`.
pub fn umeyama(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<Alignment> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} source points vs {} target points",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 3 point pairs, got {n}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = src.iter().sum::<Vec3>() * inv_n;
    let mu_d = dst.iter().sum::<Vec3>() * inv_n;

    let mut cov_src = Mat3::zeros();
    let mut cross = Mat3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let ds = s - mu_s;
        let dd = d - mu_d;
        cov_src += ds * ds.transpose();
        cross += dd * ds.transpose();
        var_src += ds.norm_squared();
    }
    cov_src *= inv_n;
    cross *= inv_n;
    var_src *= inv_n;

    // Rank < 2 leaves the rotation about the point line undetermined.
    let mut eig = cov_src.symmetric_eigenvalues().as_slice().to_vec();
    eig.sort_by(|a, b| b.total_cmp(a));
    if eig[0] <= 1e-300 || eig[1] <= 1e-12 * eig[0] {
        return Err(Error::DegenerateConfiguration(
            "source points are collinear or coincident".into(),
        ));
    }

    let svd = cross.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut sign = Mat3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * v_t;
    let scale = if with_scale {
        let trace: f64 = (0..3).map(|i| svd.singular_values[i] * sign[(i, i)]).sum();
        trace / var_src
    } else {
        1.0
    };
    if !(scale > 0.0) {
        return Err(Error::DegenerateConfiguration(
            "non-positive scale estimate".into(),
        ));
    }
    let rotation = Rot3::from_matrix(&r);
    let translation = mu_d - rotation.rotate(&mu_s) * scale;
    let transform = Sim3::new(scale, rotation, translation)?;
    let sq: f64 = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (transform.transform_point(s) - d).norm_squared())
        .sum();
    Ok(Alignment {
        transform,
        rms: (sq * inv_n).sqrt(),
    })
}

/// Serde adapter storing a [`Pose`] as a row-major 4×4 matrix.
pub mod pose_serde {
    use super::Pose;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(pose: &Pose, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(pose.to_row_major())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Pose, D::Error> {
        let m = Vec::<f64>::deserialize(d)?;
        Pose::from_row_major(&m).map_err(D::Error::custom)
    }
}

/// Serde adapter storing a [`Rot3`] as `[w, x, y, z]`.
pub mod rot_serde {
    use super::Rot3;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Rot3, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(r.wxyz())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rot3, D::Error> {
        let q = <[f64; 4]>::deserialize(d)?;
        Ok(Rot3::from_wxyz(q[0], q[1], q[2], q[3]))
    }
}
