//! Rotations, rigid poses and pinhole projection.
//!
//! Conventions used throughout the crate:
//! - quaternions are stored `(w, x, y, z)` and canonicalized so that `w >= 0`
//!   (if `w == 0`, the first nonzero of `x, y, z` is positive);
//! - lengths are millimeters, image coordinates are pixels with the origin at
//!   the top-left corner, `u` to the right and `v` downward;
//! - a [`Pose`] maps model coordinates into the camera frame: `x_c = R x + t`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Max-norm tolerance for `RᵀR = I` and `det R = 1`.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate quaternion (zero or non-finite norm)")]
    DegenerateQuaternion,
    #[error("matrix is not a rotation: orthonormality error {ortho_err:.3e}, det {det:.12}")]
    InvalidRotation { ortho_err: f64, det: f64 },
    #[error("point is behind the camera (depth {depth} mm)")]
    BehindCamera { depth: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Unit quaternion in `(w, x, y, z)` order, always in canonical sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes and canonicalizes an arbitrary 4-vector.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(GeometryError::DegenerateQuaternion);
        }
        Ok(Quaternion { w: w / norm, x: x / norm, y: y / norm, z: z / norm }.canonical())
    }

    /// Sign-flips so that the representative lies in the `w >= 0` hemisphere.
    pub fn canonical(self) -> Self {
        let first_nonzero = [self.w, self.x, self.y, self.z].into_iter().find(|c| *c != 0.0).unwrap_or(0.0);
        if first_nonzero < 0.0 {
            self.negated()
        } else {
            self
        }
    }

    pub fn negated(self) -> Self {
        Quaternion { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Rotation matrix for a (not necessarily normalized) quaternion.
///
/// `q` and `-q` produce bitwise-identical matrices: every entry is a product of
/// two components.
pub fn quat_to_rotmat(q: &Quaternion) -> Result<Rotation, GeometryError> {
    let norm = q.norm();
    if !norm.is_finite() || norm == 0.0 {
        return Err(GeometryError::DegenerateQuaternion);
    }
    let (w, x, y, z) = (q.w / norm, q.x / norm, q.y / norm, q.z / norm);
    let m = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    );
    Ok(Rotation(m))
}

/// Inverse of [`quat_to_rotmat`] (Shepperd's method), canonical sign.
pub fn rotmat_to_quat(r: &Rotation) -> Quaternion {
    let m = &r.0;
    let trace = m.trace();
    // Pick the numerically largest of 4w², 4x², 4y², 4z².
    let candidates = [trace, m[(0, 0)], m[(1, 1)], m[(2, 2)]];
    let mut best = 0;
    for i in 1..4 {
        if candidates[i] > candidates[best] {
            best = i;
        }
    }
    let (w, x, y, z) = match best {
        0 => {
            let s = (1.0 + trace).sqrt() * 2.0;
            (0.25 * s, (m[(2, 1)] - m[(1, 2)]) / s, (m[(0, 2)] - m[(2, 0)]) / s, (m[(1, 0)] - m[(0, 1)]) / s)
        }
        1 => {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            ((m[(2, 1)] - m[(1, 2)]) / s, 0.25 * s, (m[(0, 1)] + m[(1, 0)]) / s, (m[(0, 2)] + m[(2, 0)]) / s)
        }
        2 => {
            let s = (1.0 - m[(0, 0)] + m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            ((m[(0, 2)] - m[(2, 0)]) / s, (m[(0, 1)] + m[(1, 0)]) / s, 0.25 * s, (m[(1, 2)] + m[(2, 1)]) / s)
        }
        _ => {
            let s = (1.0 - m[(0, 0)] - m[(1, 1)] + m[(2, 2)]).sqrt() * 2.0;
            ((m[(1, 0)] - m[(0, 1)]) / s, (m[(0, 2)] + m[(2, 0)]) / s, (m[(1, 2)] + m[(2, 1)]) / s, 0.25 * s)
        }
    };
    // A validated rotation never yields a zero vector here.
    Quaternion::new(w, x, y, z).expect("rotation matrix yields nonzero quaternion")
}

/// Validates `m` as a rotation, then converts it.
pub fn matrix_to_quat(m: &Matrix3<f64>) -> Result<Quaternion, GeometryError> {
    Ok(rotmat_to_quat(&Rotation::new(*m)?))
}

/// A 3×3 rotation matrix. Construct through [`Rotation::new`] (validated),
/// [`Rotation::nearest`] (projected) or the quaternion / axis-angle helpers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and `det = +1` within [`ROTATION_TOLERANCE`].
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("rotation matrix"));
        }
        let ortho_err = (m.transpose() * m - Matrix3::identity()).amax();
        let det = m.determinant();
        if ortho_err > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidRotation { ortho_err, det });
        }
        Ok(Rotation(m))
    }

    /// Builds from row-major entries, validating.
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self, GeometryError> {
        Self::new(Matrix3::from_fn(|i, j| rows[i][j]))
    }

    /// Nearest rotation in Frobenius norm (SVD projection, `det` forced to +1).
    pub fn nearest(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u requested");
        let v_t = svd.v_t.expect("svd v_t requested");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rotation(u * d * v_t)
    }

    /// Rotation by `angle_rad` about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle_rad: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle_rad == 0.0 {
            return Self::identity();
        }
        Self::from_rotation_vector(&(axis * (angle_rad / n)))
    }

    /// Rodrigues' formula for a rotation vector `ω = θ·axis`.
    pub fn from_rotation_vector(omega: &Vector3<f64>) -> Self {
        let theta = omega.norm();
        let k = skew(omega);
        let (a, b) = if theta < 1e-8 {
            // Taylor terms of sinθ/θ and (1 − cosθ)/θ².
            (1.0 - theta * theta / 6.0, 0.5 - theta * theta / 24.0)
        } else {
            (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
        };
        Rotation(Matrix3::identity() + k * a + k * k * b)
    }

    pub fn rot_z_deg(deg: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), deg.to_radians())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Row-major entries.
    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn to_quaternion(&self) -> Quaternion {
        rotmat_to_quat(self)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vector3<f64>> for &Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid transform `[R | t]`, translation in millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Rotation::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose { rotation: Rotation::identity(), translation: t }
    }

    pub fn from_rotation(rotation: Rotation) -> Self {
        Pose { rotation, translation: Vector3::zeros() }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.0 * x + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        invert(self)
    }
}

/// Applies `b` then `a`: `R = R_a R_b`, `t = R_a t_b + t_a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose { rotation: a.rotation * b.rotation, translation: a.rotation.0 * b.translation + a.translation }
}

pub fn invert(p: &Pose) -> Pose {
    let rt = p.rotation.transpose();
    Pose { translation: -(rt.0 * p.translation), rotation: rt }
}

/// Pinhole intrinsics (no distortion).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = CameraIntrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: String| Err(GeometryError::InvalidIntrinsics(msg));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return bad(format!("cx={} outside (0, {})", self.cx, self.width));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return bad(format!("cy={} outside (0, {})", self.cy, self.height));
        }
        Ok(())
    }

    /// Projects a camera-frame point.
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if !(p.z > 0.0) {
            return Err(GeometryError::BehindCamera { depth: p.z });
        }
        Ok(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// `true` when `(u, v)` lies in `[0, width) × [0, height)`.
    pub fn contains(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x < self.width as f64 && uv.y < self.height as f64
    }
}

/// Projects model point `x` under pose `p`.
pub fn project(k: &CameraIntrinsics, p: &Pose, x: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    k.project_camera_point(&p.apply(x))
}

/// Geodesic angle between two rotations, in degrees, in `[0, 180]`.
///
/// Equal to `arccos((tr(AᵀB) - 1) / 2)`, evaluated as `atan2(sin, cos)` so
/// that angles near zero keep full precision.
pub fn rotation_geodesic_deg(a: &Rotation, b: &Rotation) -> f64 {
    let rel = a.0.transpose() * b.0;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = Vector3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]);
    let sin = (axis.norm() / 2.0).min(1.0);
    sin.atan2(cos).to_degrees()
}

pub fn translation_error_mm(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quat_strategy() -> impl Strategy<Value = Quaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| Quaternion::new(w, x, y, z).unwrap())
    }

    fn pose_strategy() -> impl Strategy<Value = Pose> {
        (quat_strategy(), -500.0..500.0f64, -500.0..500.0f64, -500.0..500.0f64)
            .prop_map(|(q, x, y, z)| Pose::new(quat_to_rotmat(&q).unwrap(), Vector3::new(x, y, z)))
    }

    fn test_camera() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        let r = quat_to_rotmat(&Quaternion::IDENTITY).unwrap();
        assert_eq!(*r.matrix(), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let r = quat_to_rotmat(&Quaternion { w: h, x: 0.0, y: 0.0, z: h }).unwrap();
        // Oracle: rotating the basis vectors by 90° about z sends e_x → e_y, e_y → −e_x.
        let ex = r.matrix() * Vector3::x();
        let ey = r.matrix() * Vector3::y();
        let ez = r.matrix() * Vector3::z();
        assert!((ex - Vector3::y()).amax() < 1e-15);
        assert!((ey + Vector3::x()).amax() < 1e-15);
        assert!((ez - Vector3::z()).amax() < 1e-15);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r.matrix() - expected).amax() < 1e-15);
    }

    #[test]
    fn zero_quaternion_is_rejected() {
        let q = Quaternion { w: 0.0, x: 0.0, y: 0.0, z: 0.0 };
        assert_eq!(quat_to_rotmat(&q), Err(GeometryError::DegenerateQuaternion));
        assert!(Quaternion::new(0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn canonical_sign_rules() {
        let q = Quaternion::new(-0.5, 0.5, 0.5, 0.5).unwrap();
        assert!(q.w > 0.0);
        let q = Quaternion::new(0.0, -1.0, 0.0, 0.0).unwrap();
        assert_eq!(q.as_array(), [0.0, 1.0, 0.0, 0.0]);
        let q = Quaternion::new(0.0, 0.0, -2.0, 1.0).unwrap();
        assert!(q.y > 0.0 && q.z < 0.0);
    }

    #[test]
    fn identity_matrix_gives_identity_quaternion() {
        assert_eq!(rotmat_to_quat(&Rotation::identity()), Quaternion::IDENTITY);
    }

    #[test]
    fn reflection_is_rejected() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matches!(Rotation::new(m), Err(GeometryError::InvalidRotation { .. })));
        assert!(matrix_to_quat(&m).is_err());
        let skewed = Matrix3::new(1.0, 1e-6, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Rotation::new(skewed).is_err());
    }

    #[test]
    fn angle_addition_about_z() {
        let a = Pose::from_rotation(Rotation::rot_z_deg(30.0));
        let b = Pose::from_rotation(Rotation::rot_z_deg(60.0));
        let c = compose(&a, &b);
        assert!((c.rotation.matrix() - Rotation::rot_z_deg(90.0).matrix()).amax() < 1e-15);
    }

    #[test]
    fn invert_simple_cases() {
        assert_eq!(invert(&Pose::identity()), Pose::identity());
        let p = invert(&Pose::from_translation(Vector3::new(0.0, 0.0, 100.0)));
        assert_eq!(p.translation, Vector3::new(0.0, 0.0, -100.0));
        assert_eq!(*p.rotation.matrix(), Matrix3::identity());
    }

    #[test]
    fn projection_examples() {
        let k = test_camera();
        let id = Pose::identity();
        let uv = project(&k, &id, &Vector3::new(0.0, 0.0, 1000.0)).unwrap();
        assert_eq!(uv, Vector2::new(320.0, 240.0));
        let uv = project(&k, &id, &Vector3::new(100.0, 0.0, 1000.0)).unwrap();
        assert_eq!(uv, Vector2::new(370.0, 240.0));
        assert!(matches!(project(&k, &id, &Vector3::new(0.0, 0.0, -5.0)), Err(GeometryError::BehindCamera { .. })));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 500.0, 320.0, 240.0, 640, 480).is_err());
        assert!(CameraIntrinsics::new(500.0, 500.0, 640.0, 240.0, 640, 480).is_err());
        assert!(CameraIntrinsics::new(500.0, 500.0, 320.0, 0.0, 640, 480).is_err());
    }

    #[test]
    fn geodesic_examples() {
        let i = Rotation::identity();
        assert_eq!(rotation_geodesic_deg(&i, &i), 0.0);
        assert!((rotation_geodesic_deg(&i, &Rotation::rot_z_deg(90.0)) - 90.0).abs() < 1e-12);
        // Oracle: the relative rotation Rz(10°)ᵀ Rz(40°) is Rz(30°).
        let d = rotation_geodesic_deg(&Rotation::rot_z_deg(10.0), &Rotation::rot_z_deg(40.0));
        assert!((d - 30.0).abs() < 1e-12);
        // Half turn: trace −1 must not produce NaN.
        let d = rotation_geodesic_deg(&i, &Rotation::rot_z_deg(180.0));
        assert!((d - 180.0).abs() < 1e-6);
    }

    #[test]
    fn translation_error_examples() {
        let z = Vector3::zeros();
        assert_eq!(translation_error_mm(&z, &z), 0.0);
        assert_eq!(translation_error_mm(&Vector3::new(3.0, 4.0, 0.0), &z), 5.0);
    }

    #[test]
    fn rotation_vector_small_angle_matches_axis_angle() {
        let w = Vector3::new(1e-10, -2e-10, 3e-10);
        let r = Rotation::from_rotation_vector(&w);
        assert!(Rotation::new(*r.matrix()).is_ok());
        let w = Vector3::new(0.3, -0.2, 0.1);
        let r = Rotation::from_rotation_vector(&w);
        let expected = nalgebra::Rotation3::new(w);
        assert!((r.matrix() - expected.matrix()).amax() < 1e-15);
    }

    #[test]
    fn nearest_rotation_repairs_drift() {
        let m = Rotation::rot_z_deg(20.0).matrix() + Matrix3::repeat(1e-4);
        let r = Rotation::nearest(&m);
        assert!(Rotation::new(*r.matrix()).is_ok());
    }

    proptest! {
        #[test]
        fn double_cover(q in quat_strategy()) {
            let a = quat_to_rotmat(&q).unwrap();
            let b = quat_to_rotmat(&q.negated()).unwrap();
            prop_assert!((a.matrix() - b.matrix()).amax() <= 1e-12);
        }

        #[test]
        fn round_trip(q in quat_strategy()) {
            let back = rotmat_to_quat(&quat_to_rotmat(&q).unwrap());
            let c = q.canonical();
            for (a, b) in back.as_array().iter().zip(c.as_array()) {
                prop_assert!((a - b).abs() <= 1e-8);
            }
        }

        #[test]
        fn constructed_rotations_are_valid(q in quat_strategy()) {
            let r = quat_to_rotmat(&q).unwrap();
            prop_assert!(Rotation::new(*r.matrix()).is_ok());
            prop_assert!((q.norm() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn involution(p in pose_strategy()) {
            let back = invert(&invert(&p));
            prop_assert!((back.rotation.matrix() - p.rotation.matrix()).amax() <= 1e-12);
            prop_assert!((back.translation - p.translation).amax() <= 1e-12);
        }

        #[test]
        fn compose_with_inverse_is_identity(p in pose_strategy()) {
            let id = compose(&p, &invert(&p));
            prop_assert!((id.rotation.matrix() - Matrix3::identity()).amax() <= 1e-9);
            prop_assert!(id.translation.amax() <= 1e-9);
            let same = compose(&p, &Pose::identity());
            prop_assert_eq!(same, p);
        }

        #[test]
        fn geodesic_symmetry_and_triangle(a in quat_strategy(), b in quat_strategy(), c in quat_strategy()) {
            let (ra, rb, rc) = (quat_to_rotmat(&a).unwrap(), quat_to_rotmat(&b).unwrap(), quat_to_rotmat(&c).unwrap());
            let ab = rotation_geodesic_deg(&ra, &rb);
            prop_assert!((ab - rotation_geodesic_deg(&rb, &ra)).abs() <= 1e-9);
            prop_assert!((0.0..=180.0).contains(&ab));
            let ac = rotation_geodesic_deg(&ra, &rc);
            let bc = rotation_geodesic_deg(&rb, &rc);
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn translation_error_matches_componentwise(
            a in prop::array::uniform3(-1e3..1e3f64),
            b in prop::array::uniform3(-1e3..1e3f64),
        ) {
            let brute = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            let got = translation_error_mm(&Vector3::from(a), &Vector3::from(b));
            prop_assert!((got - brute).abs() <= 1e-12 * brute.max(1.0));
        }

        #[test]
        fn projection_consistency(
            a in pose_strategy(),
            q in quat_strategy(),
            x in prop::array::uniform3(-100.0..100.0f64),
        ) {
            let k = test_camera();
            // Keep the composite in front of the camera.
            let a = Pose::new(a.rotation, Vector3::new(a.translation.x, a.translation.y, 2000.0));
            let b = Pose::new(quat_to_rotmat(&q).unwrap(), Vector3::new(10.0, -20.0, 30.0));
            let x = Vector3::from(x);
            let lhs = project(&k, &compose(&a, &b), &x).unwrap();
            let rhs = project(&k, &a, &b.apply(&x)).unwrap();
            prop_assert!((lhs - rhs).amax() <= 1e-9);
        }
    }
}
