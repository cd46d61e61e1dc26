//! Pinhole camera model, SE(3)/se(3) algebra, and the point motion
//! predictions that every estimator in this crate differentiates through.
//!
//! Conventions: camera looks down +z, pixel u grows right, v grows down.
//! A camera motion `T` maps the camera body from frame k-1 to frame k, so a
//! static 3D point expressed in the k-1 camera frame appears at
//! `project(T^-1 * m)` in frame k. An object motion `H` (expressed in the
//! k-1 camera frame) moves object points as `m_k = H * m_{k-1}`.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use std::ops::{Add, Mul, Sub};
use thiserror::Error;

/// 3D point in camera or world coordinates (meters).
pub type Point3 = nalgebra::Point3<f64>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid depth {0} (must be positive and finite)")]
    InvalidDepth(f64),
    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),
    #[error("rotation angle at pi, logarithm is ambiguous")]
    AmbiguousLog,
    #[error("not a rotation: |R^T R - I| = {ortho_err:.3e}, det = {det:.6}")]
    InvalidRotation { ortho_err: f64, det: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Pinhole intrinsics with a single focal length shared by both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    /// Focal length in pixels.
    pub f: f64,
    /// Principal point, pixels.
    pub cu: f64,
    pub cv: f64,
    /// Image size, pixels.
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(f: f64, cu: f64, cv: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        if !(f > 0.0 && f.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal length {f} must be positive"
            )));
        }
        if !(0.0..width as f64).contains(&cu) || !(0.0..height as f64).contains(&cv) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cu}, {cv}) outside {width}x{height} image"
            )));
        }
        Ok(Self { f, cu, cv, width, height })
    }

    pub fn contains(&self, p: ImagePoint) -> bool {
        p.u >= 0.0 && p.u < self.width as f64 && p.v >= 0.0 && p.v < self.height as f64
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Real-valued pixel location. The homogeneous form [u, v, 1] is implied,
/// never stored.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
}

impl ImagePoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

impl Add<FlowVector> for ImagePoint {
    type Output = ImagePoint;
    fn add(self, flow: FlowVector) -> ImagePoint {
        ImagePoint::new(self.u + flow.du, self.v + flow.dv)
    }
}

impl Sub for ImagePoint {
    type Output = FlowVector;
    fn sub(self, other: ImagePoint) -> FlowVector {
        FlowVector::new(self.u - other.u, self.v - other.v)
    }
}

/// Pixel displacement from frame k-1 to frame k.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowVector {
    pub du: f64,
    pub dv: f64,
}

impl FlowVector {
    pub fn new(du: f64, dv: f64) -> Self {
        Self { du, dv }
    }

    pub fn norm(&self) -> f64 {
        self.du.hypot(self.dv)
    }

    pub fn is_finite(&self) -> bool {
        self.du.is_finite() && self.dv.is_finite()
    }
}

impl Add for FlowVector {
    type Output = FlowVector;
    fn add(self, o: FlowVector) -> FlowVector {
        FlowVector::new(self.du + o.du, self.dv + o.dv)
    }
}

impl Sub for FlowVector {
    type Output = FlowVector;
    fn sub(self, o: FlowVector) -> FlowVector {
        FlowVector::new(self.du - o.du, self.dv - o.dv)
    }
}

/// Rigid transformation in SE(3).
///
/// Stored as a unit quaternion plus translation, so composition chains stay
/// on the manifold (the quaternion is renormalized on construction rather
/// than the rotation matrix being re-orthonormalized).
#[derive(Debug, Clone, Copy)]
pub struct SE3Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    /// Builds a pose from a rotation matrix and translation, rejecting
    /// matrices that are not orthonormal with determinant +1 within 1e-6.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        let det = rotation.determinant();
        if ortho_err > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidRotation { ortho_err, det });
        }
        Ok(Self {
            rotation: UnitQuaternion::from_matrix(&rotation),
            translation,
        })
    }

    pub fn from_quaternion(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    /// Rotation angle in radians, in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    pub fn inverse(&self) -> SE3Pose {
        let rot_inv = self.rotation.inverse();
        SE3Pose { rotation: rot_inv, translation: -(rot_inv * self.translation) }
    }

    /// Applies the transform to a point: R p + t.
    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Row-major 3x4 [R | t] flattening, the interchange layout used by the
    /// pose text files and the JSON records.
    pub fn to_matrix_3x4(&self) -> [f64; 12] {
        let r = self.rotation();
        let t = self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn from_matrix_3x4(m: &[f64; 12]) -> Result<Self, GeometryError> {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        Self::from_parts(rotation, translation)
    }
}

impl Mul for SE3Pose {
    type Output = SE3Pose;
    fn mul(self, rhs: SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

// Poses interchange as the row-major 3x4 [R | t] flattening everywhere
// (pose text files, JSON records), so serde goes through the same layout.
impl serde::Serialize for SE3Pose {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_matrix_3x4().serialize(serializer)
    }
}

impl<'de> serde::Deserialize<'de> for SE3Pose {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let m = <[f64; 12]>::deserialize(deserializer)?;
        SE3Pose::from_matrix_3x4(&m).map_err(serde::de::Error::custom)
    }
}

/// Element of se(3): translational part `rho`, rotational part `omega`
/// (radians). `se3_exp` maps it to an SE3Pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub omega: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self { rho: Vector3::zeros(), omega: Vector3::zeros() }
    }

    pub fn new(rho: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Self { rho, omega }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self { rho: Vector3::new(a[0], a[1], a[2]), omega: Vector3::new(a[3], a[4], a[5]) }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.rho.x, self.rho.y, self.rho.z, self.omega.x, self.omega.y, self.omega.z]
    }

    pub fn norm(&self) -> f64 {
        (self.rho.norm_squared() + self.omega.norm_squared()).sqrt()
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

// Below this angle the closed forms switch to their Taylor expansions to
// avoid dividing by a vanishing angle.
const SMALL_ANGLE: f64 = 1e-6;

/// Closed-form exponential map se(3) -> SE(3) (Rodrigues rotation plus the
/// V-matrix acting on the translational part).
pub fn se3_exp(xi: &Twist) -> SE3Pose {
    let theta = xi.omega.norm();
    let w = skew(&xi.omega);
    let w2 = w * w;
    let (r, v) = if theta < SMALL_ANGLE {
        // sin(t)/t ~ 1 - t^2/6, (1-cos t)/t^2 ~ 1/2 - t^2/24, (t - sin t)/t^3 ~ 1/6 - t^2/120
        let t2 = theta * theta;
        let r = Matrix3::identity() + w * (1.0 - t2 / 6.0) + w2 * (0.5 - t2 / 24.0);
        let v = Matrix3::identity() + w * (0.5 - t2 / 24.0) + w2 * (1.0 / 6.0 - t2 / 120.0);
        (r, v)
    } else {
        let t2 = theta * theta;
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / t2;
        let c = (theta - theta.sin()) / (t2 * theta);
        let r = Matrix3::identity() + w * a + w2 * b;
        let v = Matrix3::identity() + w * b + w2 * c;
        (r, v)
    };
    SE3Pose {
        rotation: UnitQuaternion::from_matrix(&r),
        translation: v * xi.rho,
    }
}

/// Logarithm map SE(3) -> se(3), principal branch.
///
/// Fails with `AmbiguousLog` when the rotation angle reaches pi, where the
/// axis is not unique.
pub fn se3_log(pose: &SE3Pose) -> Result<Twist, GeometryError> {
    let theta = pose.rotation.angle();
    if theta >= std::f64::consts::PI - 1e-9 {
        return Err(GeometryError::AmbiguousLog);
    }
    let omega = pose
        .rotation
        .axis()
        .map(|axis| axis.into_inner() * theta)
        .unwrap_or_else(Vector3::zeros);
    let w = skew(&omega);
    let w2 = w * w;
    let v_inv = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        Matrix3::identity() - w * 0.5 + w2 * (1.0 / 12.0 + t2 / 720.0)
    } else {
        // V^-1 = I - w/2 + (1/theta^2 - (1 + cos) / (2 theta sin)) w^2
        let coef = 1.0 / (theta * theta)
            - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
        Matrix3::identity() - w * 0.5 + w2 * coef
    };
    Ok(Twist { rho: v_inv * pose.translation, omega })
}

/// Lifts a pixel with measured depth to a 3D point in the camera frame.
pub fn backproject(p: ImagePoint, depth: f64, k: &Intrinsics) -> Result<Point3, GeometryError> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(GeometryError::InvalidDepth(depth));
    }
    Ok(Point3::new(
        (p.u - k.cu) * depth / k.f,
        (p.v - k.cv) * depth / k.f,
        depth,
    ))
}

/// Projects a camera-frame 3D point onto the image plane.
pub fn project(m: &Point3, k: &Intrinsics) -> Result<ImagePoint, GeometryError> {
    if m.z <= 0.0 || !m.z.is_finite() {
        return Err(GeometryError::BehindCamera(m.z));
    }
    Ok(ImagePoint::new(k.f * m.x / m.z + k.cu, k.f * m.y / m.z + k.cv))
}

/// Predicted pixel of a static point observed at k-1 after the camera moved
/// by `camera_motion`: project(T^-1 * m).
pub fn predict_static_point(
    m_prev: &Point3,
    camera_motion: &SE3Pose,
    k: &Intrinsics,
) -> Result<ImagePoint, GeometryError> {
    project(&camera_motion.inverse().apply(m_prev), k)
}

/// Predicted pixel of an object point under the camera-relative object
/// motion `X` (the camera inverse is already folded into X): project(X * m).
pub fn predict_object_point(
    m_prev: &Point3,
    x: &SE3Pose,
    k: &Intrinsics,
) -> Result<ImagePoint, GeometryError> {
    project(&x.apply(m_prev), k)
}

/// Recovers the object motion in the k-1 camera frame from the camera
/// motion and the estimated camera-relative motion: H = T * X.
pub fn recover_object_motion(camera_motion: &SE3Pose, x: &SE3Pose) -> SE3Pose {
    *camera_motion * *x
}

/// Conjugates a body-fixed object motion into the global frame:
/// H_global = L * H_body * L^-1, with L the object pose at k-1.
pub fn object_motion_global(pose_prev: &SE3Pose, motion_body: &SE3Pose) -> SE3Pose {
    *pose_prev * *motion_body * pose_prev.inverse()
}
