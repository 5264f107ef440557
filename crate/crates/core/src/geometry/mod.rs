//! SE(3) pose algebra and the pinhole camera model.
//!
//! Poses are stored as an explicit 3x3 rotation matrix plus a translation
//! vector. A pose maps points from its own frame into its parent frame, so a
//! keyframe pose is world-from-camera: `p_world = R * p_camera + t`. All
//! relative transforms and residuals in the crate are derived from that one
//! convention.
//!
//! Tangent-space elements ([`Twist`]) order their six components as
//! `(rho, phi)`: linear part first, angular part second.

mod io;

pub(crate) use io::{quaternion_to_rotation, rotation_to_quaternion};

pub use io::{
    load_intrinsics, load_trajectory, read_intrinsics, read_trajectory, save_intrinsics,
    save_trajectory, write_intrinsics, write_trajectory, Trajectory,
};

use nalgebra::{Matrix3, Vector3, Vector6};

use crate::scalar::{s, Scalar};
use crate::ErrorCategory;

/// Rotation-matrix drift (max abs entry of `R^T R - I`) beyond which a
/// composed rotation is re-orthonormalized.
pub const ROTATION_DRIFT_LIMIT: f64 = 1e-12;

/// Rotation angles within this margin of pi are rejected by [`se3_log`]: the
/// principal branch is numerically unstable there and the axis sign is
/// ambiguous at exactly pi.
pub const ANGLE_NEAR_PI_MARGIN: f64 = 1e-6;

/// Points with camera-frame depth at or below this value never project.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("rotation angle within {ANGLE_NEAR_PI_MARGIN} of pi, principal log branch rejected")]
    AngleNearPi,
    #[error("depth must be positive, got {depth}")]
    NonPositiveDepth { depth: f64 },
    #[error("invalid intrinsics: {detail}")]
    InvalidIntrinsics { detail: String },
    #[error("{source_name}:{line}: {reason}")]
    Parse {
        source_name: String,
        line: usize,
        reason: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl GeometryError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            GeometryError::AngleNearPi => ErrorCategory::Numeric,
            GeometryError::NonPositiveDepth { .. } | GeometryError::InvalidIntrinsics { .. } => {
                ErrorCategory::Validation
            }
            GeometryError::Parse { .. } | GeometryError::Io(_) => ErrorCategory::Io,
        }
    }
}

/// Rigid transform in SE(3).
#[derive(Debug, Clone, PartialEq)]
pub struct Pose<T: Scalar> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Scalar> Pose<T> {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// Rotation about the x axis by `angle` radians.
    pub fn rot_x(angle: T) -> Self {
        Pose::from_axis_angle(&Vector3::x(), angle)
    }

    /// Rotation about the y axis by `angle` radians.
    pub fn rot_y(angle: T) -> Self {
        Pose::from_axis_angle(&Vector3::y(), angle)
    }

    /// Rotation about the z axis by `angle` radians.
    pub fn rot_z(angle: T) -> Self {
        Pose::from_axis_angle(&Vector3::z(), angle)
    }

    /// Pure rotation about an axis (need not be unit length; zero axis gives
    /// the identity).
    pub fn from_axis_angle(axis: &Vector3<T>, angle: T) -> Self {
        let n = axis.norm();
        let phi = if n > T::zero() {
            axis * (angle / n)
        } else {
            Vector3::zeros()
        };
        se3_exp(&Twist {
            rho: Vector3::zeros(),
            phi,
        })
    }

    /// `self` then `rhs`, i.e. the transform applying `rhs` first:
    /// `(a.compose(b)).apply(p) == a.apply(b.apply(p))`.
    ///
    /// Re-orthonormalizes the rotation when accumulated drift exceeds
    /// [`ROTATION_DRIFT_LIMIT`] (widened for `f32`).
    pub fn compose(&self, rhs: &Pose<T>) -> Pose<T> {
        let rotation = self.rotation * rhs.rotation;
        let translation = self.rotation * rhs.translation + self.translation;
        let mut out = Pose {
            rotation,
            translation,
        };
        if out.rotation_drift() > drift_limit::<T>() {
            out.rotation = orthonormalize(&out.rotation);
        }
        out
    }

    pub fn inverse(&self) -> Pose<T> {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Maps a point from this pose's frame into its parent frame.
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// Max abs entry of `R^T R - I`.
    pub fn rotation_drift(&self) -> T {
        let d = self.rotation.transpose() * self.rotation - Matrix3::identity();
        d.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }
}

fn drift_limit<T: Scalar>() -> T {
    s::<T>(ROTATION_DRIFT_LIMIT).max(T::machine_epsilon() * s(16.0))
}

/// Nearest rotation matrix in the Frobenius sense, via SVD with a determinant
/// sign fix.
fn orthonormalize<T: Scalar>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("3x3 svd produces u");
    let v_t = svd.v_t.expect("3x3 svd produces v_t");
    let r = u * v_t;
    if r.determinant() < T::zero() {
        let mut u_fixed = u;
        let flipped = -u_fixed.column(2);
        u_fixed.set_column(2, &flipped);
        u_fixed * v_t
    } else {
        r
    }
}

/// se(3) tangent element: linear part `rho`, angular part `phi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist<T: Scalar> {
    pub rho: Vector3<T>,
    pub phi: Vector3<T>,
}

impl<T: Scalar> Twist<T> {
    pub fn zero() -> Self {
        Twist {
            rho: Vector3::zeros(),
            phi: Vector3::zeros(),
        }
    }

    pub fn from_vector(v: &Vector6<T>) -> Self {
        Twist {
            rho: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn as_vector(&self) -> Vector6<T> {
        Vector6::new(
            self.rho[0], self.rho[1], self.rho[2], self.phi[0], self.phi[1], self.phi[2],
        )
    }
}

/// Skew-symmetric matrix such that `hat(a) * b == a x b`.
pub fn hat<T: Scalar>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v[2],
        v[1],
        v[2],
        T::zero(),
        -v[0],
        -v[1],
        v[0],
        T::zero(),
    )
}

/// Inverse of [`hat`] on skew-symmetric matrices.
pub fn vee<T: Scalar>(m: &Matrix3<T>) -> Vector3<T> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Angles below this use truncated series for the exp/log coefficient
/// functions; above it the closed forms are free of cancellation.
fn small_angle_threshold<T: Scalar>() -> T {
    T::machine_epsilon().sqrt().sqrt()
}

/// Exponential map se(3) -> SE(3) (Rodrigues rotation plus the V matrix for
/// the translation part). Series expansions take over below the small-angle
/// threshold.
pub fn se3_exp<T: Scalar>(xi: &Twist<T>) -> Pose<T> {
    let theta_sq = xi.phi.norm_squared();
    let theta = theta_sq.sqrt();
    let k = hat(&xi.phi);
    let k2 = k * k;
    let (a, b, c) = if theta < small_angle_threshold::<T>() {
        let t4 = theta_sq * theta_sq;
        (
            T::one() - theta_sq / s(6.0) + t4 / s(120.0),
            s::<T>(0.5) - theta_sq / s(24.0) + t4 / s(720.0),
            s::<T>(1.0 / 6.0) - theta_sq / s(120.0) + t4 / s(5040.0),
        )
    } else {
        (
            theta.sin() / theta,
            (T::one() - theta.cos()) / theta_sq,
            (theta - theta.sin()) / (theta_sq * theta),
        )
    };
    let rotation = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    Pose {
        rotation,
        translation: v * xi.rho,
    }
}

/// Principal-branch logarithm SE(3) -> se(3).
///
/// Rejects rotations within [`ANGLE_NEAR_PI_MARGIN`] of a half turn instead
/// of silently returning an axis of arbitrary sign.
pub fn se3_log<T: Scalar>(pose: &Pose<T>) -> Result<Twist<T>, GeometryError> {
    let cos_theta = ((pose.rotation.trace() - T::one()) * s(0.5)).clamp(-T::one(), T::one());
    let theta = cos_theta.acos();
    if T::pi() - theta < s(ANGLE_NEAR_PI_MARGIN) {
        return Err(GeometryError::AngleNearPi);
    }
    let theta_sq = theta * theta;
    // w = sin(theta) * axis
    let w = vee(&(pose.rotation - pose.rotation.transpose())) * s::<T>(0.5);
    let small = theta < small_angle_threshold::<T>();
    let phi = if small {
        w * (T::one() + theta_sq / s(6.0) + theta_sq * theta_sq * s(7.0 / 360.0))
    } else {
        w * (theta / theta.sin())
    };
    let k = hat(&phi);
    let k2 = k * k;
    let d = if small {
        s::<T>(1.0 / 12.0) + theta_sq / s(720.0)
    } else {
        let a = theta.sin() / theta;
        let b = (T::one() - theta.cos()) / theta_sq;
        (T::one() - a / (b * s(2.0))) / theta_sq
    };
    let v_inv = Matrix3::identity() - k * s::<T>(0.5) + k2 * d;
    Ok(Twist {
        rho: v_inv * pose.translation,
        phi,
    })
}

/// Result of projecting a camera-frame point through the pinhole model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection<T: Scalar> {
    /// Continuous pixel coordinates plus the camera-frame depth.
    Inside { u: T, v: T, depth: T },
    /// Behind the camera, too close, or outside the pixel grid.
    OutOfView,
}

impl<T: Scalar> Projection<T> {
    pub fn inside(self) -> Option<(T, T, T)> {
        match self {
            Projection::Inside { u, v, depth } => Some((u, v, depth)),
            Projection::OutOfView => None,
        }
    }

    pub fn is_inside(&self) -> bool {
        matches!(self, Projection::Inside { .. })
    }
}

/// Pinhole camera: focal lengths, principal point, and pixel grid size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<T: Scalar> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Scalar> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: u32, height: u32) -> Result<Self, GeometryError> {
        let bad = |detail: String| GeometryError::InvalidIntrinsics { detail };
        if width == 0 || height == 0 {
            return Err(bad(format!("image size {width}x{height} must be nonzero")));
        }
        if !(fx > T::zero() && fy > T::zero() && fx.is_finite() && fy.is_finite()) {
            return Err(bad(format!(
                "focal lengths must be positive and finite, got fx={fx} fy={fy}"
            )));
        }
        if !(cx >= T::zero() && cx < s(width as f64) && cy >= T::zero() && cy < s(height as f64)) {
            return Err(bad(format!(
                "principal point ({cx}, {cy}) must lie inside the {width}x{height} grid"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Pixel containment: the integer cell `floor(u), floor(v)` must lie on
    /// the grid. Equivalently `u` is in `[0, width)` and `v` in `[0, height)`.
    pub fn contains(&self, u: T, v: T) -> bool {
        let col = u.floor();
        let row = v.floor();
        col >= T::zero()
            && col <= s(self.width as f64 - 1.0)
            && row >= T::zero()
            && row <= s(self.height as f64 - 1.0)
    }

    /// Projects a camera-frame point. Depth at or below
    /// [`MIN_PROJECTION_DEPTH`] and off-grid pixels both give
    /// [`Projection::OutOfView`].
    pub fn project(&self, p: &Vector3<T>) -> Projection<T> {
        let z = p[2];
        if z <= s(MIN_PROJECTION_DEPTH) {
            return Projection::OutOfView;
        }
        let u = self.fx * p[0] / z + self.cx;
        let v = self.fy * p[1] / z + self.cy;
        if self.contains(u, v) {
            Projection::Inside { u, v, depth: z }
        } else {
            Projection::OutOfView
        }
    }

    /// Lifts pixel `(u, v)` at depth `z` back to a camera-frame point.
    pub fn backproject(&self, u: T, v: T, z: T) -> Result<Vector3<T>, GeometryError> {
        if z <= T::zero() {
            return Err(GeometryError::NonPositiveDepth {
                depth: z.to_f64_lossy(),
            });
        }
        let x = (u - self.cx) * z / self.fx;
        let y = (v - self.cy) * z / self.fy;
        Ok(Vector3::new(x, y, z))
    }
}
