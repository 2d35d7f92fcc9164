//! Pinhole camera model, rigid poses, and the scalar terms of the bundle
//! adjustment cost.
//!
//! Poses are stored world-to-camera: a world point `X` maps to the camera
//! frame as `R * X + t`. Trajectory files use the camera-to-world form; the
//! conversion lives in [`Pose::to_camera_to_world`] and
//! [`Pose::from_camera_to_world`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Camera-frame depth at or below which a point counts as behind the camera.
pub const BEHIND_CAMERA_EPS: f64 = 1e-9;

/// Tolerance used to validate rotation matrices.
const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with det +1 (error {0:e})")]
    InvalidRotation(f64),
    #[error("invalid depth bounds: d_min {d_min}, d_max {d_max}")]
    InvalidDepthBounds { d_min: f64, d_max: f64 },
    #[error("robust loss scale must be positive, got {0}")]
    InvalidRobustScale(f64),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Fixed pinhole intrinsics shared by every frame of a sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx {}, fy {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx {} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy {} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Normalized image coordinates `(x, y, 1)` of a pixel.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    /// Whether a pixel lies in `[0, width) x [0, height)`.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        text.parse()
    }
}

impl FromStr for Intrinsics {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let line = s
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty() && !l.starts_with('#'))
            .ok_or_else(|| GeometryError::InvalidIntrinsics("empty intrinsics file".into()))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "expected `fx fy cx cy width height`, got {} fields",
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64, GeometryError> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| GeometryError::InvalidIntrinsics(format!("bad number `{}`", fields[i])))
        };
        let dim = |i: usize| -> Result<u32, GeometryError> {
            fields[i]
                .parse::<u32>()
                .map_err(|_| GeometryError::InvalidIntrinsics(format!("bad size `{}`", fields[i])))
        };
        Intrinsics::new(num(0)?, num(1)?, num(2)?, num(3)?, dim(4)?, dim(5)?)
    }
}

impl fmt::Display for Intrinsics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {}",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from a rotation matrix, checking `RᵀR = I` and `det R = 1`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let err = rotation_error(&rotation);
        if !(err <= ROTATION_TOL) || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidRotation(err));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_rotation(rotation: &Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Maps a world point into the camera frame.
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Left-multiplicative exponential-map update `exp(xi) ∘ self`, with
    /// `xi = (v, ω)` ordered translation first.
    pub fn retract(&self, xi: &Vector6<f64>) -> Self {
        let (dr, dt) = se3_exp(xi);
        let rotation = orthonormalize(&(dr * self.rotation));
        Self {
            rotation,
            translation: dr * self.translation + dt,
        }
    }

    /// Camera-to-world rotation (as a unit quaternion) and camera center.
    pub fn to_camera_to_world(&self) -> (UnitQuaternion<f64>, Vector3<f64>) {
        let rot = Rotation3::from_matrix_unchecked(self.rotation.transpose());
        (UnitQuaternion::from_rotation_matrix(&rot), self.camera_center())
    }

    pub fn from_camera_to_world(q: &UnitQuaternion<f64>, center: &Vector3<f64>) -> Self {
        let rwc = *q.to_rotation_matrix().matrix();
        let rotation = rwc.transpose();
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }
}

/// Max-abs deviation of `RᵀR` from identity combined with `|det R - 1|`.
pub fn rotation_error(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    ortho.max((r.determinant() - 1.0).abs())
}

fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let x = r.column(0).normalize();
    let y = (r.column(1) - x * x.dot(&r.column(1))).normalize();
    let z = x.cross(&y);
    Matrix3::from_columns(&[x, y, z])
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SE(3) exponential of `(v, ω)`; returns `(R, t)`.
pub fn se3_exp(xi: &Vector6<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let v = Vector3::new(xi[0], xi[1], xi[2]);
    let w = Vector3::new(xi[3], xi[4], xi[5]);
    let theta_sq = w.norm_squared();
    let theta = theta_sq.sqrt();
    let wx = skew(&w);
    let wx2 = wx * wx;
    // Series forms below 1e-4 rad keep both coefficients accurate to machine precision.
    let (a, b, c) = if theta < 1e-4 {
        (
            1.0 - theta_sq / 6.0,
            0.5 - theta_sq / 24.0,
            1.0 / 6.0 - theta_sq / 120.0,
        )
    } else {
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / theta_sq,
            (theta - theta.sin()) / (theta_sq * theta),
        )
    };
    let rot = Matrix3::identity() + wx * a + wx2 * b;
    let jac = Matrix3::identity() + wx * b + wx2 * c;
    (rot, jac * v)
}

/// Relative rotation angle between two rotations, in degrees within `[0, 180]`.
pub fn rotation_angle_deg(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let r = ra.transpose() * rb;
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let sin = 0.5
        * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    sin.atan2(cos).to_degrees()
}

/// A projected pixel together with its camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

pub fn project(k: &Intrinsics, pose: &Pose, x: &Vector3<f64>) -> Result<Projection, GeometryError> {
    let pc = pose.transform(x);
    if !(pc.z > BEHIND_CAMERA_EPS) {
        return Err(GeometryError::BehindCamera { depth: pc.z });
    }
    Ok(Projection {
        pixel: Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy),
        depth: pc.z,
    })
}

/// Squared pixel distance between the projection of `x` and the observation `u`.
pub fn reprojection_error_sq(
    k: &Intrinsics,
    pose: &Pose,
    x: &Vector3<f64>,
    u: &Vector2<f64>,
) -> Result<f64, GeometryError> {
    let p = project(k, pose, x)?;
    Ok((p.pixel - u).norm_squared())
}

/// Admissible camera-frame depth range for the quadratic depth penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBounds {
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for DepthBounds {
    fn default() -> Self {
        Self {
            d_min: 0.1,
            d_max: 5.0,
        }
    }
}

impl DepthBounds {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self, GeometryError> {
        if !(d_min > 0.0 && d_min < d_max) {
            return Err(GeometryError::InvalidDepthBounds { d_min, d_max });
        }
        Ok(Self { d_min, d_max })
    }

    /// Signed residual whose square is the penalty, and its derivative.
    pub fn residual(&self, z: f64) -> (f64, f64) {
        if z > self.d_max {
            (z - self.d_max, 1.0)
        } else if z < self.d_min {
            (z - self.d_min, 1.0)
        } else {
            (0.0, 0.0)
        }
    }
}

/// Penalty `max(0, z - d_max)² + min(z - d_min, 0)²` and its derivative in `z`.
pub fn depth_regularizer(z: f64, bounds: &DepthBounds) -> (f64, f64) {
    let hi = (z - bounds.d_max).max(0.0);
    let lo = (z - bounds.d_min).min(0.0);
    (hi * hi + lo * lo, 2.0 * hi + 2.0 * lo)
}

/// Huber loss on a squared-error argument.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustLoss {
    pub delta: f64,
}

impl Default for RobustLoss {
    fn default() -> Self {
        Self { delta: 2.0 }
    }
}

impl RobustLoss {
    pub fn new(delta: f64) -> Result<Self, GeometryError> {
        if !(delta > 0.0) {
            return Err(GeometryError::InvalidRobustScale(delta));
        }
        Ok(Self { delta })
    }

    /// Plain least squares (`delta = ∞`).
    pub fn trivial() -> Self {
        Self {
            delta: f64::INFINITY,
        }
    }

    /// `(ρ(s), ρ'(s))` for `s ≥ 0`.
    pub fn evaluate(&self, s: f64) -> (f64, f64) {
        let d2 = self.delta * self.delta;
        if s <= d2 {
            (s, 1.0)
        } else {
            let r = s.sqrt();
            (2.0 * self.delta * r - d2, self.delta / r)
        }
    }
}
