use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix3x6, RowVector6, Vector2, Vector3};

use super::BAError;
use crate::geometry::{
    skew, DepthBounds, Intrinsics, Pose, RobustLoss, BEHIND_CAMERA_EPS,
};

/// One 2D measurement of a map point in a window frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub track_id: usize,
    pub pixel: Vector2<f64>,
    /// Confidence weight in `[0, 1]`.
    pub weight: f64,
}

/// Stiffness of the scale anchor residual, in pixel-equivalent units per
/// unit of relative length change.
pub const SCALE_ANCHOR_WEIGHT: f64 = 1e3;

/// Holds the distance between the camera centres of window pose 0 and `pose`
/// near `length`. Fixing one pose leaves the overall scale free; the anchor
/// removes that direction. Requires a fixed first pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleAnchor {
    pub pose: usize,
    pub length: f64,
}

impl ScaleAnchor {
    /// Residual `W (|c_k - c_0| / L - 1)` and its gradient with respect to a
    /// left update of pose `k`.
    pub fn linearize(&self, first: &Pose, anchored: &Pose) -> (f64, RowVector6<f64>) {
        let d = anchored.camera_center() - first.camera_center();
        let dist = d.norm();
        let s = SCALE_ANCHOR_WEIGHT / self.length;
        let mut jac = RowVector6::zeros();
        if dist > 0.0 {
            // the camera centre moves by -R^T v under a left update
            let u = d / dist;
            jac.fixed_columns_mut::<3>(0)
                .copy_from(&(-s * u.transpose() * anchored.rotation().transpose()));
        }
        (s * dist - SCALE_ANCHOR_WEIGHT, jac)
    }

    pub fn cost(&self, first: &Pose, anchored: &Pose) -> f64 {
        let dist = (anchored.camera_center() - first.camera_center()).norm();
        let r = SCALE_ANCHOR_WEIGHT * (dist / self.length - 1.0);
        r * r
    }
}

/// Window state for bundle adjustment. Poses are world-to-camera.
#[derive(Debug, Clone, PartialEq)]
pub struct BAProblem {
    pub intrinsics: Intrinsics,
    /// Frame index of each window pose.
    pub frames: Vec<usize>,
    pub poses: Vec<Pose>,
    /// Map points keyed by track id.
    pub points: BTreeMap<usize, Vector3<f64>>,
    /// Observations made from each window pose.
    pub observations: Vec<Vec<Observation>>,
    /// Hold the first window pose constant (gauge).
    pub fix_first_pose: bool,
    /// Hold every point constant (pose-only refinement).
    pub fix_points: bool,
    pub scale_anchor: Option<ScaleAnchor>,
}

impl BAProblem {
    pub fn new(intrinsics: Intrinsics) -> Self {
        Self {
            intrinsics,
            frames: Vec::new(),
            poses: Vec::new(),
            points: BTreeMap::new(),
            observations: Vec::new(),
            fix_first_pose: true,
            fix_points: false,
            scale_anchor: None,
        }
    }

    pub fn add_pose(&mut self, frame: usize, pose: Pose) -> usize {
        self.frames.push(frame);
        self.poses.push(pose);
        self.observations.push(Vec::new());
        self.poses.len() - 1
    }

    pub fn pose_index(&self, frame: usize) -> Option<usize> {
        self.frames.iter().position(|&f| f == frame)
    }

    pub fn num_observations(&self) -> usize {
        self.observations.iter().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<(), BAError> {
        if self.poses.len() != self.frames.len() || self.poses.len() != self.observations.len() {
            return Err(BAError::Invalid("pose, frame and observation lists differ in length".into()));
        }
        if let Some(a) = self.scale_anchor {
            if !self.fix_first_pose || a.pose == 0 || a.pose >= self.poses.len() || !(a.length > 0.0 && a.length.is_finite()) {
                return Err(BAError::Invalid(format!("invalid scale anchor {a:?}")));
            }
        }
        for (i, obs) in self.observations.iter().enumerate() {
            for o in obs {
                if !self.points.contains_key(&o.track_id) {
                    return Err(BAError::Invalid(format!(
                        "observation in pose {i} refers to missing point {}",
                        o.track_id
                    )));
                }
                if !(0.0..=1.0).contains(&o.weight) {
                    return Err(BAError::Invalid(format!(
                        "observation weight {} outside [0, 1]",
                        o.weight
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Solver settings.
#[derive(Debug, Clone, PartialEq)]
pub struct BAConfig {
    /// Number of most recent poses kept in the window.
    pub n_last: usize,
    pub max_iterations: usize,
    pub depth_bounds: DepthBounds,
    pub robust_loss: RobustLoss,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub relative_cost_tolerance: f64,
    /// Stop once the max-norm of the gradient falls below this value.
    pub gradient_tolerance: f64,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Whether VO anchors the window scale (see [`ScaleAnchor`]).
    pub anchor_scale: bool,
}

impl Default for BAConfig {
    fn default() -> Self {
        Self {
            n_last: 30,
            max_iterations: 100,
            depth_bounds: DepthBounds::default(),
            robust_loss: RobustLoss::default(),
            relative_cost_tolerance: 1e-8,
            gradient_tolerance: 1e-10,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 0.1,
            anchor_scale: true,
        }
    }
}

impl BAConfig {
    pub fn validate(&self) -> Result<(), BAError> {
        let positive = [
            self.relative_cost_tolerance,
            self.gradient_tolerance,
            self.initial_damping,
            self.damping_up,
            self.damping_down,
            self.robust_loss.delta,
        ];
        if self.n_last < 2 || self.max_iterations == 0 || positive.iter().any(|v| !(*v > 0.0)) {
            return Err(BAError::Invalid(format!("invalid solver config {self:?}")));
        }
        if !(self.depth_bounds.d_min > 0.0 && self.depth_bounds.d_min < self.depth_bounds.d_max) {
            return Err(BAError::Invalid("invalid depth bounds".into()));
        }
        Ok(())
    }
}

/// Stacked residual `(Δu, Δv, r_d)` of one observation and its Jacobians.
///
/// `Δ` is predicted minus observed pixel, and `r_d² = d(Z')`. The pose
/// Jacobian is taken with respect to a left update `exp(ξ) ∘ pose`,
/// `ξ = (v, ω)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualBlock {
    pub residual: Vector3<f64>,
    pub jac_pose: Matrix3x6<f64>,
    pub jac_point: Matrix3<f64>,
    /// True camera-frame depth.
    pub depth: f64,
}

impl ResidualBlock {
    /// Squared reprojection error `e²`, excluding the depth term.
    pub fn reprojection_sq(&self) -> f64 {
        self.residual.x * self.residual.x + self.residual.y * self.residual.y
    }

    /// Argument of the robust loss, `e² + d(Z')`.
    pub fn squared_norm(&self) -> f64 {
        self.residual.norm_squared()
    }
}

/// Residual without Jacobians. The projection uses the depth clamped to
/// [`BEHIND_CAMERA_EPS`], the depth penalty the true depth.
pub fn residual(
    k: &Intrinsics,
    pose: &Pose,
    x: &Vector3<f64>,
    u: &Vector2<f64>,
    bounds: &DepthBounds,
) -> Vector3<f64> {
    let pc = pose.transform(x);
    let z = pc.z.max(BEHIND_CAMERA_EPS);
    Vector3::new(
        k.fx * pc.x / z + k.cx - u.x,
        k.fy * pc.y / z + k.cy - u.y,
        bounds.residual(pc.z).0,
    )
}

pub fn linearize(
    k: &Intrinsics,
    pose: &Pose,
    x: &Vector3<f64>,
    u: &Vector2<f64>,
    bounds: &DepthBounds,
) -> ResidualBlock {
    let pc = pose.transform(x);
    let clamped = pc.z <= BEHIND_CAMERA_EPS;
    let z = if clamped { BEHIND_CAMERA_EPS } else { pc.z };
    let inv_z = 1.0 / z;
    let (rd, drd) = bounds.residual(pc.z);
    let residual = Vector3::new(
        k.fx * pc.x * inv_z + k.cx - u.x,
        k.fy * pc.y * inv_z + k.cy - u.y,
        rd,
    );
    let (dz_u, dz_v) = if clamped {
        (0.0, 0.0)
    } else {
        (-k.fx * pc.x * inv_z * inv_z, -k.fy * pc.y * inv_z * inv_z)
    };
    #[rustfmt::skip]
    let d_res_d_pc = Matrix3::new(
        k.fx * inv_z, 0.0,          dz_u,
        0.0,          k.fy * inv_z, dz_v,
        0.0,          0.0,          drd,
    );
    let mut d_pc_d_xi = Matrix3x6::zeros();
    d_pc_d_xi.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    d_pc_d_xi.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&pc)));
    ResidualBlock {
        residual,
        jac_pose: d_res_d_pc * d_pc_d_xi,
        jac_point: d_res_d_pc * pose.rotation(),
        depth: pc.z,
    }
}

/// Weighted robust cost `w ρ(e² + d(Z'))` of a single observation.
pub fn observation_cost(
    k: &Intrinsics,
    pose: &Pose,
    x: &Vector3<f64>,
    obs: &Observation,
    config: &BAConfig,
) -> f64 {
    if obs.weight == 0.0 {
        return 0.0;
    }
    let r = residual(k, pose, x, &obs.pixel, &config.depth_bounds);
    obs.weight * config.robust_loss.evaluate(r.norm_squared()).0
}

/// Total cost: sum over window poses and their observations of
/// `w ρ(e² + d(Z'))`, plus the scale anchor term when one is set.
pub fn objective(problem: &BAProblem, config: &BAConfig) -> f64 {
    let k = &problem.intrinsics;
    let mut total = problem
        .scale_anchor
        .map_or(0.0, |a| a.cost(&problem.poses[0], &problem.poses[a.pose]));
    for (pose, obs) in problem.poses.iter().zip(&problem.observations) {
        for o in obs {
            let x = &problem.points[&o.track_id];
            total += observation_cost(k, pose, x, o, config);
        }
    }
    total
}
