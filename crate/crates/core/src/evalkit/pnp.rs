//! PnP with RANSAC over the P3P solver, optional LM refinement on inliers,
//! and the relative pose error metric.

use nalgebra::{Vector2, Vector3};
use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::p3p::p3p;
use super::PnPError;
use crate::backend::{optimize, BAConfig, BAProblem, Observation};
use crate::geometry::{rotation_angle_deg, DepthBounds, Intrinsics, Pose, RobustLoss, BEHIND_CAMERA_EPS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// 3D point in the reference frame.
    pub point: Vector3<f64>,
    /// Observed pixel in the query image.
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnPConfig {
    pub iterations: usize,
    /// Inlier reprojection threshold in pixels.
    pub threshold: f64,
    pub confidence: f64,
    pub refine: bool,
    pub seed: u64,
}

impl Default for PnPConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            threshold: 8.0,
            confidence: 0.99,
            refine: true,
            seed: 0,
        }
    }
}

impl PnPConfig {
    pub fn validate(&self) -> Result<(), PnPError> {
        if self.iterations == 0 || !(self.threshold > 0.0) || !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(PnPError::Config(format!(
                "iterations {}, threshold {}, confidence {}",
                self.iterations, self.threshold, self.confidence
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnPResult {
    /// Maps reference-frame points into the query camera.
    pub pose: Pose,
    /// Sorted indices of the inlier correspondences.
    pub inliers: Vec<usize>,
    /// Hypotheses evaluated before stopping.
    pub iterations: usize,
}

/// Rotation and translation discrepancy between two poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    pub rot_deg: f64,
    pub trans: f64,
}

/// Error of `estimated` against `ground_truth` through `gt⁻¹ ∘ est`: the
/// rotation angle of the relative transform and the norm of its translation,
/// which equals `|t_est - t_gt|`.
pub fn relative_pose_error(estimated: &Pose, ground_truth: &Pose) -> PoseError {
    let delta = ground_truth.inverse().compose(estimated);
    PoseError {
        rot_deg: rotation_angle_deg(ground_truth.rotation(), estimated.rotation()),
        trans: delta.translation().norm(),
    }
}

fn inliers_of(pose: &Pose, data: &[Correspondence], k: &Intrinsics, threshold: f64) -> Vec<usize> {
    let t2 = threshold * threshold;
    data.iter()
        .enumerate()
        .filter(|(_, c)| {
            let pc = pose.transform(&c.point);
            if pc.z <= BEHIND_CAMERA_EPS {
                return false;
            }
            let u = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
            (u - c.pixel).norm_squared() <= t2
        })
        .map(|(i, _)| i)
        .collect()
}

/// Iterations needed to draw one all-inlier triple with `confidence`, given
/// the inlier ratio `w`.
fn adaptive_iterations(w: f64, confidence: f64, cap: usize) -> usize {
    let p = w.powi(3);
    if p >= 1.0 {
        return 1;
    }
    if p <= 0.0 {
        return cap;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - p).ln()).ceil();
    if n.is_finite() && n >= 1.0 {
        (n as usize).min(cap)
    } else {
        cap
    }
}

/// Pose-only LM on the inliers with plain least squares.
fn refine(pose: &Pose, data: &[Correspondence], inliers: &[usize], k: &Intrinsics) -> Option<Pose> {
    let mut problem = BAProblem::new(*k);
    problem.fix_first_pose = false;
    problem.fix_points = true;
    problem.add_pose(0, *pose);
    for (j, &i) in inliers.iter().enumerate() {
        problem.points.insert(j, data[i].point);
        problem.observations[0].push(Observation {
            track_id: j,
            pixel: data[i].pixel,
            weight: 1.0,
        });
    }
    let config = BAConfig {
        robust_loss: RobustLoss::trivial(),
        depth_bounds: DepthBounds::new(1e-6, f64::INFINITY).expect("valid bounds"),
        ..BAConfig::default()
    };
    optimize(&mut problem, &config).ok()?;
    let refined = problem.poses[0];
    refined.is_finite().then_some(refined)
}

/// RANSAC over P3P hypotheses scored on every correspondence; seeded from
/// `config.seed`.
pub fn pnp_ransac(data: &[Correspondence], k: &Intrinsics, config: &PnPConfig) -> Result<PnPResult, PnPError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    pnp_ransac_with_rng(data, k, config, &mut rng)
}

/// As [`pnp_ransac`] with a caller-provided generator (the seed in `config`
/// is unused).
pub fn pnp_ransac_with_rng<R: RngCore>(
    data: &[Correspondence],
    k: &Intrinsics,
    config: &PnPConfig,
    rng: &mut R,
) -> Result<PnPResult, PnPError> {
    config.validate()?;
    if data.len() < 4 {
        return Err(PnPError::TooFewCorrespondences(data.len()));
    }
    let mut best: Option<(Pose, Vec<usize>)> = None;
    let mut budget = config.iterations;
    let mut iterations = 0;
    while iterations < budget {
        iterations += 1;
        let idx = sample(rng, data.len(), 3);
        let world = [data[idx.index(0)].point, data[idx.index(1)].point, data[idx.index(2)].point];
        let pixels = [data[idx.index(0)].pixel, data[idx.index(1)].pixel, data[idx.index(2)].pixel];
        let Ok(candidates) = p3p(&world, &pixels, k) else {
            continue;
        };
        for pose in candidates {
            let inliers = inliers_of(&pose, data, k, config.threshold);
            if best.as_ref().is_none_or(|(_, b)| inliers.len() > b.len()) {
                let w = inliers.len() as f64 / data.len() as f64;
                budget = adaptive_iterations(w, config.confidence, config.iterations);
                best = Some((pose, inliers));
            }
        }
    }
    let (mut pose, mut inliers) = match best {
        Some((p, i)) if i.len() >= 4 => (p, i),
        Some((_, i)) => return Err(PnPError::NoModel(i.len())),
        None => return Err(PnPError::NoModel(0)),
    };
    if config.refine {
        if let Some(refined) = refine(&pose, data, &inliers, k) {
            let refined_inliers = inliers_of(&refined, data, k, config.threshold);
            if refined_inliers.len() >= inliers.len() {
                pose = refined;
                inliers = refined_inliers;
            }
        }
    }
    Ok(PnPResult {
        pose,
        inliers,
        iterations,
    })
}
