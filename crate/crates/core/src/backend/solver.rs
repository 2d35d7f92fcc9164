//! Levenberg-Marquardt over poses and points, with the point blocks
//! eliminated through the Schur complement before each camera solve.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Matrix6x3, Vector2, Vector3, Vector6};

use super::problem::{linearize, observation_cost, BAConfig, BAProblem, Observation};
use super::BAError;
use crate::geometry::Pose;

/// Diagonal floor for Marquardt scaling.
const MIN_DIAGONAL: f64 = 1e-6;
/// Damping above which a step is considered impossible.
const MAX_DAMPING: f64 = 1e16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// An accepted step lowered the cost by less than the relative tolerance.
    CostConverged,
    GradientConverged,
    MaxIterations,
    /// No step could lower the cost, even at maximum damping.
    NoProgress,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    /// Linear solves performed (accepted and rejected steps).
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub termination: Termination,
}

struct FlatObservation {
    pose: usize,
    camera: Option<usize>,
    point: usize,
    point_free: bool,
    pixel: Vector2<f64>,
    weight: f64,
}

/// Variables of one solve, decoupled from the track-id keyed problem.
#[derive(Clone)]
struct State {
    poses: Vec<Pose>,
    points: Vec<Vector3<f64>>,
}

struct Layout {
    observations: Vec<FlatObservation>,
    /// Pose index of each optimized camera.
    cameras: Vec<usize>,
    /// Whether each point is optimized.
    free_points: Vec<bool>,
    track_ids: Vec<usize>,
}

impl Layout {
    fn new(problem: &BAProblem) -> Self {
        let track_ids: Vec<usize> = problem.points.keys().copied().collect();
        let point_index: BTreeMap<usize, usize> =
            track_ids.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let mut cameras = Vec::new();
        let mut camera_of_pose = vec![None; problem.poses.len()];
        for (i, slot) in camera_of_pose.iter_mut().enumerate() {
            if !(i == 0 && problem.fix_first_pose) {
                *slot = Some(cameras.len());
                cameras.push(i);
            }
        }
        let mut observed = vec![false; track_ids.len()];
        let mut observations = Vec::with_capacity(problem.num_observations());
        for (pose, obs) in problem.observations.iter().enumerate() {
            for o in obs {
                let point = point_index[&o.track_id];
                observed[point] = true;
                observations.push(FlatObservation {
                    pose,
                    camera: camera_of_pose[pose],
                    point,
                    point_free: false,
                    pixel: o.pixel,
                    weight: o.weight,
                });
            }
        }
        let free_points: Vec<bool> = observed.iter().map(|&o| o && !problem.fix_points).collect();
        for o in &mut observations {
            o.point_free = free_points[o.point];
        }
        Self {
            observations,
            cameras,
            free_points,
            track_ids,
        }
    }
}

struct Linearization {
    u: Vec<Matrix6<f64>>,
    g_cam: Vec<Vector6<f64>>,
    v: Vec<Matrix3<f64>>,
    g_point: Vec<Vector3<f64>>,
    /// Camera-point coupling blocks per point, ordered by camera.
    w: Vec<Vec<(usize, Matrix6x3<f64>)>>,
    gradient_max: f64,
}

fn cost(problem: &BAProblem, layout: &Layout, state: &State, config: &BAConfig) -> f64 {
    let k = &problem.intrinsics;
    let mut total = problem
        .scale_anchor
        .map_or(0.0, |a| a.cost(&state.poses[0], &state.poses[a.pose]));
    for o in &layout.observations {
        let obs = Observation {
            track_id: 0,
            pixel: o.pixel,
            weight: o.weight,
        };
        total += observation_cost(k, &state.poses[o.pose], &state.points[o.point], &obs, config);
    }
    total
}

fn build(problem: &BAProblem, layout: &Layout, state: &State, config: &BAConfig) -> Linearization {
    let nc = layout.cameras.len();
    let np = state.points.len();
    let mut lin = Linearization {
        u: vec![Matrix6::zeros(); nc],
        g_cam: vec![Vector6::zeros(); nc],
        v: vec![Matrix3::zeros(); np],
        g_point: vec![Vector3::zeros(); np],
        w: vec![Vec::new(); np],
        gradient_max: 0.0,
    };
    for o in &layout.observations {
        if o.weight == 0.0 {
            continue;
        }
        let block = linearize(
            &problem.intrinsics,
            &state.poses[o.pose],
            &state.points[o.point],
            &o.pixel,
            &config.depth_bounds,
        );
        let (_, d_rho) = config.robust_loss.evaluate(block.squared_norm());
        let c = o.weight * d_rho;
        let r = block.residual;
        let jc_t = block.jac_pose.transpose();
        let jp_t = block.jac_point.transpose();
        if let Some(cam) = o.camera {
            lin.u[cam] += c * jc_t * block.jac_pose;
            lin.g_cam[cam] += c * jc_t * r;
        }
        if o.point_free {
            lin.v[o.point] += c * jp_t * block.jac_point;
            lin.g_point[o.point] += c * jp_t * r;
            if let Some(cam) = o.camera {
                let wb = c * jc_t * block.jac_point;
                match lin.w[o.point].last_mut() {
                    Some((last, acc)) if *last == cam => *acc += wb,
                    _ => lin.w[o.point].push((cam, wb)),
                }
            }
        }
    }
    if let Some(anchor) = problem.scale_anchor {
        let (r, jac) = anchor.linearize(&state.poses[0], &state.poses[anchor.pose]);
        if let Some(cam) = layout.cameras.iter().position(|&p| p == anchor.pose) {
            lin.u[cam] += jac.transpose() * jac;
            lin.g_cam[cam] += jac.transpose() * r;
        }
    }
    // gradient of the cost is twice the accumulated J^T r
    let gmax = lin
        .g_cam
        .iter()
        .map(|g| g.amax())
        .chain(lin.g_point.iter().map(|g| g.amax()))
        .fold(0.0, f64::max);
    lin.gradient_max = 2.0 * gmax;
    lin
}

fn damp<const N: usize>(
    m: &nalgebra::SMatrix<f64, N, N>,
    lambda: f64,
) -> nalgebra::SMatrix<f64, N, N> {
    let mut out = *m;
    for i in 0..N {
        out[(i, i)] += lambda * m[(i, i)].max(MIN_DIAGONAL);
    }
    out
}

/// Solves the damped normal equations; `None` if a block or the reduced
/// camera system is not positive definite.
fn solve(
    lin: &Linearization,
    free_points: &[bool],
    lambda: f64,
) -> Option<(Vec<Vector6<f64>>, Vec<Vector3<f64>>)> {
    let nc = lin.u.len();
    let np = lin.v.len();
    let mut v_inv = vec![Matrix3::zeros(); np];
    for p in 0..np {
        if free_points[p] {
            v_inv[p] = damp(&lin.v[p], lambda).cholesky()?.inverse();
        }
    }

    let mut s = DMatrix::<f64>::zeros(6 * nc, 6 * nc);
    let mut rhs = DVector::<f64>::zeros(6 * nc);
    for c in 0..nc {
        s.fixed_view_mut::<6, 6>(6 * c, 6 * c).copy_from(&damp(&lin.u[c], lambda));
        rhs.fixed_rows_mut::<6>(6 * c).copy_from(&(-lin.g_cam[c]));
    }
    for p in 0..np {
        if !free_points[p] || lin.w[p].is_empty() {
            continue;
        }
        let entries = &lin.w[p];
        let y: Vec<Matrix6x3<f64>> = entries.iter().map(|(_, w)| w * v_inv[p]).collect();
        for (a, (ca, _)) in entries.iter().enumerate() {
            let mut r = rhs.fixed_rows_mut::<6>(6 * ca);
            r += y[a] * lin.g_point[p];
            for (cb, wb) in &entries[a..] {
                let block = y[a] * wb.transpose();
                let mut view = s.fixed_view_mut::<6, 6>(6 * ca, 6 * cb);
                view -= block;
            }
        }
    }
    // only the upper block triangle was reduced
    for cb in 0..nc {
        for ca in (cb + 1)..nc {
            let upper = s.fixed_view::<6, 6>(6 * cb, 6 * ca).transpose();
            s.fixed_view_mut::<6, 6>(6 * ca, 6 * cb).copy_from(&upper);
        }
    }

    let dx_cam = if nc > 0 {
        let chol = s.cholesky()?;
        chol.solve(&rhs)
    } else {
        DVector::zeros(0)
    };
    let cams: Vec<Vector6<f64>> = (0..nc)
        .map(|c| Vector6::from_iterator(dx_cam.fixed_rows::<6>(6 * c).iter().copied()))
        .collect();
    let mut pts = vec![Vector3::zeros(); np];
    for p in 0..np {
        if !free_points[p] {
            continue;
        }
        let mut b = -lin.g_point[p];
        for (c, w) in &lin.w[p] {
            b -= w.transpose() * cams[*c];
        }
        pts[p] = v_inv[p] * b;
    }
    if cams.iter().any(|d| !d.iter().all(|v| v.is_finite()))
        || pts.iter().any(|d| !d.iter().all(|v| v.is_finite()))
    {
        return None;
    }
    Some((cams, pts))
}

fn apply(state: &State, layout: &Layout, cams: &[Vector6<f64>], pts: &[Vector3<f64>]) -> State {
    let mut next = state.clone();
    for (c, &pose) in layout.cameras.iter().enumerate() {
        next.poses[pose] = state.poses[pose].retract(&cams[c]);
    }
    for (p, x) in next.points.iter_mut().enumerate() {
        *x += pts[p];
    }
    next
}

/// Minimizes the window cost in place with Levenberg-Marquardt.
///
/// The problem is only updated with accepted steps, so on error it holds the
/// best state reached.
pub fn optimize(problem: &mut BAProblem, config: &BAConfig) -> Result<OptimizeReport, BAError> {
    config.validate()?;
    problem.validate()?;
    let layout = Layout::new(problem);
    let mut state = State {
        poses: problem.poses.clone(),
        points: problem.points.values().copied().collect(),
    };
    let mut current = cost(problem, &layout, &state, config);
    if !current.is_finite() {
        return Err(BAError::NonFiniteCost);
    }
    let mut report = OptimizeReport {
        iterations: 0,
        accepted_steps: 0,
        initial_cost: current,
        final_cost: current,
        cost_history: vec![current],
        termination: Termination::MaxIterations,
    };
    let mut lambda = config.initial_damping;
    let mut lin = build(problem, &layout, &state, config);

    loop {
        if lin.gradient_max < config.gradient_tolerance {
            report.termination = Termination::GradientConverged;
            break;
        }
        if report.iterations >= config.max_iterations {
            report.termination = Termination::MaxIterations;
            break;
        }
        report.iterations += 1;
        let Some((cams, pts)) = solve(&lin, &layout.free_points, lambda) else {
            lambda *= config.damping_up;
            if lambda > MAX_DAMPING {
                write_back(problem, &layout, &state);
                return Err(BAError::Singular);
            }
            continue;
        };
        let trial = apply(&state, &layout, &cams, &pts);
        let trial_cost = cost(problem, &layout, &trial, config);
        if trial_cost.is_finite() && trial_cost < current {
            let rel = (current - trial_cost) / current;
            state = trial;
            current = trial_cost;
            report.accepted_steps += 1;
            report.cost_history.push(current);
            lambda = (lambda * config.damping_down).max(1e-15);
            if rel < config.relative_cost_tolerance {
                report.termination = Termination::CostConverged;
                break;
            }
            lin = build(problem, &layout, &state, config);
        } else {
            lambda *= config.damping_up;
            if lambda > MAX_DAMPING {
                report.termination = Termination::NoProgress;
                break;
            }
        }
    }
    report.final_cost = current;
    write_back(problem, &layout, &state);
    Ok(report)
}

fn write_back(problem: &mut BAProblem, layout: &Layout, state: &State) {
    problem.poses.clone_from(&state.poses);
    for (i, t) in layout.track_ids.iter().enumerate() {
        problem.points.insert(*t, state.points[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::problem::{objective, ScaleAnchor};
    use crate::geometry::{project, Intrinsics, RobustLoss};
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vga() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn small_problem(seed: u64) -> (BAProblem, Vec<Pose>, BTreeMap<usize, Vector3<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = vga();
        let mut p = BAProblem::new(k);
        let mut gt_poses = Vec::new();
        for i in 0..5 {
            let pose = Pose::from_rotation(
                &Rotation3::new(Vector3::new(0.0, 0.02 * i as f64, 0.0)),
                Vector3::new(-0.1 * i as f64, 0.01 * i as f64, 0.0),
            );
            gt_poses.push(pose);
            p.add_pose(i, pose);
        }
        let mut gt_points = BTreeMap::new();
        for t in 0..40 {
            let x = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.8..0.8),
                rng.random_range(1.5..4.0),
            );
            gt_points.insert(t, x);
            p.points.insert(t, x);
            for (i, pose) in gt_poses.iter().enumerate() {
                let u = project(&k, pose, &x).unwrap().pixel;
                p.observations[i].push(Observation {
                    track_id: t,
                    pixel: u,
                    weight: 1.0,
                });
            }
        }
        (p, gt_poses, gt_points)
    }

    #[test]
    fn optimal_problem_takes_no_steps() {
        let (mut p, _, _) = small_problem(1);
        let before = objective(&p, &BAConfig::default());
        let report = optimize(&mut p, &BAConfig::default()).unwrap();
        assert_eq!(report.accepted_steps, 0);
        assert!((report.final_cost - before).abs() <= 1e-12);
    }

    #[test]
    fn recovers_perturbed_window() {
        let (mut p, gt, _) = small_problem(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for pose in p.poses.iter_mut().skip(1) {
            let xi = Vector6::from_fn(|_, _| rng.random_range(-0.01..0.01));
            *pose = pose.retract(&xi);
        }
        for x in p.points.values_mut() {
            *x += Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05));
        }
        let report = optimize(&mut p, &BAConfig::default()).unwrap();
        assert!(report.final_cost < 1e-12, "{report:?}");
        assert!(report.cost_history.windows(2).all(|w| w[1] <= w[0]));
        // rotations are scale-free
        for (a, b) in p.poses.iter().zip(&gt) {
            assert!((a.rotation() - b.rotation()).amax() < 1e-5);
        }
    }

    #[test]
    fn scale_anchor_pins_the_gauge() {
        let (mut p, gt, gt_points) = small_problem(5);
        let length = (gt[4].camera_center() - gt[0].camera_center()).norm();
        p.scale_anchor = Some(ScaleAnchor { pose: 4, length });
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for pose in p.poses.iter_mut().skip(1) {
            let xi = Vector6::from_fn(|_, _| rng.random_range(-0.01..0.01));
            *pose = pose.retract(&xi);
        }
        for x in p.points.values_mut() {
            *x *= 1.3;
        }
        let report = optimize(&mut p, &BAConfig::default()).unwrap();
        assert!(report.final_cost < 1e-12, "{report:?}");
        // first pose and one distance fixed: the solution is the ground truth
        for (a, b) in p.poses.iter().zip(&gt) {
            assert!((a.translation() - b.translation()).amax() < 1e-6);
        }
        for (t, x) in &p.points {
            assert!((x - gt_points[t]).amax() < 1e-5);
        }
    }

    #[test]
    fn pose_only_refinement_with_fixed_points() {
        let (full, gt, _) = small_problem(3);
        let mut p = full.clone();
        p.poses.truncate(1);
        p.frames.truncate(1);
        p.observations.truncate(1);
        p.fix_first_pose = false;
        p.fix_points = true;
        p.poses[0] = gt[0].retract(&Vector6::new(0.02, -0.01, 0.03, 0.01, 0.02, -0.01));
        let cfg = BAConfig {
            robust_loss: RobustLoss::trivial(),
            ..BAConfig::default()
        };
        optimize(&mut p, &cfg).unwrap();
        assert!((p.poses[0].rotation() - gt[0].rotation()).amax() < 1e-8);
        assert!((p.poses[0].translation() - gt[0].translation()).amax() < 1e-8);
        assert_eq!(p.points, full.points);
    }

    #[test]
    fn non_finite_cost_is_reported() {
        let (mut p, _, _) = small_problem(4);
        p.points.insert(0, Vector3::new(f64::NAN, 0.0, 1.0));
        assert_eq!(optimize(&mut p, &BAConfig::default()), Err(BAError::NonFiniteCost));
    }
}
