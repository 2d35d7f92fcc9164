//! Trajectory files (TUM format), similarity alignment and sub-trajectory
//! relative errors.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::{rotation_angle_deg, Pose};

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("need at least 3 non-collinear positions for alignment")]
    Degenerate,
    #[error("position lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("sub-trajectory of {needed} frames does not fit in {available} frames")]
    TooShort { needed: usize, available: usize },
    #[error("invalid sub-trajectory length {0} s")]
    BadLength(f64),
}

/// Frame-indexed world-to-camera poses.
pub type Trajectory = Vec<(usize, Pose)>;

/// Writes `timestamp tx ty tz qx qy qz qw` (camera-to-world) per pose, with
/// `timestamp = frame / fps`.
pub fn write_tum<W: Write>(mut w: W, trajectory: &[(usize, Pose)], fps: f64) -> std::io::Result<()> {
    for (frame, pose) in trajectory {
        let (q, c) = pose.to_camera_to_world();
        let q = q.into_inner();
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            *frame as f64 / fps,
            c.x,
            c.y,
            c.z,
            q.i,
            q.j,
            q.k,
            q.w
        )?;
    }
    Ok(())
}

/// Reads a TUM trajectory, mapping timestamps back to frame indices with
/// `round(timestamp * fps)`. Blank lines and `#` comments are skipped.
pub fn read_tum<R: BufRead>(r: R, fps: f64) -> Result<Trajectory, TrajectoryError> {
    let mut out: Trajectory = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| TrajectoryError::Io {
            path: "<stream>".into(),
            source,
        })?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let parse_err = |reason: String| TrajectoryError::Parse {
            line: line_no,
            reason,
        };
        let v: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| parse_err(format!("bad number `{t}`")))
            })
            .collect::<Result<_, _>>()?;
        if v.len() != 8 {
            return Err(parse_err(format!("expected 8 fields, found {}", v.len())));
        }
        let stamp = v[0] * fps;
        if stamp < -0.5 {
            return Err(parse_err(format!("negative timestamp {}", v[0])));
        }
        let frame = stamp.round() as usize;
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 0.5) {
            return Err(parse_err("quaternion is far from unit length".into()));
        }
        let pose = Pose::from_camera_to_world(&UnitQuaternion::from_quaternion(q), &Vector3::new(v[1], v[2], v[3]));
        if let Some((last, _)) = out.last() {
            if frame <= *last {
                return Err(parse_err(format!("frame {frame} does not follow frame {last}")));
            }
        }
        out.push((frame, pose));
    }
    Ok(out)
}

pub fn save_tum(path: &Path, trajectory: &[(usize, Pose)], fps: f64) -> Result<(), TrajectoryError> {
    let mut buf = Vec::new();
    write_tum(&mut buf, trajectory, fps).expect("writing to memory");
    std::fs::write(path, buf).map_err(|source| TrajectoryError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_tum(path: &Path, fps: f64) -> Result<Trajectory, TrajectoryError> {
    let f = std::fs::File::open(path).map_err(|source| TrajectoryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_tum(BufReader::new(f), fps)
}

/// Similarity `y = s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// RMS position residual after alignment.
    pub residual: f64,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            residual: 0.0,
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }

    /// Moves a camera (world-to-camera pose) into the aligned frame: its
    /// center maps through the similarity and its orientation rotates.
    pub fn apply_to_pose(&self, pose: &Pose) -> Pose {
        let (q, c) = pose.to_camera_to_world();
        let r_wc = self.rotation * q.to_rotation_matrix().matrix();
        let q = UnitQuaternion::from_matrix(&r_wc);
        Pose::from_camera_to_world(&q, &self.apply(&c))
    }
}

/// Closed-form least-squares similarity taking `estimated` onto
/// `ground_truth` (Umeyama).
pub fn sim3_align(estimated: &[Vector3<f64>], ground_truth: &[Vector3<f64>]) -> Result<Sim3, TrajectoryError> {
    if estimated.len() != ground_truth.len() {
        return Err(TrajectoryError::LengthMismatch(estimated.len(), ground_truth.len()));
    }
    let n = estimated.len();
    if n < 3 {
        return Err(TrajectoryError::Degenerate);
    }
    let nf = n as f64;
    let mx = estimated.iter().sum::<Vector3<f64>>() / nf;
    let my = ground_truth.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in estimated.iter().zip(ground_truth) {
        cov += (y - my) * (x - mx).transpose();
        var_x += (x - mx).norm_squared();
    }
    cov /= nf;
    var_x /= nf;
    let svd = cov.svd(true, true);
    let sv = svd.singular_values;
    // rank < 2 means the points lie on a line (or coincide)
    if !(var_x > 0.0) || !(sv[1] > 1e-12 * sv[0].max(f64::MIN_POSITIVE)) {
        return Err(TrajectoryError::Degenerate);
    }
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v");
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&d) * v_t;
    let scale = sv.dot(&d) / var_x;
    let translation = my - scale * rotation * mx;
    let mut sim = Sim3 {
        scale,
        rotation,
        translation,
        residual: 0.0,
    };
    let sq: f64 = estimated
        .iter()
        .zip(ground_truth)
        .map(|(x, y)| (sim.apply(x) - y).norm_squared())
        .sum();
    sim.residual = (sq / nf).sqrt();
    Ok(sim)
}

/// Aligns `estimated` onto `ground_truth` using the camera centers of the
/// frames present in both, and returns the transformed estimate.
pub fn align_trajectory(estimated: &[(usize, Pose)], ground_truth: &[(usize, Pose)]) -> Result<(Trajectory, Sim3), TrajectoryError> {
    let gt: BTreeMap<usize, &Pose> = ground_truth.iter().map(|(f, p)| (*f, p)).collect();
    let (xs, ys): (Vec<_>, Vec<_>) = estimated
        .iter()
        .filter_map(|(f, p)| gt.get(f).map(|g| (p.camera_center(), g.camera_center())))
        .unzip();
    let sim = sim3_align(&xs, &ys)?;
    let aligned = estimated.iter().map(|(f, p)| (*f, sim.apply_to_pose(p))).collect();
    Ok((aligned, sim))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeError {
    pub length_s: f64,
    pub frames: usize,
    pub rot_deg: f64,
    pub trans: f64,
    pub segments: usize,
}

/// For each sub-length `L` seconds (`n = round(L * fps)` frames), averages over
/// every start frame `i` with `i + n` present in both trajectories the error
/// of `Δ_gt⁻¹ Δ_est`, where `Δ = C_i⁻¹ C_{i+n}` is the relative motion between
/// camera-to-world poses.
pub fn trajectory_relative_errors(
    estimated: &[(usize, Pose)],
    ground_truth: &[(usize, Pose)],
    lengths_s: &[f64],
    fps: f64,
) -> Result<Vec<RelativeError>, TrajectoryError> {
    let est: BTreeMap<usize, Pose> = estimated.iter().map(|(f, p)| (*f, p.inverse())).collect();
    let gt: BTreeMap<usize, Pose> = ground_truth.iter().map(|(f, p)| (*f, p.inverse())).collect();
    let common: Vec<usize> = est.keys().filter(|f| gt.contains_key(f)).copied().collect();
    let span = match (common.first(), common.last()) {
        (Some(a), Some(b)) => b - a,
        _ => 0,
    };
    lengths_s
        .iter()
        .map(|&l| {
            let n = (l * fps).round();
            if !(n >= 1.0) || !n.is_finite() {
                return Err(TrajectoryError::BadLength(l));
            }
            let n = n as usize;
            let mut rot = 0.0;
            let mut trans = 0.0;
            let mut count = 0usize;
            for &i in &common {
                let j = i + n;
                let (Some(ei), Some(ej), Some(gi), Some(gj)) = (est.get(&i), est.get(&j), gt.get(&i), gt.get(&j)) else {
                    continue;
                };
                let d_est = ei.inverse().compose(ej);
                let d_gt = gi.inverse().compose(gj);
                let e = d_gt.inverse().compose(&d_est);
                rot += rotation_angle_deg(e.rotation(), &Matrix3::identity());
                trans += e.translation().norm();
                count += 1;
            }
            if count == 0 {
                return Err(TrajectoryError::TooShort {
                    needed: n + 1,
                    available: span + 1,
                });
            }
            Ok(RelativeError {
                length_s: l,
                frames: n,
                rot_deg: rot / count as f64,
                trans: trans / count as f64,
                segments: count,
            })
        })
        .collect()
}
