//! Frame-pair pose estimation accuracy: depth-backed 3D points in one frame,
//! matched pixels in a later frame, PnP, and threshold fractions.

use nalgebra::Vector2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::pnp::{pnp_ransac_with_rng, relative_pose_error, Correspondence, PnPConfig, PoseError};
use super::PnPError;
use crate::frontend::{DepthImage, FrameFeatures};
use crate::geometry::{Intrinsics, Pose};
use crate::tracking::match_bidirectional;

/// Accuracy thresholds: degrees and scene units.
pub const ROT_THRESHOLD_DEG: f64 = 5.0;
pub const TRANS_THRESHOLD: f64 = 0.05;

/// Everything the pair protocol needs, indexed by position in the sequence.
#[derive(Debug, Clone)]
pub struct PairSequence {
    pub intrinsics: Intrinsics,
    pub features: Vec<FrameFeatures>,
    pub depths: Vec<DepthImage>,
    /// World-to-camera ground truth.
    pub poses: Vec<Pose>,
    /// Metres (scene units) per depth map unit.
    pub depth_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairAccuracy {
    pub frame_diff: usize,
    pub rot_fraction: f64,
    pub trans_fraction: f64,
    pub pairs: usize,
}

/// Outcome of one pair; `None` when PnP failed.
#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub frame_a: usize,
    pub frame_b: usize,
    pub correspondences: usize,
    pub error: Option<PoseError>,
}

fn nearest_depth(depth: &DepthImage, pixel: &Vector2<f64>) -> Option<u16> {
    let x = pixel.x.round();
    let y = pixel.y.round();
    if x < 0.0 || y < 0.0 || x >= depth.width as f64 || y >= depth.height as f64 {
        return None;
    }
    Some(depth.get(x as usize, y as usize)).filter(|&d| d > 0)
}

/// Back-projects the matched keypoints of `a` through its depth map and pairs
/// them with the matched pixels of `b`. Matching uses no distance threshold.
pub fn pair_correspondences(
    k: &Intrinsics,
    a: &FrameFeatures,
    depth_a: &DepthImage,
    b: &FrameFeatures,
    depth_scale: f64,
) -> Vec<Correspondence> {
    let Ok(matches) = match_bidirectional(&a.descriptors, &b.descriptors, f64::INFINITY) else {
        return Vec::new();
    };
    matches
        .iter()
        .filter_map(|m| {
            let pa = a.keypoints[m.index_a];
            let d = nearest_depth(depth_a, &pa)?;
            Some(Correspondence {
                point: k.unproject(&pa) * (d as f64 * depth_scale),
                pixel: b.keypoints[m.index_b],
            })
        })
        .collect()
}

/// Evaluates one pair (positions `ia`, `ib`) with its own generator.
pub fn evaluate_pair(seq: &PairSequence, ia: usize, ib: usize, config: &PnPConfig, rng: &mut ChaCha8Rng) -> PairResult {
    let data = pair_correspondences(
        &seq.intrinsics,
        &seq.features[ia],
        &seq.depths[ia],
        &seq.features[ib],
        seq.depth_scale,
    );
    let gt = seq.poses[ib].compose(&seq.poses[ia].inverse());
    let error = pnp_ransac_with_rng(&data, &seq.intrinsics, config, rng)
        .ok()
        .map(|r| relative_pose_error(&r.pose, &gt));
    PairResult {
        frame_a: seq.features[ia].frame_index,
        frame_b: seq.features[ib].frame_index,
        correspondences: data.len(),
        error,
    }
}

/// Samples up to `pairs` distinct start positions `i` (pair `(i, i + frame_diff)`),
/// runs PnP on each with generator stream `i_pair` of `seed`, and reports the
/// fraction of pairs under the rotation and translation thresholds. Failed
/// PnP counts as inaccurate.
pub fn pose_pair_eval(
    seq: &PairSequence,
    frame_diff: usize,
    pairs: usize,
    seed: u64,
    config: &PnPConfig,
) -> Result<(PairAccuracy, Vec<PairResult>), PnPError> {
    config.validate()?;
    let n = seq.features.len();
    if seq.depths.len() != n || seq.poses.len() != n {
        return Err(PnPError::Config(format!(
            "{} feature frames, {} depth maps, {} poses",
            n,
            seq.depths.len(),
            seq.poses.len()
        )));
    }
    let available = n.saturating_sub(frame_diff);
    if frame_diff == 0 || available == 0 || pairs == 0 {
        return Err(PnPError::InsufficientPairs { available, frame_diff });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<usize> = sample(&mut rng, available, pairs.min(available)).into_vec();
    starts.sort_unstable();
    let results: Vec<PairResult> = starts
        .par_iter()
        .enumerate()
        .map(|(p, &i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64 + 1);
            evaluate_pair(seq, i, i + frame_diff, config, &mut rng)
        })
        .collect();
    let total = results.len() as f64;
    let rot_ok = results
        .iter()
        .filter(|r| r.error.is_some_and(|e| e.rot_deg < ROT_THRESHOLD_DEG))
        .count();
    let trans_ok = results
        .iter()
        .filter(|r| r.error.is_some_and(|e| e.trans < TRANS_THRESHOLD))
        .count();
    Ok((
        PairAccuracy {
            frame_diff,
            rot_fraction: rot_ok as f64 / total,
            trans_fraction: trans_ok as f64 / total,
            pairs: results.len(),
        },
        results,
    ))
}
