//! Evaluation protocols: frame-pair PnP accuracy and sub-trajectory relative
//! errors, with the solvers and alignment they rely on.

pub mod p3p;
pub mod pnp;
pub mod pose_pairs;
pub mod trajectory;

use std::collections::HashMap;

use thiserror::Error;

use crate::backend::WeightMap;
use crate::labeler::{FrameLabels, StabilityLabel};

pub use p3p::p3p;
pub use pnp::{pnp_ransac, pnp_ransac_with_rng, relative_pose_error, Correspondence, PnPConfig, PnPResult, PoseError};
pub use pose_pairs::{pose_pair_eval, PairAccuracy, PairResult, PairSequence};
pub use trajectory::{
    align_trajectory, load_tum, read_tum, save_tum, sim3_align, trajectory_relative_errors, write_tum,
    RelativeError, Sim3, Trajectory, TrajectoryError,
};

#[derive(Debug, Error, PartialEq)]
pub enum PnPError {
    #[error("need at least 4 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("no hypothesis reached 4 inliers (best {0})")]
    NoModel(usize),
    #[error("degenerate (collinear) point triple")]
    Degenerate,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no frame pair {frame_diff} apart ({available} available)")]
    InsufficientPairs { available: usize, frame_diff: usize },
}

/// Observation weight assigned to each stability label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelWeights {
    pub stable: f64,
    pub unstable: f64,
    pub ignore: f64,
}

impl Default for LabelWeights {
    fn default() -> Self {
        Self {
            stable: 1.0,
            unstable: 0.1,
            ignore: 1.0,
        }
    }
}

impl LabelWeights {
    pub fn weight(&self, label: StabilityLabel) -> f64 {
        match label {
            StabilityLabel::Stable => self.stable,
            StabilityLabel::Unstable => self.unstable,
            StabilityLabel::Ignore => self.ignore,
        }
    }
}

/// Per-observation weights keyed by `(frame, keypoint)` from label files.
pub fn weights_from_labels(labels: &[FrameLabels], mapping: &LabelWeights) -> WeightMap {
    let mut out = HashMap::new();
    for f in labels {
        for (i, kp) in f.keypoints.iter().enumerate() {
            out.insert((f.frame, i), mapping.weight(kp.label));
        }
    }
    out
}
