//! Per-frame VO driver: track extension, pose/point initialization, window
//! management and optimization.

use std::collections::{BTreeMap, HashMap};

use nalgebra::Vector3;
use thiserror::Error;

use super::problem::{residual, BAConfig, BAProblem, Observation, ScaleAnchor};
use super::solver::{optimize, OptimizeReport};
use super::BAError;
use crate::frontend::FrameFeatures;
use crate::geometry::{Intrinsics, Pose};
use crate::tracking::{match_bidirectional, Match, TrackGraph, TrackingError};

/// Baselines shorter than this leave the window scale unanchored.
const MIN_ANCHOR_LENGTH: f64 = 1e-9;

/// Observation weights keyed by `(frame, keypoint)`; missing entries weigh 1.0.
pub type WeightMap = HashMap<(usize, usize), f64>;

#[derive(Debug, Error, PartialEq)]
pub enum VoError {
    #[error("frame {next} arrived after frame {last}")]
    FrameRegression { last: usize, next: usize },
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error("frame {frame}: {source}")]
    Optimize {
        frame: usize,
        #[source]
        source: BAError,
    },
    #[error("observation weight {0} outside [0, 1]")]
    Weight(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub frame: usize,
    pub window_size: usize,
    pub points: usize,
    pub observations: usize,
    /// RMS reprojection error over the window after optimization, in pixels.
    pub rms_reprojection: f64,
    pub optimization: Option<OptimizeReport>,
}

/// Final VO solution: every processed frame's pose (world-to-camera), the
/// last estimate of every map point, and the track graph.
#[derive(Debug, Clone, PartialEq)]
pub struct VoOutput {
    pub intrinsics: Intrinsics,
    pub trajectory: Vec<(usize, Pose)>,
    pub points: BTreeMap<usize, Vector3<f64>>,
    pub graph: TrackGraph,
}

#[derive(Debug, Clone)]
pub struct VoState {
    config: BAConfig,
    tau: f64,
    weights: Option<WeightMap>,
    graph: TrackGraph,
    window: BAProblem,
    history: Vec<(usize, Pose)>,
    retired_points: BTreeMap<usize, Vector3<f64>>,
    previous: Option<FrameFeatures>,
}

impl VoState {
    pub fn new(intrinsics: Intrinsics, config: BAConfig, tau: f64) -> Result<Self, VoError> {
        config
            .validate()
            .map_err(|source| VoError::Optimize { frame: 0, source })?;
        Ok(Self {
            config,
            tau,
            weights: None,
            graph: TrackGraph::new(),
            window: BAProblem::new(intrinsics),
            history: Vec::new(),
            retired_points: BTreeMap::new(),
            previous: None,
        })
    }

    pub fn with_weights(mut self, weights: WeightMap) -> Result<Self, VoError> {
        if let Some(w) = weights.values().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(VoError::Weight(*w));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn window(&self) -> &BAProblem {
        &self.window
    }

    pub fn graph(&self) -> &TrackGraph {
        &self.graph
    }

    /// Poses that have left the window, oldest first.
    pub fn history(&self) -> &[(usize, Pose)] {
        &self.history
    }

    fn weight(&self, frame: usize, keypoint: usize) -> f64 {
        self.weights
            .as_ref()
            .and_then(|w| w.get(&(frame, keypoint)).copied())
            .unwrap_or(1.0)
    }

    /// Matches against the previous frame with the configured threshold and
    /// processes the frame.
    pub fn track_and_process(&mut self, features: FrameFeatures) -> Result<FrameReport, VoError> {
        let matches = match &self.previous {
            Some(prev) => match_bidirectional(&prev.descriptors, &features.descriptors, self.tau)?,
            None => Vec::new(),
        };
        self.process_frame(features, &matches)
    }

    /// Adds one frame given its matches to the previous frame, then optimizes
    /// the window.
    pub fn process_frame(
        &mut self,
        features: FrameFeatures,
        matches: &[Match],
    ) -> Result<FrameReport, VoError> {
        let frame = features.frame_index;
        if let Some(last) = self.graph.last_frame() {
            if frame <= last {
                return Err(VoError::FrameRegression { last, next: frame });
            }
        }

        if self.graph.last_frame().is_none() {
            self.graph.add_first_frame(&features)?;
            self.window.add_pose(frame, Pose::identity());
            self.previous = Some(features);
            return Ok(self.report(frame, None));
        }

        self.graph.extend(matches, &features)?;
        let init = *self.window.poses.last().expect("window holds the previous pose");
        let slot = self.window.add_pose(frame, init);
        self.add_observations(slot, frame);
        self.slide_window();
        self.window.scale_anchor = self.anchor();

        let optimization = optimize(&mut self.window, &self.config)
            .map_err(|source| VoError::Optimize { frame, source })?;
        self.previous = Some(features);
        Ok(self.report(frame, Some(optimization)))
    }

    /// Anchors the newest pose that has already been optimized: its current
    /// distance to the first window pose fixes the window scale.
    fn anchor(&self) -> Option<ScaleAnchor> {
        let n = self.window.poses.len();
        if !self.config.anchor_scale || n < 3 {
            return None;
        }
        let pose = n - 2;
        let length = (self.window.poses[pose].camera_center() - self.window.poses[0].camera_center()).norm();
        (length > MIN_ANCHOR_LENGTH).then_some(ScaleAnchor { pose, length })
    }

    fn add_observations(&mut self, slot: usize, frame: usize) {
        let k = self.window.intrinsics;
        let ids = self.graph.frame_tracks(frame).unwrap_or(&[]).to_vec();
        for (keypoint, track_id) in ids.into_iter().enumerate() {
            let track = self.graph.track(track_id).expect("graph track ids are dense");
            if track.len() < 2 {
                continue;
            }
            if !self.window.points.contains_key(&track_id) {
                // unit depth along the first observation's ray
                let first = track.observations[0];
                let Some(first_slot) = self.window.pose_index(first.frame) else {
                    continue;
                };
                let ray = k.unproject(&first.pixel);
                let x = self.window.poses[first_slot].inverse().transform(&ray);
                self.window.points.insert(track_id, x);
                let history: Vec<_> = track.observations[..track.len() - 1]
                    .iter()
                    .filter_map(|o| self.window.pose_index(o.frame).map(|s| (s, *o)))
                    .collect();
                for (s, o) in history {
                    let weight = self.weight(o.frame, o.keypoint);
                    self.window.observations[s].push(Observation {
                        track_id,
                        pixel: o.pixel,
                        weight,
                    });
                }
            }
            let pixel = track.observations[track.len() - 1].pixel;
            let weight = self.weight(frame, keypoint);
            self.window.observations[slot].push(Observation {
                track_id,
                pixel,
                weight,
            });
        }
    }

    fn slide_window(&mut self) {
        while self.window.poses.len() > self.config.n_last {
            let frame = self.window.frames.remove(0);
            let pose = self.window.poses.remove(0);
            self.window.observations.remove(0);
            self.history.push((frame, pose));
            // a single remaining view leaves a point free along its ray, so
            // it is retired with the value fitted to its earlier views
            let mut count: BTreeMap<usize, usize> = BTreeMap::new();
            for o in self.window.observations.iter().flatten() {
                *count.entry(o.track_id).or_default() += 1;
            }
            let stale: Vec<usize> = self
                .window
                .points
                .keys()
                .filter(|t| count.get(t).copied().unwrap_or(0) < 2)
                .copied()
                .collect();
            for t in &stale {
                if let Some(x) = self.window.points.remove(t) {
                    self.retired_points.insert(*t, x);
                }
            }
            for obs in &mut self.window.observations {
                obs.retain(|o| self.window.points.contains_key(&o.track_id));
            }
        }
    }

    fn report(&self, frame: usize, optimization: Option<OptimizeReport>) -> FrameReport {
        let k = &self.window.intrinsics;
        let mut sum = 0.0;
        let mut n = 0usize;
        for (pose, obs) in self.window.poses.iter().zip(&self.window.observations) {
            for o in obs {
                let r = residual(k, pose, &self.window.points[&o.track_id], &o.pixel, &self.config.depth_bounds);
                sum += r.x * r.x + r.y * r.y;
                n += 1;
            }
        }
        FrameReport {
            frame,
            window_size: self.window.poses.len(),
            points: self.window.points.len(),
            observations: n,
            rms_reprojection: if n > 0 { (sum / n as f64).sqrt() } else { 0.0 },
            optimization,
        }
    }

    pub fn finish(self) -> VoOutput {
        let mut trajectory = self.history;
        trajectory.extend(self.window.frames.iter().copied().zip(self.window.poses.iter().copied()));
        let mut points = self.retired_points;
        points.extend(self.window.points);
        VoOutput {
            intrinsics: self.window.intrinsics,
            trajectory,
            points,
            graph: self.graph,
        }
    }
}

/// Runs VO over a whole feature sequence.
pub fn run_sequence(
    intrinsics: Intrinsics,
    frames: impl IntoIterator<Item = FrameFeatures>,
    config: &BAConfig,
    tau: f64,
    weights: Option<WeightMap>,
) -> Result<(VoOutput, Vec<FrameReport>), VoError> {
    let mut state = VoState::new(intrinsics, config.clone(), tau)?;
    if let Some(w) = weights {
        state = state.with_weights(w)?;
    }
    let mut reports = Vec::new();
    for f in frames {
        reports.push(state.track_and_process(f)?);
    }
    Ok((state.finish(), reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn frame(i: usize, pts: &[(f64, f64)]) -> FrameFeatures {
        let mut f = FrameFeatures::empty(i, pts.len());
        for (j, p) in pts.iter().enumerate() {
            let mut d = vec![0.0; pts.len()];
            d[j] = 1.0;
            f.push(Vector2::new(p.0, p.1), d, 1.0);
        }
        f
    }

    fn grid() -> Vec<(f64, f64)> {
        (0..12).map(|i| (100.0 + 40.0 * (i % 4) as f64, 120.0 + 60.0 * (i / 4) as f64)).collect()
    }

    #[test]
    fn first_frame_is_identity_without_points() {
        let mut vo = VoState::new(k(), BAConfig::default(), 0.7).unwrap();
        vo.track_and_process(frame(0, &grid())).unwrap();
        assert_eq!(vo.window().poses, vec![Pose::identity()]);
        assert!(vo.window().points.is_empty());
    }

    #[test]
    fn second_pose_initialized_from_previous() {
        let mut vo = VoState::new(k(), BAConfig::default(), 0.7).unwrap();
        vo.track_and_process(frame(0, &grid())).unwrap();
        // identical pixels: the initial guess is already optimal
        let report = vo.track_and_process(frame(1, &grid())).unwrap();
        assert_eq!(vo.window().poses[1], vo.window().poses[0]);
        assert_eq!(report.optimization.unwrap().accepted_steps, 0);
        assert_eq!(vo.window().points.len(), 12);
        for x in vo.window().points.values() {
            assert!((x.z - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn window_slides_after_n_last() {
        let mut vo = VoState::new(k(), BAConfig::default(), 0.7).unwrap();
        for i in 1..=31 {
            vo.track_and_process(frame(i, &grid())).unwrap();
        }
        assert_eq!(vo.window().frames, (2..=31).collect::<Vec<_>>());
        assert_eq!(vo.history().len(), 1);
        assert_eq!(vo.history()[0].0, 1);
        let out = vo.finish();
        assert_eq!(out.trajectory.len(), 31);
    }

    #[test]
    fn frame_regression_rejected() {
        let mut vo = VoState::new(k(), BAConfig::default(), 0.7).unwrap();
        vo.track_and_process(frame(5, &grid())).unwrap();
        assert_eq!(
            vo.track_and_process(frame(5, &grid())),
            Err(VoError::FrameRegression { last: 5, next: 5 })
        );
    }

    #[test]
    fn points_without_observations_retire() {
        let cfg = BAConfig {
            n_last: 2,
            ..BAConfig::default()
        };
        let mut vo = VoState::new(k(), cfg, 0.7).unwrap();
        let a = grid();
        vo.track_and_process(frame(0, &a)).unwrap();
        vo.track_and_process(frame(1, &a)).unwrap();
        // no matches: the old tracks end and their points leave with the window
        let f = frame(2, &[(50.0, 50.0)]);
        vo.process_frame(f, &[]).unwrap();
        vo.process_frame(frame(3, &[(60.0, 60.0)]), &[]).unwrap();
        assert!(vo.window().points.is_empty());
        assert_eq!(vo.finish().points.len(), 12);
    }

    #[test]
    fn points_with_one_remaining_view_retire_unchanged() {
        let cfg = BAConfig {
            n_last: 3,
            ..BAConfig::default()
        };
        let mut vo = VoState::new(k(), cfg, 0.7).unwrap();
        let a = grid();
        for i in 0..3 {
            vo.track_and_process(frame(i, &a)).unwrap();
        }
        let before = vo.window().points.clone();
        vo.process_frame(frame(3, &[(50.0, 50.0)]), &[]).unwrap();
        // frames 1 and 2 remain; every point keeps two views
        assert_eq!(vo.window().points.len(), before.len());
        vo.process_frame(frame(4, &[(60.0, 60.0)]), &[]).unwrap();
        // only frame 2 still sees them
        assert!(vo.window().points.is_empty());
        assert!(vo.window().observations.iter().all(Vec::is_empty));
        let out = vo.finish();
        for (t, x) in &before {
            assert!((out.points[t] - x).norm() < 1e-6);
        }
    }
}
