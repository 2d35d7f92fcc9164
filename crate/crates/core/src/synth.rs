//! Synthetic scenes with known poses, points and correspondences, written in
//! the same formats the pipeline reads.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{Rotation3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::evalkit::save_tum;
use crate::frontend::{save_depth, DepthImage, FrameFeatures, Raster};
use crate::geometry::{project, Intrinsics, Pose};
use crate::sequence::Manifest;

/// Depth map units per scene unit (millimetres for metric scenes).
pub const DEPTH_UNITS_PER_METER: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene configuration: {0}")]
    Config(String),
    #[error("no point is visible in any frame")]
    NoVisiblePoints,
    #[error("failed to write {path}: {reason}")]
    Write { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutlierMode {
    /// Replace single observations with uniformly random pixels.
    UniformPixel,
    /// Tracks slide off their point: the observation moves linearly away
    /// from the true projection over the last `frames` frames of the point's
    /// first visibility run, reaching `amplitude` px at its end. Later runs
    /// are clean.
    Drift { amplitude: f64, frames: usize },
}

/// Drift used by [`SceneConfig::drifting`].
pub const DEFAULT_DRIFT: OutlierMode = OutlierMode::Drift {
    amplitude: 12.0,
    frames: 10,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub intrinsics: Intrinsics,
    pub n_frames: usize,
    pub n_points: usize,
    /// Camera-frame depth range in which points are placed.
    pub depth_range: (f64, f64),
    /// Largest per-frame rotation (rad) and translation of the camera.
    pub max_rotation: f64,
    pub max_translation: f64,
    /// Pixel noise standard deviation.
    pub noise_sigma: f64,
    /// Fraction of observations (uniform mode) or tracks (drift mode) corrupted.
    pub outlier_fraction: f64,
    pub outlier_mode: OutlierMode,
    pub descriptor_dim: usize,
    /// Size of the per-observation descriptor perturbation.
    pub descriptor_eps: f64,
    pub seed: u64,
}

impl SceneConfig {
    pub fn new(n_frames: usize, n_points: usize, seed: u64) -> Self {
        Self {
            intrinsics: Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).expect("valid intrinsics"),
            n_frames,
            n_points,
            depth_range: (0.5, 4.0),
            max_rotation: 0.01,
            max_translation: 0.02,
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            outlier_mode: OutlierMode::UniformPixel,
            descriptor_dim: 32,
            descriptor_eps: 0.05,
            seed,
        }
    }

    /// Noise-free scene where 10% of the points' tracks drift.
    pub fn drifting(n_frames: usize, n_points: usize, seed: u64) -> Self {
        Self {
            outlier_fraction: 0.1,
            outlier_mode: DEFAULT_DRIFT,
            ..Self::new(n_frames, n_points, seed)
        }
    }

    /// Depths reaching outside the default regularizer bounds, larger
    /// descriptor perturbation (occasional mismatches) and pixel noise.
    pub fn stress(n_frames: usize, n_points: usize, seed: u64) -> Self {
        Self {
            depth_range: (0.05, 8.0),
            noise_sigma: 1.0,
            descriptor_eps: 0.6,
            ..Self::new(n_frames, n_points, seed)
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_frames == 0 || self.n_points == 0 || self.descriptor_dim == 0 {
            return bad("frame, point and descriptor counts must be positive".into());
        }
        let (d0, d1) = self.depth_range;
        if !(d0 > 0.0 && d0 < d1 && d1.is_finite()) {
            return bad(format!("depth range ({d0}, {d1})"));
        }
        if !(self.max_rotation >= 0.0 && self.max_translation >= 0.0) {
            return bad("motion bounds must be non-negative".into());
        }
        if !(self.noise_sigma >= 0.0 && self.descriptor_eps >= 0.0) {
            return bad("noise and descriptor perturbation must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad(format!("outlier fraction {}", self.outlier_fraction));
        }
        if let OutlierMode::Drift { amplitude, frames } = self.outlier_mode {
            if !(amplitude >= 0.0 && amplitude.is_finite()) || frames == 0 {
                return bad(format!("drift amplitude {amplitude} over {frames} frames"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    /// World-to-camera ground truth per frame.
    pub poses: Vec<Pose>,
    pub points: Vec<Vector3<f64>>,
    pub frames: Vec<FrameFeatures>,
    /// Ground-truth point id of every keypoint, per frame.
    pub correspondences: Vec<Vec<usize>>,
    /// Point ids whose tracks drift.
    pub drifted: BTreeSet<usize>,
    /// Corrupted `(frame, keypoint)` observations and the injected offset in
    /// px, measured after clamping to the image.
    pub outliers: BTreeMap<(usize, usize), f64>,
}

fn gaussian3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.sample(StandardNormal))
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn clamp_norm(v: Vector3<f64>, max: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

/// Smooth random walk: velocities are low-pass filtered noise capped at the
/// configured per-frame bounds.
fn trajectory(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    let mut cam_to_world = Pose::identity();
    let mut v = clamp_norm(gaussian3(rng) * config.max_translation, config.max_translation);
    let mut w = clamp_norm(gaussian3(rng) * config.max_rotation, config.max_rotation);
    let mut poses = Vec::with_capacity(config.n_frames);
    poses.push(Pose::identity());
    for _ in 1..config.n_frames {
        v = clamp_norm(0.9 * v + 0.3 * config.max_translation * gaussian3(rng), config.max_translation);
        w = clamp_norm(0.9 * w + 0.3 * config.max_rotation * gaussian3(rng), config.max_rotation);
        let step = Pose::from_rotation(&Rotation3::new(w), v);
        cam_to_world = cam_to_world.compose(&step);
        poses.push(cam_to_world.inverse());
    }
    poses
}

pub fn generate_scene(config: &SceneConfig) -> Result<SyntheticScene, SynthError> {
    config.validate()?;
    let k = config.intrinsics;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let poses = trajectory(config, &mut rng);

    // each point sits in front of a randomly chosen anchor camera
    let (d0, d1) = config.depth_range;
    let points: Vec<Vector3<f64>> = (0..config.n_points)
        .map(|_| {
            let anchor = rng.random_range(0..config.n_frames);
            let u = Vector2::new(
                rng.random_range(0.0..k.width as f64),
                rng.random_range(0.0..k.height as f64),
            );
            let z = rng.random_range(d0..d1);
            poses[anchor].inverse().transform(&(k.unproject(&u) * z))
        })
        .collect();
    let bases: Vec<Vec<f64>> = (0..config.n_points)
        .map(|_| unit_vector(&mut rng, config.descriptor_dim))
        .collect();

    let visible = |f: usize, j: usize| -> Option<Vector2<f64>> {
        let p = project(&k, &poses[f], &points[j]).ok()?;
        k.contains(&p.pixel).then_some(p.pixel)
    };

    let mut drifted = BTreeSet::new();
    // per drifted point: full offset, onset frame and last frame of the ramp
    let mut drift = vec![(Vector2::zeros(), 0usize, 0usize); config.n_points];
    if let OutlierMode::Drift { amplitude, frames } = config.outlier_mode {
        let n = (config.outlier_fraction * config.n_points as f64).round() as usize;
        let mut ids: Vec<usize> = (0..config.n_points).collect();
        ids.shuffle(&mut rng);
        drifted.extend(ids.into_iter().take(n));
        for &j in &drifted {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let Some(start) = (0..config.n_frames).find(|&f| visible(f, j).is_some()) else {
                continue;
            };
            let end = (start..config.n_frames)
                .take_while(|&f| visible(f, j).is_some())
                .last()
                .unwrap_or(start);
            let onset = end.saturating_sub(frames - 1).max(start);
            drift[j] = (Vector2::new(a.cos(), a.sin()) * amplitude, onset, end);
        }
    }

    let max_pixel = Vector2::new(k.width as f64 - 1e-6, k.height as f64 - 1e-6);
    let mut frames = Vec::with_capacity(config.n_frames);
    let mut correspondences = Vec::with_capacity(config.n_frames);
    let mut outliers = BTreeMap::new();
    let mut any_visible = false;
    for f in 0..config.n_frames {
        let mut ids: Vec<(usize, Vector2<f64>)> = (0..config.n_points)
            .filter_map(|j| visible(f, j).map(|u| (j, u)))
            .collect();
        any_visible |= !ids.is_empty();
        ids.shuffle(&mut rng);
        let mut feats = FrameFeatures::empty(f, config.descriptor_dim);
        let mut corr = Vec::with_capacity(ids.len());
        for (kp, (j, exact)) in ids.into_iter().enumerate() {
            let noise = Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal));
            let noisy = (exact + config.noise_sigma * noise).sup(&Vector2::zeros()).inf(&max_pixel);
            let mut pixel = noisy;
            match config.outlier_mode {
                OutlierMode::UniformPixel => {
                    if config.outlier_fraction > 0.0 && rng.random_bool(config.outlier_fraction) {
                        pixel = Vector2::new(
                            rng.random_range(0.0..k.width as f64),
                            rng.random_range(0.0..k.height as f64),
                        );
                    }
                }
                OutlierMode::Drift { .. } => {
                    let (offset, onset, end) = drift[j];
                    if (onset..=end).contains(&f) && drifted.contains(&j) {
                        pixel += offset * ((f - onset + 1) as f64 / (end - onset + 1) as f64);
                    }
                }
            }
            let pixel = pixel.sup(&Vector2::zeros()).inf(&max_pixel);
            let injected = (pixel - noisy).norm();
            if injected > 0.0 {
                outliers.insert((f, kp), injected);
            }
            let perturb = unit_vector(&mut rng, config.descriptor_dim);
            let raw: Vec<f64> = bases[j]
                .iter()
                .zip(&perturb)
                .map(|(b, p)| b + config.descriptor_eps * p)
                .collect();
            let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            feats.push(pixel, raw.into_iter().map(|x| x / n).collect(), 1.0);
            corr.push(j);
        }
        frames.push(feats);
        correspondences.push(corr);
    }
    if !any_visible {
        return Err(SynthError::NoVisiblePoints);
    }
    Ok(SyntheticScene {
        config: config.clone(),
        poses,
        points,
        frames,
        correspondences,
        drifted,
        outliers,
    })
}

impl SyntheticScene {
    /// Depth map of `frame` holding the ground-truth depth (millimetres) of
    /// each keypoint's point at the keypoint's nearest pixel, zero elsewhere.
    pub fn depth_map(&self, frame: usize) -> DepthImage {
        let k = &self.config.intrinsics;
        let mut img = Raster::new(k.width as usize, k.height as usize);
        for (p, &j) in self.frames[frame].keypoints.iter().zip(&self.correspondences[frame]) {
            let z = self.poses[frame].transform(&self.points[j]).z;
            let x = (p.x.round() as usize).min(img.width - 1);
            let y = (p.y.round() as usize).min(img.height - 1);
            let d = (z * DEPTH_UNITS_PER_METER).round().clamp(1.0, u16::MAX as f64) as u16;
            img.set(x, y, d);
        }
        img
    }

    /// Ground-truth trajectory with frame indices.
    pub fn trajectory(&self) -> Vec<(usize, Pose)> {
        self.poses.iter().copied().enumerate().collect()
    }

    /// Writes a scene directory: manifest, intrinsics, per-frame features and
    /// depth maps, ground-truth trajectory and corruption annotations.
    pub fn write(&self, dir: &Path, fps: f64) -> Result<Manifest, SynthError> {
        let err = |path: &Path, reason: String| SynthError::Write {
            path: path.display().to_string(),
            reason,
        };
        std::fs::create_dir_all(dir).map_err(|e| err(dir, e.to_string()))?;
        let intr = dir.join("intrinsics.txt");
        std::fs::write(&intr, format!("{}\n", self.config.intrinsics)).map_err(|e| err(&intr, e.to_string()))?;
        for (i, f) in self.frames.iter().enumerate() {
            let path = dir.join(format!("frame_{i:06}.features"));
            f.save(&path).map_err(|e| err(&path, e.to_string()))?;
            let path = dir.join(format!("depth_{i:06}.pgm"));
            save_depth(&path, &self.depth_map(i)).map_err(|e| err(&path, e.to_string()))?;
        }
        let gt = dir.join("gt.tum");
        save_tum(&gt, &self.trajectory(), fps).map_err(|e| err(&gt, e.to_string()))?;
        let ann = dir.join("annotations.txt");
        let mut text = String::new();
        for j in &self.drifted {
            text.push_str(&format!("drifted {j}\n"));
        }
        for ((f, kp), offset) in &self.outliers {
            text.push_str(&format!("outlier {f} {kp} {offset}\n"));
        }
        std::fs::write(&ann, text).map_err(|e| err(&ann, e.to_string()))?;
        let manifest = Manifest {
            dir: dir.to_path_buf(),
            fps,
            depth_scale: 1.0 / DEPTH_UNITS_PER_METER,
            intrinsics: "intrinsics.txt".into(),
            features: Some("frame_*.features".into()),
            depth: Some("depth_*.pgm".into()),
            images: None,
            gt: Some("gt.tum".into()),
        };
        let path = dir.join("manifest.txt");
        manifest.save(&path).map_err(|e| err(&path, e.to_string()))?;
        Ok(manifest)
    }
}
