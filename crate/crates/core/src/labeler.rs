//! Track stability labels from a finished VO run, and the training-pair
//! dataset built on top of them.
//!
//! Label file (one per frame, rows in keypoint order):
//!
//! ```text
//! VOL1 <count>
//! x y track_id label          label: 0 unstable, 1 stable, 2 ignore
//! ```
//!
//! Pair file:
//!
//! ```text
//! VOP1 <frame_a> <frame_b> <count>
//! xa ya xb yb track_id label
//! ```

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backend::{residual, VoOutput};
use crate::geometry::DepthBounds;

const LABEL_MAGIC: &str = "VOL1";
const PAIR_MAGIC: &str = "VOP1";

/// Default temporal window for training pairs, in frames.
pub const DEFAULT_PAIR_WINDOW: usize = 60;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("need at least 2 labeled frames, got {0}")]
    TooFewFrames(usize),
    #[error("pair window must be positive")]
    ZeroWindow,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StabilityLabel {
    Unstable,
    Stable,
    Ignore,
}

impl StabilityLabel {
    pub fn code(self) -> u8 {
        match self {
            StabilityLabel::Unstable => 0,
            StabilityLabel::Stable => 1,
            StabilityLabel::Ignore => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(StabilityLabel::Unstable),
            1 => Some(StabilityLabel::Stable),
            2 => Some(StabilityLabel::Ignore),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelThresholds {
    pub min_length: usize,
    /// Largest mean reprojection error (px) of a stable track.
    pub mean_max: f64,
    /// Smallest max reprojection error (px) of an unstable track.
    pub max_min: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        Self {
            min_length: 10,
            mean_max: 1.0,
            max_min: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackStats {
    pub track_id: usize,
    /// Number of observations of the track.
    pub length: usize,
    pub mean_error: f64,
    pub max_error: f64,
}

/// Stable, then unstable, then ignore, tested in that order.
pub fn label_track(stats: &TrackStats, th: &LabelThresholds) -> StabilityLabel {
    let long = stats.length >= th.min_length;
    if long && stats.mean_error <= th.mean_max {
        StabilityLabel::Stable
    } else if long && stats.max_error >= th.max_min {
        StabilityLabel::Unstable
    } else {
        StabilityLabel::Ignore
    }
}

/// Reprojection statistics of every track that became a 3D point, using the
/// final pose of each frame and the final point estimate.
pub fn track_stats(output: &VoOutput) -> Vec<TrackStats> {
    let k = &output.intrinsics;
    let poses: HashMap<usize, _> = output.trajectory.iter().map(|(f, p)| (*f, *p)).collect();
    let bounds = DepthBounds::default();
    let mut stats = Vec::new();
    for track in output.graph.tracks() {
        let Some(x) = output.points.get(&track.id) else {
            continue;
        };
        let errors: Vec<f64> = track
            .observations
            .iter()
            .filter_map(|o| {
                let pose = poses.get(&o.frame)?;
                let r = residual(k, pose, x, &o.pixel, &bounds);
                Some(r.fixed_rows::<2>(0).norm())
            })
            .collect();
        if errors.is_empty() {
            continue;
        }
        stats.push(TrackStats {
            track_id: track.id,
            length: track.len(),
            mean_error: errors.iter().sum::<f64>() / errors.len() as f64,
            max_error: errors.iter().copied().fold(0.0, f64::max),
        });
    }
    stats
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledKeypoint {
    pub pixel: Vector2<f64>,
    pub track_id: usize,
    pub label: StabilityLabel,
}

/// Labels of one frame in keypoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    pub frame: usize,
    pub keypoints: Vec<LabeledKeypoint>,
}

/// Labels every keypoint of every processed frame with the label of its
/// track; keypoints whose track never became a point are ignored.
pub fn label_sequence(output: &VoOutput, th: &LabelThresholds) -> Vec<FrameLabels> {
    let labels: HashMap<usize, StabilityLabel> = track_stats(output)
        .iter()
        .map(|s| (s.track_id, label_track(s, th)))
        .collect();
    output
        .graph
        .frame_indices()
        .map(|frame| {
            let ids = output.graph.frame_tracks(frame).unwrap_or(&[]);
            let keypoints = ids
                .iter()
                .map(|&track_id| {
                    let track = output.graph.track(track_id).expect("graph track ids are dense");
                    let pixel = track
                        .observation_in(frame)
                        .expect("track observed in its own frame")
                        .pixel;
                    LabeledKeypoint {
                        pixel,
                        track_id,
                        label: labels.get(&track_id).copied().unwrap_or(StabilityLabel::Ignore),
                    }
                })
                .collect();
            FrameLabels { frame, keypoints }
        })
        .collect()
}

impl FrameLabels {
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{LABEL_MAGIC} {}", self.keypoints.len())?;
        for kp in &self.keypoints {
            writeln!(w, "{} {} {} {}", kp.pixel.x, kp.pixel.y, kp.track_id, kp.label.code())?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R, frame: usize) -> Result<Self, LabelError> {
        let (_, rows) = read_table(r, LABEL_MAGIC, 1, 4)?;
        let keypoints = rows
            .into_iter()
            .map(|(line, t)| {
                Ok(LabeledKeypoint {
                    pixel: Vector2::new(parse_f64(line, &t[0])?, parse_f64(line, &t[1])?),
                    track_id: parse_usize(line, &t[2])?,
                    label: parse_label(line, &t[3])?,
                })
            })
            .collect::<Result<_, LabelError>>()?;
        Ok(Self { frame, keypoints })
    }

    pub fn save(&self, path: &Path) -> Result<(), LabelError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|source| io_err(path, source))
    }

    pub fn load(path: &Path, frame: usize) -> Result<Self, LabelError> {
        let f = std::fs::File::open(path).map_err(|source| io_err(path, source))?;
        Self::read_from(BufReader::new(f), frame)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCorrespondence {
    pub pixel_a: Vector2<f64>,
    pub pixel_b: Vector2<f64>,
    pub track_id: usize,
    pub label: StabilityLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub frame_a: usize,
    pub frame_b: usize,
    pub correspondences: Vec<PairCorrespondence>,
    /// Keypoints of each frame without a partner in the other; all ignore.
    pub unmatched_a: Vec<Vector2<f64>>,
    pub unmatched_b: Vec<Vector2<f64>>,
}

impl TrainingPair {
    pub fn from_frames(a: &FrameLabels, b: &FrameLabels) -> Self {
        let in_b: HashMap<usize, &LabeledKeypoint> =
            b.keypoints.iter().map(|k| (k.track_id, k)).collect();
        let in_a: BTreeSet<usize> = a.keypoints.iter().map(|k| k.track_id).collect();
        let mut correspondences = Vec::new();
        let mut unmatched_a = Vec::new();
        for ka in &a.keypoints {
            match in_b.get(&ka.track_id) {
                Some(kb) => correspondences.push(PairCorrespondence {
                    pixel_a: ka.pixel,
                    pixel_b: kb.pixel,
                    track_id: ka.track_id,
                    label: ka.label,
                }),
                None => unmatched_a.push(ka.pixel),
            }
        }
        let unmatched_b = b
            .keypoints
            .iter()
            .filter(|k| !in_a.contains(&k.track_id))
            .map(|k| k.pixel)
            .collect();
        Self {
            frame_a: a.frame,
            frame_b: b.frame,
            correspondences,
            unmatched_a,
            unmatched_b,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "{PAIR_MAGIC} {} {} {}",
            self.frame_a,
            self.frame_b,
            self.correspondences.len()
        )?;
        for c in &self.correspondences {
            writeln!(
                w,
                "{} {} {} {} {} {}",
                c.pixel_a.x,
                c.pixel_a.y,
                c.pixel_b.x,
                c.pixel_b.y,
                c.track_id,
                c.label.code()
            )?;
        }
        Ok(())
    }

    /// Reads the correspondence rows; unmatched keypoints are not stored in
    /// pair files and come back empty.
    pub fn read_from<R: BufRead>(r: R) -> Result<Self, LabelError> {
        let (header, rows) = read_table(r, PAIR_MAGIC, 3, 6)?;
        let frame_a = parse_usize(1, &header[0])?;
        let frame_b = parse_usize(1, &header[1])?;
        let correspondences = rows
            .into_iter()
            .map(|(line, t)| {
                Ok(PairCorrespondence {
                    pixel_a: Vector2::new(parse_f64(line, &t[0])?, parse_f64(line, &t[1])?),
                    pixel_b: Vector2::new(parse_f64(line, &t[2])?, parse_f64(line, &t[3])?),
                    track_id: parse_usize(line, &t[4])?,
                    label: parse_label(line, &t[5])?,
                })
            })
            .collect::<Result<_, LabelError>>()?;
        Ok(Self {
            frame_a,
            frame_b,
            correspondences,
            unmatched_a: Vec::new(),
            unmatched_b: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), LabelError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|source| io_err(path, source))
    }
}

/// Samples `pairs_per_frame` partners for every labeled frame, uniformly among
/// frames whose index differs by 1 to `window`. Duplicate pairs are dropped.
pub fn emit_training_pairs(
    frames: &[FrameLabels],
    window: usize,
    pairs_per_frame: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>, LabelError> {
    if frames.len() < 2 {
        return Err(LabelError::TooFewFrames(frames.len()));
    }
    if window == 0 {
        return Err(LabelError::ZeroWindow);
    }
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by_key(|&i| frames[i].frame);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::new();
    for &ia in &order {
        let a = frames[ia].frame;
        let candidates: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&ib| {
                let d = frames[ib].frame.abs_diff(a);
                d >= 1 && d <= window
            })
            .collect();
        if candidates.is_empty() {
            continue;
        }
        for _ in 0..pairs_per_frame {
            let ib = candidates[rng.random_range(0..candidates.len())];
            if seen.insert((ia, ib)) {
                pairs.push(TrainingPair::from_frames(&frames[ia], &frames[ib]));
            }
        }
    }
    Ok(pairs)
}

fn io_err(path: &Path, source: std::io::Error) -> LabelError {
    LabelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(line: usize, reason: impl Into<String>) -> LabelError {
    LabelError::Parse {
        line,
        reason: reason.into(),
    }
}

fn parse_f64(line: usize, tok: &str) -> Result<f64, LabelError> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(line, format!("bad number `{tok}`")))
}

fn parse_usize(line: usize, tok: &str) -> Result<usize, LabelError> {
    tok.parse().map_err(|_| parse_err(line, format!("bad integer `{tok}`")))
}

fn parse_label(line: usize, tok: &str) -> Result<StabilityLabel, LabelError> {
    tok.parse::<u8>()
        .ok()
        .and_then(StabilityLabel::from_code)
        .ok_or_else(|| parse_err(line, format!("bad label `{tok}`")))
}

type Rows = Vec<(usize, Vec<String>)>;

/// Header `<magic> <fields...>` whose last field is the row count, followed
/// by exactly that many rows of `cols` tokens. Returns the header fields
/// after the magic and the rows with their line numbers.
fn read_table<R: BufRead>(
    r: R,
    magic: &str,
    header_fields: usize,
    cols: usize,
) -> Result<(Vec<String>, Rows), LabelError> {
    let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
    let stream = |source| io_err(Path::new("<stream>"), source);
    let header = match lines.next() {
        Some((_, l)) => l.map_err(stream)?,
        None => return Err(parse_err(1, "empty file")),
    };
    let t: Vec<String> = header.split_whitespace().map(str::to_owned).collect();
    if t.len() != 1 + header_fields || t[0] != magic {
        return Err(parse_err(1, format!("malformed `{magic}` header")));
    }
    let count = parse_usize(1, &t[header_fields])?;
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        let (line, text) = match lines.next() {
            Some((n, l)) => (n, l.map_err(stream)?),
            None => return Err(parse_err(rows.len() + 2, "missing row")),
        };
        let toks: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
        if toks.len() != cols {
            return Err(parse_err(line, format!("expected {cols} columns, found {}", toks.len())));
        }
        rows.push((line, toks));
    }
    for (line, text) in lines {
        if !text.map_err(stream)?.trim().is_empty() {
            return Err(parse_err(line, "data after the last declared row"));
        }
    }
    Ok((t[1..].to_vec(), rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(length: usize, mean: f64, max: f64) -> TrackStats {
        TrackStats {
            track_id: 0,
            length,
            mean_error: mean,
            max_error: max,
        }
    }

    fn label(t: usize, mean: f64, max: f64) -> StabilityLabel {
        label_track(&stats(t, mean, max), &LabelThresholds::default())
    }

    #[test]
    fn label_examples() {
        assert_eq!(label(12, 0.5, 2.0), StabilityLabel::Stable);
        assert_eq!(label(15, 2.0, 6.0), StabilityLabel::Unstable);
        assert_eq!(label(9, 0.0, 0.0), StabilityLabel::Ignore);
        assert_eq!(label(9, 3.0, 9.0), StabilityLabel::Ignore);
        assert_eq!(label(12, 1.5, 4.0), StabilityLabel::Ignore);
        // both branch conditions hold: the first wins
        assert_eq!(label(12, 1.0, 5.0), StabilityLabel::Stable);
    }

    #[test]
    fn label_is_monotone() {
        let means = [0.0, 0.5, 1.0, 1.01, 2.0, 3.0];
        let maxes = [0.5, 2.0, 4.99, 5.0, 8.0];
        for t in [5, 9, 10, 11, 30] {
            for &mx in &maxes {
                for w in means.windows(2) {
                    if label(t, w[1], mx) == StabilityLabel::Stable {
                        assert_eq!(label(t, w[0], mx), StabilityLabel::Stable);
                    }
                }
            }
        }
        for &m in &means {
            for &mx in &maxes {
                for t in 1..40 {
                    if label(t, m, mx) == StabilityLabel::Stable {
                        assert_eq!(label(t + 1, m, mx), StabilityLabel::Stable);
                    }
                }
            }
        }
    }

    fn frame_labels(frame: usize, ids: &[usize]) -> FrameLabels {
        FrameLabels {
            frame,
            keypoints: ids
                .iter()
                .map(|&id| LabeledKeypoint {
                    pixel: Vector2::new(id as f64 + 0.25, frame as f64 * 0.5),
                    track_id: id,
                    label: if id % 2 == 0 {
                        StabilityLabel::Stable
                    } else {
                        StabilityLabel::Ignore
                    },
                })
                .collect(),
        }
    }

    #[test]
    fn label_file_round_trip() {
        let f = frame_labels(3, &[4, 1, 7]);
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("VOL1 3\n"));
        assert_eq!(FrameLabels::read_from(buf.as_slice(), 3).unwrap(), f);
    }

    #[test]
    fn label_file_rejects_bad_code() {
        let err = FrameLabels::read_from("VOL1 1\n1 2 3 4\n".as_bytes(), 0).unwrap_err();
        assert!(matches!(err, LabelError::Parse { line: 2, .. }));
        let err = FrameLabels::read_from("VOL1 2\n1 2 3 1\n".as_bytes(), 0).unwrap_err();
        assert!(matches!(err, LabelError::Parse { line: 3, .. }));
    }

    #[test]
    fn pair_uses_shared_tracks() {
        let a = frame_labels(0, &[0, 1, 2, 3]);
        let b = frame_labels(5, &[3, 9, 0]);
        let p = TrainingPair::from_frames(&a, &b);
        let ids: Vec<usize> = p.correspondences.iter().map(|c| c.track_id).collect();
        assert_eq!(ids, vec![0, 3]);
        assert_eq!(p.unmatched_a.len(), 2);
        assert_eq!(p.unmatched_b.len(), 1);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let back = TrainingPair::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.correspondences, p.correspondences);
        assert_eq!((back.frame_a, back.frame_b), (0, 5));
    }

    #[test]
    fn pairs_respect_window_and_seed() {
        let frames: Vec<FrameLabels> = (0..200).map(|i| frame_labels(i, &[i, i + 1])).collect();
        let p1 = emit_training_pairs(&frames, 60, 3, 11).unwrap();
        let p2 = emit_training_pairs(&frames, 60, 3, 11).unwrap();
        assert_eq!(p1, p2);
        assert!(!p1.is_empty());
        for p in &p1 {
            assert!((1..=60).contains(&p.frame_a.abs_diff(p.frame_b)));
        }
        assert_ne!(p1, emit_training_pairs(&frames, 60, 3, 12).unwrap());
    }

    #[test]
    fn window_edge_is_reachable() {
        // two frames exactly 60 apart form a pair, 61 apart do not
        let at = [frame_labels(0, &[1]), frame_labels(60, &[1])];
        assert_eq!(emit_training_pairs(&at, 60, 1, 0).unwrap().len(), 2);
        let past = [frame_labels(0, &[1]), frame_labels(61, &[1])];
        assert!(emit_training_pairs(&past, 60, 1, 0).unwrap().is_empty());
    }

    #[test]
    fn too_few_frames() {
        assert!(matches!(
            emit_training_pairs(&[frame_labels(0, &[1])], 60, 1, 0),
            Err(LabelError::TooFewFrames(1))
        ));
    }
}
