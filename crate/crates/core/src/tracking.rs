//! Mutual nearest-neighbour descriptor matching and consecutive-frame track
//! chaining.

use std::collections::BTreeMap;

use nalgebra::Vector2;
use thiserror::Error;

use crate::frontend::FrameFeatures;

/// Default descriptor-distance threshold for track formation.
pub const DEFAULT_TAU: f64 = 0.7;

#[derive(Debug, Error, PartialEq)]
pub enum TrackingError {
    #[error("descriptor dimension mismatch: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("match ({index_a}, {index_b}) out of range for frames with {len_a} and {len_b} keypoints")]
    IndexOutOfRange {
        index_a: usize,
        index_b: usize,
        len_a: usize,
        len_b: usize,
    },
    #[error("keypoint index repeated in match list")]
    DuplicateIndex,
    #[error("frame {next} does not follow frame {last}")]
    FrameOrder { last: usize, next: usize },
    #[error("track graph has no frames yet")]
    Empty,
    #[error("inconsistent tracks: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Bidirectional nearest-neighbour matches with distance at most `tau`.
///
/// Pass `f64::INFINITY` to disable the distance filter. Nearest-neighbour ties
/// resolve to the lowest index. Matches are ordered by `index_a`.
pub fn match_bidirectional(
    da: &[Vec<f64>],
    db: &[Vec<f64>],
    tau: f64,
) -> Result<Vec<Match>, TrackingError> {
    let (Some(first_a), Some(_)) = (da.first(), db.first()) else {
        return Ok(Vec::new());
    };
    let dim = first_a.len();
    if let Some(bad) = da.iter().chain(db).find(|d| d.len() != dim) {
        return Err(TrackingError::DimensionMismatch {
            a: dim,
            b: bad.len(),
        });
    }

    let nb = db.len();
    let mut dist = vec![0.0; da.len() * nb];
    for (i, a) in da.iter().enumerate() {
        for (j, b) in db.iter().enumerate() {
            dist[i * nb + j] = squared_distance(a, b);
        }
    }
    let mut best_in_a = vec![(f64::INFINITY, usize::MAX); nb];
    let mut best_in_b = vec![(f64::INFINITY, usize::MAX); da.len()];
    for i in 0..da.len() {
        for j in 0..nb {
            let d = dist[i * nb + j];
            if d < best_in_b[i].0 {
                best_in_b[i] = (d, j);
            }
            if d < best_in_a[j].0 {
                best_in_a[j] = (d, i);
            }
        }
    }
    let tau_sq = tau * tau;
    Ok(best_in_b
        .iter()
        .enumerate()
        .filter_map(|(i, &(d, j))| {
            (j != usize::MAX && best_in_a[j].1 == i && d <= tau_sq).then(|| Match {
                index_a: i,
                index_b: j,
                distance: d.sqrt(),
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackObservation {
    pub frame: usize,
    pub keypoint: usize,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: usize,
    pub observations: Vec<TrackObservation>,
    /// Still extendable at the newest frame.
    pub live: bool,
}

impl Track {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn first_frame(&self) -> usize {
        self.observations[0].frame
    }

    pub fn last_frame(&self) -> usize {
        self.observations[self.observations.len() - 1].frame
    }

    pub fn observation_in(&self, frame: usize) -> Option<&TrackObservation> {
        let first = self.first_frame();
        if frame < first {
            return None;
        }
        // frames are consecutive in processing order, which may skip indices
        self.observations.iter().find(|o| o.frame == frame)
    }
}

/// Tracks over a frame sequence with a per-frame keypoint → track index.
///
/// Frames must arrive with strictly increasing indices; a track only extends
/// from the previous processed frame to the next one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackGraph {
    tracks: Vec<Track>,
    frames: BTreeMap<usize, Vec<usize>>,
    last_frame: Option<usize>,
}

impl TrackGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn track(&self, id: usize) -> Option<&Track> {
        self.tracks.get(id)
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.last_frame
    }

    pub fn frame_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.frames.keys().copied()
    }

    /// Track id of every keypoint in `frame`, indexed by keypoint.
    pub fn frame_tracks(&self, frame: usize) -> Option<&[usize]> {
        self.frames.get(&frame).map(Vec::as_slice)
    }

    pub fn track_of(&self, frame: usize, keypoint: usize) -> Option<usize> {
        self.frames.get(&frame).and_then(|v| v.get(keypoint).copied())
    }

    fn new_track(&mut self, frame: usize, keypoint: usize, pixel: Vector2<f64>) -> usize {
        let id = self.tracks.len();
        self.tracks.push(Track {
            id,
            observations: vec![TrackObservation {
                frame,
                keypoint,
                pixel,
            }],
            live: true,
        });
        id
    }

    /// Starts the graph: every keypoint of the first frame opens a track.
    pub fn add_first_frame(&mut self, features: &FrameFeatures) -> Result<(), TrackingError> {
        if let Some(last) = self.last_frame {
            return Err(TrackingError::FrameOrder {
                last,
                next: features.frame_index,
            });
        }
        let frame = features.frame_index;
        let ids = features
            .keypoints
            .iter()
            .enumerate()
            .map(|(k, p)| self.new_track(frame, k, *p))
            .collect();
        self.frames.insert(frame, ids);
        self.last_frame = Some(frame);
        Ok(())
    }

    /// Extends tracks from the last frame into `next` using `matches`
    /// (computed from the last frame to `next`). Unmatched keypoints of `next`
    /// open new tracks; tracks that were not extended stop being live.
    pub fn extend(&mut self, matches: &[Match], next: &FrameFeatures) -> Result<(), TrackingError> {
        let last = self.last_frame.ok_or(TrackingError::Empty)?;
        if next.frame_index <= last {
            return Err(TrackingError::FrameOrder {
                last,
                next: next.frame_index,
            });
        }
        let prev_ids = &self.frames[&last];
        let len_a = prev_ids.len();
        let len_b = next.len();
        let mut used_a = vec![false; len_a];
        let mut assigned: Vec<Option<usize>> = vec![None; len_b];
        for m in matches {
            if m.index_a >= len_a || m.index_b >= len_b {
                return Err(TrackingError::IndexOutOfRange {
                    index_a: m.index_a,
                    index_b: m.index_b,
                    len_a,
                    len_b,
                });
            }
            if used_a[m.index_a] || assigned[m.index_b].is_some() {
                return Err(TrackingError::DuplicateIndex);
            }
            used_a[m.index_a] = true;
            assigned[m.index_b] = Some(prev_ids[m.index_a]);
        }

        for t in self.tracks.iter_mut().filter(|t| t.live) {
            t.live = false;
        }
        let frame = next.frame_index;
        let mut ids = Vec::with_capacity(len_b);
        for (k, (pixel, track)) in next.keypoints.iter().zip(assigned).enumerate() {
            let id = match track {
                Some(id) => {
                    let t = &mut self.tracks[id];
                    t.observations.push(TrackObservation {
                        frame,
                        keypoint: k,
                        pixel: *pixel,
                    });
                    t.live = true;
                    id
                }
                None => self.new_track(frame, k, *pixel),
            };
            ids.push(id);
        }
        self.frames.insert(frame, ids);
        self.last_frame = Some(frame);
        Ok(())
    }

    /// Rebuilds a graph from its tracks. Track ids must equal their
    /// positions, and each frame's keypoints must be covered exactly once.
    pub fn from_tracks(mut tracks: Vec<Track>) -> Result<Self, TrackingError> {
        let bad = |m: String| Err(TrackingError::Inconsistent(m));
        let mut frames: BTreeMap<usize, Vec<Option<usize>>> = BTreeMap::new();
        for (i, t) in tracks.iter().enumerate() {
            if t.id != i || t.is_empty() {
                return bad(format!("track at position {i} has id {} and {} observations", t.id, t.len()));
            }
            if t.observations.windows(2).any(|w| w[1].frame <= w[0].frame) {
                return bad(format!("track {i} frames are not increasing"));
            }
            for o in &t.observations {
                let slots = frames.entry(o.frame).or_default();
                if slots.len() <= o.keypoint {
                    slots.resize(o.keypoint + 1, None);
                }
                if slots[o.keypoint].replace(i).is_some() {
                    return bad(format!("keypoint {} of frame {} is in two tracks", o.keypoint, o.frame));
                }
            }
        }
        let mut dense = BTreeMap::new();
        for (frame, slots) in frames {
            let ids: Option<Vec<usize>> = slots.into_iter().collect();
            let Some(ids) = ids else {
                return bad(format!("frame {frame} has keypoints without a track"));
            };
            dense.insert(frame, ids);
        }
        let last_frame = dense.keys().next_back().copied();
        for t in &mut tracks {
            t.live = Some(t.last_frame()) == last_frame;
        }
        Ok(Self {
            tracks,
            frames: dense,
            last_frame,
        })
    }

    /// Matches and chains a whole sequence of frames.
    pub fn build(frames: &[FrameFeatures], tau: f64) -> Result<Self, TrackingError> {
        let mut graph = Self::new();
        let mut iter = frames.iter();
        let Some(first) = iter.next() else {
            return Ok(graph);
        };
        graph.add_first_frame(first)?;
        let mut prev = first;
        for next in iter {
            let matches = match_bidirectional(&prev.descriptors, &next.descriptors, tau)?;
            graph.extend(&matches, next)?;
            prev = next;
        }
        Ok(graph)
    }
}
