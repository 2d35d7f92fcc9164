//! Text serialization of a finished VO run, so labeling can run as a
//! separate step.
//!
//! ```text
//! VOM1
//! intrinsics fx fy cx cy width height
//! pose frame r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz
//! point track_id x y z
//! obs track_id frame keypoint u v
//! ```
//!
//! Poses are world-to-camera. `obs` lines of a track appear in frame order.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use super::vo::VoOutput;
use crate::geometry::{Intrinsics, Pose};
use crate::tracking::{Track, TrackGraph, TrackObservation};

const MAGIC: &str = "VOM1";

#[derive(Debug, Error)]
pub enum MapError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl VoOutput {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "intrinsics {}", self.intrinsics)?;
        for (frame, pose) in &self.trajectory {
            let r = pose.rotation();
            let t = pose.translation();
            write!(w, "pose {frame}")?;
            for i in 0..3 {
                for j in 0..3 {
                    write!(w, " {}", r[(i, j)])?;
                }
            }
            writeln!(w, " {} {} {}", t.x, t.y, t.z)?;
        }
        for (id, x) in &self.points {
            writeln!(w, "point {id} {} {} {}", x.x, x.y, x.z)?;
        }
        for track in self.graph.tracks() {
            for o in &track.observations {
                writeln!(w, "obs {} {} {} {} {}", track.id, o.frame, o.keypoint, o.pixel.x, o.pixel.y)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, MapError> {
        let mut intrinsics = None;
        let mut trajectory = Vec::new();
        let mut points = BTreeMap::new();
        let mut tracks: Vec<Track> = Vec::new();
        let mut seen_magic = false;
        for (i, line) in r.lines().enumerate() {
            let line_no = i + 1;
            let err = |reason: String| MapError::Parse { line: line_no, reason };
            let line = line.map_err(|e| err(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if !seen_magic {
                if line != MAGIC {
                    return Err(err(format!("expected `{MAGIC}` header")));
                }
                seen_magic = true;
                continue;
            }
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            if kind == "intrinsics" {
                intrinsics = Some(rest.parse::<Intrinsics>().map_err(|e| err(e.to_string()))?);
                continue;
            }
            let fields: Vec<&str> = rest.split_whitespace().collect();
            let int = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad integer `{s}`")));
            let real = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("bad number `{s}`")))
            };
            let expect = |n: usize| {
                if fields.len() == n {
                    Ok(())
                } else {
                    Err(err(format!("`{kind}` needs {n} fields, got {}", fields.len())))
                }
            };
            match kind {
                "pose" => {
                    expect(13)?;
                    let v: Vec<f64> = fields[1..].iter().map(|s| real(s)).collect::<Result<_, _>>()?;
                    let rotation = Matrix3::from_row_slice(&v[..9]);
                    let pose = Pose::new(rotation, Vector3::new(v[9], v[10], v[11]))
                        .map_err(|e| err(e.to_string()))?;
                    trajectory.push((int(fields[0])?, pose));
                }
                "point" => {
                    expect(4)?;
                    let x = Vector3::new(real(fields[1])?, real(fields[2])?, real(fields[3])?);
                    if points.insert(int(fields[0])?, x).is_some() {
                        return Err(err(format!("duplicate point {}", fields[0])));
                    }
                }
                "obs" => {
                    expect(5)?;
                    let id = int(fields[0])?;
                    let o = TrackObservation {
                        frame: int(fields[1])?,
                        keypoint: int(fields[2])?,
                        pixel: Vector2::new(real(fields[3])?, real(fields[4])?),
                    };
                    if id == tracks.len() {
                        tracks.push(Track {
                            id,
                            observations: Vec::new(),
                            live: false,
                        });
                    } else if id + 1 != tracks.len() {
                        return Err(err(format!("observations of track {id} are not contiguous")));
                    }
                    tracks[id].observations.push(o);
                }
                other => return Err(err(format!("unknown record `{other}`"))),
            }
        }
        let intrinsics = intrinsics.ok_or(MapError::Parse {
            line: 0,
            reason: "missing intrinsics".into(),
        })?;
        if trajectory.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(MapError::Parse {
                line: 0,
                reason: "pose frames are not increasing".into(),
            });
        }
        let graph = TrackGraph::from_tracks(tracks).map_err(|e| MapError::Parse {
            line: 0,
            reason: e.to_string(),
        })?;
        Ok(Self {
            intrinsics,
            trajectory,
            points,
            graph,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        let io = |source| MapError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        self.write_to(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        let file = std::fs::File::open(path).map_err(|source| MapError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
