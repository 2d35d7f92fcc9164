//! Per-frame keypoints and descriptors, and their text file format.
//!
//! ```text
//! VOF1 <count> <dim>
//! x y score d1 ... d_dim      (count rows)
//! ```

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::Vector2;
use thiserror::Error;

use crate::geometry::Intrinsics;

const MAGIC: &str = "VOF1";

#[derive(Debug, Error)]
pub enum FeatureFileError {
    #[error("line {line}: malformed header: {reason}")]
    Header { line: usize, reason: String },
    #[error("line {line}: missing row {row} declared by the header")]
    MissingRow { row: usize, line: usize },
    #[error("line {line}: expected {expected} columns, found {found}")]
    RowLength {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}, column {column}: cannot parse `{token}`")]
    BadNumber {
        line: usize,
        column: usize,
        token: String,
    },
    #[error("line {line}, column {column}: non-finite value")]
    NonFinite { line: usize, column: usize },
    #[error("line {line}: data after the last declared row")]
    TrailingData { line: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("frame {frame}: {keypoints} keypoints, {descriptors} descriptors, {scores} scores")]
    LengthMismatch {
        frame: usize,
        keypoints: usize,
        descriptors: usize,
        scores: usize,
    },
    #[error("frame {frame}: descriptor {index} has dimension {found}, expected {expected}")]
    Dimension {
        frame: usize,
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("frame {frame}: descriptor {index} has norm {norm}")]
    NotUnitNorm { frame: usize, index: usize, norm: f64 },
    #[error("frame {frame}: keypoint {index} outside the image")]
    OutOfBounds { frame: usize, index: usize },
    #[error("frame {frame}: score {index} outside [0, 1]")]
    Score { frame: usize, index: usize },
}

/// Keypoints, descriptors and scores detected in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub frame_index: usize,
    pub dim: usize,
    pub keypoints: Vec<Vector2<f64>>,
    pub descriptors: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

impl FrameFeatures {
    pub fn empty(frame_index: usize, dim: usize) -> Self {
        Self {
            frame_index,
            dim,
            keypoints: Vec::new(),
            descriptors: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn push(&mut self, keypoint: Vector2<f64>, descriptor: Vec<f64>, score: f64) {
        self.keypoints.push(keypoint);
        self.descriptors.push(descriptor);
        self.scores.push(score);
    }

    /// Checks the list lengths, descriptor norms, score range, and (when
    /// intrinsics are given) that every keypoint lies inside the image.
    pub fn validate(&self, k: Option<&Intrinsics>) -> Result<(), FeatureError> {
        let frame = self.frame_index;
        if self.descriptors.len() != self.keypoints.len() || self.scores.len() != self.keypoints.len()
        {
            return Err(FeatureError::LengthMismatch {
                frame,
                keypoints: self.keypoints.len(),
                descriptors: self.descriptors.len(),
                scores: self.scores.len(),
            });
        }
        for (index, d) in self.descriptors.iter().enumerate() {
            if d.len() != self.dim {
                return Err(FeatureError::Dimension {
                    frame,
                    index,
                    expected: self.dim,
                    found: d.len(),
                });
            }
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(FeatureError::NotUnitNorm { frame, index, norm });
            }
        }
        for (index, s) in self.scores.iter().enumerate() {
            if !(0.0..=1.0).contains(s) {
                return Err(FeatureError::Score { frame, index });
            }
        }
        if let Some(k) = k {
            if let Some(index) = self.keypoints.iter().position(|p| !k.contains(p)) {
                return Err(FeatureError::OutOfBounds { frame, index });
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{MAGIC} {} {}", self.len(), self.dim)?;
        for ((p, s), d) in self.keypoints.iter().zip(&self.scores).zip(&self.descriptors) {
            write!(w, "{} {} {}", p.x, p.y, s)?;
            for v in d {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R, frame_index: usize) -> Result<Self, FeatureFileError> {
        let io = |source| FeatureFileError::Io {
            path: "<stream>".into(),
            source,
        };
        let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));

        let (line_no, header) = match lines.next() {
            Some((n, l)) => (n, l.map_err(io)?),
            None => {
                return Err(FeatureFileError::Header {
                    line: 1,
                    reason: "empty file".into(),
                })
            }
        };
        let tokens: Vec<&str> = header.split_whitespace().collect();
        let header_err = |reason: &str| FeatureFileError::Header {
            line: line_no,
            reason: reason.into(),
        };
        if tokens.len() != 3 || tokens[0] != MAGIC {
            return Err(header_err("expected `VOF1 <count> <dim>`"));
        }
        let count: usize = tokens[1].parse().map_err(|_| header_err("bad point count"))?;
        let dim: usize = tokens[2].parse().map_err(|_| header_err("bad descriptor dimension"))?;

        let mut out = FrameFeatures::empty(frame_index, dim);
        let expected = 3 + dim;
        for row in 1..=count {
            let (line, text) = match lines.next() {
                Some((n, l)) => (n, l.map_err(io)?),
                None => {
                    return Err(FeatureFileError::MissingRow {
                        row,
                        line: row + 1,
                    })
                }
            };
            let tokens: Vec<&str> = text.split_whitespace().collect();
            if tokens.is_empty() {
                return Err(FeatureFileError::MissingRow { row, line });
            }
            if tokens.len() != expected {
                return Err(FeatureFileError::RowLength {
                    line,
                    expected,
                    found: tokens.len(),
                });
            }
            let mut values = Vec::with_capacity(expected);
            for (i, tok) in tokens.iter().enumerate() {
                let v: f64 = tok.parse().map_err(|_| FeatureFileError::BadNumber {
                    line,
                    column: i + 1,
                    token: tok.to_string(),
                })?;
                if !v.is_finite() {
                    return Err(FeatureFileError::NonFinite {
                        line,
                        column: i + 1,
                    });
                }
                values.push(v);
            }
            out.push(Vector2::new(values[0], values[1]), values[3..].to_vec(), values[2]);
        }
        for (line, text) in lines {
            if !text.map_err(io)?.trim().is_empty() {
                return Err(FeatureFileError::TrailingData { line });
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureFileError> {
        let io = |source| FeatureFileError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(io)?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(io)
    }

    pub fn load(path: &Path, frame_index: usize) -> Result<Self, FeatureFileError> {
        let file = std::fs::File::open(path).map_err(|source| FeatureFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_from(BufReader::new(file), frame_index)
    }
}
