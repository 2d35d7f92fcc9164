//! Sequence manifests: `key value` lines naming the frame rate, depth scale,
//! intrinsics file and per-frame file patterns of a sequence directory.
//!
//! ```text
//! fps 30
//! depth_scale 0.001
//! intrinsics intrinsics.txt
//! features frame_*.features
//! depth depth_*.pgm
//! images image_*.pgm
//! gt gt.tum
//! ```
//!
//! Paths are relative to the manifest's directory. A pattern holds exactly
//! one `*`, which matches the decimal frame index.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::frontend::{load_depth, DepthImage, FrameFeatures};
use crate::geometry::Intrinsics;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}: missing key `{key}`")]
    MissingKey { path: String, key: &'static str },
    #[error("pattern `{0}` must contain exactly one `*` in its file name")]
    Pattern(String),
    #[error("no files match `{0}`")]
    NoMatches(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Load { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory the relative paths resolve against.
    pub dir: PathBuf,
    pub fps: f64,
    pub depth_scale: f64,
    pub intrinsics: PathBuf,
    pub features: Option<String>,
    pub depth: Option<String>,
    pub images: Option<String>,
    pub gt: Option<PathBuf>,
}

fn io_err(path: &Path, source: std::io::Error) -> SequenceError {
    SequenceError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Manifest {
    pub fn parse(text: &str, dir: &Path, origin: &str) -> Result<Self, SequenceError> {
        let mut fps = None;
        let mut depth_scale = None;
        let mut intrinsics = None;
        let mut features = None;
        let mut depth = None;
        let mut images = None;
        let mut gt = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| SequenceError::Parse {
                path: origin.to_string(),
                line: i + 1,
                reason,
            };
            let (key, value) = line
                .split_once(char::is_whitespace)
                .map(|(k, v)| (k, v.trim()))
                .ok_or_else(|| err(format!("expected `key value`, got `{line}`")))?;
            let number = |v: &str| -> Result<f64, SequenceError> {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| *x > 0.0 && x.is_finite())
                    .ok_or_else(|| err(format!("`{key}` needs a positive number, got `{v}`")))
            };
            let slot_taken = match key {
                "fps" => fps.replace(number(value)?).is_some(),
                "depth_scale" => depth_scale.replace(number(value)?).is_some(),
                "intrinsics" => intrinsics.replace(PathBuf::from(value)).is_some(),
                "features" => features.replace(value.to_string()).is_some(),
                "depth" => depth.replace(value.to_string()).is_some(),
                "images" => images.replace(value.to_string()).is_some(),
                "gt" => gt.replace(PathBuf::from(value)).is_some(),
                other => return Err(err(format!("unknown key `{other}`"))),
            };
            if slot_taken {
                return Err(err(format!("duplicate key `{key}`")));
            }
        }
        let missing = |key| SequenceError::MissingKey {
            path: origin.to_string(),
            key,
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            fps: fps.ok_or_else(|| missing("fps"))?,
            depth_scale: depth_scale.unwrap_or(0.001),
            intrinsics: intrinsics.ok_or_else(|| missing("intrinsics"))?,
            features,
            depth,
            images,
            gt,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SequenceError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, dir, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "fps {}\ndepth_scale {}\nintrinsics {}\n",
            self.fps,
            self.depth_scale,
            self.intrinsics.display()
        );
        for (key, value) in [("features", &self.features), ("depth", &self.depth), ("images", &self.images)] {
            if let Some(v) = value {
                s.push_str(&format!("{key} {v}\n"));
            }
        }
        if let Some(gt) = &self.gt {
            s.push_str(&format!("gt {}\n", gt.display()));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), SequenceError> {
        std::fs::write(path, self.to_text()).map_err(|e| io_err(path, e))
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn load_intrinsics(&self) -> Result<Intrinsics, SequenceError> {
        let path = self.resolve(&self.intrinsics);
        Intrinsics::load(&path).map_err(|e| SequenceError::Load {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    fn required<'a>(&self, value: &'a Option<String>, key: &'static str) -> Result<&'a str, SequenceError> {
        value.as_deref().ok_or(SequenceError::MissingKey {
            path: self.dir.join("manifest").display().to_string(),
            key,
        })
    }

    pub fn feature_files(&self) -> Result<Vec<(usize, PathBuf)>, SequenceError> {
        glob_frames(&self.dir, self.required(&self.features, "features")?)
    }

    pub fn depth_files(&self) -> Result<Vec<(usize, PathBuf)>, SequenceError> {
        glob_frames(&self.dir, self.required(&self.depth, "depth")?)
    }

    pub fn image_files(&self) -> Result<Vec<(usize, PathBuf)>, SequenceError> {
        glob_frames(&self.dir, self.required(&self.images, "images")?)
    }

    /// Loads every `every`-th feature file (by position, starting with the
    /// first).
    pub fn load_features(&self, every: usize) -> Result<Vec<FrameFeatures>, SequenceError> {
        self.feature_files()?
            .into_iter()
            .step_by(every.max(1))
            .map(|(frame, path)| {
                FrameFeatures::load(&path, frame).map_err(|e| SequenceError::Load {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })
            })
            .collect()
    }

    pub fn load_depths(&self) -> Result<Vec<(usize, DepthImage)>, SequenceError> {
        self.depth_files()?
            .into_iter()
            .map(|(frame, path)| {
                load_depth(&path)
                    .map(|d| (frame, d))
                    .map_err(|e| SequenceError::Load {
                        path: path.display().to_string(),
                        reason: e.to_string(),
                    })
            })
            .collect()
    }
}

/// Files in `base` (joined with the pattern's directory part) whose names
/// match the single-`*` pattern with a decimal number, sorted by that number.
pub fn glob_frames(base: &Path, pattern: &str) -> Result<Vec<(usize, PathBuf)>, SequenceError> {
    let full = base.join(pattern);
    let dir = full.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let name = full
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| SequenceError::Pattern(pattern.to_string()))?;
    let (prefix, suffix) = match name.split_once('*') {
        Some((p, s)) if !s.contains('*') => (p, s),
        _ => return Err(SequenceError::Pattern(pattern.to_string())),
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
        let entry = entry.map_err(|e| io_err(&dir, e))?;
        let file = entry.file_name();
        let Some(file) = file.to_str() else {
            continue;
        };
        let Some(mid) = file
            .strip_prefix(prefix)
            .and_then(|rest| rest.strip_suffix(suffix))
        else {
            continue;
        };
        if mid.is_empty() || !mid.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        if let Ok(frame) = mid.parse::<usize>() {
            out.push((frame, entry.path()));
        }
    }
    if out.is_empty() {
        return Err(SequenceError::NoMatches(full.display().to_string()));
    }
    out.sort();
    Ok(out)
}
