//! Per-frame keypoints and descriptors: loaded from feature files, or computed
//! with the built-in corner detector from PGM images.

pub mod detector;
pub mod features;
pub mod pgm;

pub use detector::{detect_and_describe, DEFAULT_MAX_POINTS, DESCRIPTOR_DIM};
pub use features::{FeatureError, FeatureFileError, FrameFeatures};
pub use pgm::{load_depth, load_gray, save_depth, save_gray, DepthImage, GrayImage, PgmError, Raster};
