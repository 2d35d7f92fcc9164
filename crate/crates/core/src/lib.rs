//! Monocular visual odometry with windowed bundle adjustment, track-stability
//! self-labeling, and pose/trajectory evaluation tools.

pub mod backend;
pub mod evalkit;
pub mod frontend;
pub mod geometry;
pub mod labeler;
pub mod sequence;
pub mod synth;
pub mod tracking;
