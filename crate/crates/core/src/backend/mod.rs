//! Sliding-window bundle adjustment: problem definition, the
//! Levenberg-Marquardt solver, and the per-frame VO driver.

pub mod map;
pub mod problem;
pub mod solver;
pub mod vo;

use thiserror::Error;

pub use map::MapError;
pub use problem::{
    linearize, objective, residual, BAConfig, BAProblem, Observation, ResidualBlock, ScaleAnchor,
    SCALE_ANCHOR_WEIGHT,
};
pub use solver::{optimize, OptimizeReport, Termination};
pub use vo::{run_sequence, FrameReport, VoError, VoOutput, VoState, WeightMap};

#[derive(Debug, Error, PartialEq)]
pub enum BAError {
    #[error("cost is not finite")]
    NonFiniteCost,
    #[error("reduced camera system is singular")]
    Singular,
    #[error("invalid problem: {0}")]
    Invalid(String),
}
