//! Bundled sample drawing used by tests, benchmarks and the CLI defaults.

use crate::vecdraw::{Drawing, Result};

pub const ROBOT_SVG: &str = include_str!("../assets/robot.svg");
pub const ROBOT_BOUNDS: &str = include_str!("../assets/robot.bounds.json");

/// A 64×64 figure with 56 perturbation variables, eight frame keypoints
/// and a mask covering the canvas.
pub fn robot() -> Result<Drawing> {
    Drawing::parse(ROBOT_SVG, ROBOT_BOUNDS)
}
