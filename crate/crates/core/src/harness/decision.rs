use serde::{Deserialize, Serialize};

use crate::advgen::DEFAULT_CORRIDOR_HALF_WIDTH;
use crate::error::{Error, Result};
use crate::postprocess::Obstacle;

/// Below this distance a blocked lane cannot be side-passed, meters.
pub const SIDE_PASS_MINIMUM: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Decision {
    Proceed,
    Stop,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decision::Proceed => "PROCEED",
            Decision::Stop => "STOP",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecisionConfig {
    pub corridor_half_width: f64,
    pub side_pass_minimum: f64,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self { corridor_half_width: DEFAULT_CORRIDOR_HALF_WIDTH, side_pass_minimum: SIDE_PASS_MINIMUM }
    }
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.corridor_half_width > 0.0 && self.side_pass_minimum > 0.0) {
            return Err(Error::Validation("corridor and side-pass distance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionState {
    pub decision: Decision,
    /// Box-center distance of the nearest obstacle ahead in the corridor.
    pub nearest_front_obstacle_distance: Option<f64>,
}

/// STOP iff an obstacle ahead inside the lane corridor is closer than the
/// side-pass minimum.
pub fn decide(obstacles: &[Obstacle], cfg: &DecisionConfig) -> DecisionState {
    let nearest = obstacles
        .iter()
        .filter(|o| o.bbox.center_x > 0.0 && o.bbox.center_y.abs() <= cfg.corridor_half_width)
        .map(|o| o.bbox.center_x)
        .min_by(f64::total_cmp);
    let decision = match nearest {
        Some(d) if d < cfg.side_pass_minimum => Decision::Stop,
        _ => Decision::Proceed,
    };
    DecisionState { decision, nearest_front_obstacle_distance: nearest }
}
