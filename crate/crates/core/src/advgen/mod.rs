//! Adversarial example generation.
//!
//! The attack works in feature space: the spoofed grid `t` is warped by a
//! rotation about the sensor, a translation along x and a height scale,
//! merged into the scene grid `x`, and scored by a Gaussian-masked loss
//! around the target cell. The best parameters are then applied to the
//! spoofed points themselves.

mod features;
mod loss;
mod optimize;

pub use features::{bilinear_sample, merge, transform_features, transform_window};
pub use loss::{adv_loss, adv_loss_from_scores, AttackObjective, GaussianMask};
pub use optimize::{
    centered_start, generate_adversarial, is_success, is_success_against, minimize, sampling_starts, vanilla_optimize,
    write_trajectory_csv, Adam, AttackRecord, AttackResult, AttackSetup, Objective, OptimizeOutcome, StartOutcome,
    TrajectoryRow,
};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::GridGeometry;

/// The three optimization variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    /// Rotation about the sensor z axis, radians.
    pub theta: f64,
    /// Translation along x, meters.
    pub tau_x: f64,
    /// Height scale.
    pub s_h: f64,
}

impl Default for TransformParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl TransformParams {
    pub const fn new(theta: f64, tau_x: f64, s_h: f64) -> Self {
        Self { theta, tau_x, s_h }
    }

    pub const fn identity() -> Self {
        Self::new(0.0, 0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta.is_finite() && self.tau_x.is_finite() && self.s_h.is_finite()) {
            return Err(Error::NonFinite(format!("transform parameters {self:?}")));
        }
        if self.s_h <= 0.0 {
            return Err(Error::Validation(format!("height scale {} must be positive", self.s_h)));
        }
        Ok(())
    }

    /// Same transform with `theta` wrapped into (−π, π].
    pub fn normalized(&self) -> Self {
        Self { theta: crate::spoof::wrap_angle(self.theta), ..*self }
    }

    /// Homogeneous point-space matrix: rotate about z, translate along x, scale z.
    pub fn point_matrix(&self) -> [[f64; 4]; 4] {
        let (s, c) = self.theta.sin_cos();
        [[c, -s, 0.0, self.tau_x], [s, c, 0.0, 0.0], [0.0, 0.0, self.s_h, 0.0], [0.0, 0.0, 0.0, 1.0]]
    }

    pub fn component(&self, k: usize) -> f64 {
        match k {
            0 => self.theta,
            1 => self.tau_x,
            2 => self.s_h,
            _ => panic!("transform has three components"),
        }
    }

    pub fn set_component(&mut self, k: usize, value: f64) {
        match k {
            0 => self.theta = value,
            1 => self.tau_x = value,
            2 => self.s_h = value,
            _ => panic!("transform has three components"),
        }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.theta, self.tau_x, self.s_h]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// Where the fake obstacle should appear.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackTarget {
    /// Continuous row coordinate of the mask center (cell centers are integers).
    pub px: f64,
    /// Continuous column coordinate of the mask center.
    pub py: f64,
    /// Accepted obstacle distances ahead, meters.
    pub distance_band: (f64, f64),
    /// Mask standard deviation, cells.
    pub mask_sigma: f64,
    /// Half-width of the lane corridor, meters.
    pub corridor_half_width: f64,
}

pub const DEFAULT_MASK_SIGMA: f64 = 8.0;
pub const DEFAULT_CORRIDOR_HALF_WIDTH: f64 = 1.75;
pub const CANONICAL_TARGET_DISTANCE: f64 = 5.0;

impl Default for AttackTarget {
    fn default() -> Self {
        Self::ahead(CANONICAL_TARGET_DISTANCE, &GridGeometry::full(crate::preprocess::DEFAULT_RANGE))
    }
}

impl AttackTarget {
    /// Target on the vehicle axis `distance` meters ahead, band [2, 8] m.
    pub fn ahead(distance: f64, geometry: &GridGeometry) -> Self {
        Self::at(distance, 0.0, geometry)
    }

    pub fn at(w_x: f64, w_y: f64, geometry: &GridGeometry) -> Self {
        let (px, py) = geometry.world_to_continuous(w_x, w_y);
        Self {
            px,
            py,
            distance_band: (2.0, 8.0),
            mask_sigma: DEFAULT_MASK_SIGMA,
            corridor_half_width: DEFAULT_CORRIDOR_HALF_WIDTH,
        }
    }

    pub fn world(&self, geometry: &GridGeometry) -> (f64, f64) {
        geometry.continuous_to_world(self.px, self.py)
    }

    pub fn validate(&self, geometry: &GridGeometry) -> Result<()> {
        let lim = geometry.lattice as f64 - 0.5;
        if !(self.px >= -0.5 && self.px <= lim && self.py >= -0.5 && self.py <= lim) {
            return Err(Error::Validation(format!("target ({}, {}) lies outside the grid", self.px, self.py)));
        }
        let (lo, hi) = self.distance_band;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::Validation(format!("distance band ({lo}, {hi}) must be positive and ordered")));
        }
        if !(self.mask_sigma > 0.0 && self.mask_sigma.is_finite()) {
            return Err(Error::Validation("mask sigma must be positive".into()));
        }
        if !(self.corridor_half_width > 0.0) {
            return Err(Error::Validation("corridor half-width must be positive".into()));
        }
        Ok(())
    }

    /// True when a bird's-eye position is in the band ahead and inside the corridor.
    pub fn accepts(&self, w_x: f64, w_y: f64) -> bool {
        w_x >= self.distance_band.0 && w_x <= self.distance_band.1 && w_y.abs() <= self.corridor_half_width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMode {
    Vanilla,
    Sampling,
}

impl std::fmt::Display for OptimizerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerMode::Vanilla => "vanilla",
            OptimizerMode::Sampling => "sampling",
        })
    }
}

impl std::str::FromStr for OptimizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(OptimizerMode::Vanilla),
            "sampling" => Ok(OptimizerMode::Sampling),
            other => Err(Error::Config(format!("unknown optimizer mode `{other}`"))),
        }
    }
}

/// Start-grid and optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSpec {
    /// Half-width of the translation offsets, meters.
    pub l_tau: f64,
    /// Half-width of the rotation offsets, radians. `None` uses the angle
    /// whose chord at the target range is 2 m.
    pub l_theta: Option<f64>,
    /// Samples per axis.
    pub n: usize,
    pub max_iterations: usize,
    pub learning_rate: f64,
    /// Central-difference step for the gradient.
    pub gradient_step: f64,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self { l_tau: 12.5, l_theta: None, n: 5, max_iterations: 100, learning_rate: 1e-4, gradient_step: 1e-3 }
    }
}

impl SamplingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.max_iterations == 0 {
            return Err(Error::Validation("n and max_iterations must be at least 1".into()));
        }
        if !(self.l_tau > 0.0) || self.l_theta.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::Validation("sampling bounds must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.gradient_step > 0.0) {
            return Err(Error::Validation("learning rate and gradient step must be positive".into()));
        }
        Ok(())
    }

    /// Rotation half-width for a target at `target_range` meters.
    pub fn theta_bound(&self, target_range: f64) -> f64 {
        self.l_theta.unwrap_or_else(|| 2.0 * (1.0 / target_range.max(1.0)).asin())
    }
}

/// Wraps into (−π, π].
pub(crate) fn wrap(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        theta
    } else {
        crate::spoof::wrap_angle(theta)
    }
}
