//! Spoofing-attack capability model.
//!
//! A spoofer synchronised to the victim LiDAR's firing sequence can choose,
//! per firing slot, whether a fake return appears and at what delay. Slots
//! map to a fixed (azimuth, elevation) pair, delays map to range through
//! `d = c·Δt / 2`. The reachable set of traces is then closed under three
//! edits: moving points along their ray, shifting them between vertical
//! lines, and rotating the whole trace about the sensor axis.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::advgen::TransformParams;
use crate::error::{Error, Result};
use crate::pointcloud::{load_pointcloud, save_pointcloud, CloudFormat, Point, PointCloud, Pose};

/// Speed of light in meters per nanosecond.
pub const SPEED_OF_LIGHT_M_PER_NS: f64 = 0.299_792_458;

/// Spoofable ranges accepted by [`synthesize_trace`], meters.
pub const MIN_SPOOF_RANGE: f64 = 1.0;
pub const MAX_SPOOF_RANGE: f64 = 100.0;

/// Tolerance when deciding whether a point sits on a vertical line, degrees.
pub const LINE_TOLERANCE_DEG: f64 = 1e-6;

/// Firing-sequence timing of the victim LiDAR (VLP-16 by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarTimingModel {
    /// Elevation of each laser, degrees, ascending.
    pub vertical_angles: Vec<f64>,
    /// Laser fired in each slot of a cycle, as an index into `vertical_angles`.
    pub firing_order: Vec<usize>,
    /// Time between consecutive firing cycles, microseconds.
    pub cycle_period: f64,
    /// Time between consecutive lasers inside a cycle, microseconds.
    pub slot_period: f64,
    /// Receive window after each firing, nanoseconds.
    pub receive_window: f64,
    /// Azimuth advanced per firing cycle, degrees.
    pub azimuth_resolution: f64,
    /// Horizontal angle the spoofer can cover, degrees.
    pub azimuth_window: f64,
    /// Intensity assigned to spoofed returns.
    pub spoof_intensity: f64,
}

impl Default for LidarTimingModel {
    fn default() -> Self {
        Self::vlp16()
    }
}

impl LidarTimingModel {
    pub fn vlp16() -> Self {
        let vertical_angles: Vec<f64> = (0..16).map(|i| -15.0 + 2.0 * i as f64).collect();
        // Interleaved order: -15, 1, -13, 3, ..., -1, 15.
        let firing_order = (0..16).map(|slot| if slot % 2 == 0 { slot / 2 } else { 8 + slot / 2 }).collect();
        Self {
            vertical_angles,
            firing_order,
            cycle_period: 55.296,
            slot_period: 2.304,
            receive_window: 667.0,
            azimuth_resolution: 0.2,
            azimuth_window: 8.0,
            spoof_intensity: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertical_angles.len();
        if n == 0 {
            return Err(Error::Validation("timing model has no vertical angles".into()));
        }
        if self.vertical_angles.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Validation("vertical angles must be strictly ascending".into()));
        }
        if self.vertical_angles.iter().any(|a| !(-15.0..=15.0).contains(a)) {
            return Err(Error::Validation("vertical angles must lie within [-15, 15] degrees".into()));
        }
        if !(self.cycle_period > self.slot_period && self.slot_period > 0.0) {
            return Err(Error::Validation("need cycle_period > slot_period > 0".into()));
        }
        if self.slot_period * self.firing_order.len() as f64 > self.cycle_period {
            return Err(Error::Validation("firing slots do not fit in one cycle".into()));
        }
        let mut seen = vec![false; n];
        if self.firing_order.len() != n {
            return Err(Error::Validation("firing order must list every laser once".into()));
        }
        for &i in &self.firing_order {
            if i >= n || seen[i] {
                return Err(Error::Validation("firing order must be a permutation of the lasers".into()));
            }
            seen[i] = true;
        }
        let positive = [self.receive_window, self.azimuth_resolution, self.azimuth_window];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Validation("receive window and azimuth parameters must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.spoof_intensity) {
            return Err(Error::Validation("spoof intensity must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Number of whole firing cycles inside the spoofable azimuth window.
    pub fn cycles_in_window(&self) -> usize {
        (self.azimuth_window / self.azimuth_resolution + 1e-9).floor() as usize
    }

    pub fn lasers(&self) -> usize {
        self.vertical_angles.len()
    }

    /// Azimuth (degrees) at which `slot` of `cycle` fires, for a window centered on `center`.
    pub fn slot_azimuth(&self, cycle: usize, slot: usize, center: f64) -> f64 {
        let frac = slot as f64 * self.slot_period / self.cycle_period;
        center - 0.5 * self.azimuth_window + (cycle as f64 + frac) * self.azimuth_resolution
    }

    /// Index of the vertical line nearest to `elevation_deg`.
    pub fn nearest_line(&self, elevation_deg: f64) -> usize {
        let mut best = 0;
        for (i, a) in self.vertical_angles.iter().enumerate() {
            if (a - elevation_deg).abs() < (self.vertical_angles[best] - elevation_deg).abs() {
                best = i;
            }
        }
        best
    }

    /// Indices of the `count` centermost lines, ascending.
    pub fn central_lines(&self, count: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.lasers()).collect();
        idx.sort_by(|&a, &b| self.vertical_angles[a].abs().total_cmp(&self.vertical_angles[b].abs()).then(a.cmp(&b)));
        let mut chosen: Vec<usize> = idx.into_iter().take(count.min(self.lasers())).collect();
        chosen.sort_unstable();
        chosen
    }
}

pub fn delay_to_range(delay_ns: f64) -> f64 {
    SPEED_OF_LIGHT_M_PER_NS * delay_ns / 2.0
}

pub fn range_to_delay(range_m: f64) -> f64 {
    2.0 * range_m / SPEED_OF_LIGHT_M_PER_NS
}

/// Reliable spoofed-point budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Budget {
    Twenty,
    Forty,
    Sixty,
}

impl Budget {
    pub const ALL: [Budget; 3] = [Budget::Twenty, Budget::Forty, Budget::Sixty];

    pub fn points(self) -> usize {
        match self {
            Budget::Twenty => 20,
            Budget::Forty => 40,
            Budget::Sixty => 60,
        }
    }

    /// Smallest budget that can hold `n` points.
    pub fn covering(n: usize) -> Result<Budget> {
        Budget::ALL
            .into_iter()
            .find(|b| b.points() >= n)
            .ok_or_else(|| Error::Capability(format!("{n} spoofed points exceed the 60-point budget")))
    }
}

impl TryFrom<u32> for Budget {
    type Error = Error;

    fn try_from(v: u32) -> Result<Budget> {
        match v {
            20 => Ok(Budget::Twenty),
            40 => Ok(Budget::Forty),
            60 => Ok(Budget::Sixty),
            other => Err(Error::Validation(format!("budget must be 20, 40 or 60, got {other}"))),
        }
    }
}

impl From<Budget> for u32 {
    fn from(b: Budget) -> u32 {
        b.points() as u32
    }
}

impl std::fmt::Display for Budget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.points())
    }
}

/// A spoofed point cloud plus the capability metadata it was produced under.
#[derive(Debug, Clone, PartialEq)]
pub struct SpoofTrace {
    pub points: PointCloud,
    pub budget: Budget,
    /// Azimuth window in degrees.
    pub azimuth_window: f64,
    /// Set once the trace has been rotated so its mean azimuth is zero.
    pub aligned: bool,
}

impl SpoofTrace {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn with_points(&self, points: PointCloud, aligned: bool) -> SpoofTrace {
        SpoofTrace { points, budget: self.budget, azimuth_window: self.azimuth_window, aligned }
    }

    /// Arithmetic mean azimuth in radians, unwrapped around the first point.
    pub fn mean_azimuth(&self) -> Option<f64> {
        let first = self.points.points().first()?.azimuth();
        let sum: f64 = self.points.iter().map(|p| wrap_angle(p.azimuth() - first)).sum();
        Some(first + sum / self.len() as f64)
    }

    /// Spread between the extreme azimuths, degrees.
    pub fn azimuth_span(&self) -> f64 {
        let Some(center) = self.mean_azimuth() else { return 0.0 };
        let (lo, hi) = self.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let d = wrap_angle(p.azimuth() - center);
            (lo.min(d), hi.max(d))
        });
        (hi - lo).to_degrees()
    }

    pub fn save(&self, cloud_path: &Path) -> Result<()> {
        save_pointcloud(&self.points, cloud_path, CloudFormat::from_path(cloud_path))?;
        let meta = TraceMetadata {
            budget: self.budget.points() as u32,
            azimuth_window: self.azimuth_window,
            aligned: self.aligned,
            points: self.len(),
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(sidecar_path(cloud_path), json + "\n")?;
        Ok(())
    }

    pub fn load(cloud_path: &Path) -> Result<SpoofTrace> {
        let points = load_pointcloud(cloud_path, CloudFormat::from_path(cloud_path))?;
        let raw = fs::read_to_string(sidecar_path(cloud_path))?;
        let meta: TraceMetadata = serde_json::from_str(&raw).map_err(|e| Error::Config(e.to_string()))?;
        if meta.points != points.len() {
            return Err(Error::Validation(format!(
                "sidecar lists {} points but the cloud holds {}",
                meta.points,
                points.len()
            )));
        }
        let budget = Budget::try_from(meta.budget)?;
        if points.len() > budget.points() {
            return Err(Error::Capability("trace exceeds its budget".into()));
        }
        Ok(SpoofTrace { points, budget, azimuth_window: meta.azimuth_window, aligned: meta.aligned })
    }
}

/// Sidecar record stored next to a saved trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub budget: u32,
    pub azimuth_window: f64,
    pub aligned: bool,
    pub points: usize,
}

pub fn sidecar_path(cloud_path: &Path) -> PathBuf {
    let mut name = cloud_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    cloud_path.with_file_name(name)
}

/// Wraps an angle in radians into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a % TAU;
    if w <= -PI {
        w += TAU;
    } else if w > PI {
        w -= TAU;
    }
    w
}

/// One attacker pulse: which firing slot it answers and the delay after that firing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduledPulse {
    /// Firing cycle counted from the start of the azimuth window.
    pub cycle: usize,
    /// Slot inside the cycle (position in the firing order).
    pub slot: usize,
    /// Delay after the victim's firing, nanoseconds.
    pub delay: f64,
}

/// Turns a pulse schedule into the trace the victim will record.
pub fn synthesize_trace(
    timing: &LidarTimingModel,
    waveform: &[ScheduledPulse],
    center_azimuth: f64,
) -> Result<SpoofTrace> {
    timing.validate()?;
    let budget = Budget::covering(waveform.len())?;
    let cycles = timing.cycles_in_window();
    let mut taken = std::collections::HashSet::new();
    let mut points = Vec::with_capacity(waveform.len());
    for (i, pulse) in waveform.iter().enumerate() {
        if pulse.cycle >= cycles {
            return Err(Error::Capability(format!(
                "pulse {i}: cycle {} lies outside the {}° window ({cycles} cycles)",
                pulse.cycle, timing.azimuth_window
            )));
        }
        if pulse.slot >= timing.firing_order.len() {
            return Err(Error::Capability(format!("pulse {i}: slot {} does not exist", pulse.slot)));
        }
        if !taken.insert((pulse.cycle, pulse.slot)) {
            return Err(Error::Capability(format!(
                "pulse {i}: slot ({}, {}) already answered",
                pulse.cycle, pulse.slot
            )));
        }
        let range = delay_to_range(pulse.delay);
        if !(MIN_SPOOF_RANGE..=MAX_SPOOF_RANGE).contains(&range) {
            return Err(Error::Validation(format!(
                "pulse {i}: delay {} ns maps to {range:.3} m, outside [{MIN_SPOOF_RANGE}, {MAX_SPOOF_RANGE}] m",
                pulse.delay
            )));
        }
        let elevation = timing.vertical_angles[timing.firing_order[pulse.slot]];
        let azimuth = timing.slot_azimuth(pulse.cycle, pulse.slot, center_azimuth);
        points.push(Point::from_spherical(range, azimuth.to_radians(), elevation.to_radians(), timing.spoof_intensity));
    }
    Ok(SpoofTrace { points: PointCloud::new(points)?, budget, azimuth_window: timing.azimuth_window, aligned: false })
}

/// Changes to a trace the spoofer can make.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CapabilityDelta {
    /// Shift along each point's sensor ray, meters.
    pub delta_r: f64,
    /// Whole vertical-line steps (positive = upward).
    pub delta_h: i32,
    /// Rotation about the sensor z-axis, degrees.
    pub delta_theta: f64,
}

pub fn apply_capability(trace: &SpoofTrace, delta: &CapabilityDelta, timing: &LidarTimingModel) -> Result<SpoofTrace> {
    if trace.is_empty() {
        return Err(Error::Precondition("cannot modify an empty trace".into()));
    }
    if !(delta.delta_r.is_finite() && delta.delta_theta.is_finite()) {
        return Err(Error::Validation("capability delta must be finite".into()));
    }
    let mut pts: Vec<Point> = trace.points.points().to_vec();

    if delta.delta_h != 0 {
        let lines = timing.lasers() as i64;
        for p in &mut pts {
            let line = timing.nearest_line(p.elevation().to_degrees()) as i64;
            let target = line + delta.delta_h as i64;
            if !(0..lines).contains(&target) {
                return Err(Error::Capability(format!(
                    "shifting line {line} by {} leaves the {lines} supported lines",
                    delta.delta_h
                )));
            }
            let el = timing.vertical_angles[target as usize].to_radians();
            *p = Point::from_spherical(p.range(), p.azimuth(), el, p.intensity);
        }
    }

    if delta.delta_r != 0.0 {
        for p in &mut pts {
            let r = p.range();
            let moved = r + delta.delta_r;
            if !(moved > 0.0) {
                return Err(Error::Capability(format!("moving a point at {r:.3} m by {} m", delta.delta_r)));
            }
            let k = moved / r;
            *p = Point::new(p.w_x * k, p.w_y * k, p.w_z * k, p.intensity);
        }
    }

    if delta.delta_theta != 0.0 {
        let a = delta.delta_theta.to_radians();
        for p in &mut pts {
            *p = p.rotated_z(a);
        }
    }

    Ok(trace.with_points(PointCloud::new(pts)?, trace.aligned && delta.delta_theta == 0.0))
}

/// Rotates the trace about z so its mean azimuth becomes zero.
pub fn align_trace(trace: &SpoofTrace) -> Result<SpoofTrace> {
    let mean = trace.mean_azimuth().ok_or_else(|| Error::Precondition("cannot align an empty trace".into()))?;
    if mean == 0.0 {
        return Ok(trace.with_points(trace.points.clone(), true));
    }
    let pts = trace.points.iter().map(|p| p.rotated_z(-mean)).collect();
    Ok(trace.with_points(PointCloud::new(pts)?, true))
}

/// Applies the point-space transform: rotation `theta` about z, translation
/// `tau_x` along x, and scaling of `w_z` by `s_h`. Intensities are kept.
pub fn transform_trace_3d(trace: &SpoofTrace, params: &TransformParams) -> Result<SpoofTrace> {
    if !trace.aligned {
        return Err(Error::Precondition("transform requires an aligned trace".into()));
    }
    params.validate()?;
    let m = params.point_matrix();
    let pts = trace
        .points
        .iter()
        .map(|p| {
            let v = [p.w_x, p.w_y, p.w_z, 1.0];
            let row = |i: usize| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2] + m[i][3] * v[3];
            Point::new(row(0), row(1), row(2), p.intensity)
        })
        .collect();
    Ok(trace.with_points(PointCloud::new(pts)?, false))
}

/// [`transform_trace_3d`] evaluated in the frame reached through `pose`
/// (e.g. the ground-level vehicle frame), with the result mapped back.
pub fn transform_trace_in_frame(trace: &SpoofTrace, params: &TransformParams, pose: &Pose) -> Result<SpoofTrace> {
    let lifted = SpoofTrace { points: trace.points.transform(pose), ..trace.clone() };
    let moved = transform_trace_3d(&lifted, params)?;
    Ok(SpoofTrace { points: moved.points.transform(&pose.inverse()), ..moved })
}

/// Snaps a sensor-frame trace back into the physically reachable set: each
/// elevation moves to the nearest vertical line with the bird's-eye position
/// kept, and an over-wide azimuth spread is compressed into the window.
pub fn project_to_capability(trace: &SpoofTrace, timing: &LidarTimingModel) -> Result<SpoofTrace> {
    let span = trace.azimuth_span();
    let center = trace.mean_azimuth().unwrap_or(0.0);
    let squeeze = if span > trace.azimuth_window { trace.azimuth_window / span } else { 1.0 };
    let pts = trace
        .points
        .iter()
        .map(|p| {
            let rho = p.planar_range();
            let line = timing.nearest_line(p.elevation().to_degrees());
            let el = timing.vertical_angles[line].to_radians();
            let az = if squeeze < 1.0 { center + wrap_angle(p.azimuth() - center) * squeeze } else { p.azimuth() };
            let (x, y) = if squeeze < 1.0 { (rho * az.cos(), rho * az.sin()) } else { (p.w_x, p.w_y) };
            Point::new(x, y, rho * el.tan(), p.intensity)
        })
        .collect();
    Ok(trace.with_points(PointCloud::new(pts)?, trace.aligned))
}

/// Verifies budget, azimuth window and vertical-line membership.
pub fn check_capability(trace: &SpoofTrace, timing: &LidarTimingModel) -> Result<()> {
    if trace.len() > trace.budget.points() {
        return Err(Error::Capability(format!("{} points exceed budget {}", trace.len(), trace.budget)));
    }
    let span = trace.azimuth_span();
    if span > trace.azimuth_window + 1e-9 {
        return Err(Error::Capability(format!("azimuth span {span:.4}° exceeds {}°", trace.azimuth_window)));
    }
    for (i, p) in trace.points.iter().enumerate() {
        let el = p.elevation().to_degrees();
        let line = timing.nearest_line(el);
        if (timing.vertical_angles[line] - el).abs() > LINE_TOLERANCE_DEG {
            return Err(Error::Capability(format!("point {i} at elevation {el:.6}° is not on a vertical line")));
        }
    }
    Ok(())
}

/// Lines used for each budget: 4, 8 and 10 centermost lines.
pub fn library_lines(budget: Budget) -> usize {
    match budget {
        Budget::Twenty => 4,
        Budget::Forty => 8,
        Budget::Sixty => 10,
    }
}

/// Ranges of library traces, meters.
pub const LIBRARY_RANGE: (f64, f64) = (4.0, 6.0);

/// Deterministic stand-in for a recorded spoof trace with exactly `budget`
/// points, ranges inside [4, 6] m and azimuths inside the spoofing window.
pub fn sample_trace_library(timing: &LidarTimingModel, budget: Budget, seed: u64) -> Result<SpoofTrace> {
    timing.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5f0f_7ace_0000_0000);
    let lines = timing.central_lines(library_lines(budget));
    let per_line = budget.points().div_ceil(lines.len());
    let cycles = timing.cycles_in_window();
    if per_line > cycles {
        return Err(Error::Capability("window too narrow for the requested budget".into()));
    }
    let base = rng.random_range(4.6..5.4);
    let slope = rng.random_range(-0.08..0.08);
    let noise = Normal::new(0.0, 0.12).expect("valid sigma");
    let (lo, hi) = (LIBRARY_RANGE.0 + 1e-3, LIBRARY_RANGE.1 - 1e-3);

    let slot_of_line = |line: usize| timing.firing_order.iter().position(|&l| l == line).expect("permutation");
    let mut schedule = Vec::with_capacity(budget.points());
    'fill: for &line in &lines {
        let mut used = Vec::with_capacity(per_line);
        for col in 0..per_line {
            if schedule.len() == budget.points() {
                break 'fill;
            }
            let nominal = ((col as f64 + 0.5) * cycles as f64 / per_line as f64).floor() as i64;
            let mut cycle = (nominal + rng.random_range(-1..=1)).clamp(0, cycles as i64 - 1) as usize;
            while used.contains(&cycle) {
                cycle = (cycle + 1) % cycles;
            }
            used.push(cycle);
            let offset = col as f64 - 0.5 * (per_line as f64 - 1.0);
            let range = (base + slope * offset + noise.sample(&mut rng)).clamp(lo, hi);
            schedule.push(ScheduledPulse { cycle, slot: slot_of_line(line), delay: range_to_delay(range) });
        }
    }
    let mut trace = synthesize_trace(timing, &schedule, 0.0)?;
    trace.budget = budget;
    Ok(trace)
}
