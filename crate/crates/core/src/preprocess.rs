//! Pre-processing: coordinate transform, ROI filter and the 8-channel
//! bird's-eye feature grid.
//!
//! Cells are indexed `(u, v)` with `u` growing as `w_x` decreases and `v`
//! growing as `w_y` decreases, so the area ahead of the vehicle maps to low
//! `u`. Continuous cell coordinates put cell centers on integers.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{Point, PointCloud, Pose};

/// Cells per side of the full grid.
pub const GRID_SIZE: usize = 512;
/// Default half-extent of the grid, meters.
pub const DEFAULT_RANGE: f64 = 60.0;
/// Default LiDAR mounting height above the ground, meters.
pub const DEFAULT_MOUNT_HEIGHT: f64 = 1.73;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    MaxHeight = 0,
    MaxIntensity = 1,
    MeanHeight = 2,
    MeanIntensity = 3,
    Count = 4,
    Direction = 5,
    Distance = 6,
    NonEmpty = 7,
}

impl Channel {
    pub const COUNT: usize = 8;
    pub const ALL: [Channel; 8] = [
        Channel::MaxHeight,
        Channel::MaxIntensity,
        Channel::MeanHeight,
        Channel::MeanIntensity,
        Channel::Count,
        Channel::Direction,
        Channel::Distance,
        Channel::NonEmpty,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiMode {
    AllWithinRange,
    Rectangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub mode: RoiMode,
    /// `(x_min, x_max, y_min, y_max)`, meters.
    pub rectangle: Option<(f64, f64, f64, f64)>,
    pub range: f64,
}

impl Default for RoiSpec {
    fn default() -> Self {
        Self { mode: RoiMode::AllWithinRange, rectangle: None, range: DEFAULT_RANGE }
    }
}

impl RoiSpec {
    pub fn rectangle(x_min: f64, x_max: f64, y_min: f64, y_max: f64, range: f64) -> Self {
        Self { mode: RoiMode::Rectangle, rectangle: Some((x_min, x_max, y_min, y_max)), range }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(Error::Validation("ROI range must be positive".into()));
        }
        match (self.mode, self.rectangle) {
            (RoiMode::Rectangle, None) => Err(Error::Validation("rectangle ROI needs bounds".into())),
            (_, Some((x0, x1, y0, y1))) if !(x0 <= x1 && y0 <= y1) => {
                Err(Error::Validation("rectangle ROI bounds are not ordered".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        if p.planar_range() > self.range {
            return false;
        }
        match (self.mode, self.rectangle) {
            (RoiMode::Rectangle, Some((x0, x1, y0, y1))) => (x0..=x1).contains(&p.w_x) && (y0..=y1).contains(&p.w_y),
            _ => true,
        }
    }
}

pub fn roi_filter(cloud: &PointCloud, roi: &RoiSpec) -> PointCloud {
    cloud.filter(|p| roi.contains(p))
}

/// Placement of a (possibly cropped) grid on the cell lattice of a full grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub range: f64,
    pub cell_size: f64,
    /// Cells per side of the full lattice.
    pub lattice: usize,
    /// First lattice row held by this grid.
    pub u0: usize,
    /// First lattice column held by this grid.
    pub v0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridGeometry {
    pub fn full(range: f64) -> Self {
        Self::full_sized(range, GRID_SIZE)
    }

    pub fn full_sized(range: f64, lattice: usize) -> Self {
        Self { range, cell_size: 2.0 * range / lattice as f64, lattice, u0: 0, v0: 0, rows: lattice, cols: lattice }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Sub-window in lattice coordinates, clipped to this grid.
    pub fn window(&self, u_lo: i64, u_hi: i64, v_lo: i64, v_hi: i64) -> Option<GridGeometry> {
        let u_lo = u_lo.max(self.u0 as i64);
        let v_lo = v_lo.max(self.v0 as i64);
        let u_hi = u_hi.min((self.u0 + self.rows) as i64 - 1);
        let v_hi = v_hi.min((self.v0 + self.cols) as i64 - 1);
        if u_lo > u_hi || v_lo > v_hi {
            return None;
        }
        Some(GridGeometry {
            u0: u_lo as usize,
            v0: v_lo as usize,
            rows: (u_hi - u_lo + 1) as usize,
            cols: (v_hi - v_lo + 1) as usize,
            ..*self
        })
    }

    pub fn contains_lattice(&self, u: i64, v: i64) -> bool {
        u >= self.u0 as i64
            && v >= self.v0 as i64
            && u < (self.u0 + self.rows) as i64
            && v < (self.v0 + self.cols) as i64
    }

    /// World coordinates of a lattice cell center.
    pub fn cell_center(&self, u: usize, v: usize) -> (f64, f64) {
        (self.range - (u as f64 + 0.5) * self.cell_size, self.range - (v as f64 + 0.5) * self.cell_size)
    }

    /// Continuous lattice coordinates (cell centers on integers) of a world position.
    pub fn world_to_continuous(&self, w_x: f64, w_y: f64) -> (f64, f64) {
        ((self.range - w_x) / self.cell_size - 0.5, (self.range - w_y) / self.cell_size - 0.5)
    }

    pub fn continuous_to_world(&self, a: f64, b: f64) -> (f64, f64) {
        (self.range - (a + 0.5) * self.cell_size, self.range - (b + 0.5) * self.cell_size)
    }

    /// Lattice cell holding a world position, if it is inside the lattice.
    pub fn locate(&self, w_x: f64, w_y: f64) -> Option<(usize, usize)> {
        if w_x.abs() >= self.range || w_y.abs() >= self.range {
            return None;
        }
        let n = self.lattice - 1;
        let u = (((self.range - w_x) / self.cell_size).floor() as usize).min(n);
        let v = (((self.range - w_y) / self.cell_size).floor() as usize).min(n);
        Some((u, v))
    }
}

/// Maps a world position to its cell of the full 512×512 grid.
pub fn world_to_cell(w_x: f64, w_y: f64, range: f64) -> Result<(usize, usize)> {
    GridGeometry::full(range)
        .locate(w_x, w_y)
        .ok_or_else(|| Error::Range(format!("({w_x}, {w_y}) lies outside ±{range} m")))
}

/// Inverse of [`world_to_cell`]: the cell-center coordinates.
pub fn cell_to_world(u: usize, v: usize, range: f64) -> (f64, f64) {
    GridGeometry::full(range).cell_center(u, v)
}

/// Channel-major 8-channel feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    geometry: GridGeometry,
    data: Vec<f64>,
}

impl FeatureGrid {
    /// All-empty grid with the direction/distance constants filled in.
    pub fn empty(geometry: GridGeometry) -> Self {
        let n = geometry.cells();
        let mut grid = Self { geometry, data: vec![0.0; n * Channel::COUNT] };
        grid.fill_constants();
        grid
    }

    /// Builds a grid from raw channel-major data.
    pub fn from_data(geometry: GridGeometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.cells() * Channel::COUNT {
            return Err(Error::Shape(format!(
                "expected {} values, found {}",
                geometry.cells() * Channel::COUNT,
                data.len()
            )));
        }
        Ok(Self { geometry, data })
    }

    fn fill_constants(&mut self) {
        let g = self.geometry;
        for r in 0..g.rows {
            for c in 0..g.cols {
                let (x, y) = g.cell_center(g.u0 + r, g.v0 + c);
                let i = r * g.cols + c;
                self.data[Channel::Direction.index() * g.cells() + i] = y.atan2(x);
                self.data[Channel::Distance.index() * g.cells() + i] = x.hypot(y);
            }
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn rows(&self) -> usize {
        self.geometry.rows
    }

    pub fn cols(&self) -> usize {
        self.geometry.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, ch: Channel) -> &[f64] {
        let n = self.geometry.cells();
        &self.data[ch.index() * n..(ch.index() + 1) * n]
    }

    pub fn channel_mut(&mut self, ch: Channel) -> &mut [f64] {
        let n = self.geometry.cells();
        &mut self.data[ch.index() * n..(ch.index() + 1) * n]
    }

    /// Value at local indices.
    pub fn get(&self, ch: Channel, r: usize, c: usize) -> f64 {
        self.data[ch.index() * self.geometry.cells() + r * self.geometry.cols + c]
    }

    pub fn set(&mut self, ch: Channel, r: usize, c: usize, value: f64) {
        let n = self.geometry.cells();
        self.data[ch.index() * n + r * self.geometry.cols + c] = value;
    }

    /// Copies the cells covered by `window` (which must lie inside this grid).
    pub fn crop(&self, window: &GridGeometry) -> Result<FeatureGrid> {
        let g = &self.geometry;
        if window.u0 < g.u0
            || window.v0 < g.v0
            || window.u0 + window.rows > g.u0 + g.rows
            || window.v0 + window.cols > g.v0 + g.cols
            || window.cell_size != g.cell_size
            || window.range != g.range
        {
            return Err(Error::Shape("crop window is not inside the grid".into()));
        }
        let mut data = Vec::with_capacity(window.cells() * Channel::COUNT);
        for ch in Channel::ALL {
            let src = self.channel(ch);
            for r in 0..window.rows {
                let start = (window.u0 - g.u0 + r) * g.cols + (window.v0 - g.v0);
                data.extend_from_slice(&src[start..start + window.cols]);
            }
        }
        Ok(FeatureGrid { geometry: *window, data })
    }

    /// Smallest window holding every cell with a non-zero value channel, padded by `pad` cells.
    pub fn support(&self, pad: usize) -> Option<GridGeometry> {
        let g = self.geometry;
        let value_channels =
            [Channel::MaxHeight, Channel::MaxIntensity, Channel::MeanHeight, Channel::MeanIntensity, Channel::Count];
        let (mut u_lo, mut u_hi, mut v_lo, mut v_hi) = (usize::MAX, 0, usize::MAX, 0);
        for r in 0..g.rows {
            for c in 0..g.cols {
                let i = r * g.cols + c;
                if value_channels.iter().any(|&ch| self.channel(ch)[i] != 0.0) {
                    u_lo = u_lo.min(r);
                    u_hi = u_hi.max(r);
                    v_lo = v_lo.min(c);
                    v_hi = v_hi.max(c);
                }
            }
        }
        if u_lo == usize::MAX {
            return None;
        }
        let p = pad as i64;
        g.window((g.u0 + u_lo) as i64 - p, (g.u0 + u_hi) as i64 + p, (g.v0 + v_lo) as i64 - p, (g.v0 + v_hi) as i64 + p)
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            let n = self.geometry.cells();
            return Err(Error::NonFinite(format!("feature grid channel {} cell {}", i / n, i % n)));
        }
        Ok(())
    }

    pub fn total(&self, ch: Channel) -> f64 {
        self.channel(ch).iter().sum()
    }

    /// Writes the `AFG1` channel-major binary layout.
    ///
    /// Header (8 values, little-endian): magic `AFG1`, width `u32`, height
    /// `u32`, channels `u32`, range `f64`, cell size `f64`, two reserved
    /// `u64` zeros. Then `channels × height × width` `f64` values.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        let g = &self.geometry;
        out.write_all(b"AFG1")?;
        out.write_all(&(g.cols as u32).to_le_bytes())?;
        out.write_all(&(g.rows as u32).to_le_bytes())?;
        out.write_all(&(Channel::COUNT as u32).to_le_bytes())?;
        out.write_all(&g.range.to_le_bytes())?;
        out.write_all(&g.cell_size.to_le_bytes())?;
        out.write_all(&0u64.to_le_bytes())?;
        out.write_all(&0u64.to_le_bytes())?;
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a full-lattice grid written by [`FeatureGrid::write_binary`].
    pub fn read_binary<R: Read>(mut input: R) -> Result<FeatureGrid> {
        let mut header = [0u8; 48];
        input.read_exact(&mut header).map_err(|_| Error::parse_offset(0, "truncated AFG1 header"))?;
        if &header[..4] != b"AFG1" {
            return Err(Error::parse_offset(0, "missing AFG1 magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().expect("4 bytes")) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(header[o..o + 8].try_into().expect("8 bytes"));
        let (cols, rows, channels) = (u32_at(4), u32_at(8), u32_at(12));
        let (range, cell_size) = (f64_at(16), f64_at(24));
        if channels != Channel::COUNT || rows != cols {
            return Err(Error::parse_offset(4, format!("unsupported shape {channels}×{rows}×{cols}")));
        }
        let geometry = GridGeometry { range, cell_size, lattice: rows, u0: 0, v0: 0, rows, cols };
        let n = geometry.cells() * channels;
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for i in 0..n {
            input.read_exact(&mut buf).map_err(|_| Error::parse_offset(48 + 8 * i as u64, "truncated grid data"))?;
            data.push(f64::from_le_bytes(buf));
        }
        FeatureGrid::from_data(geometry, data)
    }
}

/// Step 1 of the pipeline: sensor → vehicle frame, ROI filter, features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Preprocessor {
    /// Sensor pose in the ground-level vehicle frame.
    pub sensor_pose: Pose,
    pub roi: RoiSpec,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self { sensor_pose: Pose::from_translation([0.0, 0.0, DEFAULT_MOUNT_HEIGHT]), roi: RoiSpec::default() }
    }
}

impl Preprocessor {
    pub fn range(&self) -> f64 {
        self.roi.range
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry::full(self.roi.range)
    }

    /// The cloud as seen by feature extraction: vehicle frame, ROI-filtered.
    pub fn filtered(&self, cloud: &PointCloud) -> Result<PointCloud> {
        self.sensor_pose.validate()?;
        self.roi.validate()?;
        Ok(roi_filter(&cloud.transform(&self.sensor_pose), &self.roi))
    }

    /// Φ: point cloud to feature grid.
    pub fn features(&self, cloud: &PointCloud) -> Result<FeatureGrid> {
        Ok(extract_features(&self.filtered(cloud)?, self.roi.range))
    }
}

/// Per-cell statistics over a 512×512 grid covering ±`range`.
///
/// Points outside the grid are dropped. Within each cell points are
/// processed in sorted value order, so the result does not depend on the
/// order of the input.
pub fn extract_features(cloud: &PointCloud, range: f64) -> FeatureGrid {
    let geometry = GridGeometry::full(range);
    let mut grid = FeatureGrid::empty(geometry);
    let mut keyed: Vec<(usize, Point)> =
        cloud.iter().filter_map(|p| geometry.locate(p.w_x, p.w_y).map(|(u, v)| (u * geometry.cols + v, *p))).collect();
    keyed.sort_unstable_by(|(ca, a), (cb, b)| {
        ca.cmp(cb)
            .then(a.w_z.total_cmp(&b.w_z))
            .then(a.intensity.total_cmp(&b.intensity))
            .then(a.w_x.total_cmp(&b.w_x))
            .then(a.w_y.total_cmp(&b.w_y))
    });
    let n = geometry.cells();
    let data = &mut grid.data;
    for run in keyed.chunk_by(|a, b| a.0 == b.0) {
        let cell = run[0].0;
        let count = run.len() as f64;
        let sum_h: f64 = run.iter().map(|(_, p)| p.w_z).sum();
        let sum_i: f64 = run.iter().map(|(_, p)| p.intensity).sum();
        // Sorted by height then intensity: the last point is the highest.
        let top = run[run.len() - 1].1;
        data[Channel::MaxHeight.index() * n + cell] = top.w_z;
        data[Channel::MaxIntensity.index() * n + cell] = top.intensity;
        data[Channel::MeanHeight.index() * n + cell] = sum_h / count;
        data[Channel::MeanIntensity.index() * n + cell] = sum_i / count;
        data[Channel::Count.index() * n + cell] = count;
        data[Channel::NonEmpty.index() * n + cell] = 1.0;
    }
    grid
}
