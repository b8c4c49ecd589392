//! Cell-wise detection model and the attribute-extraction function.
//!
//! [`Detector`] is the pluggable interface. [`SurrogateDetector`] is the
//! reference implementation: a smoothed generalized-linear scorer with two
//! logistic heads whose parameters ship in `config/surrogate-v1.toml`.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::advgen::{merge, transform_features, TransformParams};
use crate::error::{Error, Result};
use crate::preprocess::{Channel, FeatureGrid, GridGeometry};

pub const SURROGATE_VERSION: &str = "surrogate-v1";
const DEFAULT_CONFIG: &str = include_str!("../config/surrogate-v1.toml");

/// Per-cell model outputs over the same cells as the input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGrid {
    pub geometry: GridGeometry,
    /// Center offset, rows.
    pub offset_u: Vec<f64>,
    /// Center offset, columns.
    pub offset_v: Vec<f64>,
    pub objectness: Vec<f64>,
    pub positiveness: Vec<f64>,
    /// Meters, non-negative.
    pub object_height: Vec<f64>,
    pub class_vehicle: Vec<f64>,
    pub class_background: Vec<f64>,
}

impl DetectionGrid {
    pub fn rows(&self) -> usize {
        self.geometry.rows
    }

    pub fn cols(&self) -> usize {
        self.geometry.cols
    }

    /// Uniform grid, mainly for tests of downstream stages.
    pub fn uniform(geometry: GridGeometry, objectness: f64, positiveness: f64) -> Self {
        let n = geometry.cells();
        Self {
            geometry,
            offset_u: vec![0.0; n],
            offset_v: vec![0.0; n],
            objectness: vec![objectness; n],
            positiveness: vec![positiveness; n],
            object_height: vec![0.0; n],
            class_vehicle: vec![objectness; n],
            class_background: vec![1.0 - objectness; n],
        }
    }
}

/// Objectness and positiveness only; all the attack loss needs.
#[derive(Debug, Clone, PartialEq)]
pub struct CellScores {
    pub objectness: Vec<f64>,
    pub positiveness: Vec<f64>,
}

/// A model mapping a feature grid to per-cell outputs.
///
/// Implementations must be local: an output cell may depend only on input
/// cells within [`Detector::context_radius`] (Chebyshev distance), and
/// cells beyond the grid edge read as empty. The attack relies on this to
/// re-evaluate small windows.
pub trait Detector: Send + Sync {
    fn detect(&self, grid: &FeatureGrid) -> Result<DetectionGrid>;

    /// Cells further apart than this never influence each other's outputs.
    fn context_radius(&self) -> usize;

    /// Like [`Detector::context_radius`] but for objectness and positiveness only.
    fn score_radius(&self) -> usize {
        self.context_radius()
    }

    fn scores(&self, grid: &FeatureGrid) -> Result<CellScores> {
        let d = self.detect(grid)?;
        Ok(CellScores { objectness: d.objectness, positiveness: d.positiveness })
    }

    /// Scores of the cells of `window`, a sub-window of `grid`. Values equal
    /// the corresponding cells of [`Detector::scores`] on the whole grid.
    fn scores_in(&self, grid: &FeatureGrid, window: &GridGeometry) -> Result<CellScores> {
        let full = self.scores(grid)?;
        let g = grid.geometry();
        let pick = |v: &[f64]| -> Vec<f64> {
            (0..window.rows)
                .flat_map(|r| {
                    let start = (window.u0 - g.u0 + r) * g.cols + (window.v0 - g.v0);
                    v[start..start + window.cols].iter().copied()
                })
                .collect()
        };
        Ok(CellScores { objectness: pick(&full.objectness), positiveness: pick(&full.positiveness) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Attribute {
    Objectness,
    Positiveness,
    ObjectHeight,
    CenterOffsetU,
    CenterOffsetV,
    ClassVehicle,
    ClassBackground,
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "objectness" => Attribute::Objectness,
            "positiveness" => Attribute::Positiveness,
            "object_height" => Attribute::ObjectHeight,
            "center_offset_u" => Attribute::CenterOffsetU,
            "center_offset_v" => Attribute::CenterOffsetV,
            "class_vehicle" => Attribute::ClassVehicle,
            "class_background" => Attribute::ClassBackground,
            other => return Err(Error::UnknownAttribute(other.to_string())),
        })
    }
}

/// The function Q: the named per-cell channel of a detection grid.
pub fn extract_attribute(dgrid: &DetectionGrid, attribute: Attribute) -> &[f64] {
    match attribute {
        Attribute::Objectness => &dgrid.objectness,
        Attribute::Positiveness => &dgrid.positiveness,
        Attribute::ObjectHeight => &dgrid.object_height,
        Attribute::CenterOffsetU => &dgrid.offset_u,
        Attribute::CenterOffsetV => &dgrid.offset_v,
        Attribute::ClassVehicle => &dgrid.class_vehicle,
        Attribute::ClassBackground => &dgrid.class_background,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateParams {
    pub version: String,
    pub smoothing_radius: usize,
    pub count_scale: f64,
    pub height_cap: f64,
    pub bias: f64,
    pub count_weight: f64,
    pub height_weight: f64,
    pub intensity_weight: f64,
    pub positiveness_bias: f64,
    pub positiveness_count_weight: f64,
    pub positiveness_height_weight: f64,
    pub positiveness_intensity_weight: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("shipped surrogate config parses")
    }
}

impl SurrogateParams {
    pub fn from_toml(text: &str) -> Result<Self> {
        let p: SurrogateParams = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("params serialize")
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            self.count_scale,
            self.height_cap,
            self.bias,
            self.count_weight,
            self.height_weight,
            self.intensity_weight,
            self.positiveness_bias,
            self.positiveness_count_weight,
            self.positiveness_height_weight,
            self.positiveness_intensity_weight,
        ];
        if scalars.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("surrogate parameters must be finite".into()));
        }
        if self.count_scale <= 0.0 || self.height_cap <= 0.0 {
            return Err(Error::Validation("count_scale and height_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurrogateDetector {
    pub params: SurrogateParams,
}

impl SurrogateDetector {
    pub fn new(params: SurrogateParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    /// Smoothed count, height and intensity inputs.
    fn smoothed_inputs(&self, grid: &FeatureGrid) -> [Vec<f64>; 3] {
        let [fc, fh, fi] = self.cell_inputs(grid);
        let (rows, cols, r) = (grid.rows(), grid.cols(), self.params.smoothing_radius);
        [box_mean(&fc, rows, cols, r), box_mean(&fh, rows, cols, r), box_mean(&fi, rows, cols, r)]
    }

    fn cell_inputs(&self, grid: &FeatureGrid) -> [Vec<f64>; 3] {
        let p = &self.params;
        let count = grid.channel(Channel::Count);
        let max_h = grid.channel(Channel::MaxHeight);
        let mean_i = grid.channel(Channel::MeanIntensity);
        let n = count.len();
        let (mut fc, mut fh, mut fi) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for k in 0..n {
            let c = count[k].max(0.0);
            let occ = c / (c + 1.0);
            fc.push(c / (c + p.count_scale));
            fh.push(occ * max_h[k].clamp(0.0, p.height_cap));
            fi.push(occ * mean_i[k]);
        }
        [fc, fh, fi]
    }

    fn heads(&self, inputs: &[Vec<f64>; 3]) -> CellScores {
        let p = &self.params;
        let [sc, sh, si] = inputs;
        let n = sc.len();
        let (mut obj, mut pos) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for k in 0..n {
            obj.push(logistic(p.bias + p.count_weight * sc[k] + p.height_weight * sh[k] + p.intensity_weight * si[k]));
            pos.push(logistic(
                p.positiveness_bias
                    + p.positiveness_count_weight * sc[k]
                    + p.positiveness_height_weight * sh[k]
                    + p.positiveness_intensity_weight * si[k],
            ));
        }
        CellScores { objectness: obj, positiveness: pos }
    }
}

impl Detector for SurrogateDetector {
    fn detect(&self, grid: &FeatureGrid) -> Result<DetectionGrid> {
        grid.check_finite().map_err(|e| Error::Validation(e.to_string()))?;
        let inputs = self.smoothed_inputs(grid);
        let CellScores { objectness, positiveness } = self.heads(&inputs);
        let (rows, cols, r) = (grid.rows(), grid.cols(), self.params.smoothing_radius);

        let height: Vec<f64> = grid.channel(Channel::MaxHeight).iter().map(|h| h.max(0.0)).collect();
        let object_height = box_mean(&height, rows, cols, r);
        let density = box_mean(grid.channel(Channel::Count), rows, cols, r);
        let (offset_u, offset_v) = peak_offsets(&density, rows, cols, r);
        let class_background = objectness.iter().map(|o| 1.0 - o).collect();
        Ok(DetectionGrid {
            geometry: *grid.geometry(),
            offset_u,
            offset_v,
            class_vehicle: objectness.clone(),
            objectness,
            positiveness,
            object_height,
            class_background,
        })
    }

    fn context_radius(&self) -> usize {
        2 * self.params.smoothing_radius
    }

    fn score_radius(&self) -> usize {
        self.params.smoothing_radius
    }

    fn scores(&self, grid: &FeatureGrid) -> Result<CellScores> {
        grid.check_finite().map_err(|e| Error::Validation(e.to_string()))?;
        Ok(self.heads(&self.smoothed_inputs(grid)))
    }

    fn scores_in(&self, grid: &FeatureGrid, window: &GridGeometry) -> Result<CellScores> {
        let g = grid.geometry();
        if window.u0 < g.u0
            || window.v0 < g.v0
            || window.u0 + window.rows > g.u0 + g.rows
            || window.v0 + window.cols > g.v0 + g.cols
        {
            return Err(Error::Shape("score window is not inside the grid".into()));
        }
        grid.check_finite().map_err(|e| Error::Validation(e.to_string()))?;
        let [fc, fh, fi] = self.cell_inputs(grid);
        let (rows, cols, r) = (grid.rows(), grid.cols(), self.params.smoothing_radius);
        let area = (window.u0 - g.u0, window.v0 - g.v0, window.rows, window.cols);
        let smooth = |v: &[f64]| box_mean_in(v, rows, cols, r, area);
        Ok(self.heads(&[smooth(&fc), smooth(&fh), smooth(&fi)]))
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Mean over the (2r+1)² window, zero padded. Rows first, then columns,
/// each as a left-to-right sum, so any crop reproduces interior values bit
/// for bit.
pub(crate) fn box_mean(values: &[f64], rows: usize, cols: usize, r: usize) -> Vec<f64> {
    box_mean_in(values, rows, cols, r, (0, 0, rows, cols))
}

/// [`box_mean`] restricted to the output cells of `area = (row0, col0, rows, cols)`.
fn box_mean_in(values: &[f64], rows: usize, cols: usize, r: usize, area: (usize, usize, usize, usize)) -> Vec<f64> {
    let (r0, c0, wr, wc) = area;
    if r == 0 {
        return (r0..r0 + wr).flat_map(|i| values[i * cols + c0..i * cols + c0 + wc].iter().copied()).collect();
    }
    let side = 2 * r + 1;
    let scale = 1.0 / (side * side) as f64;
    let lo = r0.saturating_sub(r);
    let hi = (r0 + wr + r).min(rows);
    let mut horiz = vec![0.0; (hi - lo) * wc];
    for i in lo..hi {
        let row = &values[i * cols..(i + 1) * cols];
        for j in 0..wc {
            let mut acc = 0.0;
            for d in 0..side {
                let jj = (c0 + j) as isize + d as isize - r as isize;
                if jj >= 0 && (jj as usize) < cols {
                    acc += row[jj as usize];
                }
            }
            horiz[(i - lo) * wc + j] = acc;
        }
    }
    let mut out = vec![0.0; wr * wc];
    for i in 0..wr {
        for j in 0..wc {
            let mut acc = 0.0;
            for d in 0..side {
                let ii = (r0 + i) as isize + d as isize - r as isize;
                if ii >= 0 && (ii as usize) < rows {
                    acc += horiz[(ii as usize - lo) * wc + j];
                }
            }
            out[i * wc + j] = acc * scale;
        }
    }
    out
}

/// Offset from each cell to the largest value within radius `r`; ties go
/// to the first cell in row-major order.
fn peak_offsets(values: &[f64], rows: usize, cols: usize, r: usize) -> (Vec<f64>, Vec<f64>) {
    let mut du = vec![0.0; values.len()];
    let mut dv = vec![0.0; values.len()];
    let r = r as isize;
    for i in 0..rows as isize {
        for j in 0..cols as isize {
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for a in -r..=r {
                for b in -r..=r {
                    let (ii, jj) = (i + a, j + b);
                    if ii < 0 || jj < 0 || ii >= rows as isize || jj >= cols as isize {
                        continue;
                    }
                    let v = values[ii as usize * cols + jj as usize];
                    if v > best.0 {
                        best = (v, a, b);
                    }
                }
            }
            let k = i as usize * cols + j as usize;
            du[k] = best.1 as f64;
            dv[k] = best.2 as f64;
        }
    }
    (du, dv)
}

/// Central-difference gradient of `f` with respect to `(θ, τ_x, s_h)`.
pub fn central_difference<F>(mut f: F, at: &TransformParams, step: f64) -> Result<[f64; 3]>
where
    F: FnMut(&TransformParams) -> Result<f64>,
{
    let mut grad = [0.0; 3];
    for (k, g) in grad.iter_mut().enumerate() {
        let mut hi = *at;
        let mut lo = *at;
        hi.set_component(k, at.component(k) + step);
        lo.set_component(k, at.component(k) - step);
        let (fh, fl) = (f(&hi)?, f(&lo)?);
        if !fh.is_finite() || !fl.is_finite() {
            return Err(Error::NonFinite(format!("loss at parameter component {k}")));
        }
        *g = (fh - fl) / (2.0 * step);
    }
    Ok(grad)
}

/// Gradient of `loss_fn(detect(x ⊕ G_t(p; t)))` at `probe`, by central differences.
pub fn detect_gradient<D, L>(
    x: &FeatureGrid,
    t: &FeatureGrid,
    detector: &D,
    loss_fn: L,
    probe: &TransformParams,
    step: f64,
) -> Result<[f64; 3]>
where
    D: Detector + ?Sized,
    L: Fn(&DetectionGrid) -> f64,
{
    central_difference(
        |p| {
            let merged = merge(x, &transform_features(t, p)?)?;
            Ok(loss_fn(&detector.detect(&merged)?))
        },
        probe,
        step,
    )
}
