use crate::error::{Error, Result};
use crate::preprocess::{Channel, FeatureGrid, GridGeometry};

use super::TransformParams;

const VALUE_CHANNELS: [Channel; 5] =
    [Channel::MaxHeight, Channel::MaxIntensity, Channel::MeanHeight, Channel::MeanIntensity, Channel::Count];

/// Cell-wise merge of a scene grid with a spoofed grid.
///
/// Counts add, means are count-weighted, the max height is the larger of
/// the two and the max intensity follows whichever side holds it (ties keep
/// `x`). Cells where `t_prime` holds no points keep `x` exactly.
pub fn merge(x: &FeatureGrid, t_prime: &FeatureGrid) -> Result<FeatureGrid> {
    if x.geometry() != t_prime.geometry() {
        return Err(Error::Shape(format!("cannot merge {:?} with {:?}", x.geometry(), t_prime.geometry())));
    }
    let mut out = x.clone();
    let n = x.geometry().cells();
    let tc = t_prime.channel(Channel::Count);
    let (t_mh, t_mi, t_ah, t_ai) = (
        t_prime.channel(Channel::MaxHeight),
        t_prime.channel(Channel::MaxIntensity),
        t_prime.channel(Channel::MeanHeight),
        t_prime.channel(Channel::MeanIntensity),
    );
    let data = out.data_mut();
    for k in 0..n {
        merge_cell(data, n, k, [t_mh[k], t_mi[k], t_ah[k], t_ai[k], tc[k]]);
    }
    Ok(out)
}

/// Merges one spoofed cell, given as `[max_h, max_i, mean_h, mean_i, count]`,
/// into cell `k` of channel-major `data` with `n` cells per channel.
#[inline]
fn merge_cell(data: &mut [f64], n: usize, k: usize, t: [f64; 5]) {
    let [t_mh, t_mi, t_ah, t_ai, ct] = t;
    if ct <= 0.0 {
        return;
    }
    let at = |ch: Channel| ch.index() * n + k;
    let cx = data[at(Channel::Count)];
    if cx <= 0.0 {
        data[at(Channel::MaxHeight)] = t_mh;
        data[at(Channel::MaxIntensity)] = t_mi;
        data[at(Channel::MeanHeight)] = t_ah;
        data[at(Channel::MeanIntensity)] = t_ai;
        data[at(Channel::Count)] = ct;
    } else {
        let total = cx + ct;
        data[at(Channel::MeanHeight)] = (cx * data[at(Channel::MeanHeight)] + ct * t_ah) / total;
        data[at(Channel::MeanIntensity)] = (cx * data[at(Channel::MeanIntensity)] + ct * t_ai) / total;
        if data[at(Channel::MaxHeight)] < t_mh {
            data[at(Channel::MaxHeight)] = t_mh;
            data[at(Channel::MaxIntensity)] = t_mi;
        }
        data[at(Channel::Count)] = total;
    }
    data[at(Channel::NonEmpty)] = 1.0;
}

/// Four-neighbour bilinear weights for a continuous coordinate.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    /// Local `(row, col)` of the top-left neighbour (may be outside the grid).
    base: (i64, i64),
    weights: [f64; 4],
}

impl Stencil {
    /// `u`, `v` are coordinates on the lattice, `origin` the lattice position of local (0, 0).
    fn new(u: f64, v: f64, origin: (usize, usize)) -> Self {
        let (fu, fv) = (u.floor(), v.floor());
        let wu = [1.0 - (u - fu).abs(), 1.0 - (u - (fu + 1.0)).abs()];
        let wv = [1.0 - (v - fv).abs(), 1.0 - (v - (fv + 1.0)).abs()];
        Self {
            base: (fu as i64 - origin.0 as i64, fv as i64 - origin.1 as i64),
            weights: [wu[0] * wv[0], wu[0] * wv[1], wu[1] * wv[0], wu[1] * wv[1]],
        }
    }

    fn sample(&self, values: &[f64], rows: usize, cols: usize, scale: f64) -> f64 {
        let mut acc = 0.0;
        for (q, w) in self.weights.iter().enumerate() {
            let (r, c) = (self.base.0 + (q / 2) as i64, self.base.1 + (q % 2) as i64);
            if r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
                acc += values[r as usize * cols + c as usize] * scale * w;
            }
        }
        acc
    }

    fn touches(&self, rows: usize, cols: usize) -> bool {
        let (r, c) = self.base;
        r + 1 >= 0 && c + 1 >= 0 && r < rows as i64 && c < cols as i64
    }
}

/// Bilinear interpolation of a row-major `rows × cols` plane at `(u, v)`;
/// samples outside the plane read as zero.
pub fn bilinear_sample(values: &[f64], rows: usize, cols: usize, u: f64, v: f64) -> f64 {
    Stencil::new(u, v, (0, 0)).sample(values, rows, cols, 1.0)
}

/// Source lattice coordinates for output lattice cell `(a_u, a_v)`.
#[inline]
fn source_coords(a_u: f64, a_v: f64, center: f64, shift: f64, cos: f64, sin: f64) -> (f64, f64) {
    let pu = (a_u - center) + shift;
    let pv = a_v - center;
    (cos * pu + sin * pv + center, -sin * pu + cos * pv + center)
}

/// Lattice coordinate of the world origin, and the translation in cells.
fn frame(geometry: &GridGeometry, params: &TransformParams) -> (f64, f64) {
    (geometry.range / geometry.cell_size - 0.5, params.tau_x / geometry.cell_size)
}

/// The feature-space transform over every cell of `t`'s own geometry.
pub fn transform_features(t: &FeatureGrid, params: &TransformParams) -> Result<FeatureGrid> {
    transform_window(t, params, t.geometry())
}

/// The feature-space transform evaluated on the lattice cells of `window`.
///
/// `t` may be a crop of a larger grid; cells outside it read as zero. Each
/// output cell depends only on its own lattice position, so any window
/// reproduces the corresponding cells of the full transform exactly.
pub fn transform_window(t: &FeatureGrid, params: &TransformParams, window: &GridGeometry) -> Result<FeatureGrid> {
    params.validate()?;
    let tg = *t.geometry();
    if window.cell_size != tg.cell_size || window.range != tg.range {
        return Err(Error::Shape("window and grid use different lattices".into()));
    }
    let mut out = FeatureGrid::empty(*window);
    let (center, shift) = frame(&tg, params);
    let (sin, cos) = params.theta.sin_cos();
    let n = window.cells();
    let planes: Vec<&[f64]> = VALUE_CHANNELS.iter().map(|&ch| t.channel(ch)).collect();
    let data = out.data_mut();
    for r in 0..window.rows {
        for c in 0..window.cols {
            let (su, sv) = source_coords((window.u0 + r) as f64, (window.v0 + c) as f64, center, shift, cos, sin);
            let stencil = Stencil::new(su, sv, (tg.u0, tg.v0));
            if !stencil.touches(tg.rows, tg.cols) {
                continue;
            }
            let k = r * window.cols + c;
            for (plane, &ch) in planes.iter().zip(VALUE_CHANNELS.iter()) {
                let scale = if matches!(ch, Channel::MaxHeight | Channel::MeanHeight) { params.s_h } else { 1.0 };
                data[ch.index() * n + k] = stencil.sample(plane, tg.rows, tg.cols, scale);
            }
            if data[Channel::Count.index() * n + k] > 0.0 {
                data[Channel::NonEmpty.index() * n + k] = 1.0;
            }
        }
    }
    Ok(out)
}

/// `merge(x, transform_window(t, params, x.geometry()))` without building
/// the intermediate grid; `x` is updated in place.
pub(crate) fn merge_transformed(x: &mut FeatureGrid, t: &FeatureGrid, params: &TransformParams) -> Result<()> {
    params.validate()?;
    let tg = *t.geometry();
    let window = *x.geometry();
    if window.cell_size != tg.cell_size || window.range != tg.range {
        return Err(Error::Shape("window and grid use different lattices".into()));
    }
    let (center, shift) = frame(&tg, params);
    let (sin, cos) = params.theta.sin_cos();
    let n = window.cells();
    let planes: [&[f64]; 5] = VALUE_CHANNELS.map(|ch| t.channel(ch));
    let scales =
        VALUE_CHANNELS.map(|ch| if matches!(ch, Channel::MaxHeight | Channel::MeanHeight) { params.s_h } else { 1.0 });
    let data = x.data_mut();
    for r in 0..window.rows {
        for c in 0..window.cols {
            let (su, sv) = source_coords((window.u0 + r) as f64, (window.v0 + c) as f64, center, shift, cos, sin);
            let stencil = Stencil::new(su, sv, (tg.u0, tg.v0));
            if !stencil.touches(tg.rows, tg.cols) {
                continue;
            }
            let sampled = [0, 1, 2, 3, 4].map(|q| stencil.sample(planes[q], tg.rows, tg.cols, scales[q]));
            merge_cell(data, n, r * window.cols + c, sampled);
        }
    }
    Ok(())
}

/// Lattice box that can receive non-zero values when `t` is transformed,
/// padded by one cell against rounding.
pub(crate) fn transformed_support(t: &GridGeometry, params: &TransformParams) -> Option<GridGeometry> {
    let (center, shift) = frame(t, params);
    let (sin, cos) = params.theta.sin_cos();
    let (u_lo, u_hi) = (t.u0 as f64 - 1.0, (t.u0 + t.rows) as f64);
    let (v_lo, v_hi) = (t.v0 as f64 - 1.0, (t.v0 + t.cols) as f64);
    let (mut a_lo, mut a_hi, mut b_lo, mut b_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (su, sv) in [(u_lo, v_lo), (u_lo, v_hi), (u_hi, v_lo), (u_hi, v_hi)] {
        // Forward map: p' = R(θ) p − shift.
        let (pu, pv) = (su - center, sv - center);
        let a = cos * pu - sin * pv - shift + center;
        let b = sin * pu + cos * pv + center;
        a_lo = a_lo.min(a);
        a_hi = a_hi.max(a);
        b_lo = b_lo.min(b);
        b_hi = b_hi.max(b);
    }
    let full = GridGeometry { u0: 0, v0: 0, rows: t.lattice, cols: t.lattice, ..*t };
    let clamp = |x: f64| x.clamp(-1e9, 1e9) as i64;
    full.window(clamp(a_lo.floor()) - 1, clamp(a_hi.ceil()) + 1, clamp(b_lo.floor()) - 1, clamp(b_hi.ceil()) + 1)
}
