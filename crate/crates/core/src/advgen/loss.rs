use crate::detector::{central_difference, CellScores, Detector};
use crate::error::{Error, Result};
use crate::preprocess::{FeatureGrid, GridGeometry};

use super::features::{merge_transformed, transformed_support};
use super::{AttackTarget, TransformParams};

/// Unnormalized Gaussian (peak 1) around the target, truncated to the
/// square of half-width ⌈3σ⌉ cells around the nearest cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMask {
    pub window: GridGeometry,
    pub values: Vec<f64>,
}

impl GaussianMask {
    pub fn new(target: &AttackTarget, geometry: &GridGeometry) -> Result<Self> {
        target.validate(geometry)?;
        let half = (3.0 * target.mask_sigma).ceil() as i64;
        let (cu, cv) = (target.px.round() as i64, target.py.round() as i64);
        let full = GridGeometry { u0: 0, v0: 0, rows: geometry.lattice, cols: geometry.lattice, ..*geometry };
        let window = full
            .window(cu - half, cu + half, cv - half, cv + half)
            .ok_or_else(|| Error::Validation("mask window is empty".into()))?;
        let two_var = 2.0 * target.mask_sigma * target.mask_sigma;
        let mut values = Vec::with_capacity(window.cells());
        for r in 0..window.rows {
            for c in 0..window.cols {
                let du = (window.u0 + r) as f64 - target.px;
                let dv = (window.v0 + c) as f64 - target.py;
                values.push((-(du * du + dv * dv) / two_var).exp());
            }
        }
        Ok(Self { window, values })
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[inline]
fn term(objectness: f64, positiveness: f64, mask: f64) -> f64 {
    (1.0 - positiveness * objectness) * mask
}

/// Masked loss from per-cell scores laid out on `geometry`.
pub fn adv_loss_from_scores(scores: &CellScores, geometry: &GridGeometry, target: &AttackTarget) -> Result<f64> {
    let full = GridGeometry { u0: 0, v0: 0, rows: geometry.lattice, cols: geometry.lattice, ..*geometry };
    let mask = GaussianMask::new(target, &full)?;
    let w = mask.window;
    let mut total = 0.0;
    for r in 0..w.rows {
        for c in 0..w.cols {
            let (u, v) = (w.u0 + r, w.v0 + c);
            let m = mask.values[r * w.cols + c];
            let (o, p) = if geometry.contains_lattice(u as i64, v as i64) {
                let k = (u - geometry.u0) * geometry.cols + (v - geometry.v0);
                (scores.objectness[k], scores.positiveness[k])
            } else {
                return Err(Error::Shape("scores do not cover the mask window".into()));
            };
            total += term(o, p, m);
        }
    }
    Ok(total)
}

/// Σ (1 − positiveness·objectness)·ℳ over the grid.
pub fn adv_loss<D: Detector + ?Sized>(x_prime: &FeatureGrid, detector: &D, target: &AttackTarget) -> Result<f64> {
    x_prime.check_finite()?;
    let scores = detector.scores(x_prime)?;
    adv_loss_from_scores(&scores, x_prime.geometry(), target)
}

/// `adv_loss(x ⊕ G_t(p; t))` as a function of `p`, evaluated incrementally.
///
/// Only cells the warped spoof grid can reach, plus the detector's context,
/// are recomputed; everything else is cached from the unattacked scene. The
/// result is bit-identical to the full-grid composition.
pub struct AttackObjective<'a, D: Detector + ?Sized> {
    detector: &'a D,
    x: &'a FeatureGrid,
    spoof: Option<FeatureGrid>,
    mask: GaussianMask,
    base_terms: Vec<f64>,
    base_loss: f64,
    context: i64,
    gradient_step: f64,
}

impl<'a, D: Detector + ?Sized> AttackObjective<'a, D> {
    /// `x` and `t` must be full-lattice grids.
    pub fn new(x: &'a FeatureGrid, t: &FeatureGrid, detector: &'a D, target: &AttackTarget) -> Result<Self> {
        let g = *x.geometry();
        if t.geometry() != &g || g.rows != g.lattice || g.cols != g.lattice {
            return Err(Error::Shape("objective needs two full grids on the same lattice".into()));
        }
        x.check_finite()?;
        t.check_finite()?;
        let mask = GaussianMask::new(target, &g)?;
        let context = detector.score_radius() as i64;
        let mw = mask.window;
        let scene = g
            .window(
                mw.u0 as i64 - context,
                (mw.u0 + mw.rows) as i64 - 1 + context,
                mw.v0 as i64 - context,
                (mw.v0 + mw.cols) as i64 - 1 + context,
            )
            .expect("mask window is inside the grid");
        let scores = detector.scores_in(&x.crop(&scene)?, &mw)?;
        let base_terms: Vec<f64> =
            (0..mw.cells()).map(|k| term(scores.objectness[k], scores.positiveness[k], mask.values[k])).collect();
        let base_loss = base_terms.iter().sum();
        let spoof = match t.support(1) {
            Some(w) => Some(t.crop(&w)?),
            None => None,
        };
        Ok(Self { detector, x, spoof, mask, base_terms, base_loss, context, gradient_step: 1e-3 })
    }

    pub fn with_gradient_step(mut self, step: f64) -> Self {
        self.gradient_step = step;
        self
    }

    /// Loss of the scene without any spoofed points.
    pub fn base_loss(&self) -> f64 {
        self.base_loss
    }

    pub fn mask(&self) -> &GaussianMask {
        &self.mask
    }

    pub fn loss(&self, params: &TransformParams) -> Result<f64> {
        params.validate()?;
        let Some(spoof) = &self.spoof else { return Ok(self.base_loss) };
        let Some(reach) = transformed_support(spoof.geometry(), params) else { return Ok(self.base_loss) };
        let ctx = self.context;
        let mw = self.mask.window;
        let g = *self.x.geometry();
        // Output cells whose scores can change.
        let Some(changed) = mw.window(
            reach.u0 as i64 - ctx,
            (reach.u0 + reach.rows) as i64 - 1 + ctx,
            reach.v0 as i64 - ctx,
            (reach.v0 + reach.cols) as i64 - 1 + ctx,
        ) else {
            return Ok(self.base_loss);
        };
        let input = g
            .window(
                changed.u0 as i64 - ctx,
                (changed.u0 + changed.rows) as i64 - 1 + ctx,
                changed.v0 as i64 - ctx,
                (changed.v0 + changed.cols) as i64 - 1 + ctx,
            )
            .expect("non-empty window");
        let mut merged = self.x.crop(&input)?;
        merge_transformed(&mut merged, spoof, params)?;
        let scores = self.detector.scores_in(&merged, &changed)?;

        let mut terms = self.base_terms.clone();
        for r in 0..changed.rows {
            for c in 0..changed.cols {
                let (u, v) = (changed.u0 + r, changed.v0 + c);
                let k = r * changed.cols + c;
                let mk = (u - mw.u0) * mw.cols + (v - mw.v0);
                terms[mk] = term(scores.objectness[k], scores.positiveness[k], self.mask.values[mk]);
            }
        }
        let total: f64 = terms.iter().sum();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss at {params:?}")));
        }
        Ok(total)
    }

    /// Central-difference gradient with respect to `(θ, τ_x, s_h)`.
    pub fn gradient(&self, params: &TransformParams) -> Result<[f64; 3]> {
        central_difference(|p| self.loss(p), params, self.gradient_step)
    }
}
