use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::postprocess::{perceive, Obstacle, PerceptionConfig};
use crate::preprocess::{FeatureGrid, Preprocessor};
use crate::spoof::{project_to_capability, transform_trace_in_frame, LidarTimingModel, SpoofTrace};

use super::loss::AttackObjective;
use super::{wrap, AttackTarget, OptimizerMode, SamplingSpec, TransformParams};

/// Smallest height scale the optimizer may step to.
pub const MIN_HEIGHT_SCALE: f64 = 1e-3;

/// Anything the optimizer can minimize.
pub trait Objective: Sync {
    fn loss(&self, params: &TransformParams) -> Result<f64>;
    fn gradient(&self, params: &TransformParams) -> Result<[f64; 3]>;
}

impl<D: Detector + ?Sized> Objective for AttackObjective<'_, D> {
    fn loss(&self, params: &TransformParams) -> Result<f64> {
        AttackObjective::loss(self, params)
    }

    fn gradient(&self, params: &TransformParams) -> Result<[f64; 3]> {
        AttackObjective::gradient(self, params)
    }
}

/// Adam over the three transform parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: [f64; 3],
    v: [f64; 3],
    t: i32,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, m: [0.0; 3], v: [0.0; 3], t: 0 }
    }

    pub fn step(&mut self, params: [f64; 3], grad: [f64; 3]) -> [f64; 3] {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut out = params;
        for i in 0..3 {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            out[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub start_index: usize,
    pub iteration: usize,
    pub theta: f64,
    pub tau_x: f64,
    pub s_h: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    pub params: TransformParams,
    pub loss: f64,
    /// Parameters and loss after every iteration, starting with the initial point.
    pub trajectory: Vec<TrajectoryRow>,
}

fn finite(loss: f64, params: &TransformParams) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("loss at {params:?}")))
    }
}

/// Runs `spec.max_iterations` Adam steps from `init` and returns the best point seen.
pub fn minimize<O: Objective + ?Sized>(
    objective: &O,
    spec: &SamplingSpec,
    init: TransformParams,
    start_index: usize,
) -> Result<OptimizeOutcome> {
    init.validate()?;
    let row = |iteration, p: &TransformParams, loss| TrajectoryRow {
        start_index,
        iteration,
        theta: p.theta,
        tau_x: p.tau_x,
        s_h: p.s_h,
        loss,
    };
    let mut p = init;
    let mut loss = finite(objective.loss(&p)?, &p)?;
    let mut best = (p, loss);
    let mut trajectory = Vec::with_capacity(spec.max_iterations + 1);
    trajectory.push(row(0, &p, loss));
    let mut adam = Adam::new(spec.learning_rate);
    for it in 1..=spec.max_iterations {
        let grad = objective.gradient(&p)?;
        let [theta, tau_x, s_h] = adam.step(p.to_array(), grad);
        p = TransformParams::new(wrap(theta), tau_x, s_h.max(MIN_HEIGHT_SCALE));
        loss = finite(objective.loss(&p)?, &p)?;
        trajectory.push(row(it, &p, loss));
        if loss < best.1 {
            best = (p, loss);
        }
    }
    Ok(OptimizeOutcome { params: best.0, loss: best.1, trajectory })
}

/// Single-start optimization of `adv_loss(x ⊕ G_t(p; t))` from `init`.
pub fn vanilla_optimize<D: Detector + ?Sized>(
    x: &FeatureGrid,
    t: &FeatureGrid,
    detector: &D,
    target: &AttackTarget,
    spec: &SamplingSpec,
    init: TransformParams,
) -> Result<(TransformParams, f64)> {
    let objective = AttackObjective::new(x, t, detector, target)?.with_gradient_step(spec.gradient_step);
    let out = minimize(&objective, spec, init, 0)?;
    Ok((out.params, out.loss))
}

/// Parameters that move the centroid of `t`'s points onto the target.
///
/// `centroid` is in the vehicle frame; `target_xy` is the target's world position.
pub fn centered_start(centroid: (f64, f64), target_xy: (f64, f64)) -> TransformParams {
    let (cx, cy) = centroid;
    let (xt, yt) = target_xy;
    let rho = cx.hypot(cy);
    if rho == 0.0 {
        return TransformParams::new(0.0, xt, 1.0);
    }
    let phi = cy.atan2(cx);
    let theta = wrap((yt / rho).clamp(-1.0, 1.0).asin() - phi);
    let (s, c) = theta.sin_cos();
    TransformParams::new(theta, xt - (cx * c - cy * s), 1.0)
}

fn offsets(half: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| -half + 2.0 * half * i as f64 / (n - 1) as f64).collect()
}

/// The n×n start grid around `center` (translation outer, rotation inner).
/// For even `n`, which has no zero offset, `center` itself is appended.
pub fn sampling_starts(center: TransformParams, l_tau: f64, l_theta: f64, n: usize) -> Vec<TransformParams> {
    let mut starts = Vec::with_capacity(n * n + 1);
    for dt in offsets(l_tau, n) {
        for da in offsets(l_theta, n) {
            starts.push(TransformParams::new(wrap(center.theta + da), center.tau_x + dt, center.s_h));
        }
    }
    if n.is_multiple_of(2) {
        starts.push(center);
    }
    starts
}

#[derive(Debug, Clone, PartialEq)]
pub struct StartOutcome {
    pub index: usize,
    pub init: TransformParams,
    /// Best point of the run, or why it was aborted.
    pub result: std::result::Result<OptimizeOutcome, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub best_params: TransformParams,
    pub best_loss: f64,
    pub best_start: usize,
    /// Loss of the scene with no spoofed points in the mask.
    pub base_loss: f64,
    pub success: bool,
    pub adversarial_trace: SpoofTrace,
    pub adversarial_cloud: PointCloud,
    pub starts: Vec<StartOutcome>,
}

/// Structured-text summary of an attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub best_params: TransformParams,
    pub best_loss: f64,
    pub best_start: usize,
    pub base_loss: f64,
    pub success: bool,
    pub budget: u32,
    pub spoofed_points: usize,
    pub azimuth_span_deg: f64,
    pub starts: usize,
    pub failed_starts: usize,
}

impl AttackResult {
    pub fn record(&self) -> AttackRecord {
        AttackRecord {
            best_params: self.best_params,
            best_loss: self.best_loss,
            best_start: self.best_start,
            base_loss: self.base_loss,
            success: self.success,
            budget: self.adversarial_trace.budget.points() as u32,
            spoofed_points: self.adversarial_trace.len(),
            azimuth_span_deg: self.adversarial_trace.azimuth_span(),
            starts: self.starts.len(),
            failed_starts: self.starts.iter().filter(|s| s.result.is_err()).count(),
        }
    }

    pub fn trajectory(&self) -> impl Iterator<Item = &TrajectoryRow> {
        self.starts.iter().filter_map(|s| s.result.as_ref().ok()).flat_map(|o| o.trajectory.iter())
    }
}

pub fn write_trajectory_csv<'a, W: Write>(rows: impl IntoIterator<Item = &'a TrajectoryRow>, mut out: W) -> Result<()> {
    writeln!(out, "start_index,iteration,theta,tau_x,s_h,loss")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.start_index, r.iteration, r.theta, r.tau_x, r.s_h, r.loss)?;
    }
    Ok(())
}

/// True when `x_prime` shows an obstacle in the target band that shares no
/// cell with any obstacle of the unattacked scene.
pub fn is_success_against<D: Detector + ?Sized>(
    baseline: &[Obstacle],
    x_prime: &PointCloud,
    target: &AttackTarget,
    cfg: &PerceptionConfig,
    pre: &Preprocessor,
    detector: &D,
) -> Result<bool> {
    let seen = perceive(x_prime, cfg, pre, detector)?;
    Ok(seen
        .iter()
        .any(|o| target.accepts(o.bbox.center_x, o.bbox.center_y) && !baseline.iter().any(|b| b.shares_cells_with(o))))
}

pub fn is_success<D: Detector + ?Sized>(
    x: &PointCloud,
    x_prime: &PointCloud,
    target: &AttackTarget,
    cfg: &PerceptionConfig,
    pre: &Preprocessor,
    detector: &D,
) -> Result<bool> {
    let baseline = perceive(x, cfg, pre, detector)?;
    is_success_against(&baseline, x_prime, target, cfg, pre, detector)
}

/// Everything fixed across the starts of one attack.
pub struct AttackSetup<'a, D: Detector + ?Sized> {
    pub detector: &'a D,
    pub target: &'a AttackTarget,
    pub spec: &'a SamplingSpec,
    pub mode: OptimizerMode,
    pub pre: &'a Preprocessor,
    pub cfg: &'a PerceptionConfig,
    pub timing: &'a LidarTimingModel,
}

/// Sampling-plus-optimization attack on scene `scene` (sensor frame) with
/// the aligned trace `trace`.
pub fn generate_adversarial<D: Detector + ?Sized>(
    scene: &PointCloud,
    trace: &SpoofTrace,
    setup: &AttackSetup<'_, D>,
    baseline: Option<&[Obstacle]>,
) -> Result<AttackResult> {
    if !trace.aligned {
        return Err(Error::Precondition("attack requires an aligned trace".into()));
    }
    if trace.is_empty() {
        return Err(Error::Precondition("attack requires a non-empty trace".into()));
    }
    setup.spec.validate()?;
    let geometry = setup.pre.geometry();
    setup.target.validate(&geometry)?;

    let x = setup.pre.features(scene)?;
    let lifted = setup.pre.filtered(&trace.points)?;
    let t = crate::preprocess::extract_features(&lifted, setup.pre.range());
    let objective =
        AttackObjective::new(&x, &t, setup.detector, setup.target)?.with_gradient_step(setup.spec.gradient_step);

    let n = lifted.len().max(1) as f64;
    let centroid = lifted.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.w_x, sy + p.w_y));
    let target_xy = setup.target.world(&geometry);
    let center = centered_start((centroid.0 / n, centroid.1 / n), target_xy);
    let starts = match setup.mode {
        OptimizerMode::Vanilla => vec![center],
        OptimizerMode::Sampling => {
            let l_theta = setup.spec.theta_bound(target_xy.0.hypot(target_xy.1));
            sampling_starts(center, setup.spec.l_tau, l_theta, setup.spec.n)
        }
    };

    let outcomes: Vec<StartOutcome> = starts
        .par_iter()
        .enumerate()
        .map(|(index, &init)| StartOutcome {
            index,
            init,
            result: minimize(&objective, setup.spec, init, index).map_err(|e| e.to_string()),
        })
        .collect();

    let (best_start, best) = outcomes
        .iter()
        .filter_map(|s| s.result.as_ref().ok().map(|o| (s.index, o)))
        .fold(None::<(usize, &OptimizeOutcome)>, |acc, (i, o)| match acc {
            Some((_, b)) if b.loss <= o.loss => acc,
            _ => Some((i, o)),
        })
        .ok_or_else(|| {
            let reasons: Vec<String> = outcomes.iter().filter_map(|s| s.result.as_ref().err().cloned()).collect();
            Error::Attack(format!("all {} starts failed: {}", outcomes.len(), reasons.join("; ")))
        })?;
    let best_params = best.params;
    let best_loss = best.loss;

    let moved = transform_trace_in_frame(trace, &best_params, &setup.pre.sensor_pose)?;
    let adversarial_trace = project_to_capability(&moved, setup.timing)?;
    let adversarial_cloud = scene.append(&adversarial_trace.points);
    let success = match baseline {
        Some(b) => is_success_against(b, &adversarial_cloud, setup.target, setup.cfg, setup.pre, setup.detector)?,
        None => is_success(scene, &adversarial_cloud, setup.target, setup.cfg, setup.pre, setup.detector)?,
    };
    Ok(AttackResult {
        best_params,
        best_loss,
        best_start,
        base_loss: objective.base_loss(),
        success,
        adversarial_trace,
        adversarial_cloud,
        starts: outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        center: [f64; 3],
    }

    impl Objective for Quadratic {
        fn loss(&self, p: &TransformParams) -> Result<f64> {
            Ok(p.to_array().iter().zip(self.center).map(|(a, b)| (a - b) * (a - b)).sum())
        }

        fn gradient(&self, p: &TransformParams) -> Result<[f64; 3]> {
            let a = p.to_array();
            Ok([0, 1, 2].map(|i| 2.0 * (a[i] - self.center[i])))
        }
    }

    #[test]
    fn zero_iterations_return_the_start() {
        let q = Quadratic { center: [0.1, 2.0, 1.5] };
        let spec = SamplingSpec { max_iterations: 0, ..Default::default() };
        let init = TransformParams::new(0.3, -1.0, 1.0);
        let out = minimize(&q, &spec, init, 0).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.loss, q.loss(&init).unwrap());
        assert_eq!(out.trajectory.len(), 1);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let q = Quadratic { center: [0.1, 2.0, 1.5] };
        let spec = SamplingSpec { max_iterations: 3000, learning_rate: 1e-2, ..Default::default() };
        let out = minimize(&q, &spec, TransformParams::new(-0.4, 0.5, 0.8), 0).unwrap();
        for (a, b) in out.params.to_array().iter().zip(q.center) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
        let mut best = f64::INFINITY;
        for row in &out.trajectory {
            assert!(row.loss.is_finite());
            best = best.min(row.loss);
        }
        assert_eq!(best, out.loss);
    }

    #[test]
    fn non_finite_loss_aborts() {
        struct Bad;
        impl Objective for Bad {
            fn loss(&self, _: &TransformParams) -> Result<f64> {
                Ok(f64::NAN)
            }
            fn gradient(&self, _: &TransformParams) -> Result<[f64; 3]> {
                Ok([0.0; 3])
            }
        }
        assert!(matches!(
            minimize(&Bad, &SamplingSpec::default(), TransformParams::identity(), 0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn adam_first_step_is_learning_rate_sized() {
        let mut adam = Adam::new(1e-4);
        let out = adam.step([0.0, 0.0, 1.0], [3.0, -0.5, 1e-3]);
        assert!((out[0] + 1e-4).abs() < 1e-9);
        assert!((out[1] - 1e-4).abs() < 1e-9);
        assert!((out[2] - (1.0 - 1e-4)).abs() < 1e-8);
    }

    #[test]
    fn centered_start_hits_the_target() {
        for &(cx, cy) in &[(5.0, 0.3), (4.2, -0.8), (6.0, 0.0)] {
            for &(xt, yt) in &[(5.0, 0.0), (7.0, 1.0)] {
                let p = centered_start((cx, cy), (xt, yt));
                let (s, c) = p.theta.sin_cos();
                let (x, y) = (c * cx - s * cy + p.tau_x, s * cx + c * cy);
                assert!((x - xt).abs() < 1e-12 && (y - yt).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn start_grid_shape() {
        let c = TransformParams::new(0.1, 0.2, 1.0);
        let s = sampling_starts(c, 12.5, 0.4, 5);
        assert_eq!(s.len(), 25);
        assert_eq!(s[12], c);
        assert_eq!(s[0].tau_x, 0.2 - 12.5);
        assert_eq!(sampling_starts(c, 12.5, 0.4, 1), vec![c]);
        let even = sampling_starts(c, 12.5, 0.4, 4);
        assert_eq!(even.len(), 17);
        assert_eq!(even[16], c);
    }

    #[test]
    fn trajectory_csv_header() {
        let rows = [TrajectoryRow { start_index: 1, iteration: 2, theta: 0.5, tau_x: 1.0, s_h: 1.0, loss: 3.0 }];
        let mut buf = Vec::new();
        write_trajectory_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "start_index,iteration,theta,tau_x,s_h,loss\n1,2,0.5,1,1,3\n");
    }
}
