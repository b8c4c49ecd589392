use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advgen::{
    generate_adversarial, is_success_against, AttackSetup, AttackTarget, OptimizerMode, SamplingSpec, TransformParams,
};
use crate::detector::{Detector, SurrogateDetector, SurrogateParams};
use crate::error::{Error, Result};
use crate::postprocess::{perceive, Obstacle, PerceptionConfig};
use crate::preprocess::Preprocessor;
use crate::spoof::{
    align_trace, check_capability, project_to_capability, sample_trace_library, transform_trace_in_frame, Budget,
    LidarTimingModel, SpoofTrace,
};

use super::decision::DecisionConfig;
use super::scenario::ScenarioSpec;
use super::scene::{Scene, SceneConfig};

/// Where the fake obstacle is aimed, in the vehicle frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetConfig {
    pub distance: f64,
    pub lateral: f64,
    pub distance_band: (f64, f64),
    pub mask_sigma: f64,
    pub corridor_half_width: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        let t = AttackTarget::default();
        Self {
            distance: crate::advgen::CANONICAL_TARGET_DISTANCE,
            lateral: 0.0,
            distance_band: t.distance_band,
            mask_sigma: t.mask_sigma,
            corridor_half_width: t.corridor_half_width,
        }
    }
}

/// Everything an experiment run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scenes: usize,
    pub budgets: Vec<Budget>,
    pub modes: Vec<OptimizerMode>,
    /// Add budget-0 rows: the scenes without any spoofed points.
    pub control: bool,
    /// Consecutive frames for the frame-robustness experiment.
    pub frames: usize,
    /// Fresh traces per attack for the trace-robustness experiment.
    pub resamples: usize,
    /// Surrogate parameter file; the built-in version when absent.
    pub detector: Option<PathBuf>,
    pub target: TargetConfig,
    pub sampling: SamplingSpec,
    pub perception: PerceptionConfig,
    pub preprocess: Preprocessor,
    pub decision: DecisionConfig,
    pub scene: SceneConfig,
    pub timing: LidarTimingModel,
    pub scenario: ScenarioSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            scenes: 50,
            budgets: Budget::ALL.to_vec(),
            modes: vec![OptimizerMode::Vanilla, OptimizerMode::Sampling],
            control: true,
            frames: 15,
            resamples: 5,
            detector: None,
            target: TargetConfig::default(),
            sampling: SamplingSpec::default(),
            perception: PerceptionConfig::default(),
            preprocess: Preprocessor::default(),
            decision: DecisionConfig::default(),
            scene: SceneConfig::default(),
            timing: LidarTimingModel::default(),
            scenario: ScenarioSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::Validation("an experiment needs at least one scene".into()));
        }
        if self.budgets.is_empty() || self.modes.is_empty() {
            return Err(Error::Validation("budgets and modes must not be empty".into()));
        }
        if self.frames == 0 || self.resamples == 0 {
            return Err(Error::Validation("frames and resamples must be at least 1".into()));
        }
        self.sampling.validate()?;
        self.perception.validate()?;
        self.preprocess.roi.validate()?;
        self.preprocess.sensor_pose.validate()?;
        self.decision.validate()?;
        self.scene.validate()?;
        self.timing.validate()?;
        self.scenario.validate()?;
        self.attack_target()?;
        Ok(())
    }

    pub fn attack_target(&self) -> Result<AttackTarget> {
        let t = &self.target;
        let target = AttackTarget {
            distance_band: t.distance_band,
            mask_sigma: t.mask_sigma,
            corridor_half_width: t.corridor_half_width,
            ..AttackTarget::at(t.distance, t.lateral, &self.preprocess.geometry())
        };
        target.validate(&self.preprocess.geometry())?;
        Ok(target)
    }

    pub fn load_detector(&self) -> Result<SurrogateDetector> {
        let params = match &self.detector {
            Some(path) => SurrogateParams::load(path)?,
            None => SurrogateParams::default(),
        };
        SurrogateDetector::new(params)
    }

    /// Seed of scene `index`; scenes are independent of the scene count.
    pub fn scene_seed(&self, index: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng.random()
    }

    pub fn scene(&self, index: usize) -> Result<Scene> {
        Scene::generate(&self.scene, self.scene_seed(index), self.preprocess.sensor_pose)
    }
}

/// Library seed of the trace used against a scene; `resample` 0 is the
/// original trace.
pub fn trace_seed(scene_seed: u64, budget: Budget, resample: usize) -> u64 {
    scene_seed
        .wrapping_mul(0x2545_f491_4f6c_dd1d)
        .wrapping_add((budget.points() as u64) << 32)
        .wrapping_add(resample as u64)
}

pub fn library_trace(timing: &LidarTimingModel, budget: Budget, seed: u64) -> Result<SpoofTrace> {
    align_trace(&sample_trace_library(timing, budget, seed)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub budget: Budget,
    pub mode: OptimizerMode,
    pub success: bool,
    pub best_params: TransformParams,
    pub best_loss: f64,
    pub base_loss: f64,
    /// Whether the emitted trace passed the capability check.
    pub capability_ok: bool,
    pub adversarial_trace: SpoofTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRun {
    pub index: usize,
    pub seed: u64,
    pub baseline: Vec<Obstacle>,
    /// Success of the unmodified scene; false unless perception is unstable.
    pub control_success: bool,
    pub attacks: Vec<AttackOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuccessRow {
    pub budget: u32,
    pub mode: OptimizerMode,
    pub scenes: usize,
    pub successes: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuccessExperiment {
    pub rows: Vec<SuccessRow>,
    pub runs: Vec<SceneRun>,
}

impl SuccessExperiment {
    pub fn rate(&self, budget: u32, mode: OptimizerMode) -> Option<f64> {
        self.rows.iter().find(|r| r.budget == budget && r.mode == mode).map(|r| r.success_rate)
    }

    pub fn attacks(&self) -> impl Iterator<Item = (&SceneRun, &AttackOutcome)> {
        self.runs.iter().flat_map(|r| r.attacks.iter().map(move |a| (r, a)))
    }
}

fn rate(successes: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        successes as f64 / total as f64
    }
}

/// Attacks every scene with every (budget, mode) pair.
pub fn run_success_experiment<D: Detector + ?Sized>(cfg: &ExperimentConfig, detector: &D) -> Result<SuccessExperiment> {
    cfg.validate()?;
    let target = cfg.attack_target()?;
    let setup = |mode| AttackSetup {
        detector,
        target: &target,
        spec: &cfg.sampling,
        mode,
        pre: &cfg.preprocess,
        cfg: &cfg.perception,
        timing: &cfg.timing,
    };
    let runs: Vec<SceneRun> = (0..cfg.scenes)
        .into_par_iter()
        .map(|index| -> Result<SceneRun> {
            let scene = cfg.scene(index)?;
            let cloud = scene.cloud();
            let baseline = perceive(&cloud, &cfg.perception, &cfg.preprocess, detector)?;
            let control_success =
                is_success_against(&baseline, &cloud, &target, &cfg.perception, &cfg.preprocess, detector)?;
            let mut attacks = Vec::with_capacity(cfg.budgets.len() * cfg.modes.len());
            for &budget in &cfg.budgets {
                let trace = library_trace(&cfg.timing, budget, trace_seed(scene.seed, budget, 0))?;
                for &mode in &cfg.modes {
                    let r = generate_adversarial(&cloud, &trace, &setup(mode), Some(&baseline))?;
                    attacks.push(AttackOutcome {
                        budget,
                        mode,
                        success: r.success,
                        best_params: r.best_params,
                        best_loss: r.best_loss,
                        base_loss: r.base_loss,
                        capability_ok: check_capability(&r.adversarial_trace, &cfg.timing).is_ok()
                            && r.adversarial_trace.budget == budget,
                        adversarial_trace: r.adversarial_trace,
                    });
                }
            }
            Ok(SceneRun { index, seed: scene.seed, baseline, control_success, attacks })
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    if cfg.control {
        for &mode in &cfg.modes {
            let successes = runs.iter().filter(|r| r.control_success).count();
            rows.push(SuccessRow {
                budget: 0,
                mode,
                scenes: runs.len(),
                successes,
                success_rate: rate(successes, runs.len()),
            });
        }
    }
    for &budget in &cfg.budgets {
        for &mode in &cfg.modes {
            let successes = runs
                .iter()
                .filter(|r| r.attacks.iter().any(|a| a.budget == budget && a.mode == mode && a.success))
                .count();
            rows.push(SuccessRow {
                budget: budget.points() as u32,
                mode,
                scenes: runs.len(),
                successes,
                success_rate: rate(successes, runs.len()),
            });
        }
    }
    Ok(SuccessExperiment { rows, runs })
}

pub fn write_success_csv<W: Write>(rows: &[SuccessRow], mut out: W) -> Result<()> {
    writeln!(out, "budget,mode,scenes,successes,success_rate")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{:.6}", r.budget, r.mode, r.scenes, r.successes, r.success_rate)?;
    }
    Ok(())
}

/// Successful attacks of `mode`, grouped per budget in configuration order.
fn successful<'a>(
    cfg: &ExperimentConfig,
    runs: &'a [SceneRun],
    mode: OptimizerMode,
) -> Vec<(Budget, Vec<(&'a SceneRun, &'a AttackOutcome)>)> {
    cfg.budgets
        .iter()
        .map(|&b| {
            let hits = runs
                .iter()
                .flat_map(|r| r.attacks.iter().map(move |a| (r, a)))
                .filter(|(_, a)| a.budget == b && a.mode == mode && a.success)
                .collect();
            (b, hits)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameRow {
    pub budget: u32,
    pub frame_offset: usize,
    pub attacks: usize,
    pub successes: usize,
    pub success_rate: f64,
}

/// Replays each successful sampling-mode trace unchanged on the following
/// frames of its scene. Offset 0 is the attacked frame itself.
pub fn run_frame_robustness<D: Detector + ?Sized>(
    cfg: &ExperimentConfig,
    detector: &D,
    runs: &[SceneRun],
) -> Result<Vec<FrameRow>> {
    let target = cfg.attack_target()?;
    let mut rows = Vec::with_capacity(cfg.budgets.len() * cfg.frames);
    for (budget, hits) in successful(cfg, runs, OptimizerMode::Sampling) {
        let per_attack: Vec<Vec<bool>> = hits
            .par_iter()
            .map(|(run, attack)| -> Result<Vec<bool>> {
                let scene = Scene::generate(&cfg.scene, run.seed, cfg.preprocess.sensor_pose)?;
                (0..cfg.frames)
                    .map(|k| {
                        let frame = scene.frame(k);
                        let baseline = perceive(&frame, &cfg.perception, &cfg.preprocess, detector)?;
                        let attacked = frame.append(&attack.adversarial_trace.points);
                        is_success_against(&baseline, &attacked, &target, &cfg.perception, &cfg.preprocess, detector)
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        for k in 0..cfg.frames {
            let successes = per_attack.iter().filter(|s| s[k]).count();
            rows.push(FrameRow {
                budget: budget.points() as u32,
                frame_offset: k,
                attacks: hits.len(),
                successes,
                success_rate: rate(successes, hits.len()),
            });
        }
    }
    Ok(rows)
}

pub fn write_frame_csv<W: Write>(rows: &[FrameRow], mut out: W) -> Result<()> {
    writeln!(out, "budget,frame_offset,attacks,successes,success_rate")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{:.6}", r.budget, r.frame_offset, r.attacks, r.successes, r.success_rate)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub budget: u32,
    pub attacks: usize,
    pub resamples: usize,
    /// Success rate of the k-th resampled trace over all attacks.
    pub rates: Vec<f64>,
    pub success_rate: f64,
}

/// Applies the parameters of each successful sampling-mode attack to freshly
/// sampled traces of the same budget.
pub fn run_trace_robustness<D: Detector + ?Sized>(
    cfg: &ExperimentConfig,
    detector: &D,
    runs: &[SceneRun],
) -> Result<Vec<TraceRow>> {
    let target = cfg.attack_target()?;
    let mut rows = Vec::with_capacity(cfg.budgets.len());
    for (budget, hits) in successful(cfg, runs, OptimizerMode::Sampling) {
        let per_attack: Vec<Vec<bool>> = hits
            .par_iter()
            .map(|(run, attack)| -> Result<Vec<bool>> {
                let cloud = Scene::generate(&cfg.scene, run.seed, cfg.preprocess.sensor_pose)?.cloud();
                (1..=cfg.resamples)
                    .map(|k| {
                        let fresh = library_trace(&cfg.timing, budget, trace_seed(run.seed, budget, k))?;
                        let adv = reapply(&fresh, &attack.best_params, cfg)?;
                        let attacked = cloud.append(&adv.points);
                        is_success_against(
                            &run.baseline,
                            &attacked,
                            &target,
                            &cfg.perception,
                            &cfg.preprocess,
                            detector,
                        )
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let rates: Vec<f64> =
            (0..cfg.resamples).map(|k| rate(per_attack.iter().filter(|s| s[k]).count(), hits.len())).collect();
        let total = per_attack.iter().flatten().filter(|&&s| s).count();
        rows.push(TraceRow {
            budget: budget.points() as u32,
            attacks: hits.len(),
            resamples: cfg.resamples,
            rates,
            success_rate: rate(total, hits.len() * cfg.resamples),
        });
    }
    Ok(rows)
}

/// The same placement the attack emits: transform in the vehicle frame,
/// then snap back into the capability.
pub fn reapply(trace: &SpoofTrace, params: &TransformParams, cfg: &ExperimentConfig) -> Result<SpoofTrace> {
    let moved = transform_trace_in_frame(trace, params, &cfg.preprocess.sensor_pose)?;
    project_to_capability(&moved, &cfg.timing)
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut out: W) -> Result<()> {
    let resamples = rows.iter().map(|r| r.resamples).max().unwrap_or(0);
    let rate_cols: String = (1..=resamples).map(|k| format!(",rate_{k}")).collect();
    writeln!(out, "budget,attacks,resamples{rate_cols},success_rate")?;
    for r in rows {
        let rates: String = r.rates.iter().map(|x| format!(",{x:.6}")).collect();
        writeln!(out, "{},{},{}{},{:.6}", r.budget, r.attacks, r.resamples, rates, r.success_rate)?;
    }
    Ok(())
}

/// `attack_records` entry for the JSONL output of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackLine {
    pub scene: usize,
    pub scene_seed: u64,
    pub budget: u32,
    pub mode: OptimizerMode,
    pub success: bool,
    pub best_params: TransformParams,
    pub best_loss: f64,
    pub base_loss: f64,
    pub spoofed_points: usize,
    pub azimuth_span_deg: f64,
    pub capability_ok: bool,
}

pub fn write_attack_records<W: Write>(runs: &[SceneRun], mut out: W) -> Result<()> {
    for run in runs {
        for a in &run.attacks {
            let line = AttackLine {
                scene: run.index,
                scene_seed: run.seed,
                budget: a.budget.points() as u32,
                mode: a.mode,
                success: a.success,
                best_params: a.best_params,
                best_loss: a.best_loss,
                base_loss: a.base_loss,
                spoofed_points: a.adversarial_trace.len(),
                azimuth_span_deg: a.adversarial_trace.azimuth_span(),
                capability_ok: a.capability_ok,
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| Error::Io(e.into()))?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml("seed = 3\nscenes = 4\nbudgets = [20, 60]\n").unwrap();
        assert_eq!(partial.budgets, vec![Budget::Twenty, Budget::Sixty]);
        assert_eq!(partial.frames, 15);
        assert!(ExperimentConfig::from_toml("budgets = [30]").is_err());
        assert!(ExperimentConfig::from_toml("scenes = 0").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        let cfg = ExperimentConfig::default();
        let more = ExperimentConfig { scenes: 500, ..cfg.clone() };
        assert_eq!(cfg.scene_seed(3), more.scene_seed(3));
        assert_ne!(cfg.scene_seed(3), cfg.scene_seed(4));
        assert_ne!(trace_seed(1, Budget::Twenty, 0), trace_seed(1, Budget::Forty, 0));
        assert_ne!(trace_seed(1, Budget::Twenty, 0), trace_seed(1, Budget::Twenty, 1));
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_success_csv(
            &[SuccessRow { budget: 0, mode: OptimizerMode::Vanilla, scenes: 2, successes: 0, success_rate: 0.0 }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "budget,mode,scenes,successes,success_rate\n0,vanilla,2,0,0.000000\n"
        );
        let mut buf = Vec::new();
        let row = TraceRow { budget: 20, attacks: 2, resamples: 2, rates: vec![0.5, 1.0], success_rate: 0.75 };
        write_trace_csv(&[row], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "budget,attacks,resamples,rate_1,rate_2,success_rate\n20,2,2,0.500000,1.000000,0.750000\n"
        );
    }
}
