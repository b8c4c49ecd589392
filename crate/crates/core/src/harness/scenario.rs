use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::advgen::{generate_adversarial, AttackSetup, OptimizerMode};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::postprocess::perceive;
use crate::spoof::{Budget, SpoofTrace};

use super::decision::{decide, Decision};
use super::experiment::{library_trace, trace_seed, ExperimentConfig};
use super::scene::{Background, Scene, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// The victim drives on; the attack starts mid-way.
    EmergencyBrake,
    /// The victim waits in a static scene that is attacked on every frame.
    AvFreezing,
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "emergency_brake" | "emergency-brake" => Ok(ScenarioKind::EmergencyBrake),
            "av_freezing" | "av-freezing" => Ok(ScenarioKind::AvFreezing),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub background: Background,
    pub frame_count: usize,
    /// Accepted distances of the fake obstacle, meters.
    pub distance_band: (f64, f64),
    pub budget: Budget,
    pub mode: OptimizerMode,
    /// Inject the spoofed trace at all; `false` gives the control run.
    pub attack: bool,
    /// First attacked frame. Defaults to frame 0 for `av_freezing` and
    /// the middle frame for `emergency_brake`.
    pub attack_from: Option<usize>,
    /// Victim speed before the attack, m/s.
    pub ego_speed: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            background: Background::SyntheticTraffic,
            frame_count: 20,
            distance_band: (2.0, 8.0),
            budget: Budget::Sixty,
            mode: OptimizerMode::Sampling,
            attack: true,
            attack_from: None,
            ego_speed: 12.0,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count == 0 {
            return Err(Error::Validation("a scenario needs at least one frame".into()));
        }
        let (lo, hi) = self.distance_band;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::Validation(format!("distance band ({lo}, {hi}) must be positive and ordered")));
        }
        if !(self.ego_speed >= 0.0 && self.ego_speed.is_finite()) {
            return Err(Error::Validation("ego speed must be non-negative".into()));
        }
        Ok(())
    }

    fn first_attacked(&self, kind: ScenarioKind) -> usize {
        self.attack_from.unwrap_or(match kind {
            ScenarioKind::AvFreezing => 0,
            ScenarioKind::EmergencyBrake => self.frame_count / 2,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameDecision {
    pub frame: usize,
    pub attacked: bool,
    pub decision: Decision,
    pub nearest_front_obstacle_distance: Option<f64>,
    /// Ego speed after this frame's decision, m/s.
    pub speed: f64,
}

/// Per-frame decisions of the victim under `kind`.
///
/// The spoofed trace is optimized once, on the first attacked frame, and
/// replayed relative to the victim afterwards. A STOP decision brings the
/// victim to rest.
pub fn run_scenario<D: Detector + ?Sized>(
    kind: ScenarioKind,
    spec: &ScenarioSpec,
    cfg: &ExperimentConfig,
    detector: &D,
) -> Result<Vec<FrameDecision>> {
    spec.validate()?;
    let scene_cfg = match kind {
        ScenarioKind::EmergencyBrake => SceneConfig { background: spec.background.clone(), ..cfg.scene.clone() },
        ScenarioKind::AvFreezing => SceneConfig {
            background: spec.background.clone(),
            frame_jitter: 0.0,
            vehicle_speed: 0.0,
            ..cfg.scene.clone()
        },
    };
    let scene = Scene::generate(&scene_cfg, spec.seed, cfg.preprocess.sensor_pose)?;
    let mut target = cfg.attack_target()?;
    target.distance_band = spec.distance_band;
    let setup = AttackSetup {
        detector,
        target: &target,
        spec: &cfg.sampling,
        mode: spec.mode,
        pre: &cfg.preprocess,
        cfg: &cfg.perception,
        timing: &cfg.timing,
    };
    let first = spec.first_attacked(kind);
    let mut speed = match kind {
        ScenarioKind::EmergencyBrake => spec.ego_speed,
        ScenarioKind::AvFreezing => 0.0,
    };
    let mut travelled = 0.0;
    let mut injected: Option<SpoofTrace> = None;
    let mut timeline = Vec::with_capacity(spec.frame_count);
    for frame in 0..spec.frame_count {
        let cloud = scene.advanced(travelled).frame(frame);
        let attacked = spec.attack && frame >= first;
        let seen = if attacked {
            if injected.is_none() {
                let trace = library_trace(&cfg.timing, spec.budget, trace_seed(spec.seed, spec.budget, 0))?;
                injected = Some(generate_adversarial(&cloud, &trace, &setup, None)?.adversarial_trace);
            }
            let spoof = injected.as_ref().expect("set above");
            perceive(&cloud.append(&spoof.points), &cfg.perception, &cfg.preprocess, detector)?
        } else {
            perceive(&cloud, &cfg.perception, &cfg.preprocess, detector)?
        };
        let state = decide(&seen, &cfg.decision);
        if state.decision == Decision::Stop {
            speed = 0.0;
        }
        travelled += speed * cfg.scene.frame_period;
        timeline.push(FrameDecision {
            frame,
            attacked,
            decision: state.decision,
            nearest_front_obstacle_distance: state.nearest_front_obstacle_distance,
            speed,
        });
    }
    Ok(timeline)
}

pub fn write_timeline_csv<W: Write>(timeline: &[FrameDecision], mut out: W) -> Result<()> {
    writeln!(out, "frame,attacked,decision,nearest_front_obstacle_distance,speed")?;
    for f in timeline {
        let nearest = f.nearest_front_obstacle_distance.map(|d| format!("{d:.3}")).unwrap_or_default();
        writeln!(out, "{},{},{},{},{:.3}", f.frame, f.attacked, f.decision, nearest, f.speed)?;
    }
    Ok(())
}
