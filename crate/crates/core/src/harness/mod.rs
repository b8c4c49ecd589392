//! Experiments, scenes, scenarios and the decision stub.

pub mod decision;
pub mod experiment;
pub mod scenario;
pub mod scene;
pub mod selftest;

pub use decision::{decide, Decision, DecisionConfig, DecisionState};
pub use experiment::{
    run_frame_robustness, run_success_experiment, run_trace_robustness, ExperimentConfig, FrameRow, SuccessExperiment,
    SuccessRow, TraceRow,
};
pub use scenario::{run_scenario, FrameDecision, ScenarioKind, ScenarioSpec};
pub use scene::{Background, Scene, SceneConfig};
