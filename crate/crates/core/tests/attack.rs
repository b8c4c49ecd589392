//! End-to-end attacks on generated scenes.

use advlidar::advgen::AttackSetup;
use advlidar::harness::experiment::{library_trace, trace_seed, ExperimentConfig};
use advlidar::spoof::check_capability;
use advlidar::*;

fn setup<'a>(
    cfg: &'a ExperimentConfig,
    det: &'a SurrogateDetector,
    target: &'a AttackTarget,
    spec: &'a SamplingSpec,
    mode: OptimizerMode,
) -> AttackSetup<'a, SurrogateDetector> {
    AttackSetup { detector: det, target, spec, mode, pre: &cfg.preprocess, cfg: &cfg.perception, timing: &cfg.timing }
}

#[test]
fn sampling_is_never_worse_than_the_centered_start() {
    let cfg = ExperimentConfig::default();
    let det = cfg.load_detector().unwrap();
    let target = cfg.attack_target().unwrap();
    for index in 0..3 {
        let scene = cfg.scene(index).unwrap().cloud();
        let trace =
            library_trace(&cfg.timing, Budget::Forty, trace_seed(cfg.scene_seed(index), Budget::Forty, 0)).unwrap();
        let vanilla = generate_adversarial(
            &scene,
            &trace,
            &setup(&cfg, &det, &target, &cfg.sampling, OptimizerMode::Vanilla),
            None,
        )
        .unwrap();
        let sampling = generate_adversarial(
            &scene,
            &trace,
            &setup(&cfg, &det, &target, &cfg.sampling, OptimizerMode::Sampling),
            None,
        )
        .unwrap();
        assert!(sampling.best_loss <= vanilla.best_loss, "scene {index}");
        assert_eq!(sampling.starts.len(), 25);
        for r in [&vanilla, &sampling] {
            check_capability(&r.adversarial_trace, &cfg.timing).unwrap();
            assert_eq!(r.adversarial_cloud.len(), scene.len() + r.adversarial_trace.len());
        }
    }
}

#[test]
fn single_sample_grid_is_vanilla() {
    let cfg = ExperimentConfig::default();
    let det = cfg.load_detector().unwrap();
    let target = cfg.attack_target().unwrap();
    let spec = SamplingSpec { n: 1, max_iterations: 20, ..cfg.sampling };
    let scene = cfg.scene(4).unwrap().cloud();
    let trace = library_trace(&cfg.timing, Budget::Sixty, 17).unwrap();
    let a =
        generate_adversarial(&scene, &trace, &setup(&cfg, &det, &target, &spec, OptimizerMode::Vanilla), None).unwrap();
    let b = generate_adversarial(&scene, &trace, &setup(&cfg, &det, &target, &spec, OptimizerMode::Sampling), None)
        .unwrap();
    assert_eq!(a.best_params, b.best_params);
    assert_eq!(a.best_loss, b.best_loss);
    assert_eq!(a.success, b.success);
}

#[test]
fn unaligned_or_empty_traces_are_rejected() {
    let cfg = ExperimentConfig::default();
    let det = cfg.load_detector().unwrap();
    let target = cfg.attack_target().unwrap();
    let s = setup(&cfg, &det, &target, &cfg.sampling, OptimizerMode::Vanilla);
    let scene = cfg.scene(0).unwrap().cloud();
    let raw = sample_trace_library(&cfg.timing, Budget::Twenty, 1).unwrap();
    let unaligned = SpoofTrace { aligned: false, ..raw.clone() };
    assert!(matches!(generate_adversarial(&scene, &unaligned, &s, None), Err(Error::Precondition(_))));
    let empty = SpoofTrace { points: PointCloud::empty(), aligned: true, ..raw };
    assert!(matches!(generate_adversarial(&scene, &empty, &s, None), Err(Error::Precondition(_))));
}
