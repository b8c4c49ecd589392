//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with its own harness so the report is printed on every run. Exits
//! non-zero when any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use advlidar::advgen::{centered_start, AttackObjective};
use advlidar::harness::experiment::{
    library_trace, run_frame_robustness, run_success_experiment, run_trace_robustness, write_success_csv,
    ExperimentConfig, SuccessExperiment,
};
use advlidar::harness::{run_scenario, Decision, ScenarioKind, ScenarioSpec};
use advlidar::postprocess::{cluster, connected_components, filter_positiveness};
use advlidar::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RANGE: f64 = 60.0;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn cloud(rng: &mut ChaCha8Rng, n: usize, x: (f64, f64), y: (f64, f64), z: (f64, f64)) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| {
                Point::new(
                    rng.random_range(x.0..x.1),
                    rng.random_range(y.0..y.1),
                    rng.random_range(z.0..z.1),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect(),
    )
    .unwrap()
}

fn merge_oracle() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let nx = rng.random_range(0..600);
        let nt = rng.random_range(0..80);
        let x = cloud(&mut rng, nx, (-30.0, 30.0), (-20.0, 20.0), (-0.3, 2.0));
        let t = cloud(&mut rng, nt, (2.0, 12.0), (-3.0, 3.0), (0.0, 2.5));
        let merged = merge(&extract_features(&x, RANGE), &extract_features(&t, RANGE)).unwrap();
        let joint = extract_features(&x.append(&t), RANGE);
        for ch in
            [Channel::Count, Channel::MeanHeight, Channel::MeanIntensity, Channel::MaxHeight, Channel::MaxIntensity]
        {
            for (a, b) in merged.channel(ch).iter().zip(joint.channel(ch)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let elapsed = started.elapsed();
    verdict(
        worst <= 1e-6 && elapsed < Duration::from_secs(30),
        format!("200 pairs, max deviation {worst:.2e}, {elapsed:.1?}"),
    )
}

/// Direct evaluation of the interpolation sum over every pixel of the patch.
fn bilinear_direct(values: &[f64], rows: usize, cols: usize, u: f64, v: f64) -> f64 {
    let mut total = 0.0;
    for q in 0..rows {
        for r in 0..cols {
            let wu = (1.0 - (u - q as f64).abs()).max(0.0);
            let wv = (1.0 - (v - r as f64).abs()).max(0.0);
            total += values[q * cols + r] * wu * wv;
        }
    }
    total
}

fn bilinear_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (rows, cols) = (rng.random_range(2..9), rng.random_range(2..9));
        let patch: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-50.0..50.0)).collect();
        let u = rng.random_range(0.0..(rows - 1) as f64);
        let v = rng.random_range(0.0..(cols - 1) as f64);
        worst =
            worst.max((bilinear_sample(&patch, rows, cols, u, v) - bilinear_direct(&patch, rows, cols, u, v)).abs());
    }
    verdict(worst <= 1e-9, format!("10^4 samples, max deviation {worst:.2e}"))
}

fn vehicle_frame_trace(cfg: &ExperimentConfig, budget: Budget, seed: u64) -> SpoofTrace {
    let trace = library_trace(&cfg.timing, budget, seed).unwrap();
    SpoofTrace { points: trace.points.transform(&cfg.preprocess.sensor_pose), ..trace }
}

fn transform_duality(cfg: &ExperimentConfig) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cell = GridGeometry::full(RANGE).cell_size;
    let budgets = [Budget::Twenty, Budget::Forty, Budget::Sixty];
    let mut mismatched = 0;
    for i in 0..100 {
        let trace = vehicle_frame_trace(cfg, budgets[i % 3], 1000 + i as u64);
        let params = TransformParams::new(0.0, rng.random_range(-30i32..30) as f64 * cell, 1.0);
        let point_space = extract_features(&transform_trace_3d(&trace, &params).unwrap().points, RANGE);
        let feature_space = transform_features(&extract_features(&trace.points, RANGE), &params).unwrap();
        if point_space.channel(Channel::Count) != feature_space.channel(Channel::Count) {
            mismatched += 1;
        }
    }
    // General draws cover the optimizer's search domain around a target 5 m ahead.
    let l_theta = cfg.sampling.theta_bound(5.0);
    let mut gaps = Vec::with_capacity(100);
    for i in 0..100 {
        let trace = vehicle_frame_trace(cfg, budgets[i % 3], 2000 + i as u64);
        let params = TransformParams::new(
            rng.random_range(-l_theta..l_theta),
            rng.random_range(-8.0..8.0),
            rng.random_range(0.5..2.0),
        );
        let points =
            extract_features(&transform_trace_3d(&trace, &params).unwrap().points, RANGE).total(Channel::Count);
        let features =
            transform_features(&extract_features(&trace.points, RANGE), &params).unwrap().total(Channel::Count);
        gaps.push((points - features).abs() / points);
    }
    gaps.sort_by(f64::total_cmp);
    let over = gaps.iter().filter(|&&g| g > 0.01).count();
    verdict(
        mismatched == 0 && over == 0,
        format!(
            "{mismatched}/100 aligned mismatches; general draws (|θ| ≤ {l_theta:.3}): median mass gap {:.3}%, max {:.3}%, {over}/100 over 1%",
            100.0 * gaps[50],
            100.0 * gaps[99]
        ),
    )
}

fn gradient_check(cfg: &ExperimentConfig, det: &SurrogateDetector) -> Verdict {
    let target = cfg.attack_target().unwrap();
    let h = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut worst, mut checked, mut flat): (f64, usize, usize) = (0.0, 0, 0);
    for scene_index in 0..10 {
        let x = cfg.preprocess.features(&cfg.scene(scene_index).unwrap().cloud()).unwrap();
        let trace = library_trace(&cfg.timing, Budget::Sixty, scene_index as u64).unwrap();
        let lifted = cfg.preprocess.filtered(&trace.points).unwrap();
        let t = extract_features(&lifted, RANGE);
        let n = lifted.len() as f64;
        let (sx, sy) = lifted.iter().fold((0.0, 0.0), |(a, b), p| (a + p.w_x, b + p.w_y));
        let center = centered_start((sx / n, sy / n), target.world(x.geometry()));
        let objective = AttackObjective::new(&x, &t, det, &target).unwrap().with_gradient_step(h);
        // Independent loss: full-grid transform, merge and detection.
        let loss = |p: &TransformParams| {
            adv_loss(&merge(&x, &transform_features(&t, p).unwrap()).unwrap(), det, &target).unwrap()
        };
        for _ in 0..20 {
            let p = TransformParams::new(
                center.theta + rng.random_range(-0.3..0.3),
                center.tau_x + rng.random_range(-1.5..1.5),
                rng.random_range(0.7..1.4),
            );
            let g = objective.gradient(&p).unwrap();
            let mut fd = [0.0; 3];
            for (k, slot) in fd.iter_mut().enumerate() {
                let (mut up, mut down) = (p, p);
                up.set_component(k, p.component(k) + h);
                down.set_component(k, p.component(k) - h);
                *slot = (loss(&up) - loss(&down)) / (2.0 * h);
            }
            let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff = g.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if norm == 0.0 {
                flat += 1;
                worst = worst.max(diff);
            } else {
                worst = worst.max(diff / norm);
            }
            checked += 1;
        }
    }
    verdict(worst <= 1e-3, format!("{checked} points over 10 scenes ({flat} flat), max relative error {worst:.2e}"))
}

/// Flood fill with an explicit stack, scanning column-major.
fn flood_fill(mask: &[bool], rows: usize, cols: usize, eight: bool) -> BTreeSet<Vec<(usize, usize)>> {
    let mut seen = vec![false; mask.len()];
    let mut out = BTreeSet::new();
    for c in 0..cols {
        for r in 0..rows {
            if !mask[r * cols + c] || seen[r * cols + c] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![(r, c)];
            seen[r * cols + c] = true;
            while let Some((i, j)) = stack.pop() {
                comp.push((i, j));
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if (di == 0 && dj == 0) || (!eight && di != 0 && dj != 0) {
                            continue;
                        }
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= rows as i64 || nj >= cols as i64 {
                            continue;
                        }
                        let k = ni as usize * cols + nj as usize;
                        if mask[k] && !seen[k] {
                            seen[k] = true;
                            stack.push((ni as usize, nj as usize));
                        }
                    }
                }
            }
            comp.sort_unstable();
            out.insert(comp);
        }
    }
    out
}

fn postprocess_oracle(cfg: &ExperimentConfig, det: &SurrogateDetector) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let g = GridGeometry::full(RANGE).window(100, 163, 100, 163).unwrap();
    let (mut wrong, mut leaks) = (0, 0);
    for _ in 0..500 {
        let mut d = DetectionGrid::uniform(g, 0.0, 0.0);
        let density = rng.random_range(0.1..0.9);
        d.objectness = (0..64 * 64)
            .map(|_| if rng.random_bool(density) { rng.random_range(0.5..1.0) } else { rng.random_range(0.0..0.5) })
            .collect();
        d.positiveness = (0..64 * 64).map(|_| rng.random_range(0.0..0.25)).collect();
        let mask: Vec<bool> = d.objectness.iter().map(|&o| o > 0.5).collect();
        for (connectivity, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            let mut ours: Vec<Vec<(usize, usize)>> = connected_components(&mask, 64, 64, connectivity);
            ours.iter_mut().for_each(|c| c.sort_unstable());
            if ours.len() != ours.iter().cloned().collect::<BTreeSet<_>>().len()
                || ours.into_iter().collect::<BTreeSet<_>>() != flood_fill(&mask, 64, 64, eight)
            {
                wrong += 1;
            }
            let pcfg = PerceptionConfig { connectivity, ..cfg.perception };
            for c in filter_positiveness(cluster(&d, &pcfg), &d, &pcfg) {
                let at = |&(u, v): &(usize, usize)| (u - g.u0) * 64 + (v - g.v0);
                let mean = c.cells.iter().map(|k| d.positiveness[at(k)]).sum::<f64>() / c.cells.len() as f64;
                if c.cells.iter().any(|k| d.objectness[at(k)] <= 0.5) || mean <= 0.1 {
                    leaks += 1;
                }
            }
        }
    }
    // The same invariants through the full pipeline on generated scenes.
    for index in 0..10 {
        let scene = cfg.scene(index).unwrap().cloud();
        let dgrid = det.detect(&cfg.preprocess.features(&scene).unwrap()).unwrap();
        let n = dgrid.cols();
        for o in perceive(&scene, &cfg.perception, &cfg.preprocess, det).unwrap() {
            let mean = o.cells.iter().map(|&(u, v)| dgrid.positiveness[u * n + v]).sum::<f64>() / o.cells.len() as f64;
            if o.cells.iter().any(|&(u, v)| dgrid.objectness[u * n + v] <= 0.5)
                || mean <= 0.1
                || o.avg_positiveness <= 0.1
            {
                leaks += 1;
            }
        }
    }
    verdict(
        wrong == 0 && leaks == 0,
        format!("500 masks x 2 connectivities: {wrong} mismatches, {leaks} threshold violations"),
    )
}

fn comparative_claim(exp: &SuccessExperiment, cfg: &ExperimentConfig) -> Verdict {
    let mut ratios = Vec::new();
    let mut ordered = true;
    let mut parts = Vec::new();
    for b in &cfg.budgets {
        let v = exp.rate(b.points() as u32, OptimizerMode::Vanilla).unwrap();
        let s = exp.rate(b.points() as u32, OptimizerMode::Sampling).unwrap();
        ordered &= s >= v;
        ratios.push(if v > 0.0 {
            s / v
        } else if s > 0.0 {
            f64::INFINITY
        } else {
            1.0
        });
        parts.push(format!("{}: V {v:.2} S {s:.2}", b.points()));
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    verdict(
        ordered && mean >= 1.2 && cfg.scenes >= 50,
        format!("{} scenes; {}; mean S/V {mean:.3}", cfg.scenes, parts.join(", ")),
    )
}

fn budget_monotonicity(exp: &SuccessExperiment) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for mode in [OptimizerMode::Vanilla, OptimizerMode::Sampling] {
        let r = |b: u32| exp.rate(b, mode).unwrap();
        ok &= r(60) >= r(40) - 0.05 && r(40) >= r(20) - 0.05;
        parts.push(format!("{mode} {:.2}/{:.2}/{:.2}", r(20), r(40), r(60)));
    }
    verdict(ok, parts.join(", "))
}

fn capability_compliance(exp: &SuccessExperiment, cfg: &ExperimentConfig) -> Verdict {
    let lines: Vec<f64> = (0..16).map(|k| -15.0 + 2.0 * k as f64).collect();
    let (mut total, mut bad) = (0, 0);
    for (_, a) in exp.attacks() {
        total += 1;
        let t = &a.adversarial_trace;
        let azimuths: Vec<f64> = t.points.iter().map(|p| p.w_y.atan2(p.w_x).to_degrees()).collect();
        let lo = azimuths.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = azimuths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let on_lines = t.points.iter().all(|p| {
            let el = p.w_z.atan2(p.w_x.hypot(p.w_y)).to_degrees();
            lines.iter().any(|l| (l - el).abs() < 1e-6)
        });
        let ok = t.len() <= a.budget.points() && hi - lo <= 8.0 + 1e-9 && on_lines && a.capability_ok;
        if !ok || advlidar::spoof::check_capability(t, &cfg.timing).is_err() {
            bad += 1;
        }
    }
    verdict(bad == 0 && total > 0, format!("{total} emitted traces, {bad} violations"))
}

fn decision_stub(exp: &SuccessExperiment, cfg: &ExperimentConfig, det: &SurrogateDetector) -> Verdict {
    let Some(run) = exp.runs.iter().find(|r| {
        r.attacks.iter().any(|a| a.success && a.budget == Budget::Sixty && a.mode == OptimizerMode::Sampling)
    }) else {
        return verdict(false, "no successful 60-point sampling attack to replay");
    };
    let spec = ScenarioSpec {
        seed: run.seed,
        budget: Budget::Sixty,
        mode: OptimizerMode::Sampling,
        ..ScenarioSpec::default()
    };
    let attacked = run_scenario(ScenarioKind::AvFreezing, &spec, cfg, det).unwrap();
    let control =
        run_scenario(ScenarioKind::AvFreezing, &ScenarioSpec { attack: false, ..spec.clone() }, cfg, det).unwrap();
    let attacked_frames = attacked.iter().filter(|f| f.attacked).count();
    let stops = attacked.iter().filter(|f| f.attacked && f.decision == Decision::Stop).count();
    let control_stops = control.iter().filter(|f| f.decision == Decision::Stop).count();
    verdict(
        attacked_frames == spec.frame_count && stops == attacked_frames && control_stops == 0,
        format!("scene {}: {stops}/{attacked_frames} attacked frames STOP, control {control_stops} STOP", run.index),
    )
}

fn determinism(det: &SurrogateDetector) -> Verdict {
    let cfg = ExperimentConfig { scenes: 6, ..ExperimentConfig::default() };
    let csv = || {
        let mut out = Vec::new();
        write_success_csv(&run_success_experiment(&cfg, det).unwrap().rows, &mut out).unwrap();
        out
    };
    let (a, b) = (csv(), csv());
    verdict(a == b && !a.is_empty(), format!("{} bytes, identical: {}", a.len(), a == b))
}

fn robustness_shapes(exp: &SuccessExperiment, cfg: &ExperimentConfig, det: &SurrogateDetector) -> Verdict {
    let frames = run_frame_robustness(cfg, det, &exp.runs).unwrap();
    let traces = run_trace_robustness(cfg, det, &exp.runs).unwrap();
    let mut ok = frames.iter().all(|r| (0.0..=1.0).contains(&r.success_rate));
    let mut parts = Vec::new();
    for b in &cfg.budgets {
        let points = b.points() as u32;
        let offsets: Vec<usize> = frames.iter().filter(|r| r.budget == points).map(|r| r.frame_offset).collect();
        ok &= offsets == (0..15).collect::<Vec<_>>();
        let rows: Vec<_> = traces.iter().filter(|r| r.budget == points).collect();
        ok &= rows.len() == 1
            && rows[0].resamples == 5
            && rows[0].rates.len() == 5
            && rows[0].rates.iter().chain([&rows[0].success_rate]).all(|r| (0.0..=1.0).contains(r));
        let first =
            frames.iter().find(|r| r.budget == points && r.frame_offset == 0).map_or(f64::NAN, |r| r.success_rate);
        let last =
            frames.iter().find(|r| r.budget == points && r.frame_offset == 14).map_or(f64::NAN, |r| r.success_rate);
        let trace = rows.first().map_or(f64::NAN, |r| r.success_rate);
        parts.push(format!("{points}: {} offsets ({first:.2}..{last:.2}), trace {trace:.2}", offsets.len()));
    }
    verdict(ok, parts.join("; "))
}

fn main() -> ExitCode {
    let cfg = ExperimentConfig::default();
    let det = cfg.load_detector().expect("shipped detector");
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!("criterion {n:>2} {} {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };
    report(1, "merge oracle", merge_oracle());
    report(2, "bilinear oracle", bilinear_oracle());
    report(3, "transform duality", transform_duality(&cfg));
    report(4, "gradient check", gradient_check(&cfg, &det));
    report(5, "postprocess oracle", postprocess_oracle(&cfg, &det));
    let started = Instant::now();
    let exp = run_success_experiment(&cfg, &det).expect("success experiment");
    let elapsed = started.elapsed();
    let mut six = comparative_claim(&exp, &cfg);
    six.passed &= elapsed < Duration::from_secs(600);
    six.detail = format!("{}; {elapsed:.0?}", six.detail);
    report(6, "sampling beats vanilla", six);
    report(7, "budget monotonicity", budget_monotonicity(&exp));
    report(8, "capability compliance", capability_compliance(&exp, &cfg));
    report(9, "decision stub", decision_stub(&exp, &cfg, &det));
    report(10, "determinism", determinism(&det));
    report(11, "robustness harness shape", robustness_shapes(&exp, &cfg, &det));
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
