use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use advlidar::advgen::{write_trajectory_csv, AttackSetup};
use advlidar::harness::experiment::{
    library_trace, trace_seed, write_attack_records, write_frame_csv, write_success_csv, write_trace_csv,
};
use advlidar::harness::scenario::write_timeline_csv;
use advlidar::harness::{
    decide, run_frame_robustness, run_scenario, run_success_experiment, run_trace_robustness, selftest, Background,
    ExperimentConfig, ScenarioKind,
};
use advlidar::postprocess::write_report;
use advlidar::spoof::{check_capability, synthesize_trace, ScheduledPulse};
use advlidar::{
    generate_adversarial, load_pointcloud, perceive, save_pointcloud, Budget, CloudFormat, OptimizerMode, SpoofTrace,
};

#[derive(Parser)]
#[command(name = "advlidar", version, about = "LiDAR spoofing-attack workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML); built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; tables go to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Spoofed-point budget: 20, 40 or 60.
    #[arg(long, global = true, value_parser = parse_budget)]
    budget: Option<Budget>,
    /// Optimizer: vanilla or sampling.
    #[arg(long, global = true)]
    mode: Option<OptimizerMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Run perception on a point cloud and print the obstacles.
    Perceive {
        /// Sensor-frame cloud (.csv or .bin).
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize a spoof trace from a pulse schedule or the trace library.
    SpoofSynth {
        /// JSON list of `{cycle, slot, delay}` pulses; library trace when absent.
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Center azimuth of the spoofing window, degrees.
        #[arg(long, default_value_t = 0.0)]
        azimuth: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Attack one scene and write the adversarial trace and cloud.
    Attack {
        /// Sensor-frame scene cloud; a generated scene when absent.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Spoof trace with its sidecar; a library trace when absent.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Success rate per budget and optimizer over seeded scenes.
    ExpSuccess {
        #[arg(long)]
        scenes: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Replay successful attacks on the following frames.
    ExpFrameRobust {
        #[arg(long)]
        scenes: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-apply successful attacks to freshly sampled traces.
    ExpTraceRobust {
        #[arg(long)]
        scenes: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-frame driving decisions under an attack scenario.
    Scenario {
        /// emergency_brake or av_freezing.
        kind: ScenarioKind,
        #[arg(long)]
        frames: Option<usize>,
        /// Run the control without any spoofed points.
        #[arg(long)]
        no_attack: bool,
        /// Background scene: empty_road, synthetic_traffic or a cloud file.
        #[arg(long)]
        background: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in consistency checks.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_budget(s: &str) -> std::result::Result<Budget, String> {
    let n: u32 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    Budget::try_from(n).map_err(|e| e.to_string())
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.scenario.seed = seed;
    }
    if let Some(b) = common.budget {
        cfg.budgets = vec![b];
        cfg.scenario.budget = b;
    }
    if let Some(m) = common.mode {
        cfg.modes = vec![m];
        cfg.scenario.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `name` inside `--out`, or stdout.
fn sink(common: &Common, name: &str) -> Result<Box<dyn Write>> {
    match &common.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(name);
            let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            Ok(Box::new(BufWriter::new(file)))
        }
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
    }
}

fn out_dir(common: &Common) -> Result<&Path> {
    let dir = common.out.as_deref().context("this command needs --out")?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Perceive { input, common } => {
            let cfg = load_config(&common)?;
            let det = cfg.load_detector()?;
            let cloud = load_pointcloud(&input, CloudFormat::from_path(&input))?;
            let obstacles = perceive(&cloud, &cfg.perception, &cfg.preprocess, &det)?;
            let mut out = sink(&common, "obstacles.jsonl")?;
            write_report(&obstacles, &mut out)?;
            out.flush()?;
            let state = decide(&obstacles, &cfg.decision);
            eprintln!("{} obstacles, decision {}", obstacles.len(), state.decision);
        }
        Command::SpoofSynth { schedule, azimuth, common } => {
            let cfg = load_config(&common)?;
            let trace = match schedule {
                Some(path) => {
                    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    let pulses: Vec<ScheduledPulse> = serde_json::from_str(&text)
                        .map_err(|e| advlidar::Error::Config(format!("{}: {e}", path.display())))?;
                    synthesize_trace(&cfg.timing, &pulses, azimuth)?
                }
                None => {
                    let budget = common.budget.unwrap_or(Budget::Sixty);
                    advlidar::sample_trace_library(&cfg.timing, budget, cfg.seed)?
                }
            };
            let dir = out_dir(&common)?;
            trace.save(&dir.join("trace.csv"))?;
            eprintln!("{} points, azimuth span {:.3}°", trace.len(), trace.azimuth_span());
        }
        Command::Attack { scene, trace, common } => {
            let cfg = load_config(&common)?;
            let det = cfg.load_detector()?;
            let cloud = match &scene {
                Some(path) => load_pointcloud(path, CloudFormat::from_path(path))?,
                None => cfg.scene(0)?.cloud(),
            };
            let budget = common.budget.unwrap_or(Budget::Sixty);
            let trace = match &trace {
                Some(path) => {
                    let t = SpoofTrace::load(path)?;
                    if t.aligned {
                        t
                    } else {
                        advlidar::align_trace(&t)?
                    }
                }
                None => library_trace(&cfg.timing, budget, trace_seed(cfg.scene_seed(0), budget, 0))?,
            };
            let target = cfg.attack_target()?;
            let setup = AttackSetup {
                detector: &det,
                target: &target,
                spec: &cfg.sampling,
                mode: common.mode.unwrap_or(OptimizerMode::Sampling),
                pre: &cfg.preprocess,
                cfg: &cfg.perception,
                timing: &cfg.timing,
            };
            let result = generate_adversarial(&cloud, &trace, &setup, None)?;
            check_capability(&result.adversarial_trace, &cfg.timing)?;
            let dir = out_dir(&common)?;
            let record = serde_json::to_string_pretty(&result.record()).context("serializing the attack record")?;
            fs::write(dir.join("attack.json"), record + "\n")?;
            write_trajectory_csv(result.trajectory(), BufWriter::new(File::create(dir.join("trajectory.csv"))?))?;
            result.adversarial_trace.save(&dir.join("adversarial_trace.csv"))?;
            save_pointcloud(&result.adversarial_cloud, &dir.join("adversarial_cloud.bin"), CloudFormat::PackedBinary)?;
            eprintln!("success {} loss {:.6} (base {:.6})", result.success, result.best_loss, result.base_loss);
        }
        Command::ExpSuccess { scenes, common } => {
            let mut cfg = load_config(&common)?;
            cfg.scenes = scenes.unwrap_or(cfg.scenes);
            cfg.validate()?;
            let det = cfg.load_detector()?;
            let exp = run_success_experiment(&cfg, &det)?;
            let mut out = sink(&common, "success.csv")?;
            write_success_csv(&exp.rows, &mut out)?;
            out.flush()?;
            if common.out.is_some() {
                let mut records = sink(&common, "attacks.jsonl")?;
                write_attack_records(&exp.runs, &mut records)?;
                records.flush()?;
            }
            let violations = exp.attacks().filter(|(_, a)| !a.capability_ok).count();
            if violations > 0 {
                bail!("{violations} emitted traces violate the attack capability");
            }
        }
        Command::ExpFrameRobust { scenes, common } => {
            let mut cfg = load_config(&common)?;
            cfg.scenes = scenes.unwrap_or(cfg.scenes);
            cfg.modes = vec![OptimizerMode::Sampling];
            cfg.control = false;
            cfg.validate()?;
            let det = cfg.load_detector()?;
            let exp = run_success_experiment(&cfg, &det)?;
            let rows = run_frame_robustness(&cfg, &det, &exp.runs)?;
            let mut out = sink(&common, "frame_robustness.csv")?;
            write_frame_csv(&rows, &mut out)?;
            out.flush()?;
        }
        Command::ExpTraceRobust { scenes, common } => {
            let mut cfg = load_config(&common)?;
            cfg.scenes = scenes.unwrap_or(cfg.scenes);
            cfg.modes = vec![OptimizerMode::Sampling];
            cfg.control = false;
            cfg.validate()?;
            let det = cfg.load_detector()?;
            let exp = run_success_experiment(&cfg, &det)?;
            let rows = run_trace_robustness(&cfg, &det, &exp.runs)?;
            let mut out = sink(&common, "trace_robustness.csv")?;
            write_trace_csv(&rows, &mut out)?;
            out.flush()?;
        }
        Command::Scenario { kind, frames, no_attack, background, common } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = frames {
                cfg.scenario.frame_count = n;
            }
            if no_attack {
                cfg.scenario.attack = false;
            }
            if let Some(b) = background {
                cfg.scenario.background = match b.as_str() {
                    "empty_road" => Background::EmptyRoad,
                    "synthetic_traffic" => Background::SyntheticTraffic,
                    path => Background::File(PathBuf::from(path)),
                };
            }
            cfg.validate()?;
            let det = cfg.load_detector()?;
            let timeline = run_scenario(kind, &cfg.scenario, &cfg, &det)?;
            let mut out = sink(&common, "timeline.csv")?;
            write_timeline_csv(&timeline, &mut out)?;
            out.flush()?;
        }
        Command::Selftest { common } => {
            let checks = selftest::run(common.seed.unwrap_or(1));
            let mut failed = 0;
            for c in &checks {
                println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                bail!("{failed} of {} checks failed", checks.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let validation =
                err.chain().any(|e| e.downcast_ref::<advlidar::Error>().is_some_and(|e| e.is_validation()));
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
