use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reppoints_core::geometry::BoxXYXY;
use reppoints_core::gradcheck::{self, GradcheckConfig};
use reppoints_core::inference::DetectionDump;
use reppoints_core::pipeline::checkpoint::{self, TrainState};
use reppoints_core::pipeline::config::RunConfig;
use reppoints_core::pipeline::data::{generate_split, load_split, write_dataset, Image, Manifest, Sample, Split};
use reppoints_core::pipeline::eval::{coco_thresholds, evaluate_detections};
use reppoints_core::pipeline::model::{Ablation, Model};
use reppoints_core::pipeline::train::{predict, predict_traced, prepare, train, TrainOptions};
use reppoints_core::Error;
use serde::Serialize;

const WORKERS_ENV: &str = "REPPOINTS_WORKERS";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOSS_LOG: &str = "loss.jsonl";

/// Boxes straight from the regression branch.
const RED: [u8; 3] = [230, 40, 40];
/// Boxes after joint inference.
const GREEN: [u8; 3] = [40, 220, 60];

#[derive(Parser)]
#[command(name = "reppoints", version, about = "Corner-verified point-set detector on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (images, scene files, manifest).
    GenData(GenDataArgs),
    /// Train a detector and write a checkpoint plus a JSON-lines loss log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split and write metrics JSON.
    Eval(EvalArgs),
    /// Run every finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Render regressed (red) and jointly refined (green) boxes on one image.
    DemoRefine(DemoArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory [default: <output_dir>/data].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset of verification switches.
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    /// Dataset written by gen-data; generated in memory when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from <output_dir>/checkpoint.bin when present.
    #[arg(long)]
    resume: bool,
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Supplies the dataset and inference settings; the head comes from the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    /// Skip corner refinement even if the checkpoint enables it.
    #[arg(long)]
    no_joint_inference: bool,
    /// Comma-separated IoU thresholds [default: 0.50:0.05:0.95].
    #[arg(long, value_delimiter = ',')]
    iou_thresholds: Option<Vec<f64>>,
    /// Output directory [default: <checkpoint dir>/eval].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write detections.jsonl, one document per image.
    #[arg(long)]
    dump_detections: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = gradcheck::DEFAULT_CASES)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Run only these suites.
    #[arg(long = "suite")]
    suites: Vec<String>,
    #[arg(long, hide = true)]
    inject_bug: Option<String>,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM (P6) image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "demo")]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Checkpoint { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| {
        let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
        format!("unknown ablation `{s}` (expected one of {})", names.join(", "))
    })
}

fn io_err(context: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> Failure {
    move |e| Failure::Runtime(format!("{context}: {e}"))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Failure::Usage(e.to_string()),
            other => other.into(),
        }),
        None => Ok(RunConfig::default()),
    }
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

/// Loads a split from `data`, or generates it from the config. The config's
/// data section is replaced by the manifest's so the resolved file reproduces the run.
fn samples(cfg: &mut RunConfig, data: Option<&Path>, split: Split) -> Result<Vec<Sample>, Failure> {
    match data {
        Some(dir) => {
            cfg.data = Manifest::read(dir)?.spec;
            Ok(load_split(dir, split)?)
        }
        None => Ok(generate_split(&cfg.data, split)?),
    }
}

fn gen_data(args: GenDataArgs) -> CmdResult {
    let cfg = load_config(args.config.as_deref())?;
    cfg.validate()?;
    let out = args.out.unwrap_or_else(|| cfg.output_dir.join("data"));
    let manifest = write_dataset(&cfg.data, &out)?;
    cfg.write_resolved(&out)?;
    print_json(&serde_json::json!({
        "dir": out,
        "train": manifest.train.len(),
        "val": manifest.val.len(),
        "manifest_sha256": manifest.digest(),
    }));
    Ok(())
}

/// Drops log lines at or past `iteration`, left behind by an interrupted run.
fn truncate_log(path: &Path, iteration: usize) -> CmdResult {
    let Ok(f) = File::open(path) else { return Ok(()) };
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path.display()))?;
        let it = serde_json::from_str::<serde_json::Value>(&line)
            .ok()
            .and_then(|v| v.get("iteration").and_then(|i| i.as_u64()));
        if it.is_some_and(|i| (i as usize) < iteration) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(io_err(path.display()))
}

fn train_cmd(args: TrainArgs) -> CmdResult {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(a) = args.ablation {
        a.apply(&mut cfg.head);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = args.output_dir {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    let train_samples = samples(&mut cfg, args.data.as_deref(), Split::Train)?;
    let out = cfg.output_dir.clone();
    cfg.write_resolved(&out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOSS_LOG);

    let state = if args.resume && ckpt.exists() {
        let state = checkpoint::load(&ckpt)?;
        if state.model.cfg != cfg.head || state.model.num_classes != cfg.data.num_classes || state.seed != cfg.seed {
            return Err(Failure::Usage(format!(
                "{} was trained with a different head, class count or seed",
                ckpt.display()
            )));
        }
        log::info!("resuming from iteration {}", state.iteration);
        truncate_log(&log_path, state.iteration)?;
        state
    } else {
        if args.resume {
            log::warn!("no checkpoint at {}, starting fresh", ckpt.display());
        }
        File::create(&log_path).map_err(io_err(log_path.display()))?;
        TrainState::fresh(Model::new(cfg.head.clone(), cfg.data.num_classes, cfg.seed)?, cfg.seed)
    };

    let prepared = prepare(&train_samples, &cfg.targets);
    let log_file = fs::OpenOptions::new().append(true).open(&log_path).map_err(io_err(log_path.display()))?;
    let mut log = BufWriter::new(log_file);
    let opts = TrainOptions {
        log: Some(&mut log),
        checkpoint: Some(&ckpt),
        stop_after: args.stop_after,
    };
    let outcome = train(&prepared, state, &cfg.train, &cfg.focal, opts)?;
    log.flush().map_err(io_err(log_path.display()))?;
    let summary = serde_json::json!({
        "checkpoint": ckpt,
        "iteration": outcome.state.iteration,
        "final_loss": outcome.final_loss(),
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(io_err("writing summary.json"))?;
    print_json(&summary);
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> CmdResult {
    let state = checkpoint::load(&args.checkpoint)?;
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.head = state.model.cfg.clone();
    if args.no_joint_inference {
        cfg.head.joint_inference = false;
    }
    let thresholds = args.iou_thresholds.unwrap_or_else(coco_thresholds);
    if thresholds.is_empty() || thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Failure::Usage("--iou-thresholds values must lie in (0, 1]".into()));
    }
    let split = Split::from(args.split);
    let data = samples(&mut cfg, args.data.as_deref(), split)?;
    if cfg.data.num_classes != state.model.num_classes {
        return Err(Failure::Usage(format!(
            "dataset has {} classes, checkpoint expects {}",
            cfg.data.num_classes, state.model.num_classes
        )));
    }
    let out = args.out.unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    cfg.output_dir = out.clone();
    cfg.validate()?;
    cfg.write_resolved(&out)?;

    let images: Vec<_> = data.iter().map(|s| s.image.to_tensor()).collect();
    let dets = predict(&state.model, &images.iter().collect::<Vec<_>>(), &cfg.inference_config(), 16)?;
    let scenes: Vec<_> = data.iter().map(|s| s.scene.clone()).collect();
    let result = evaluate_detections(&scenes, &dets, &thresholds)?;
    let metrics = result.to_json();
    fs::write(out.join("metrics.json"), &metrics).map_err(io_err("writing metrics.json"))?;
    if args.dump_detections {
        let mut text = String::new();
        for (s, d) in data.iter().zip(&dets) {
            text.push_str(&DetectionDump::new(s.id.clone(), d).to_json());
            text.push('\n');
        }
        fs::write(out.join("detections.jsonl"), text).map_err(io_err("writing detections.jsonl"))?;
    }
    println!("{metrics}");
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> CmdResult {
    let known: Vec<&str> = gradcheck::suite_names().collect();
    for name in args.suites.iter().chain(&args.inject_bug) {
        if !known.contains(&name.as_str()) {
            return Err(Failure::Usage(format!("unknown suite `{name}` (known: {})", known.join(", "))));
        }
    }
    let cfg = GradcheckConfig {
        cases: args.cases,
        tolerance: args.tolerance,
        seed: args.seed,
        inject_bug: args.inject_bug,
    };
    let names: Vec<&str> = if args.suites.is_empty() { known } else { args.suites.iter().map(String::as_str).collect() };
    let mut failed = Vec::new();
    println!("{:<24} {:>6} {:>12}  result", "suite", "cases", "max_rel_err");
    for name in names {
        let r = gradcheck::run_suite(name, &cfg)?;
        println!("{:<24} {:>6} {:>12.3e}  {}", r.name, r.cases, r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn draw_box(img: &mut Image, b: &BoxXYXY, color: [u8; 3]) {
    let clamp = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi - 1);
    let (x1, x2) = (clamp(b.x1, img.width), clamp(b.x2, img.width));
    let (y1, y2) = (clamp(b.y1, img.height), clamp(b.y2, img.height));
    for x in x1..=x2 {
        img.set_pixel(x, y1, color);
        img.set_pixel(x, y2, color);
    }
    for y in y1..=y2 {
        img.set_pixel(x1, y, color);
        img.set_pixel(x2, y, color);
    }
}

fn demo_cmd(args: DemoArgs) -> CmdResult {
    let state = checkpoint::load(&args.checkpoint)?;
    if !state.model.cfg.corner_head {
        return Err(Failure::Usage(format!("{} has no corner head to refine with", args.checkpoint.display())));
    }
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.head = state.model.cfg.clone();
    cfg.head.joint_inference = true;
    cfg.output_dir = args.out.clone();
    cfg.validate()?;
    let image = Image::read(&args.image).map_err(|e| match e {
        Error::Io { .. } => Failure::Usage(e.to_string()),
        other => other.into(),
    })?;
    cfg.write_resolved(&args.out)?;
    let traced = predict_traced(&state.model, &image.to_tensor(), &cfg.inference_config())?;

    let mut annotated = image.clone();
    let mut log = String::new();
    for (det, trace) in &traced {
        draw_box(&mut annotated, &trace.regressed, RED);
        draw_box(&mut annotated, &det.bbox, GREEN);
        let corners: Vec<_> = trace
            .refinement
            .iter()
            .flat_map(|r| r.corners)
            .map(|c| {
                serde_json::json!({
                    "kind": c.kind,
                    "before": [c.before.x, c.before.y],
                    "after": [c.after.x, c.after.y],
                    "candidate_score": c.candidate_score,
                })
            })
            .collect();
        let line = serde_json::json!({
            "class": det.class_id,
            "score": det.score,
            "regressed": trace.regressed.to_array(),
            "refined": det.bbox.to_array(),
            "corners": corners,
        });
        log.push_str(&line.to_string());
        log.push('\n');
    }
    annotated.write(&args.out.join("annotated.ppm"))?;
    fs::write(args.out.join("refine.jsonl"), log).map_err(io_err("writing refine.jsonl"))?;
    print_json(&serde_json::json!({ "detections": traced.len(), "out": args.out }));
    Ok(())
}

fn configure_workers() -> CmdResult {
    let Ok(v) = std::env::var(WORKERS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{WORKERS_ENV} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = configure_workers().and_then(|()| match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::DemoRefine(a) => demo_cmd(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
