use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pedcast::config::RunConfig;
use pedcast::metrics::{format_report, EvalFrame};
use pedcast::nn::ParamStore;
use pedcast::pipeline::{
    benchmark_stages, evaluate, infer_scene, init_params, init_train_state, load_train_state,
    report_lines, save_train_state, scene_ground_truth, train_steps, StepLog, TrainState,
};
use pedcast::predictions::{read_predictions, write_predictions};
use pedcast::render::{detection_visuals, render_svg, scene_visual, RenderOptions};
use pedcast::simworld::{read_dataset, simulate_scene, write_dataset, Scene};

#[derive(Parser)]
#[command(
    name = "pedcast",
    version,
    about = "Pedestrian detection and trajectory prediction on synthetic lidar scenes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Train a model, logging losses and writing checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint or a prediction file against a dataset.
    Eval(EvalArgs),
    /// Run inference and write a prediction file.
    Predict(PredictArgs),
    /// Draw one scene, with optional predictions, as an SVG.
    Render(RenderArgs),
    /// Time the pipeline stages on one scene.
    Benchmark(BenchmarkArgs),
}

/// Configuration flags shared by every command. Precedence is
/// defaults < --config file < --set overrides < --seed.
#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set lr=1e-3. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => {
                RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.set)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of scenes to simulate.
    #[arg(long)]
    scenes: u64,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for the effective config, loss log, and checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Optimization steps; defaults to train_steps from the config.
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from the checkpoint already in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset providing the ground truth.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory to run inference from.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Prediction file to score instead of running a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint directory to run inference from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to run inference on.
    #[arg(long)]
    data: PathBuf,
    /// Output prediction file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset the scene is drawn from.
    #[arg(long)]
    data: PathBuf,
    /// Prediction file whose detections for the scene are overlaid.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Scene index within the dataset.
    #[arg(long)]
    scene: usize,
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to time; freshly seeded parameters when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Detection range override in meters (square side).
    #[arg(long)]
    range: Option<f64>,
    /// Timed runs after warmup.
    #[arg(long, default_value_t = 30)]
    runs: usize,
    /// Untimed warmup runs.
    #[arg(long, default_value_t = 3)]
    warmup: usize,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData(a) => gen_data(&a),
        Cmd::Train(a) => train(&a),
        Cmd::Eval(a) => eval(&a),
        Cmd::Predict(a) => predict(&a),
        Cmd::Render(a) => render(&a),
        Cmd::Benchmark(a) => benchmark(&a),
    }
}

fn load_scenes(path: &PathBuf) -> Result<Vec<Scene>> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_params(dir: &PathBuf) -> Result<ParamStore> {
    ParamStore::load(&dir.join("params.ckpt"))
        .with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let sim = cfg.sim();
    let scenes: Vec<Scene> =
        (0..a.scenes).map(|i| simulate_scene(&sim, cfg.seed.wrapping_add(i))).collect();
    write_dataset(&a.out, &scenes)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn log_line(log: &mut impl Write, l: &StepLog) -> std::io::Result<()> {
    writeln!(
        log,
        "step {} scene {} total {:?} t_cls {:?} t_cur {:?} t_past {:?} s_cls {:?} s_cur {:?} s_future {:?} proposals {} positives {}",
        l.step,
        l.scene,
        l.values.total,
        l.values.t_cls,
        l.values.t_cur,
        l.values.t_past,
        l.values.s_cls,
        l.values.s_cur,
        l.values.s_future,
        l.proposals,
        l.stage2_positives
    )
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let scenes = load_scenes(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("effective.toml"), cfg.to_toml_string()?)?;

    let ckpt = a.out.join("checkpoint");
    let mut state: TrainState =
        if a.resume { load_train_state(&ckpt)? } else { init_train_state(&cfg)? };
    let mut log = BufWriter::new(
        File::options()
            .create(true)
            .append(a.resume)
            .truncate(!a.resume)
            .write(true)
            .open(a.out.join("loss.log"))?,
    );

    let steps = a.steps.unwrap_or(cfg.train_steps);
    let every = if cfg.checkpoint_every == 0 { steps } else { cfg.checkpoint_every };
    let mut remaining = steps;
    let mut failed: Option<pedcast::pipeline::PipelineError> = None;
    while remaining > 0 && failed.is_none() {
        let chunk = remaining.min(every);
        let mut io_err = None;
        let r = train_steps(&cfg, &scenes, &mut state, chunk, |l| {
            if io_err.is_none() {
                io_err = log_line(&mut log, l).err();
            }
        });
        if let Some(e) = io_err {
            return Err(e.into());
        }
        // Persist progress even when the loss diverges, so the last good
        // step is inspectable, then report the failure.
        log.flush()?;
        save_train_state(&ckpt, &state)?;
        match r {
            Ok(()) => remaining -= chunk,
            Err(e) => failed = Some(e),
        }
    }
    if let Some(e) = failed {
        return Err(e).context("training aborted");
    }
    println!("trained to step {}, checkpoint at {}", state.adam.step, ckpt.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let scenes = load_scenes(&a.data)?;
    let lines = if let Some(pred_path) = &a.predictions {
        let dets = read_predictions(pred_path)?;
        if dets.len() != scenes.len() {
            bail!(
                "prediction file has {} scenes, dataset has {}",
                dets.len(),
                scenes.len()
            );
        }
        let mut frames = Vec::with_capacity(scenes.len());
        for (scene, dets) in scenes.iter().zip(dets) {
            frames.push(EvalFrame { dets, gts: scene_ground_truth(scene, &cfg)? });
        }
        report_lines(&cfg, &frames)?
    } else {
        let store = load_params(a.checkpoint.as_ref().expect("clap enforces the pair"))?;
        evaluate(&cfg, &store, &scenes)?.lines
    };
    let report = format_report(&lines);
    print!("{report}");
    if let Some(out) = &a.out {
        std::fs::write(out, &report)?;
    }
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let grid = cfg.grid()?;
    let scenes = load_scenes(&a.data)?;
    let store = load_params(&a.checkpoint)?;
    let mut all = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        all.push(infer_scene(&cfg, &grid, &store, scene)?);
    }
    write_predictions(&a.out, &all)?;
    println!("wrote predictions for {} scenes to {}", all.len(), a.out.display());
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let scenes = load_scenes(&a.data)?;
    if a.scene >= scenes.len() {
        bail!("scene {} out of range, dataset has {} scenes", a.scene, scenes.len());
    }
    let mut visual = scene_visual(&scenes[a.scene]);
    if let Some(pred_path) = &a.predictions {
        let dets = read_predictions(pred_path)?;
        let dets = dets.get(a.scene).ok_or_else(|| {
            anyhow::anyhow!("prediction file has no scene {} record", a.scene)
        })?;
        visual.detections = detection_visuals(dets);
    }
    let opt = RenderOptions { world_half_extent_m: cfg.range_m / 2.0, ..Default::default() };
    std::fs::write(&a.out, render_svg(&visual, &opt))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn benchmark(a: &BenchmarkArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(r) = a.range {
        cfg.range_m = r;
        cfg.validate()?;
    }
    let store = match &a.checkpoint {
        Some(dir) => load_params(dir)?,
        None => init_params(&cfg)?,
    };
    let scene = simulate_scene(&cfg.sim(), cfg.seed);
    let timings = benchmark_stages(&cfg, &store, &scene, a.warmup, a.runs)?;
    println!("range {} m, grid {} px, {} runs", cfg.range_m, cfg.grid()?.rows, a.runs);
    for t in &timings {
        println!(
            "{:<10} median {:9.3} ms  p95 {:9.3} ms",
            t.stage, t.median_ms, t.p95_ms
        );
    }
    Ok(())
}
