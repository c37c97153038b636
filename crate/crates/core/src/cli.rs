use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use streamocc::losses::{class_iou, confusion, miou_iou};
use streamocc::raster::export_bev;
use streamocc::sim::{gen_world, load_world, save_world, EgoTrajectory, WorldFile, WorldParams, WorldSpec};
use streamocc::stream::{
    ablate, read_occ, run_sequence_mode, schedule_p, total_timings, write_jsonl, write_occ, OperatorKind, RunMode,
    RunReport, StreamConfig, Variant,
};
use streamocc::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "streamocc", version, about = "Streaming semantic occupancy with a Gaussian world model")]
pub struct Cli {
    /// Worker threads for splatting and ablation runs (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world and ego trajectory.
    GenWorld(GenWorldArgs),
    /// Run a sequence and write occupancy dumps, images and metrics.
    Run(RunArgs),
    /// Compare a predicted OCC1 dump against a reference dump.
    Eval(EvalArgs),
    /// Run the ablation variants over several generated worlds.
    Ablate(AblateArgs),
    /// Report wall time per pipeline stage.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Generator settings (TOML); missing keys take defaults.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Stream,
    SingleFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OperatorArg {
    Oracle,
    Gradient,
}

impl From<OperatorArg> for OperatorKind {
    fn from(o: OperatorArg) -> Self {
        match o {
            OperatorArg::Oracle => OperatorKind::Oracle,
            OperatorArg::Gradient => OperatorKind::Gradient,
        }
    }
}

/// Options shared by every command that runs the pipeline.
#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Run seed; also the world seed when no world file is given.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stream configuration (TOML); missing keys take the preset's values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = ["default", "compact"])]
    pub preset: Option<String>,
    #[arg(long, value_enum)]
    pub operator: Option<OperatorArg>,
    /// Number of frames to run (default: the whole trajectory).
    #[arg(long)]
    pub frames: Option<usize>,
}

impl PipelineArgs {
    fn config(&self) -> Result<StreamConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => StreamConfig::load(path)?,
            (None, Some(name)) => StreamConfig::preset(name)?,
            (None, None) => StreamConfig::default(),
        };
        if let Some(op) = self.operator {
            cfg.operator = op.into();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// World file written by `gen-world`; generated from the seed when absent.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Stream)]
    pub mode: ModeArg,
    /// History-drop probability.
    #[arg(long, conflicts_with = "iteration")]
    pub p: Option<f64>,
    /// Take the drop probability from the schedule at this global iteration.
    #[arg(long)]
    pub iteration: Option<usize>,
    /// Skip the BEV images.
    #[arg(long)]
    pub no_images: bool,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub prediction: PathBuf,
    pub reference: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Comma-separated world seeds (at least two).
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub seeds: Vec<u64>,
    /// Generator settings (TOML).
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long)]
    pub world: Option<PathBuf>,
}

fn world_params(path: Option<&Path>) -> Result<WorldParams> {
    let Some(path) = path else {
        return Ok(WorldParams::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let params: WorldParams = toml::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    params.validate()?;
    Ok(params)
}

fn load_or_generate(world: Option<&Path>, seed: u64) -> Result<(WorldSpec, EgoTrajectory)> {
    match world {
        Some(path) => {
            let (_, w, t) = load_world(path)?;
            Ok((w, t))
        }
        None => gen_world(seed, &WorldParams::default()),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn gen_world_cmd(a: &GenWorldArgs) -> Result<()> {
    let mut params = world_params(a.params.as_deref())?;
    if let Some(f) = a.frames {
        params.frames = f;
    }
    let (world, traj) = gen_world(a.seed, &params)?;
    create_dir(&a.out)?;
    let path = a.out.join("world.toml");
    save_world(&path, &WorldFile::new(a.seed, &params, &world, &traj))?;
    println!(
        "wrote {} ({} static, {} dynamic boxes, {} frames)",
        path.display(),
        world.static_boxes.len(),
        world.dynamic_boxes.len(),
        traj.len()
    );
    Ok(())
}

fn run_cmd(a: &RunArgs) -> Result<()> {
    let mut cfg = a.pipeline.config()?;
    if let Some(p) = a.p {
        cfg.drop_probability = p;
    }
    if let Some(it) = a.iteration {
        cfg.schedule.validate()?;
        cfg.drop_probability = schedule_p(it, &cfg.schedule);
    }
    cfg.validate()?;
    let (world, traj) = load_or_generate(a.world.as_deref(), cfg.seed)?;
    let mode = match a.mode {
        ModeArg::Stream => RunMode::Streaming,
        ModeArg::SingleFrame => RunMode::SingleFrame,
    };
    let report = run_sequence_mode(&world, &traj, &cfg, a.pipeline.frames, mode)?;
    write_outputs(&report, &a.out, !a.no_images)?;
    println!(
        "{} frames, mean mIoU {:.4}, mean IoU {:.4}, output in {}",
        report.frames.len(),
        report.mean_miou(),
        report.mean_iou(),
        a.out.display()
    );
    Ok(())
}

fn write_outputs(report: &RunReport, out: &Path, images: bool) -> Result<()> {
    let occ_dir = out.join("occ");
    create_dir(&occ_dir)?;
    let bev_dir = out.join("bev");
    if images {
        create_dir(&bev_dir)?;
    }
    for (f, grid) in report.occupancy.iter().enumerate() {
        write_occ(&occ_dir.join(format!("frame_{f:04}.occ")), grid)?;
        if images {
            export_bev(grid, &bev_dir.join(format!("frame_{f:04}.ppm")))?;
        }
    }
    write_jsonl(&out.join("metrics.jsonl"), &report.frames)?;
    write_jsonl(&out.join("timings.jsonl"), &report.timings)?;
    write_json(&out.join("report.json"), report)?;
    report.config.save(&out.join("config.toml"))
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    miou: f64,
    iou: f64,
    class_iou: Vec<Option<f64>>,
    evaluated: u64,
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let pred = read_occ(&a.prediction)?;
    let truth = read_occ(&a.reference)?;
    let counts = confusion(&pred, &truth, None)?;
    let (miou, iou) = miou_iou(&counts)?;
    print_json(&EvalOutput {
        miou,
        iou,
        class_iou: class_iou(&counts).to_vec(),
        evaluated: counts.evaluated,
    })
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let mut cfg = a.pipeline.config()?;
    if a.pipeline.operator.is_none() && a.pipeline.config.is_none() {
        cfg.operator = OperatorKind::Gradient;
    }
    let params = world_params(a.params.as_deref())?;
    let rows = ablate(&a.seeds, &params, &cfg, a.pipeline.frames, &Variant::ALL)?;
    for r in &rows {
        println!(
            "{:<14} mIoU {:.4} ± {:.4}  IoU {:.4} ± {:.4}",
            r.variant.name(),
            r.mean_miou,
            r.std_miou,
            r.mean_iou,
            r.std_iou
        );
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_jsonl(&out.join("ablation.jsonl"), &rows)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchOutput {
    frames: usize,
    gaussians: usize,
    operator: OperatorKind,
    /// Mean seconds per frame for each stage.
    per_frame: streamocc::stream::StageTimings,
    total_seconds: f64,
}

fn bench_cmd(a: &BenchArgs) -> Result<()> {
    let cfg = a.pipeline.config()?;
    let (world, traj) = load_or_generate(a.world.as_deref(), cfg.seed)?;
    let report = run_sequence_mode(&world, &traj, &cfg, a.pipeline.frames, RunMode::Streaming)?;
    let total = total_timings(&report);
    let n = report.frames.len() as f64;
    let per_frame = streamocc::stream::StageTimings {
        observe: total.observe / n,
        align: total.align / n,
        complete: total.complete / n,
        advance: total.advance / n,
        evolution: total.evolution / n,
        refinement: total.refinement / n,
        raster: total.raster / n,
    };
    print_json(&BenchOutput {
        frames: report.frames.len(),
        gaussians: cfg.num_gaussians,
        operator: cfg.operator,
        per_frame,
        total_seconds: total.total(),
    })
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::GenWorld(a) => gen_world_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    }
}
