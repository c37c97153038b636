//! The streaming loop, its single-frame counterpart, history-drop schedule,
//! ablation runs, run reports and file formats.

mod config;
mod io;

use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{schedule_p, Ablation, OperatorKind, Schedule, StreamConfig};
pub use io::{decode_occ, encode_occ, read_jsonl, read_occ, write_jsonl, write_occ, OCC_MAGIC};

use crate::gaussian::{
    align_scene, cull, cull_and_complete, make_scene, relative_transform, DynamicClassSet, GaussianScene, RangeBox,
    SE3Pose,
};
use crate::losses::{confusion, miou_iou, ConfusionCounts};
use crate::raster::{labelize, splat, OccupancyGrid};
use crate::refine::{
    advance_temporal, evolution_layer, masked_loss, record_temporal, refinement_layer, FrameContext, GradientOperator,
    OracleOperator, RefineOperator,
};
use crate::sim::{ego_pose_at, gen_world, observe, EgoTrajectory, Observation, WorldParams, WorldSpec};
use crate::{seed, Error, Result};

/// Wall-clock seconds spent in each stage of one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub observe: f64,
    pub align: f64,
    pub complete: f64,
    pub advance: f64,
    pub evolution: f64,
    pub refinement: f64,
    pub raster: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.observe + self.align + self.complete + self.advance + self.evolution + self.refinement + self.raster
    }

    fn accumulate(&mut self, o: &StageTimings) {
        self.observe += o.observe;
        self.align += o.align;
        self.complete += o.complete;
        self.advance += o.advance;
        self.evolution += o.evolution;
        self.refinement += o.refinement;
        self.raster += o.raster;
    }
}

struct Clock(Instant);

impl Clock {
    fn start() -> Self {
        Self(Instant::now())
    }

    /// Seconds since the last lap.
    fn lap(&mut self) -> f64 {
        let now = Instant::now();
        let dt = now.duration_since(self.0).as_secs_f64();
        self.0 = now;
        dt
    }
}

pub fn make_operator(config: &StreamConfig, world: &WorldSpec) -> Result<Box<dyn RefineOperator + Send>> {
    Ok(match config.operator {
        OperatorKind::Oracle => Box::new(OracleOperator::new(world.clone(), config.oracle)?),
        OperatorKind::Gradient => Box::new(GradientOperator),
    })
}

fn check_observation(obs: &Observation, config: &StreamConfig) -> Result<()> {
    config.grid.check_same(obs.grid())?;
    if obs.mask.len() != config.grid.num_voxels() {
        return Err(Error::ShapeMismatch {
            expected: config.grid.num_voxels(),
            actual: obs.mask.len(),
        });
    }
    Ok(())
}

/// Evolution and refinement layers followed by rasterization.
#[allow(clippy::too_many_arguments)]
fn layers_and_raster(
    scene: GaussianScene,
    reference: &[Vector3<f64>],
    ctx: &FrameContext,
    config: &StreamConfig,
    dyn_classes: &DynamicClassSet,
    op: &mut dyn RefineOperator,
    t: &mut StageTimings,
    clock: &mut Clock,
) -> Result<(GaussianScene, OccupancyGrid)> {
    let rc = &config.refiner;
    let mut scene = scene;
    for _ in 0..rc.n_e {
        scene = evolution_layer(&scene, ctx, rc, dyn_classes, op)?;
    }
    t.evolution += clock.lap();
    for _ in 0..rc.n_r {
        scene = refinement_layer(&scene, ctx, rc, dyn_classes, op, reference)?;
    }
    if rc.n_r == 0 {
        record_temporal(&mut scene, reference)?;
    }
    t.refinement += clock.lap();
    let occ = labelize(&splat(&scene, &config.grid, &config.splat), &config.splat);
    t.raster += clock.lap();
    Ok((scene, occ))
}

fn frame_context<'a>(
    obs: &'a Observation,
    config: &'a StreamConfig,
    range: &'a RangeBox,
    reference: &'a [Vector3<f64>],
    frame: usize,
    prev_pose: SE3Pose,
    cur_pose: SE3Pose,
) -> FrameContext<'a> {
    FrameContext {
        observation: obs,
        grid: &config.grid,
        range,
        splat: &config.splat,
        frame,
        ego_pose: cur_pose,
        prev_pose,
        reference: Some(reference),
    }
}

/// Result of one frame together with its stage timings.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub scene: GaussianScene,
    pub occupancy: OccupancyGrid,
    pub timings: StageTimings,
}

pub fn stream_step_timed(
    state: &GaussianScene,
    obs: &Observation,
    prev_pose: &SE3Pose,
    cur_pose: &SE3Pose,
    frame: usize,
    config: &StreamConfig,
    op: &mut dyn RefineOperator,
) -> Result<StepOutput> {
    check_observation(obs, config)?;
    let mut t = StageTimings::default();
    let mut clock = Clock::start();
    let range = config.grid.range();
    let m_ego = relative_transform(prev_pose, cur_pose)?;
    let ab = config.ablation;

    let mut scene = if ab.disable_ego_alignment {
        let mut s = align_scene(state, &SE3Pose::identity());
        s.ego_pose = *cur_pose;
        s
    } else {
        align_scene(state, &m_ego)
    };
    scene.frame_index = frame;
    t.align = clock.lap();

    let m_complete = if ab.disable_ego_alignment { SE3Pose::identity() } else { m_ego };
    scene = if ab.disable_completion {
        cull(&scene, &range).0
    } else {
        let s = seed::derive(config.seed, &[seed::tag::COMPLETE, frame as u64]);
        cull_and_complete(&scene, &range, &m_complete, s, &config.init)?
    };
    let reference = scene.positions();
    t.complete = clock.lap();

    let dyn_classes = config.dynamic_set()?;
    scene = advance_temporal(&scene, &dyn_classes);
    t.advance = clock.lap();

    let ctx = frame_context(obs, config, &range, &reference, frame, *prev_pose, *cur_pose);
    let (scene, occupancy) = layers_and_raster(scene, &reference, &ctx, config, &dyn_classes, op, &mut t, &mut clock)?;
    Ok(StepOutput {
        scene,
        occupancy,
        timings: t,
    })
}

/// One streaming step: align, cull and complete, pre-advance, evolution and
/// refinement layers, then rasterization.
pub fn stream_step(
    state: &GaussianScene,
    obs: &Observation,
    prev_pose: &SE3Pose,
    cur_pose: &SE3Pose,
    frame: usize,
    config: &StreamConfig,
    op: &mut dyn RefineOperator,
) -> Result<(GaussianScene, OccupancyGrid)> {
    stream_step_timed(state, obs, prev_pose, cur_pose, frame, config, op).map(|o| (o.scene, o.occupancy))
}

pub fn single_frame_timed(
    obs: &Observation,
    cur_pose: &SE3Pose,
    frame: usize,
    config: &StreamConfig,
    op: &mut dyn RefineOperator,
) -> Result<StepOutput> {
    check_observation(obs, config)?;
    let mut t = StageTimings::default();
    let mut clock = Clock::start();
    let range = config.grid.range();
    let s = seed::derive(config.seed, &[seed::tag::INIT, frame as u64]);
    let mut scene = make_scene(config.num_gaussians, &range, s, &config.init)?;
    scene.ego_pose = *cur_pose;
    scene.frame_index = frame;
    let reference = scene.positions();
    t.complete = clock.lap();
    let dyn_classes = config.dynamic_set()?;
    let ctx = frame_context(obs, config, &range, &reference, frame, *cur_pose, *cur_pose);
    let (scene, occupancy) = layers_and_raster(scene, &reference, &ctx, config, &dyn_classes, op, &mut t, &mut clock)?;
    Ok(StepOutput {
        scene,
        occupancy,
        timings: t,
    })
}

/// Prediction from a fresh, frame-seeded scene with every Gaussian new.
pub fn single_frame_predict(
    obs: &Observation,
    cur_pose: &SE3Pose,
    frame: usize,
    config: &StreamConfig,
    op: &mut dyn RefineOperator,
) -> Result<(GaussianScene, OccupancyGrid)> {
    single_frame_timed(obs, cur_pose, frame, config, op).map(|o| (o.scene, o.occupancy))
}

/// Whether the carried state is discarded before `frame`.
pub fn drops_history(run_seed: u64, frame: usize, p: f64) -> bool {
    if frame == 0 {
        return true;
    }
    let u: f64 = seed::rng(seed::derive(run_seed, &[seed::tag::DROP, frame as u64])).random();
    u < p
}

/// Per-frame metrics; one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub dropped: bool,
    pub miou: Option<f64>,
    pub iou: Option<f64>,
    pub loss: Option<f64>,
    pub observed: usize,
    pub gaussians: usize,
    pub in_range: usize,
    pub new: usize,
    pub confusion: ConfusionCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub frame: usize,
    pub stages: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frames: usize,
    /// Means over frames with a defined value.
    pub mean_miou: Option<f64>,
    pub mean_iou: Option<f64>,
    pub mean_loss: Option<f64>,
    /// Metrics of the confusion counts pooled over all frames.
    pub pooled_miou: Option<f64>,
    pub pooled_iou: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Summary {
    pub fn from_frames(frames: &[FrameRecord]) -> Self {
        let mut pooled = ConfusionCounts::default();
        for f in frames {
            pooled.merge(&f.confusion);
        }
        let p = miou_iou(&pooled).ok();
        Self {
            frames: frames.len(),
            mean_miou: mean(frames.iter().map(|f| f.miou)),
            mean_iou: mean(frames.iter().map(|f| f.iou)),
            mean_loss: mean(frames.iter().map(|f| f.loss)),
            pooled_miou: p.map(|x| x.0),
            pooled_iou: p.map(|x| x.1),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: StreamConfig,
    pub summary: Summary,
    pub frames: Vec<FrameRecord>,
    #[serde(skip)]
    pub timings: Vec<FrameTiming>,
    #[serde(skip)]
    pub occupancy: Vec<OccupancyGrid>,
}

impl RunReport {
    pub fn mean_miou(&self) -> f64 {
        self.summary.mean_miou.unwrap_or(0.0)
    }

    pub fn mean_iou(&self) -> f64 {
        self.summary.mean_iou.unwrap_or(0.0)
    }
}

/// How a sequence is driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Carry state across frames, dropping it with the configured probability.
    Streaming,
    /// Every frame from a fresh scene.
    SingleFrame,
}

fn evaluate(
    frame: usize,
    dropped: bool,
    out: &StepOutput,
    obs: &Observation,
    config: &StreamConfig,
) -> Result<FrameRecord> {
    let counts = confusion(&out.occupancy, &obs.labels, Some(&obs.mask))?;
    let metrics = miou_iou(&counts).ok();
    let loss = match masked_loss(&out.scene, obs, &config.grid, &config.splat, &config.refiner.loss) {
        Ok(l) => Some(l),
        Err(Error::EmptyObservation) => None,
        Err(e) => return Err(e),
    };
    let range = config.grid.range();
    Ok(FrameRecord {
        frame,
        dropped,
        miou: metrics.map(|m| m.0),
        iou: metrics.map(|m| m.1),
        loss,
        observed: obs.observed_count(),
        gaussians: out.scene.len(),
        in_range: out.scene.count_in_range(&range),
        new: out.scene.count_new(),
        confusion: counts,
    })
}

/// Runs the first `frames` frames of a trajectory (all of it when `None`).
/// Randomness comes from `config.seed` only.
pub fn run_sequence_mode(
    world: &WorldSpec,
    traj: &EgoTrajectory,
    config: &StreamConfig,
    frames: Option<usize>,
    mode: RunMode,
) -> Result<RunReport> {
    config.validate()?;
    traj.validate()?;
    let n = frames.unwrap_or(traj.len());
    if n == 0 || n > traj.len() {
        return Err(Error::FrameOutOfRange {
            frame: n,
            len: traj.len(),
        });
    }
    let mut op = make_operator(config, world)?;
    let mut state: Option<GaussianScene> = None;
    let mut prev_pose = SE3Pose::identity();
    let mut records = Vec::with_capacity(n);
    let mut timings = Vec::with_capacity(n);
    let mut grids = Vec::with_capacity(n);
    for frame in 0..n {
        let mut clock = Clock::start();
        let pose = ego_pose_at(traj, frame)?;
        let obs = observe(world, frame, &pose, &config.grid, &config.visibility)?;
        let t_obs = clock.lap();
        let dropped = mode == RunMode::SingleFrame || drops_history(config.seed, frame, config.drop_probability);
        let mut out = match (&state, dropped) {
            (Some(s), false) => stream_step_timed(s, &obs, &prev_pose, &pose, frame, config, op.as_mut())?,
            _ => single_frame_timed(&obs, &pose, frame, config, op.as_mut())?,
        };
        out.timings.observe = t_obs;
        records.push(evaluate(frame, dropped, &out, &obs, config)?);
        timings.push(FrameTiming {
            frame,
            stages: out.timings,
        });
        grids.push(out.occupancy);
        state = Some(out.scene);
        prev_pose = pose;
    }
    Ok(RunReport {
        seed: config.seed,
        config: config.clone(),
        summary: Summary::from_frames(&records),
        frames: records,
        timings,
        occupancy: grids,
    })
}

/// Streaming run with history drops.
pub fn run_sequence(
    world: &WorldSpec,
    traj: &EgoTrajectory,
    config: &StreamConfig,
    frames: Option<usize>,
) -> Result<RunReport> {
    run_sequence_mode(world, traj, config, frames, RunMode::Streaming)
}

/// Stage times summed over a run.
pub fn total_timings(report: &RunReport) -> StageTimings {
    let mut t = StageTimings::default();
    for f in &report.timings {
        t.accumulate(&f.stages);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoEgo,
    NoDynamics,
    NoCompletion,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoEgo, Variant::NoDynamics, Variant::NoCompletion];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEgo => "no-ego",
            Variant::NoDynamics => "no-dynamics",
            Variant::NoCompletion => "no-completion",
        }
    }

    pub fn apply(&self, config: &StreamConfig) -> StreamConfig {
        let mut c = config.clone();
        c.ablation = Ablation::default();
        match self {
            Variant::Full => {}
            Variant::NoEgo => c.ablation.disable_ego_alignment = true,
            Variant::NoDynamics => c.ablation.disable_dynamics = true,
            Variant::NoCompletion => c.ablation.disable_completion = true,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub miou: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mean_miou: f64,
    pub std_miou: f64,
    pub mean_iou: f64,
    pub std_iou: f64,
    pub seeds: Vec<SeedResult>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Runs every variant on the world generated from each seed (the seed also
/// drives the run) and reports mean and sample standard deviation of the
/// per-run mean mIoU and IoU.
pub fn ablate(
    seeds: &[u64],
    world_params: &WorldParams,
    config: &StreamConfig,
    frames: Option<usize>,
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ablation needs at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    let worlds: Vec<(WorldSpec, EgoTrajectory)> = seeds
        .par_iter()
        .map(|&s| gen_world(s, world_params))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..seeds.len()).map(move |s| (v, s)))
        .collect();
    let results: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(v, s)| {
            let mut c = variants[v].apply(config);
            c.seed = seeds[s];
            let r = run_sequence(&worlds[s].0, &worlds[s].1, &c, frames)?;
            Ok((r.mean_miou(), r.mean_iou()))
        })
        .collect::<Result<_>>()?;
    Ok(variants
        .iter()
        .enumerate()
        .map(|(v, &variant)| {
            let rows: Vec<SeedResult> = (0..seeds.len())
                .map(|s| {
                    let (miou, iou) = results[v * seeds.len() + s];
                    SeedResult {
                        seed: seeds[s],
                        miou,
                        iou,
                    }
                })
                .collect();
            let (mean_miou, std_miou) = mean_std(&rows.iter().map(|r| r.miou).collect::<Vec<_>>());
            let (mean_iou, std_iou) = mean_std(&rows.iter().map(|r| r.iou).collect::<Vec<_>>());
            AblationRow {
                variant,
                mean_miou,
                std_miou,
                mean_iou,
                std_iou,
                seeds: rows,
            }
        })
        .collect())
}
