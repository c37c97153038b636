use std::collections::VecDeque;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{AttributeDeltas, FrameContext, LayerKind, RefineOperator, RefinerConfig};
use crate::gaussian::{GaussianScene, Semantics};
use crate::raster::GridConfig;
use crate::sim::{world_occupancy, WorldSpec};
use crate::taxonomy::{self, NUM_CLASSES};
use crate::{Error, Result};

const NONE: u32 = u32::MAX;

/// Below this every delta component is treated as converged.
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleParams {
    /// Isotropic standard deviation of a placed Gaussian (m).
    pub target_scale: f64,
    /// Logit of every non-target class relative to the target class.
    pub off_logit: f64,
    /// Slack when testing whether a Gaussian rode on a dynamic box (m).
    pub box_margin: f64,
    /// Cell edge of the nearest-neighbour buckets (m).
    pub bucket_size: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            target_scale: 0.12,
            off_logit: -20.0,
            box_margin: 0.3,
            bucket_size: 2.0,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_scale > 0.0 && self.off_logit < 0.0 && self.box_margin >= 0.0 && self.bucket_size > 0.0) {
            return Err(Error::InvalidArgument(format!("bad oracle parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Target {
    position: Vector3<f64>,
    /// Class to converge to; `None` keeps the current semantics.
    label: Option<u8>,
}

#[derive(Debug, Clone)]
struct Plan {
    layer: LayerKind,
    frame: usize,
    targets: Vec<Option<Target>>,
}

/// Operator with access to the simulated world: it moves Gaussians onto the
/// observed occupied voxels with their true classes, so the layer stack can
/// be exercised without any learned component.
///
/// Targets are fixed by `begin_layer` and reused for every step of the layer.
#[derive(Debug, Clone)]
pub struct OracleOperator {
    world: WorldSpec,
    params: OracleParams,
    plan: Option<Plan>,
}

impl OracleOperator {
    pub fn new(world: WorldSpec, params: OracleParams) -> Result<Self> {
        world.validate()?;
        params.validate()?;
        Ok(Self {
            world,
            params,
            plan: None,
        })
    }

    pub fn params(&self) -> &OracleParams {
        &self.params
    }

    fn is_dynamic(&self, label: u8) -> bool {
        self.world.dynamic_classes.contains(&label)
    }

    /// Position a Gaussian should be judged at: a historical Gaussian of a
    /// dynamic class that started the frame inside a box follows that box's
    /// motion since the previous frame.
    fn anchor(&self, ctx: &FrameContext, start: &Vector3<f64>) -> Option<Vector3<f64>> {
        if ctx.frame == 0 {
            return None;
        }
        let w = ctx.ego_pose.transform_point(start);
        for b in &self.world.dynamic_boxes {
            let prev = b.at(ctx.frame - 1);
            if prev.contains_with_margin(&w, self.params.box_margin) {
                let cur = b.at(ctx.frame);
                let moved = cur.pose().transform_point(&prev.pose().inverse().transform_point(&w));
                return Some(ctx.ego_pose.inverse().transform_point(&moved));
            }
        }
        None
    }

    fn plan(&self, ctx: &FrameContext, scene: &GaussianScene, layer: LayerKind) -> Result<Plan> {
        let grid = ctx.grid;
        let obs = ctx.observation;
        grid.check_same(obs.grid())?;
        let labels = obs.labels.labels();
        let n = scene.len();
        let nv = grid.num_voxels();
        let is_target = |v: usize| obs.mask[v] && labels[v] != taxonomy::EMPTY;

        let movable: Vec<bool> = (0..n)
            .map(|i| {
                layer == LayerKind::Refinement
                    || scene.new_mask[i]
                    || self.is_dynamic(scene.gaussians[i].argmax_label())
            })
            .collect();
        let mapped: Vec<Option<Vector3<f64>>> = scene
            .gaussians
            .iter()
            .enumerate()
            .map(|(i, g)| {
                if scene.new_mask[i] || !self.is_dynamic(g.argmax_label()) {
                    return None;
                }
                let start = match ctx.reference {
                    Some(r) if r.len() == n => r[i],
                    _ => g.position,
                };
                self.anchor(ctx, &start)
            })
            .collect();
        let anchors: Vec<Vector3<f64>> = (0..n)
            .map(|i| mapped[i].unwrap_or(scene.gaussians[i].position))
            .collect();
        let voxels: Vec<usize> = anchors.iter().map(|a| voxel_index(grid, a)).collect();

        let mut targets: Vec<Option<Target>> = vec![None; n];
        let mut owner = vec![NONE; nv];
        let to = |v: usize| Target {
            position: grid.center_of(v),
            label: Some(labels[v]),
        };

        // Claim pass: each target voxel keeps the Gaussian closest to its
        // center, immovable Gaussians taking precedence.
        let mut order: Vec<usize> = (0..n).filter(|&i| !movable[i]).collect();
        let mut mov: Vec<(f64, usize)> = (0..n)
            .filter(|&i| movable[i])
            .map(|i| ((anchors[i] - grid.center_of(voxels[i])).norm_squared(), i))
            .collect();
        mov.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.extend(mov.iter().map(|&(_, i)| i));
        for &i in &order {
            let v = voxels[i];
            if is_target(v) && owner[v] == NONE {
                owner[v] = i as u32;
                targets[i] = Some(to(v));
            }
        }

        let truth = world_occupancy(&self.world, ctx.frame, &ctx.ego_pose, grid);
        let truth = truth.labels();
        let settle = |v: usize| Target {
            position: grid.center_of(v),
            label: taxonomy::is_semantic(truth[v]).then_some(truth[v]),
        };
        // Gaussians carried by a box into hidden space stay with the box.
        for i in 0..n {
            let v = voxels[i];
            if mapped[i].is_some() && targets[i].is_none() && !obs.mask[v] && truth[v] != taxonomy::EMPTY {
                targets[i] = Some(settle(v));
            }
        }

        // Remaining target voxels take the nearest unclaimed movable Gaussian.
        let free: Vec<usize> = (0..n).filter(|&i| movable[i] && targets[i].is_none()).collect();
        // Box-carried Gaussians are used only once everything else is taken.
        let mut primary = Buckets::new(ctx.range.min(), ctx.range.max(), self.params.bucket_size);
        let mut carried = Buckets::new(ctx.range.min(), ctx.range.max(), self.params.bucket_size);
        for &i in &free {
            if mapped[i].is_some() {
                carried.insert(i, anchors[i]);
            } else {
                primary.insert(i, anchors[i]);
            }
        }
        for v in 0..nv {
            if !is_target(v) || owner[v] != NONE {
                continue;
            }
            let c = grid.center_of(v);
            let pick = primary.take_nearest(&c, &anchors).or_else(|| carried.take_nearest(&c, &anchors));
            match pick {
                Some(i) => {
                    owner[v] = i as u32;
                    targets[i] = Some(to(v));
                }
                None => break,
            }
        }

        // Leftovers stack on the nearest target voxel when they sit in
        // observed free space, and settle in place otherwise.
        let leftovers: Vec<usize> = free.into_iter().filter(|&i| targets[i].is_none()).collect();
        if leftovers.is_empty() {
            return Ok(Plan {
                layer,
                frame: ctx.frame,
                targets,
            });
        }
        let any_target = (0..nv).any(is_target);
        let sinks: Vec<usize> = if any_target {
            (0..nv).filter(|&v| is_target(v)).collect()
        } else {
            (0..nv).filter(|&v| !obs.mask[v]).collect()
        };
        let nearest = nearest_sink(grid, &sinks);
        for i in leftovers {
            let v = voxels[i];
            targets[i] = if is_target(v) {
                Some(to(v))
            } else if obs.mask[v] {
                match nearest[v] {
                    NONE => None,
                    s if any_target => Some(to(s as usize)),
                    s => Some(settle(s as usize)),
                }
            } else {
                Some(settle(v))
            };
        }
        Ok(Plan {
            layer,
            frame: ctx.frame,
            targets,
        })
    }

    fn target_logits(&self, label: u8) -> Semantics {
        std::array::from_fn(|k| if k + 1 == label as usize { 0.0 } else { self.params.off_logit })
    }
}

fn voxel_index(grid: &GridConfig, p: &Vector3<f64>) -> usize {
    let clamped = grid.range().clamp(p);
    let [ix, iy, iz] = grid.voxel_of(&clamped).expect("clamped point lies on the grid");
    grid.index(ix, iy, iz)
}

/// Multi-source breadth-first search over face neighbours; for every voxel
/// the closest source, ties resolved by discovery order.
fn nearest_sink(grid: &GridConfig, sources: &[usize]) -> Vec<u32> {
    let nv = grid.num_voxels();
    let mut near = vec![NONE; nv];
    let mut queue = VecDeque::with_capacity(sources.len());
    for &s in sources {
        near[s] = s as u32;
        queue.push_back(s);
    }
    let d = grid.dims;
    while let Some(v) = queue.pop_front() {
        let [x, y, z] = grid.coords(v);
        let mut visit = |nx: usize, ny: usize, nz: usize| {
            let u = grid.index(nx, ny, nz);
            if near[u] == NONE {
                near[u] = near[v];
                queue.push_back(u);
            }
        };
        if x > 0 {
            visit(x - 1, y, z);
        }
        if x + 1 < d[0] {
            visit(x + 1, y, z);
        }
        if y > 0 {
            visit(x, y - 1, z);
        }
        if y + 1 < d[1] {
            visit(x, y + 1, z);
        }
        if z > 0 {
            visit(x, y, z - 1);
        }
        if z + 1 < d[2] {
            visit(x, y, z + 1);
        }
    }
    near
}

/// Uniform spatial hash over the range for nearest-free-Gaussian queries.
struct Buckets {
    min: Vector3<f64>,
    size: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
    alive: usize,
    taken: Vec<bool>,
}

impl Buckets {
    fn new(min: Vector3<f64>, max: Vector3<f64>, size: f64) -> Self {
        let dims: [usize; 3] = std::array::from_fn(|i| (((max[i] - min[i]) / size).ceil() as usize).max(1));
        Self {
            min,
            size,
            dims,
            cells: vec![Vec::new(); dims[0] * dims[1] * dims[2]],
            alive: 0,
            taken: Vec::new(),
        }
    }

    fn cell(&self, p: &Vector3<f64>) -> [usize; 3] {
        std::array::from_fn(|i| {
            let f = ((p[i] - self.min[i]) / self.size).floor();
            (f.max(0.0) as usize).min(self.dims[i] - 1)
        })
    }

    fn insert(&mut self, i: usize, p: Vector3<f64>) {
        let [x, y, z] = self.cell(&p);
        self.cells[(x * self.dims[1] + y) * self.dims[2] + z].push(i as u32);
        if self.taken.len() <= i {
            self.taken.resize(i + 1, false);
        }
        self.alive += 1;
    }

    /// Removes and returns the nearest live entry, lowest index on ties.
    fn take_nearest(&mut self, q: &Vector3<f64>, points: &[Vector3<f64>]) -> Option<usize> {
        if self.alive == 0 {
            return None;
        }
        let c = self.cell(q);
        let max_r = *self.dims.iter().max().expect("three axes");
        let mut best: Option<(f64, usize)> = None;
        for r in 0..=max_r {
            let lo: [usize; 3] = std::array::from_fn(|i| c[i].saturating_sub(r));
            let hi: [usize; 3] = std::array::from_fn(|i| (c[i] + r).min(self.dims[i] - 1));
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        let ring = [x.abs_diff(c[0]), y.abs_diff(c[1]), z.abs_diff(c[2])];
                        if ring.into_iter().max() != Some(r) {
                            continue;
                        }
                        for &i in &self.cells[(x * self.dims[1] + y) * self.dims[2] + z] {
                            let i = i as usize;
                            if self.taken[i] {
                                continue;
                            }
                            let d = (points[i] - q).norm_squared();
                            if best.is_none_or(|(bd, bi)| d < bd || (d == bd && i < bi)) {
                                best = Some((d, i));
                            }
                        }
                    }
                }
            }
            if let Some((d, _)) = best {
                if d.sqrt() <= r as f64 * self.size {
                    break;
                }
            }
        }
        let (_, i) = best?;
        self.taken[i] = true;
        self.alive -= 1;
        Some(i)
    }
}

impl RefineOperator for OracleOperator {
    fn begin_layer(&mut self, ctx: &FrameContext, scene: &GaussianScene, layer: LayerKind) -> Result<()> {
        self.plan = Some(self.plan(ctx, scene, layer)?);
        Ok(())
    }

    fn deltas(
        &mut self,
        ctx: &FrameContext,
        scene: &GaussianScene,
        layer: LayerKind,
        _config: &RefinerConfig,
    ) -> Result<AttributeDeltas> {
        let stale = match &self.plan {
            Some(p) => p.layer != layer || p.frame != ctx.frame || p.targets.len() != scene.len(),
            None => true,
        };
        if stale {
            self.plan = Some(self.plan(ctx, scene, layer)?);
        }
        let plan = self.plan.as_ref().expect("plan was just built");
        let mut out = AttributeDeltas::zeros(scene.len());
        let ln_s = self.params.target_scale.ln();
        for (i, (g, t)) in scene.gaussians.iter().zip(&plan.targets).enumerate() {
            let Some(t) = t else { continue };
            let dp = t.position - g.position;
            if dp.amax() > SNAP {
                out.position[i] = dp;
            }
            let ds = g.scale.map(|s| ln_s - s.ln());
            if ds.amax() > SNAP {
                out.log_scale[i] = ds;
            }
            if let Some(label) = t.label {
                let goal = self.target_logits(label);
                let raw: Semantics = std::array::from_fn(|k| goal[k] - g.semantics[k].max(f64::MIN_POSITIVE).ln());
                let mean = raw.iter().sum::<f64>() / NUM_CLASSES as f64;
                let dl = raw.map(|x| x - mean);
                if dl.iter().any(|x| x.abs() > SNAP) {
                    out.logits[i] = dl;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{make_scene, DynamicClassSet, Gaussian, RangeBox, SE3Pose, SceneInit, UNIFORM_SEMANTICS};
    use crate::raster::{labelize, splat, OccupancyGrid, SplatParams};
    use crate::refine::{apply_deltas, evolution_layer, refinement_layer, RefineMode};
    use crate::sim::{DynamicBox, Observation, WorldBox};
    use nalgebra::UnitQuaternion;

    fn grid() -> GridConfig {
        GridConfig::new([16, 16, 8], Vector3::new(-4.0, -4.0, -2.0), 0.5).unwrap()
    }

    fn world() -> WorldSpec {
        let mut w = WorldSpec::empty();
        w.static_boxes.push(WorldBox {
            class: taxonomy::BUILDING,
            center: [2.0, 2.0, 0.0],
            half_extents: [1.0, 1.0, 1.0],
            yaw: 0.0,
        });
        w.dynamic_boxes.push(DynamicBox {
            class: taxonomy::CAR,
            center: [-2.0, -2.0, 0.0],
            half_extents: [0.74, 0.74, 0.74],
            yaw: 0.0,
            velocity: [1.0, 0.0, 0.0],
            yaw_rate: 0.0,
        });
        w
    }

    fn full_observation(w: &WorldSpec, frame: usize, g: &GridConfig) -> Observation {
        Observation::new(world_occupancy(w, frame, &SE3Pose::identity(), g))
    }

    fn ctx<'a>(obs: &'a Observation, g: &'a GridConfig, range: &'a RangeBox, sp: &'a SplatParams, frame: usize) -> FrameContext<'a> {
        FrameContext {
            observation: obs,
            grid: g,
            range,
            splat: sp,
            frame,
            ego_pose: SE3Pose::identity(),
            prev_pose: SE3Pose::identity(),
            reference: None,
        }
    }

    fn placed(p: Vector3<f64>, label: u8) -> Gaussian {
        let mut semantics = [0.0; NUM_CLASSES];
        semantics[label as usize - 1] = 1.0;
        Gaussian {
            position: p,
            scale: Vector3::repeat(0.12),
            rotation: UnitQuaternion::identity(),
            semantics,
            temporal_feature: Vector3::zeros(),
        }
    }

    #[test]
    fn gaussian_on_its_voxel_gets_zero_deltas() {
        let g = grid();
        let range = g.range();
        let w = world();
        let obs = full_observation(&w, 0, &g);
        let v = g.index(12, 12, 4);
        assert_eq!(obs.labels.labels()[v], taxonomy::BUILDING);
        let mut gs = placed(g.center_of(v), taxonomy::BUILDING);
        let mut exp = [(-20.0f64).exp(); NUM_CLASSES];
        exp[taxonomy::BUILDING as usize - 1] = 1.0;
        let z: f64 = exp.iter().sum();
        gs.semantics = exp.map(|x| x / z);
        let scene = GaussianScene {
            gaussians: vec![gs],
            ego_pose: SE3Pose::identity(),
            frame_index: 0,
            new_mask: vec![true],
        };
        let sp = SplatParams::default();
        let mut op = OracleOperator::new(w, OracleParams::default()).unwrap();
        let d = op
            .deltas(&ctx(&obs, &g, &range, &sp, 0), &scene, LayerKind::Evolution, &RefinerConfig::default())
            .unwrap();
        assert!(d.is_zero());
    }

    #[test]
    fn perception_assigns_true_classes_and_reproduces_observation() {
        let g = grid();
        let range = g.range();
        let w = world();
        let obs = full_observation(&w, 0, &g);
        let scene = make_scene(400, &range, 5, &SceneInit::default()).unwrap();
        let sp = SplatParams::default();
        let c = ctx(&obs, &g, &range, &sp, 0);
        let mut op = OracleOperator::new(w.clone(), OracleParams::default()).unwrap();
        let d = op.deltas(&c, &scene, LayerKind::Evolution, &RefinerConfig::default()).unwrap();
        let out = apply_deltas(&scene, &d, RefineMode::Perception, &DynamicClassSet::default(), 0.5).unwrap();
        let truth = obs.labels.labels();
        for gs in &out.gaussians {
            let [x, y, z] = g.voxel_of(&gs.position).unwrap();
            let t = truth[g.index(x, y, z)];
            if t != taxonomy::EMPTY {
                assert_eq!(gs.argmax_label(), t);
            }
        }
        let pred = labelize(&splat(&out, &g, &sp), &sp);
        assert_eq!(pred, obs.labels);
    }

    #[test]
    fn dynamic_gaussian_follows_box_in_motion_mode() {
        let g = grid();
        let range = g.range();
        let w = world();
        let obs = full_observation(&w, 1, &g);
        let start = Vector3::new(-2.25, -2.25, -0.25);
        let scene = GaussianScene {
            gaussians: vec![placed(start, taxonomy::CAR)],
            ego_pose: SE3Pose::identity(),
            frame_index: 1,
            new_mask: vec![false],
        };
        let sp = SplatParams::default();
        let mut op = OracleOperator::new(w, OracleParams::default()).unwrap();
        let d = op
            .deltas(&ctx(&obs, &g, &range, &sp, 1), &scene, LayerKind::Evolution, &RefinerConfig::default())
            .unwrap();
        assert!((d.position[0] - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        let out = apply_deltas(&scene, &d, RefineMode::Motion, &DynamicClassSet::default(), 0.5).unwrap();
        assert!((out.gaussians[0].position - (start + Vector3::new(1.0, 0.0, 0.0))).norm() < 1e-12);
    }

    #[test]
    fn layers_converge_on_historical_scene_with_partial_view() {
        let g = grid();
        let range = g.range();
        let w = world();
        let mut obs = full_observation(&w, 1, &g);
        let mut labels = obs.labels.clone().into_labels();
        for (v, l) in labels.iter_mut().enumerate() {
            if g.coords(v)[0] < 3 {
                *l = taxonomy::UNOBSERVED;
            }
        }
        obs = Observation::new(OccupancyGrid::new(g, labels).unwrap());
        let mut scene = make_scene(300, &range, 6, &SceneInit::default()).unwrap();
        for (i, m) in scene.new_mask.iter_mut().enumerate() {
            *m = i % 3 == 0;
        }
        for gs in &mut scene.gaussians {
            gs.semantics = UNIFORM_SEMANTICS;
        }
        let reference = scene.positions();
        let sp = SplatParams::default();
        let c = ctx(&obs, &g, &range, &sp, 1);
        let config = RefinerConfig::default();
        let dy = DynamicClassSet::default();
        let mut op = OracleOperator::new(w, OracleParams::default()).unwrap();
        let mut cur = scene;
        for _ in 0..config.n_e {
            cur = evolution_layer(&cur, &c, &config, &dy, &mut op).unwrap();
        }
        cur = refinement_layer(&cur, &c, &config, &dy, &mut op, &reference).unwrap();
        let pred = labelize(&splat(&cur, &g, &sp), &sp);
        for v in 0..g.num_voxels() {
            if obs.mask[v] {
                assert_eq!(pred.labels()[v], obs.labels.labels()[v], "voxel {v}");
            }
        }
    }

    #[test]
    fn buckets_return_brute_force_nearest() {
        let range = RangeBox::new(Vector3::repeat(-5.0), Vector3::repeat(5.0)).unwrap();
        let scene = make_scene(200, &range, 9, &SceneInit::default()).unwrap();
        let pts = scene.positions();
        let queries = make_scene(150, &range, 10, &SceneInit::default()).unwrap().positions();
        let mut b = Buckets::new(range.min(), range.max(), 1.5);
        for (i, p) in pts.iter().enumerate() {
            b.insert(i, *p);
        }
        let mut taken = vec![false; pts.len()];
        for q in &queries {
            let expect = (0..pts.len())
                .filter(|&i| !taken[i])
                .min_by(|&a, &b| (pts[a] - q).norm_squared().total_cmp(&(pts[b] - q).norm_squared()))
                .unwrap();
            let got = b.take_nearest(q, &pts).unwrap();
            assert_eq!(got, expect);
            taken[got] = true;
        }
    }
}
