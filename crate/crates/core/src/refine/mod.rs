//! Layer stack that updates Gaussians from per-frame evidence, with
//! pluggable operators that propose attribute deltas.

mod gradient;
mod oracle;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub use gradient::{masked_loss, GradientOperator};
pub use oracle::{OracleOperator, OracleParams};

use crate::gaussian::{dynamic_weight, DynamicClassSet, Gaussian, GaussianScene, RangeBox, SE3Pose, Semantics};
use crate::losses::LossWeights;
use crate::raster::{GridConfig, SplatParams};
use crate::sim::Observation;
use crate::taxonomy::NUM_CLASSES;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefineMode {
    /// Positions only, weighted by dynamic weight; historical Gaussians.
    Motion,
    /// Every attribute; new Gaussians.
    Perception,
    /// Every attribute of every Gaussian, historical ones scaled by λ.
    FullRefine,
}

/// Position (m), log-scale, body-frame rotation vector and logit deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeDeltas {
    pub position: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub rotation: Vec<Vector3<f64>>,
    pub logits: Vec<Semantics>,
}

impl AttributeDeltas {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            rotation: vec![Vector3::zeros(); n],
            logits: vec![[0.0; NUM_CLASSES]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.position.iter().all(|v| *v == Vector3::zeros())
            && self.log_scale.iter().all(|v| *v == Vector3::zeros())
            && self.rotation.iter().all(|v| *v == Vector3::zeros())
            && self.logits.iter().all(|l| l.iter().all(|&x| x == 0.0))
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            position: self.position.iter().map(|v| v * k).collect(),
            log_scale: self.log_scale.iter().map(|v| v * k).collect(),
            rotation: self.rotation.iter().map(|v| v * k).collect(),
            logits: self.logits.iter().map(|l| l.map(|x| x * k)).collect(),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        for len in [self.position.len(), self.log_scale.len(), self.rotation.len(), self.logits.len()] {
            if len != n {
                return Err(Error::ShapeMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        let finite = self.position.iter().chain(&self.log_scale).chain(&self.rotation).all(|v| v.iter().all(|x| x.is_finite()))
            && self.logits.iter().all(|l| l.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::Invariant("non-finite attribute delta".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    /// Evolution layers per frame.
    pub n_e: usize,
    /// Refinement layers per frame.
    pub n_r: usize,
    /// Operator calls per layer.
    pub steps_per_layer: usize,
    pub step_position: f64,
    pub step_log_scale: f64,
    pub step_rotation: f64,
    pub step_logit: f64,
    /// Per-Gaussian norm caps on one gradient step: position (m),
    /// log-scale, rotation vector (rad), logits.
    pub max_step: [f64; 4],
    /// λ: scale on historical Gaussians' deltas in refinement layers.
    pub temporal_weight: f64,
    pub loss: LossWeights,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            n_e: 4,
            n_r: 1,
            steps_per_layer: 8,
            step_position: 0.05,
            step_log_scale: 0.05,
            step_rotation: 0.05,
            step_logit: 0.5,
            max_step: [0.25, 0.2, 0.2, 2.0],
            temporal_weight: 0.5,
            loss: LossWeights::default(),
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.temporal_weight) {
            return Err(Error::InvalidArgument(format!(
                "temporal weight {} outside [0, 1]",
                self.temporal_weight
            )));
        }
        let steps = [self.step_position, self.step_log_scale, self.step_rotation, self.step_logit];
        if !steps.iter().all(|s| s.is_finite() && *s >= 0.0) {
            return Err(Error::InvalidArgument("step sizes must be finite and >= 0".into()));
        }
        if !self.max_step.iter().all(|s| *s > 0.0) {
            return Err(Error::InvalidArgument("step caps must be > 0".into()));
        }
        if !(self.loss.cross_entropy >= 0.0 && self.loss.lovasz >= 0.0) {
            return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything an operator may read about the current frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameContext<'a> {
    pub observation: &'a Observation,
    pub grid: &'a GridConfig,
    pub range: &'a RangeBox,
    pub splat: &'a SplatParams,
    pub frame: usize,
    pub ego_pose: SE3Pose,
    pub prev_pose: SE3Pose,
    /// Positions at the start of the frame (after alignment and
    /// completion, before pre-advance), aligned with the scene.
    pub reference: Option<&'a [Vector3<f64>]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Evolution,
    Refinement,
}

/// Source of attribute deltas for the layer stack.
pub trait RefineOperator {
    /// Called once before the steps of each layer.
    fn begin_layer(&mut self, _ctx: &FrameContext, _scene: &GaussianScene, _layer: LayerKind) -> Result<()> {
        Ok(())
    }

    fn deltas(
        &mut self,
        ctx: &FrameContext,
        scene: &GaussianScene,
        layer: LayerKind,
        config: &RefinerConfig,
    ) -> Result<AttributeDeltas>;
}

fn softmax_shift(c: &Semantics, delta: &Semantics, k: f64) -> Semantics {
    let l: Semantics = std::array::from_fn(|j| c[j].max(f64::MIN_POSITIVE).ln() + k * delta[j]);
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = l.map(|x| (x - m).exp());
    let z: f64 = e.iter().sum();
    e.map(|x| x / z)
}

/// Full-attribute update scaled by `k`; attributes with an all-zero delta
/// are left bit-identical.
fn update_all(g: &mut Gaussian, d: &AttributeDeltas, i: usize, k: f64) {
    if k == 0.0 {
        return;
    }
    if d.position[i] != Vector3::zeros() {
        g.position += d.position[i] * k;
    }
    if d.log_scale[i] != Vector3::zeros() {
        for j in 0..3 {
            g.scale[j] *= (k * d.log_scale[i][j]).exp();
        }
    }
    if d.rotation[i] != Vector3::zeros() {
        let q = g.rotation * UnitQuaternion::from_scaled_axis(d.rotation[i] * k);
        g.rotation = UnitQuaternion::new_normalize(q.into_inner());
    }
    if d.logits[i].iter().any(|&x| x != 0.0) {
        g.semantics = softmax_shift(&g.semantics, &d.logits[i], k);
    }
}

fn update_motion(g: &mut Gaussian, d: &AttributeDeltas, i: usize, dyn_classes: &DynamicClassSet) {
    let w = dynamic_weight(g, dyn_classes);
    if w != 0.0 && d.position[i] != Vector3::zeros() {
        g.position += d.position[i] * w;
    }
}

/// Applies deltas under one mode: Motion touches historical Gaussians,
/// Perception new ones, FullRefine all of them.
pub fn apply_deltas(
    scene: &GaussianScene,
    deltas: &AttributeDeltas,
    mode: RefineMode,
    dyn_classes: &DynamicClassSet,
    temporal_weight: f64,
) -> Result<GaussianScene> {
    deltas.validate(scene.len())?;
    let mut out = scene.clone();
    for (i, g) in out.gaussians.iter_mut().enumerate() {
        let is_new = scene.new_mask[i];
        match mode {
            RefineMode::Motion if !is_new => update_motion(g, deltas, i, dyn_classes),
            RefineMode::Perception if is_new => update_all(g, deltas, i, 1.0),
            RefineMode::FullRefine => update_all(g, deltas, i, if is_new { 1.0 } else { temporal_weight }),
            _ => {}
        }
    }
    Ok(out)
}

/// One evolution step: Perception on new Gaussians, Motion on historical.
fn apply_evolution(scene: &GaussianScene, deltas: &AttributeDeltas, dyn_classes: &DynamicClassSet) -> Result<GaussianScene> {
    deltas.validate(scene.len())?;
    let mut out = scene.clone();
    for (i, g) in out.gaussians.iter_mut().enumerate() {
        if scene.new_mask[i] {
            update_all(g, deltas, i, 1.0);
        } else {
            update_motion(g, deltas, i, dyn_classes);
        }
    }
    Ok(out)
}

fn clamp_into(scene: &mut GaussianScene, range: &RangeBox) {
    for g in &mut scene.gaussians {
        if !range.contains(&g.position) {
            g.position = range.clamp(&g.position);
        }
    }
}

/// Constant-velocity pre-advance of historical Gaussians.
pub fn advance_temporal(scene: &GaussianScene, dyn_classes: &DynamicClassSet) -> GaussianScene {
    let mut out = scene.clone();
    for (i, g) in out.gaussians.iter_mut().enumerate() {
        if scene.new_mask[i] || g.temporal_feature == Vector3::zeros() {
            continue;
        }
        let w = dynamic_weight(g, dyn_classes);
        if w != 0.0 {
            g.position += g.temporal_feature * w;
        }
    }
    out
}

/// Sets each temporal feature to the net displacement since `reference`;
/// new Gaussians start with zero velocity.
pub fn record_temporal(scene: &mut GaussianScene, reference: &[Vector3<f64>]) -> Result<()> {
    if reference.len() != scene.len() {
        return Err(Error::ShapeMismatch {
            expected: scene.len(),
            actual: reference.len(),
        });
    }
    for (i, g) in scene.gaussians.iter_mut().enumerate() {
        g.temporal_feature = if scene.new_mask[i] {
            Vector3::zeros()
        } else {
            g.position - reference[i]
        };
    }
    Ok(())
}

pub fn evolution_layer(
    scene: &GaussianScene,
    ctx: &FrameContext,
    config: &RefinerConfig,
    dyn_classes: &DynamicClassSet,
    op: &mut dyn RefineOperator,
) -> Result<GaussianScene> {
    let mut cur = scene.clone();
    op.begin_layer(ctx, &cur, LayerKind::Evolution)?;
    for _ in 0..config.steps_per_layer {
        let d = op.deltas(ctx, &cur, LayerKind::Evolution, config)?;
        cur = apply_evolution(&cur, &d, dyn_classes)?;
        clamp_into(&mut cur, ctx.range);
    }
    Ok(cur)
}

/// FullRefine steps followed by temporal bookkeeping against `reference`
/// (positions right after alignment and culling).
pub fn refinement_layer(
    scene: &GaussianScene,
    ctx: &FrameContext,
    config: &RefinerConfig,
    dyn_classes: &DynamicClassSet,
    op: &mut dyn RefineOperator,
    reference: &[Vector3<f64>],
) -> Result<GaussianScene> {
    let mut cur = scene.clone();
    op.begin_layer(ctx, &cur, LayerKind::Refinement)?;
    for _ in 0..config.steps_per_layer {
        let d = op.deltas(ctx, &cur, LayerKind::Refinement, config)?;
        cur = apply_deltas(&cur, &d, RefineMode::FullRefine, dyn_classes, config.temporal_weight)?;
        clamp_into(&mut cur, ctx.range);
    }
    record_temporal(&mut cur, reference)?;
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{make_scene, SceneInit};
    use crate::seed;
    use crate::taxonomy;
    use rand::Rng;

    fn range() -> RangeBox {
        RangeBox::new(Vector3::new(-4.0, -4.0, -2.0), Vector3::new(4.0, 4.0, 2.0)).unwrap()
    }

    fn scene(n: usize, s: u64) -> GaussianScene {
        make_scene(n, &range(), s, &SceneInit::default()).unwrap()
    }

    fn one_hot(label: u8) -> Semantics {
        let mut c = [0.0; NUM_CLASSES];
        c[label as usize - 1] = 1.0;
        c
    }

    fn random_deltas(n: usize, s: u64) -> AttributeDeltas {
        let mut rng = seed::rng(s);
        let mut v = || Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let mut d = AttributeDeltas::zeros(n);
        for i in 0..n {
            d.position[i] = v();
            d.log_scale[i] = v();
            d.rotation[i] = v();
        }
        let mut rng = seed::rng(s + 1);
        for l in &mut d.logits {
            *l = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        }
        d
    }

    fn dyn_default() -> DynamicClassSet {
        DynamicClassSet::from_labels(&taxonomy::DEFAULT_DYNAMIC).unwrap()
    }

    #[test]
    fn zero_deltas_leave_scene_unchanged() {
        let s = scene(20, 1);
        for mode in [RefineMode::Motion, RefineMode::Perception, RefineMode::FullRefine] {
            let out = apply_deltas(&s, &AttributeDeltas::zeros(20), mode, &dyn_default(), 0.5).unwrap();
            assert_eq!(out, s);
        }
    }

    #[test]
    fn motion_mode_respects_dynamic_weight() {
        let mut s = scene(3, 2);
        s.new_mask = vec![false; 3];
        s.gaussians[0].semantics = one_hot(taxonomy::BUILDING);
        let mut half = [0.0; NUM_CLASSES];
        half[taxonomy::BUILDING as usize - 1] = 0.5;
        half[taxonomy::CAR as usize - 1] = 0.5;
        s.gaussians[1].semantics = half;
        let mut d = random_deltas(3, 7);
        d.position[1] = Vector3::new(1.0, 0.0, 0.0);
        let out = apply_deltas(&s, &d, RefineMode::Motion, &dyn_default(), 0.5).unwrap();
        assert_eq!(out.gaussians[0], s.gaussians[0]);
        assert_eq!(out.gaussians[1].position, s.gaussians[1].position + Vector3::new(0.5, 0.0, 0.0));
        for (a, b) in out.gaussians.iter().zip(&s.gaussians) {
            assert_eq!((a.scale, a.rotation, a.semantics), (b.scale, b.rotation, b.semantics));
        }
    }

    #[test]
    fn perception_delta_round_trips() {
        let s = scene(30, 3);
        let d = random_deltas(30, 4);
        let dy = dyn_default();
        let fwd = apply_deltas(&s, &d, RefineMode::Perception, &dy, 0.5).unwrap();
        let back = apply_deltas(&fwd, &d.scaled(-1.0), RefineMode::Perception, &dy, 0.5).unwrap();
        for (a, b) in back.gaussians.iter().zip(&s.gaussians) {
            assert!((a.position - b.position).norm() < 1e-9);
            assert!((a.scale - b.scale).norm() < 1e-9);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-9);
            for k in 0..NUM_CLASSES {
                assert!((a.semantics[k] - b.semantics[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn full_refine_scales_historical_by_lambda() {
        let mut s = scene(4, 5);
        s.new_mask = vec![true, false, true, false];
        s.gaussians[1] = s.gaussians[0];
        s.gaussians[3] = s.gaussians[2];
        let mut d = random_deltas(4, 6);
        d.position[1] = d.position[0];
        d.log_scale[1] = d.log_scale[0];
        d.rotation[1] = d.rotation[0];
        d.logits[1] = d.logits[0];
        let dy = dyn_default();
        let zero = apply_deltas(&s, &d, RefineMode::FullRefine, &dy, 0.0).unwrap();
        assert_eq!(zero.gaussians[1], s.gaussians[1]);
        assert_eq!(zero.gaussians[3], s.gaussians[3]);
        let one = apply_deltas(&s, &d, RefineMode::FullRefine, &dy, 1.0).unwrap();
        assert_eq!(one.gaussians[0], one.gaussians[1]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let s = scene(4, 5);
        let err = apply_deltas(&s, &AttributeDeltas::zeros(3), RefineMode::Motion, &dyn_default(), 0.5);
        assert!(matches!(err, Err(Error::ShapeMismatch { expected: 4, actual: 3 })));
    }

    #[test]
    fn advance_temporal_cases() {
        let mut s = scene(3, 8);
        s.new_mask = vec![false, false, true];
        let dy = dyn_default();
        assert_eq!(advance_temporal(&s, &dy), s);
        for g in &mut s.gaussians {
            g.semantics = one_hot(taxonomy::CAR);
            g.temporal_feature = Vector3::new(0.5, 0.0, 0.0);
        }
        s.gaussians[1].semantics = one_hot(taxonomy::GROUND);
        let out = advance_temporal(&s, &dy);
        assert_eq!(out.gaussians[0].position, s.gaussians[0].position + Vector3::new(0.5, 0.0, 0.0));
        assert_eq!(out.gaussians[1], s.gaussians[1]);
        assert_eq!(out.gaussians[2], s.gaussians[2]);
        assert_eq!(advance_temporal(&s, &DynamicClassSet::empty()), s);
    }

    #[test]
    fn record_temporal_sets_net_displacement() {
        let mut s = scene(2, 9);
        s.new_mask = vec![false, true];
        let reference = s.positions();
        s.gaussians[0].position += Vector3::new(1.0, 0.0, 0.0);
        s.gaussians[1].position += Vector3::new(1.0, 0.0, 0.0);
        record_temporal(&mut s, &reference).unwrap();
        assert_eq!(s.gaussians[0].temporal_feature, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(s.gaussians[1].temporal_feature, Vector3::zeros());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn invariants_hold_and_motion_masks_exactly(s in 0u64..10_000, frac in 0.0f64..1.0) {
                let mut sc = scene(12, s);
                let mut rng = seed::rng(s);
                for (i, m) in sc.new_mask.iter_mut().enumerate() {
                    *m = (i as f64 / 12.0) < frac;
                    let _ = rng.random::<f64>();
                }
                let d = random_deltas(12, s ^ 77);
                let dy = dyn_default();
                for mode in [RefineMode::Motion, RefineMode::Perception, RefineMode::FullRefine] {
                    let out = apply_deltas(&sc, &d, mode, &dy, 0.5).unwrap();
                    prop_assert!(out.validate().is_ok());
                    if mode == RefineMode::Motion {
                        for (a, b) in out.gaussians.iter().zip(&sc.gaussians) {
                            prop_assert_eq!((a.scale, a.rotation, a.semantics), (b.scale, b.rotation, b.semantics));
                        }
                    }
                }
            }
        }
    }
}
