use nalgebra::Vector3;

use super::{AttributeDeltas, FrameContext, LayerKind, RefineOperator, RefinerConfig};
use crate::gaussian::GaussianScene;
use crate::losses::{occupancy_loss, LossWeights};
use crate::raster::{
    log_scale_gradient, logit_gradient, rotvec_gradient, splat_gradients, splat_masked, GridConfig, SplatParams,
};
use crate::sim::Observation;
use crate::Result;

/// Occupancy loss of `scene` on the observed voxels.
pub fn masked_loss(
    scene: &GaussianScene,
    obs: &Observation,
    grid: &GridConfig,
    splat: &SplatParams,
    weights: &LossWeights,
) -> Result<f64> {
    let field = splat_masked(scene, grid, splat, Some(&obs.mask))?;
    Ok(occupancy_loss(&field, splat.empty_threshold, obs.labels.labels(), &obs.mask, weights)?.0)
}

/// Plain gradient descent on the occupancy loss of the observed voxels.
/// Steps apply to the summed (not averaged) per-voxel loss so that their
/// size does not depend on how much of the grid is observed.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientOperator;

impl GradientOperator {
    /// Loss and attribute-space gradients (position, log-scale, rotation
    /// vector, logits) of the current scene.
    pub fn gradients(
        ctx: &FrameContext,
        scene: &GaussianScene,
        weights: &LossWeights,
    ) -> Result<(f64, AttributeDeltas)> {
        let obs = ctx.observation;
        ctx.grid.check_same(obs.grid())?;
        let field = splat_masked(scene, ctx.grid, ctx.splat, Some(&obs.mask))?;
        let (loss, upstream) =
            occupancy_loss(&field, ctx.splat.empty_threshold, obs.labels.labels(), &obs.mask, weights)?;
        let grads = splat_gradients(scene, ctx.grid, ctx.splat, &upstream, Some(&obs.mask))?;
        let mut out = AttributeDeltas::zeros(scene.len());
        for (i, (g, gr)) in scene.gaussians.iter().zip(&grads).enumerate() {
            out.position[i] = gr.position;
            out.log_scale[i] = log_scale_gradient(&g.scale, &gr.scale);
            out.rotation[i] = rotvec_gradient(&g.rotation, &gr.rotation);
            out.logits[i] = logit_gradient(&g.semantics, &gr.semantics);
        }
        Ok((loss, out))
    }
}

fn clip(v: Vector3<f64>, cap: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > cap {
        v * (cap / n)
    } else {
        v
    }
}

impl RefineOperator for GradientOperator {
    fn deltas(
        &mut self,
        ctx: &FrameContext,
        scene: &GaussianScene,
        _layer: LayerKind,
        config: &RefinerConfig,
    ) -> Result<AttributeDeltas> {
        let (_, mut d) = Self::gradients(ctx, scene, &config.loss)?;
        let m = ctx.observation.observed_count() as f64;
        let [cp, cs, cr, cl] = config.max_step;
        for v in &mut d.position {
            *v = clip(-m * config.step_position * *v, cp);
        }
        for v in &mut d.log_scale {
            *v = clip(-m * config.step_log_scale * *v, cs);
        }
        for v in &mut d.rotation {
            *v = clip(-m * config.step_rotation * *v, cr);
        }
        for l in &mut d.logits {
            let raw = l.map(|x| -m * config.step_logit * x);
            let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            *l = if n > cl { raw.map(|x| x * cl / n) } else { raw };
        }
        Ok(d)
    }
}
