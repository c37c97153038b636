use super::{newly_observed_region, GaussianScene, RangeBox, SE3Pose, SceneInit};
use crate::{seed, Result};

/// Rejection-sampling budget per fresh Gaussian before falling back to
/// uniform-in-range sampling.
pub const MAX_REJECTION_ATTEMPTS: usize = 10_000;

/// Applies the ego-motion transform to the whole scene. Positions are mapped
/// as points, rotations are left-composed and temporal features rotated as
/// free vectors. The result is centered on the current ego pose and has no
/// Gaussian marked new.
pub fn align_scene(scene: &GaussianScene, m_ego: &SE3Pose) -> GaussianScene {
    let gaussians = scene
        .gaussians
        .iter()
        .map(|g| {
            let mut g = *g;
            g.position = m_ego.transform_point(&g.position);
            g.rotation = m_ego.rotation * g.rotation;
            g.temporal_feature = m_ego.transform_vector(&g.temporal_feature);
            g
        })
        .collect();
    GaussianScene {
        gaussians,
        ego_pose: scene.ego_pose.compose(&m_ego.inverse()),
        frame_index: scene.frame_index,
        new_mask: vec![false; scene.len()],
    }
}

/// Drops Gaussians outside the closed range. Returns the survivors (in order,
/// none marked new) and the number removed.
pub fn cull(scene: &GaussianScene, range: &RangeBox) -> (GaussianScene, usize) {
    let gaussians: Vec<_> = scene
        .gaussians
        .iter()
        .filter(|g| range.contains(&g.position))
        .copied()
        .collect();
    let removed = scene.len() - gaussians.len();
    let n = gaussians.len();
    (
        GaussianScene {
            gaussians,
            ego_pose: scene.ego_pose,
            frame_index: scene.frame_index,
            new_mask: vec![false; n],
        },
        removed,
    )
}

/// Appends `count` fresh Gaussians sampled in the region that became visible
/// under `m_ego`, or anywhere in range when that region is empty.
pub fn fill_new_region(
    scene: &mut GaussianScene,
    range: &RangeBox,
    m_ego: &SE3Pose,
    count: usize,
    seed: u64,
    init: &SceneInit,
) {
    if count == 0 {
        return;
    }
    let region = newly_observed_region(range, m_ego);
    let mut rng = seed::rng(seed);
    for _ in 0..count {
        let mut position = None;
        if !region.is_empty() {
            for _ in 0..MAX_REJECTION_ATTEMPTS {
                let p = range.sample(&mut rng);
                if region.contains(&p) {
                    position = Some(p);
                    break;
                }
            }
        }
        let p = position.unwrap_or_else(|| range.sample(&mut rng));
        scene.gaussians.push(init.fresh(p, &mut rng));
        scene.new_mask.push(true);
    }
}

/// Culls Gaussians that left the range and replaces each with a fresh one in
/// the newly observed region, keeping the cardinality fixed.
pub fn cull_and_complete(
    scene: &GaussianScene,
    range: &RangeBox,
    m_ego: &SE3Pose,
    seed: u64,
    init: &SceneInit,
) -> Result<GaussianScene> {
    init.validate()?;
    let (mut kept, removed) = cull(scene, range);
    fill_new_region(&mut kept, range, m_ego, removed, seed, init);
    Ok(kept)
}
