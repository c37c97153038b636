use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EgoTrajectory, WorldParams, WorldSpec};
use crate::gaussian::pose::PoseRecord;
use crate::{Error, Result};

/// On-disk world description (TOML): generator echo, boxes and ego poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFile {
    pub seed: u64,
    pub params: WorldParams,
    pub frame_period: f64,
    pub world: WorldSpec,
    pub poses: Vec<PoseRecord>,
}

impl WorldFile {
    pub fn new(seed: u64, params: &WorldParams, world: &WorldSpec, traj: &EgoTrajectory) -> Self {
        Self {
            seed,
            params: params.clone(),
            frame_period: traj.frame_period,
            world: world.clone(),
            poses: traj.poses.iter().map(PoseRecord::from).collect(),
        }
    }

    pub fn trajectory(&self) -> Result<EgoTrajectory> {
        let poses = self
            .poses
            .iter()
            .map(PoseRecord::to_pose)
            .collect::<Result<Vec<_>>>()?;
        let traj = EgoTrajectory {
            poses,
            frame_period: self.frame_period,
        };
        traj.validate()?;
        Ok(traj)
    }
}

pub fn save_world(path: &Path, file: &WorldFile) -> Result<()> {
    let text = toml::to_string(file).map_err(|e| Error::malformed(path, e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_world(path: &Path) -> Result<(WorldFile, WorldSpec, EgoTrajectory)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: WorldFile =
        toml::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
    file.world.validate()?;
    let traj = file.trajectory()?;
    let world = file.world.clone();
    Ok((file, world, traj))
}
