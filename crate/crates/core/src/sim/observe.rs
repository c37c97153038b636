use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::WorldSpec;
use crate::gaussian::SE3Pose;
use crate::raster::{GridConfig, OccupancyGrid};
use crate::taxonomy;
use crate::{Error, Result};

/// Ground-truth labels where visible, 255 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub labels: OccupancyGrid,
    pub mask: Vec<bool>,
}

impl Observation {
    pub fn new(labels: OccupancyGrid) -> Self {
        let mask = labels.observed_mask();
        Self { labels, mask }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask != self.labels.observed_mask() {
            return Err(Error::Invariant(
                "observation mask disagrees with labels".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> &GridConfig {
        &self.labels.grid
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Labels every voxel whose center lies in a box; later boxes win.
pub fn world_occupancy(
    world: &WorldSpec,
    frame: usize,
    ego_pose: &SE3Pose,
    grid: &GridConfig,
) -> OccupancyGrid {
    let mut occ = OccupancyGrid::filled(*grid, taxonomy::EMPTY);
    let to_ego = ego_pose.inverse();
    let h = grid.voxel_size;
    for b in world.boxes_at(frame) {
        let corners = b.corners().map(|c| to_ego.transform_point(&c));
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut empty = false;
        for i in 0..3 {
            let min = corners.iter().map(|c| c[i]).fold(f64::INFINITY, f64::min);
            let max = corners
                .iter()
                .map(|c| c[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let a = ((min - grid.origin[i]) / h - 0.5).ceil() - 1.0;
            let z = ((max - grid.origin[i]) / h - 0.5).floor() + 1.0;
            let n = grid.dims[i] as f64;
            if z < 0.0 || a > n - 1.0 {
                empty = true;
                break;
            }
            lo[i] = a.max(0.0) as usize;
            hi[i] = z.min(n - 1.0) as usize;
        }
        if empty {
            continue;
        }
        for ix in lo[0]..=hi[0] {
            for iy in lo[1]..=hi[1] {
                for iz in lo[2]..=hi[2] {
                    let p = ego_pose.transform_point(&grid.voxel_center(ix, iy, iz));
                    if b.contains(&p) {
                        occ.set(grid.index(ix, iy, iz), b.class);
                    }
                }
            }
        }
    }
    occ
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisibilityParams {
    pub azimuth_rays: usize,
    pub elevation_rays: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub max_range: f64,
    /// Sensor height above the ego origin.
    pub sensor_height: f64,
}

impl Default for VisibilityParams {
    fn default() -> Self {
        Self {
            azimuth_rays: 360,
            elevation_rays: 24,
            elevation_min_deg: -30.0,
            elevation_max_deg: 12.0,
            max_range: 40.0,
            sensor_height: 0.3,
        }
    }
}

impl VisibilityParams {
    pub fn validate(&self) -> Result<()> {
        if self.azimuth_rays == 0 || self.elevation_rays == 0 {
            return Err(Error::InvalidArgument("ray counts must be positive".into()));
        }
        if !(self.max_range > 0.0) || self.elevation_min_deg > self.elevation_max_deg {
            return Err(Error::InvalidArgument("bad visibility range".into()));
        }
        Ok(())
    }

    fn directions(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(self.azimuth_rays * self.elevation_rays);
        for e in 0..self.elevation_rays {
            let el = if self.elevation_rays == 1 {
                0.5 * (self.elevation_min_deg + self.elevation_max_deg)
            } else {
                self.elevation_min_deg
                    + (self.elevation_max_deg - self.elevation_min_deg) * e as f64
                        / (self.elevation_rays - 1) as f64
            }
            .to_radians();
            for a in 0..self.azimuth_rays {
                let az = std::f64::consts::TAU * a as f64 / self.azimuth_rays as f64;
                out.push(Vector3::new(
                    el.cos() * az.cos(),
                    el.cos() * az.sin(),
                    el.sin(),
                ));
            }
        }
        out
    }
}

/// Casts rays from the sensor and reveals each voxel up to and including
/// the first occupied one.
pub fn observe(
    world: &WorldSpec,
    frame: usize,
    ego_pose: &SE3Pose,
    grid: &GridConfig,
    vis: &VisibilityParams,
) -> Result<Observation> {
    vis.validate()?;
    let truth = world_occupancy(world, frame, ego_pose, grid);
    let origin = Vector3::new(0.0, 0.0, vis.sensor_height);
    let mut seen = vec![false; grid.num_voxels()];
    for dir in vis.directions() {
        cast(
            grid,
            truth.labels(),
            &origin,
            &dir,
            vis.max_range,
            &mut seen,
        );
    }
    let labels = truth
        .labels()
        .iter()
        .zip(&seen)
        .map(|(&l, &s)| if s { l } else { taxonomy::UNOBSERVED })
        .collect();
    Ok(Observation::new(OccupancyGrid::new(*grid, labels)?))
}

/// Voxel traversal along a unit direction.
fn cast(
    grid: &GridConfig,
    labels: &[u8],
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    max_range: f64,
    seen: &mut [bool],
) {
    let Some(start) = grid.voxel_of(origin) else {
        return;
    };
    let h = grid.voxel_size;
    let mut cell = start.map(|c| c as i64);
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for i in 0..3 {
        if dir[i] > 0.0 {
            step[i] = 1;
            t_max[i] = (grid.origin[i] + (cell[i] + 1) as f64 * h - origin[i]) / dir[i];
            t_delta[i] = h / dir[i];
        } else if dir[i] < 0.0 {
            step[i] = -1;
            t_max[i] = (grid.origin[i] + cell[i] as f64 * h - origin[i]) / dir[i];
            t_delta[i] = -h / dir[i];
        }
    }
    loop {
        let v = grid.index(cell[0] as usize, cell[1] as usize, cell[2] as usize);
        seen[v] = true;
        if labels[v] != taxonomy::EMPTY {
            return;
        }
        let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if t_max[axis] > max_range {
            return;
        }
        cell[axis] += step[axis];
        if cell[axis] < 0 || cell[axis] >= grid.dims[axis] as i64 {
            return;
        }
        t_max[axis] += t_delta[axis];
    }
}
