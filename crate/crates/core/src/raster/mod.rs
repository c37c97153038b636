//! Gaussian-to-voxel splatting and the voxel grid types it produces.

mod bev;
mod splat;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub use bev::{bev_image, decode_bev, export_bev, read_ppm, Image};
pub use splat::{
    log_scale_gradient, logit_gradient, rotvec_gradient, splat, splat_gradients, splat_masked,
    GaussianGrad,
};

use crate::gaussian::{argmax, Gaussian, RangeBox};
use crate::taxonomy::{self, NUM_CLASSES};
use crate::{Error, Result};

/// Regular voxel lattice. Voxel `(ix, iy, iz)` covers
/// `origin + [i, i+1) * voxel_size` on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub voxel_size: f64,
}

impl GridConfig {
    pub fn new(dims: [usize; 3], origin: Vector3<f64>, voxel_size: f64) -> Result<Self> {
        let g = Self {
            dims,
            origin: origin.into(),
            voxel_size,
        };
        g.validate()?;
        Ok(g)
    }

    /// Discretizes `range` with cubic voxels; the extent must be a whole
    /// number of voxels on every axis.
    pub fn from_range(range: &RangeBox, voxel_size: f64) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("voxel size {voxel_size}")));
        }
        let e = range.extent();
        let mut dims = [0usize; 3];
        for i in 0..3 {
            let n = e[i] / voxel_size;
            let r = n.round();
            if r < 1.0 || (n - r).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "extent {} on axis {i} is not a multiple of voxel size {voxel_size}",
                    e[i]
                )));
            }
            dims[i] = r as usize;
        }
        Self::new(dims, range.min(), voxel_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("grid dims {:?}", self.dims)));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "voxel size {}",
                self.voxel_size
            )));
        }
        if !self.origin.iter().all(|o| o.is_finite()) {
            return Err(Error::InvalidArgument("grid origin is not finite".into()));
        }
        Ok(())
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin.into()
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn range(&self) -> RangeBox {
        let o = self.origin();
        let e = Vector3::new(
            self.dims[0] as f64,
            self.dims[1] as f64,
            self.dims[2] as f64,
        ) * self.voxel_size;
        RangeBox::new(o, o + e).expect("validated grid has positive extent")
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let iz = index % self.dims[2];
        let rest = index / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], iz]
    }

    #[inline]
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        let h = self.voxel_size;
        Vector3::new(
            self.origin[0] + (ix as f64 + 0.5) * h,
            self.origin[1] + (iy as f64 + 0.5) * h,
            self.origin[2] + (iz as f64 + 0.5) * h,
        )
    }

    pub fn center_of(&self, index: usize) -> Vector3<f64> {
        let [ix, iy, iz] = self.coords(index);
        self.voxel_center(ix, iy, iz)
    }

    /// Voxel containing `p`; points on the upper boundary belong to the last
    /// voxel so that the closed range maps onto the grid.
    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for i in 0..3 {
            let f = (p[i] - self.origin[i]) / self.voxel_size;
            if !(f >= 0.0 && f <= self.dims[i] as f64) {
                return None;
            }
            out[i] = (f.floor() as usize).min(self.dims[i] - 1);
        }
        Some(out)
    }

    pub fn check_same(&self, other: &GridConfig) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(self.dims, other.dims));
        }
        Ok(())
    }
}

/// Per-voxel, per-class density accumulators, voxel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: GridConfig,
    data: Vec<f64>,
}

impl DensityField {
    pub fn zeros(grid: GridConfig) -> Self {
        Self {
            grid,
            data: vec![0.0; grid.num_voxels() * NUM_CLASSES],
        }
    }

    pub fn from_data(grid: GridConfig, data: Vec<f64>) -> Result<Self> {
        let expected = grid.num_voxels() * NUM_CLASSES;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: data.len(),
            });
        }
        if !data.iter().all(|d| d.is_finite() && *d >= 0.0) {
            return Err(Error::Invariant(
                "densities must be finite and non-negative".into(),
            ));
        }
        Ok(Self { grid, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn voxel(&self, index: usize) -> &[f64] {
        &self.data[index * NUM_CLASSES..(index + 1) * NUM_CLASSES]
    }

    /// Density of semantic label `label` (1-based) at voxel `index`.
    pub fn get(&self, index: usize, label: u8) -> f64 {
        self.voxel(index)[label as usize - 1]
    }

    pub fn total(&self, index: usize) -> f64 {
        self.voxel(index).iter().sum()
    }

    pub fn add(&self, other: &DensityField) -> Result<DensityField> {
        self.grid.check_same(&other.grid)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self {
            grid: self.grid,
            data,
        })
    }
}

/// Per-voxel labels: 0 empty, 1..=C semantic classes, 255 unobserved.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub grid: GridConfig,
    labels: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(grid: GridConfig, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != grid.num_voxels() {
            return Err(Error::ShapeMismatch {
                expected: grid.num_voxels(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != taxonomy::UNOBSERVED && l as usize > NUM_CLASSES)
        {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside alphabet"
            )));
        }
        Ok(Self { grid, labels })
    }

    pub fn filled(grid: GridConfig, label: u8) -> Self {
        Self {
            grid,
            labels: vec![label; grid.num_voxels()],
        }
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> u8 {
        self.labels[self.grid.index(ix, iy, iz)]
    }

    pub fn set(&mut self, index: usize, label: u8) {
        debug_assert!(label == taxonomy::UNOBSERVED || label as usize <= NUM_CLASSES);
        self.labels[index] = label;
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Observed-voxel mask: everything except 255.
    pub fn observed_mask(&self) -> Vec<bool> {
        self.labels
            .iter()
            .map(|&l| l != taxonomy::UNOBSERVED)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplatParams {
    /// Mahalanobis radius beyond which a Gaussian contributes nothing.
    pub cutoff_multiplier: f64,
    /// Total density below which a voxel is labelled empty.
    pub empty_threshold: f64,
}

impl Default for SplatParams {
    fn default() -> Self {
        Self {
            cutoff_multiplier: 3.0,
            empty_threshold: 0.05,
        }
    }
}

impl SplatParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_multiplier >= 1.0 && self.cutoff_multiplier.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "cutoff multiplier {} must be >= 1",
                self.cutoff_multiplier
            )));
        }
        if !(self.empty_threshold > 0.0 && self.empty_threshold.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "empty threshold {} must be > 0",
                self.empty_threshold
            )));
        }
        Ok(())
    }
}

/// `R diag(s²) Rᵀ`.
pub fn covariance(g: &Gaussian) -> Matrix3<f64> {
    let r = g.rotation.to_rotation_matrix().into_inner();
    let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    r * s2 * r.transpose()
}

pub fn labelize(field: &DensityField, params: &SplatParams) -> OccupancyGrid {
    let n = field.grid.num_voxels();
    let labels = (0..n)
        .map(|v| {
            let d = field.voxel(v);
            let total: f64 = d.iter().sum();
            if total < params.empty_threshold {
                taxonomy::EMPTY
            } else {
                argmax(d) as u8 + 1
            }
        })
        .collect();
    OccupancyGrid {
        grid: field.grid,
        labels,
    }
}
