//! Gaussian scene state and the geometric parts of a streaming step.

mod evolve;
pub mod pose;
pub mod region;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use evolve::{align_scene, cull, cull_and_complete, fill_new_region};
pub use pose::{relative_transform, SE3Pose};
pub use region::{newly_observed_region, NewRegion, RangeBox};

use crate::taxonomy::{self, NUM_CLASSES};
use crate::{seed, Error, Result};

/// Probability vector over the semantic (non-empty) classes.
pub type Semantics = [f64; NUM_CLASSES];

pub const UNIFORM_SEMANTICS: Semantics = [1.0 / NUM_CLASSES as f64; NUM_CLASSES];

/// One semantic 3D Gaussian in ego coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Per-axis standard deviations in meters.
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub semantics: Semantics,
    /// Position change over the last frame, in the current ego frame.
    pub temporal_feature: Vector3<f64>,
}

impl Gaussian {
    pub fn validate(&self) -> Result<()> {
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::Invariant("non-finite Gaussian position".into()));
        }
        if !self.scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::Invariant(format!(
                "Gaussian scale {:?} must be positive",
                self.scale
            )));
        }
        let qn = self.rotation.quaternion().norm();
        if (qn - 1.0).abs() > pose::UNIT_TOLERANCE {
            return Err(Error::Invariant(format!("Gaussian quaternion norm {qn}")));
        }
        let sum: f64 = self.semantics.iter().sum();
        if self.semantics.iter().any(|&c| !(c >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!(
                "Gaussian semantics {:?} not on the simplex",
                self.semantics
            )));
        }
        Ok(())
    }

    /// Most probable semantic label (`1..=C`), lowest label on ties.
    pub fn argmax_label(&self) -> u8 {
        argmax(&self.semantics) as u8 + 1
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fixed-cardinality collection of Gaussians centered on an ego pose.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    pub ego_pose: SE3Pose,
    pub frame_index: usize,
    /// True for Gaussians completed (freshly sampled) this frame.
    pub new_mask: Vec<bool>,
}

impl GaussianScene {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.new_mask.len() != self.gaussians.len() {
            return Err(Error::ShapeMismatch {
                expected: self.gaussians.len(),
                actual: self.new_mask.len(),
            });
        }
        self.gaussians.iter().try_for_each(Gaussian::validate)
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.gaussians.iter().map(|g| g.position).collect()
    }

    pub fn count_new(&self) -> usize {
        self.new_mask.iter().filter(|&&m| m).count()
    }

    pub fn count_in_range(&self, range: &RangeBox) -> usize {
        self.gaussians
            .iter()
            .filter(|g| range.contains(&g.position))
            .count()
    }
}

/// Initialization of fresh Gaussians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneInit {
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for SceneInit {
    fn default() -> Self {
        Self {
            scale_min: 0.5,
            scale_max: 2.0,
        }
    }
}

impl SceneInit {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "scale interval [{}, {}] is invalid",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }

    pub(crate) fn fresh<R: Rng + ?Sized>(&self, position: Vector3<f64>, rng: &mut R) -> Gaussian {
        let width = self.scale_max - self.scale_min;
        let scale = Vector3::from_fn(|_, _| self.scale_min + width * rng.random::<f64>());
        Gaussian {
            position,
            scale,
            rotation: UnitQuaternion::identity(),
            semantics: UNIFORM_SEMANTICS,
            temporal_feature: Vector3::zeros(),
        }
    }
}

/// Samples `count` Gaussians uniformly in `range`, all marked new.
pub fn make_scene(
    count: usize,
    range: &RangeBox,
    seed: u64,
    init: &SceneInit,
) -> Result<GaussianScene> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "Gaussian count must be positive".into(),
        ));
    }
    init.validate()?;
    RangeBox::new(range.min(), range.max())?;
    let mut rng = seed::rng(seed);
    let gaussians = (0..count)
        .map(|_| {
            let p = range.sample(&mut rng);
            init.fresh(p, &mut rng)
        })
        .collect();
    Ok(GaussianScene {
        gaussians,
        ego_pose: SE3Pose::identity(),
        frame_index: 0,
        new_mask: vec![true; count],
    })
}

/// Semantic classes treated as movable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DynamicClassSet {
    mask: [bool; NUM_CLASSES],
}

impl Default for DynamicClassSet {
    fn default() -> Self {
        Self::from_labels(&taxonomy::DEFAULT_DYNAMIC).expect("default dynamic classes are valid")
    }
}

impl DynamicClassSet {
    pub fn empty() -> Self {
        Self {
            mask: [false; NUM_CLASSES],
        }
    }

    pub fn from_labels(labels: &[u8]) -> Result<Self> {
        let mut mask = [false; NUM_CLASSES];
        for &l in labels {
            if !taxonomy::is_semantic(l) {
                return Err(Error::InvalidArgument(format!(
                    "dynamic class {l} is not a semantic class"
                )));
            }
            mask[l as usize - 1] = true;
        }
        Ok(Self { mask })
    }

    pub fn contains(&self, label: u8) -> bool {
        taxonomy::is_semantic(label) && self.mask[label as usize - 1]
    }

    pub fn labels(&self) -> Vec<u8> {
        (1..=NUM_CLASSES as u8)
            .filter(|&l| self.contains(l))
            .collect()
    }

    pub(crate) fn index_mask(&self) -> &[bool; NUM_CLASSES] {
        &self.mask
    }
}

/// Probability mass of `g` on movable classes.
pub fn dynamic_weight(g: &Gaussian, dyn_classes: &DynamicClassSet) -> f64 {
    let w: f64 = g
        .semantics
        .iter()
        .zip(dyn_classes.index_mask())
        .filter(|(_, &m)| m)
        .map(|(c, _)| c)
        .sum();
    w.clamp(0.0, 1.0)
}
