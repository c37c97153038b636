use serde::{Deserialize, Serialize};

use crate::raster::OccupancyGrid;
use crate::taxonomy::{self, NUM_CLASSES};
use crate::{Error, Result};

/// Per-class confusion counts for labels `1..=C` plus geometric
/// (any-nonempty) counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: [u64; NUM_CLASSES],
    pub fp: [u64; NUM_CLASSES],
    #[serde(rename = "fn")]
    pub fn_: [u64; NUM_CLASSES],
    pub geo_tp: u64,
    pub geo_fp: u64,
    pub geo_fn: u64,
    pub evaluated: u64,
}

impl ConfusionCounts {
    /// Records one evaluated voxel.
    pub fn add(&mut self, pred: u8, gt: u8) {
        self.evaluated += 1;
        if pred == gt {
            if taxonomy::is_semantic(pred) {
                self.tp[pred as usize - 1] += 1;
            }
        } else {
            if taxonomy::is_semantic(pred) {
                self.fp[pred as usize - 1] += 1;
            }
            if taxonomy::is_semantic(gt) {
                self.fn_[gt as usize - 1] += 1;
            }
        }
        match (taxonomy::is_semantic(pred), taxonomy::is_semantic(gt)) {
            (true, true) => self.geo_tp += 1,
            (true, false) => self.geo_fp += 1,
            (false, true) => self.geo_fn += 1,
            (false, false) => {}
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for k in 0..NUM_CLASSES {
            self.tp[k] += other.tp[k];
            self.fp[k] += other.fp[k];
            self.fn_[k] += other.fn_[k];
        }
        self.geo_tp += other.geo_tp;
        self.geo_fp += other.geo_fp;
        self.geo_fn += other.geo_fn;
        self.evaluated += other.evaluated;
    }
}

/// Counts over voxels that are masked in and labelled in both grids (255
/// in either is skipped).
pub fn confusion(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    mask: Option<&[bool]>,
) -> Result<ConfusionCounts> {
    pred.grid.check_same(&gt.grid)?;
    if let Some(m) = mask {
        if m.len() != gt.grid.num_voxels() {
            return Err(Error::ShapeMismatch {
                expected: gt.grid.num_voxels(),
                actual: m.len(),
            });
        }
    }
    let mut c = ConfusionCounts::default();
    for (v, (&p, &g)) in pred.labels().iter().zip(gt.labels()).enumerate() {
        if mask.is_some_and(|m| !m[v]) || p == taxonomy::UNOBSERVED || g == taxonomy::UNOBSERVED {
            continue;
        }
        c.add(p, g);
    }
    Ok(c)
}

/// Per-class IoU, `None` where the denominator is zero.
pub fn class_iou(counts: &ConfusionCounts) -> [Option<f64>; NUM_CLASSES] {
    std::array::from_fn(|k| {
        let d = counts.tp[k] + counts.fp[k] + counts.fn_[k];
        (d > 0).then(|| counts.tp[k] as f64 / d as f64)
    })
}

/// (mIoU, geometric IoU). Classes with a zero denominator are left out of
/// the mean.
pub fn miou_iou(counts: &ConfusionCounts) -> Result<(f64, f64)> {
    let ious: Vec<f64> = class_iou(counts).into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::NoEvaluatedClasses);
    }
    let miou = ious.iter().sum::<f64>() / ious.len() as f64;
    let d = counts.geo_tp + counts.geo_fp + counts.geo_fn;
    let iou = counts.geo_tp as f64 / d as f64;
    Ok((miou, iou))
}
