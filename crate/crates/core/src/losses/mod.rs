//! Voxel-level training objectives and evaluation metrics.
//!
//! Probability tables are voxel-major with `width` columns, column 0 being
//! the empty class and column `k` semantic label `k`.

mod lovasz;
mod metrics;

use serde::{Deserialize, Serialize};

pub use lovasz::lovasz_softmax;
pub use metrics::{class_iou, confusion, miou_iou, ConfusionCounts};

use crate::raster::DensityField;
use crate::taxonomy::{self, NUM_CLASSES};
use crate::{Error, Result};

/// Number of probability columns: the empty class plus every semantic class.
pub const PROB_WIDTH: usize = NUM_CLASSES + 1;

/// Lower bound applied inside the logarithm of the cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient with respect to the probability table; zero off the mask.
    pub grad: Vec<f64>,
}

/// Normalizes densities against an empty pseudo-density `tau`.
pub fn probs_from_density(field: &DensityField, tau: f64) -> Vec<f64> {
    let n = field.grid.num_voxels();
    let mut out = vec![0.0; n * PROB_WIDTH];
    for v in 0..n {
        let d = field.voxel(v);
        let z = tau + d.iter().sum::<f64>();
        let row = &mut out[v * PROB_WIDTH..(v + 1) * PROB_WIDTH];
        row[0] = tau / z;
        for k in 0..NUM_CLASSES {
            row[k + 1] = d[k] / z;
        }
    }
    out
}

/// Pulls a gradient on `probs_from_density` back to the densities.
pub fn density_backward(field: &DensityField, tau: f64, dprobs: &[f64]) -> Result<Vec<f64>> {
    let n = field.grid.num_voxels();
    if dprobs.len() != n * PROB_WIDTH {
        return Err(Error::ShapeMismatch {
            expected: n * PROB_WIDTH,
            actual: dprobs.len(),
        });
    }
    let mut out = vec![0.0; n * NUM_CLASSES];
    for v in 0..n {
        let g = &dprobs[v * PROB_WIDTH..(v + 1) * PROB_WIDTH];
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let d = field.voxel(v);
        let z = tau + d.iter().sum::<f64>();
        let mut dot = g[0] * tau / z;
        for k in 0..NUM_CLASSES {
            dot += g[k + 1] * d[k] / z;
        }
        for k in 0..NUM_CLASSES {
            out[v * NUM_CLASSES + k] = (g[k + 1] - dot) / z;
        }
    }
    Ok(out)
}

/// Validates shapes and returns the column count and masked voxel indices.
pub(crate) fn check_inputs(
    probs: &[f64],
    target: &[u8],
    mask: &[bool],
) -> Result<(usize, Vec<usize>)> {
    let n = target.len();
    if mask.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            actual: mask.len(),
        });
    }
    if n == 0 || !probs.len().is_multiple_of(n) || probs.len() / n < 2 {
        return Err(Error::ShapeMismatch {
            expected: n * PROB_WIDTH,
            actual: probs.len(),
        });
    }
    let width = probs.len() / n;
    let mut idx = Vec::new();
    for v in 0..n {
        if !mask[v] {
            continue;
        }
        let t = target[v];
        if t == taxonomy::UNOBSERVED || t as usize >= width {
            return Err(Error::InvalidTarget { voxel: v, label: t });
        }
        idx.push(v);
    }
    if idx.is_empty() {
        return Err(Error::EmptyObservation);
    }
    Ok((width, idx))
}

/// Mean of `−ln p_target` over masked voxels.
pub fn cross_entropy(probs: &[f64], target: &[u8], mask: &[bool]) -> Result<LossOutput> {
    let (width, idx) = check_inputs(probs, target, mask)?;
    let m = idx.len() as f64;
    let mut grad = vec![0.0; probs.len()];
    let mut loss = 0.0;
    for &v in &idx {
        let j = v * width + target[v] as usize;
        let p = probs[j].max(LOG_FLOOR);
        loss -= p.ln();
        grad[j] = -1.0 / (m * p);
    }
    Ok(LossOutput {
        loss: loss / m,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cross_entropy: f64,
    pub lovasz: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cross_entropy: 1.0,
            lovasz: 1.0,
        }
    }
}

/// Weighted cross-entropy plus Lovász loss of the normalized densities;
/// returns the loss and its gradient with respect to the densities.
pub fn occupancy_loss(
    field: &DensityField,
    tau: f64,
    target: &[u8],
    mask: &[bool],
    weights: &LossWeights,
) -> Result<(f64, Vec<f64>)> {
    let probs = probs_from_density(field, tau);
    let ce = cross_entropy(&probs, target, mask)?;
    let lz = lovasz_softmax(&probs, target, mask)?;
    let dprobs: Vec<f64> = ce
        .grad
        .iter()
        .zip(&lz.grad)
        .map(|(a, b)| weights.cross_entropy * a + weights.lovasz * b)
        .collect();
    let loss = weights.cross_entropy * ce.loss + weights.lovasz * lz.loss;
    Ok((loss, density_backward(field, tau, &dprobs)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GridConfig;
    use crate::seed;
    use nalgebra::Vector3;
    use rand::Rng;

    fn one_hot_probs(target: &[u8], width: usize) -> Vec<f64> {
        let mut p = vec![0.0; target.len() * width];
        for (v, &t) in target.iter().enumerate() {
            p[v * width + t as usize] = 1.0;
        }
        p
    }

    fn random_rows<R: Rng>(rng: &mut R, n: usize, width: usize) -> Vec<f64> {
        let mut p = Vec::with_capacity(n * width);
        for _ in 0..n {
            let row: Vec<f64> = (0..width).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            p.extend(row.into_iter().map(|x| x / s));
        }
        p
    }

    #[test]
    fn perfect_prediction_has_zero_cross_entropy() {
        let target = [0u8, 3, 8, 1];
        let mask = [true; 4];
        let out = cross_entropy(&one_hot_probs(&target, PROB_WIDTH), &target, &mask).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn uniform_cross_entropy_is_log_width() {
        let target = [0u8, 3, 8, 1, 2];
        let mask = [true; 5];
        let probs = vec![1.0 / PROB_WIDTH as f64; 5 * PROB_WIDTH];
        let out = cross_entropy(&probs, &target, &mask).unwrap();
        assert!((out.loss - (PROB_WIDTH as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_hand_summation() {
        let mut rng = seed::rng(21);
        let width = 3;
        let probs = random_rows(&mut rng, 9, width);
        let target: Vec<u8> = (0..9).map(|_| rng.random_range(0..3u8)).collect();
        let mask = [true, true, false, true, true, true, false, true, true];
        let out = cross_entropy(&probs, &target, &mask).unwrap();
        let mut sum = 0.0;
        let mut count = 0.0;
        for v in 0..9 {
            if mask[v] {
                sum += -probs[v * width + target[v] as usize].ln();
                count += 1.0;
            }
        }
        assert!((out.loss - sum / count).abs() < 1e-14);
    }

    #[test]
    fn unobserved_target_inside_mask_is_rejected() {
        let probs = vec![0.5; 4];
        let err = cross_entropy(&probs, &[0, 255], &[true, true]).unwrap_err();
        assert!(matches!(
            err,
            Error::InvalidTarget {
                voxel: 1,
                label: 255
            }
        ));
        assert!(cross_entropy(&probs, &[0, 255], &[true, false]).is_ok());
        assert!(matches!(
            cross_entropy(&probs, &[0, 1], &[false, false]),
            Err(Error::EmptyObservation)
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = seed::rng(22);
        let width = 4;
        let probs = random_rows(&mut rng, 6, width);
        let target: Vec<u8> = (0..6).map(|_| rng.random_range(0..4u8)).collect();
        let mask = [true, false, true, true, true, true];
        let g = cross_entropy(&probs, &target, &mask).unwrap().grad;
        let h = 1e-7;
        for j in 0..probs.len() {
            let mut a = probs.clone();
            let mut b = probs.clone();
            a[j] += h;
            b[j] -= h;
            let n = (cross_entropy(&a, &target, &mask).unwrap().loss
                - cross_entropy(&b, &target, &mask).unwrap().loss)
                / (2.0 * h);
            assert!((g[j] - n).abs() < 1e-5, "{j}: {} vs {n}", g[j]);
        }
    }

    #[test]
    fn probs_rows_lie_on_simplex() {
        let grid = GridConfig::new([2, 1, 1], Vector3::zeros(), 1.0).unwrap();
        let mut data = vec![0.0; 2 * NUM_CLASSES];
        data[3] = 0.95;
        let field = DensityField::from_data(grid, data).unwrap();
        let p = probs_from_density(&field, 0.05);
        assert!((p[0] - 0.05).abs() < 1e-15);
        assert!((p[4] - 0.95).abs() < 1e-15);
        assert_eq!(p[PROB_WIDTH], 1.0);
        for row in p.chunks(PROB_WIDTH) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn density_backward_matches_finite_differences() {
        let mut rng = seed::rng(23);
        let grid = GridConfig::new([3, 1, 1], Vector3::zeros(), 1.0).unwrap();
        let data: Vec<f64> = (0..3 * NUM_CLASSES)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let field = DensityField::from_data(grid, data.clone()).unwrap();
        let target = [0u8, 4, 7];
        let mask = [true; 3];
        let weights = LossWeights::default();
        let (_, g) = occupancy_loss(&field, 0.05, &target, &mask, &weights).unwrap();
        let h = 1e-7;
        for j in 0..data.len() {
            let eval = |delta: f64| {
                let mut d = data.clone();
                d[j] += delta;
                let f = DensityField::from_data(grid, d).unwrap();
                occupancy_loss(&f, 0.05, &target, &mask, &weights)
                    .unwrap()
                    .0
            };
            let n = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((g[j] - n).abs() < 1e-5, "{j}: {} vs {n}", g[j]);
        }
    }
}
