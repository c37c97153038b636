use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector4};
use rayon::prelude::*;

use super::{DensityField, GridConfig, SplatParams};
use crate::gaussian::{Gaussian, GaussianScene, Semantics};
use crate::taxonomy::NUM_CLASSES;
use crate::{Error, Result};

/// Per-Gaussian quantities shared by the forward and backward passes.
struct Kernel {
    position: Vector3<f64>,
    rot: Matrix3<f64>,
    inv_s2: Vector3<f64>,
    lo: [usize; 3],
    hi: [usize; 3],
}

impl Kernel {
    /// `None` when the truncated support misses the grid entirely.
    fn new(g: &Gaussian, grid: &GridConfig, cutoff: f64) -> Option<Self> {
        let rot = g.rotation.to_rotation_matrix().into_inner();
        let s2 = g.scale.component_mul(&g.scale);
        let h = grid.voxel_size;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for j in 0..3 {
            // Marginal std dev along axis j is sqrt(Σ_jj).
            let var: f64 = (0..3).map(|c| rot[(j, c)] * rot[(j, c)] * s2[c]).sum();
            let e = cutoff * var.sqrt() * (1.0 + 1e-9);
            let p = g.position[j] - grid.origin[j];
            let a = ((p - e) / h - 0.5).ceil();
            let b = ((p + e) / h - 0.5).floor();
            let n = grid.dims[j] as f64;
            if !(b >= 0.0 && a <= n - 1.0) || a > b {
                return None;
            }
            lo[j] = a.max(0.0) as usize;
            hi[j] = b.min(n - 1.0) as usize;
        }
        Some(Self {
            position: g.position,
            rot,
            inv_s2: s2.map(|v| 1.0 / v),
            lo,
            hi,
        })
    }
}

fn kernels(scene: &GaussianScene, grid: &GridConfig, params: &SplatParams) -> Vec<Option<Kernel>> {
    scene
        .gaussians
        .par_iter()
        .map(|g| Kernel::new(g, grid, params.cutoff_multiplier))
        .collect()
}

fn check_mask(grid: &GridConfig, mask: Option<&[bool]>) -> Result<()> {
    match mask {
        Some(m) if m.len() != grid.num_voxels() => Err(Error::ShapeMismatch {
            expected: grid.num_voxels(),
            actual: m.len(),
        }),
        _ => Ok(()),
    }
}

pub fn splat(scene: &GaussianScene, grid: &GridConfig, params: &SplatParams) -> DensityField {
    splat_masked(scene, grid, params, None).expect("no mask to mismatch")
}

/// Splat restricted to voxels where `mask` is true; other voxels stay zero.
///
/// Work is split by x-plane and each plane accumulates Gaussians in scene
/// order, so the result does not depend on the thread count.
pub fn splat_masked(
    scene: &GaussianScene,
    grid: &GridConfig,
    params: &SplatParams,
    mask: Option<&[bool]>,
) -> Result<DensityField> {
    check_mask(grid, mask)?;
    let ks = kernels(scene, grid, params);
    let [nx, ny, nz] = grid.dims;
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); nx];
    for (i, k) in ks.iter().enumerate() {
        if let Some(k) = k {
            for bin in &mut bins[k.lo[0]..=k.hi[0]] {
                bin.push(i as u32);
            }
        }
    }
    let k2 = params.cutoff_multiplier * params.cutoff_multiplier;
    let mut field = DensityField::zeros(*grid);
    let plane = ny * nz * NUM_CLASSES;
    field
        .data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(ix, out)| {
            for &i in &bins[ix] {
                let k = ks[i as usize].as_ref().unwrap();
                let c = &scene.gaussians[i as usize].semantics;
                for iy in k.lo[1]..=k.hi[1] {
                    for iz in k.lo[2]..=k.hi[2] {
                        let v = grid.index(ix, iy, iz);
                        if let Some(m) = mask {
                            if !m[v] {
                                continue;
                            }
                        }
                        let d = grid.voxel_center(ix, iy, iz) - k.position;
                        let u = k.rot.tr_mul(&d);
                        let m2 = u.dot(&u.component_mul(&k.inv_s2));
                        if m2 > k2 {
                            continue;
                        }
                        let w = (-0.5 * m2).exp();
                        let base = (iy * nz + iz) * NUM_CLASSES;
                        for (o, ck) in out[base..base + NUM_CLASSES].iter_mut().zip(c) {
                            *o += ck * w;
                        }
                    }
                }
            }
        });
    Ok(field)
}

/// Gradient of `Σ upstream ⊙ splat(scene)` with respect to one Gaussian.
/// `rotation` is in (w, x, y, z) order and tangent to the unit sphere;
/// `semantics` is tangent to the probability simplex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianGrad {
    pub position: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub semantics: Semantics,
}

impl GaussianGrad {
    pub fn zero() -> Self {
        Self {
            position: Vector3::zeros(),
            scale: Vector3::zeros(),
            rotation: Vector4::zeros(),
            semantics: [0.0; NUM_CLASSES],
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::zero()
    }
}

pub fn splat_gradients(
    scene: &GaussianScene,
    grid: &GridConfig,
    params: &SplatParams,
    upstream: &[f64],
    mask: Option<&[bool]>,
) -> Result<Vec<GaussianGrad>> {
    let expected = grid.num_voxels() * NUM_CLASSES;
    if upstream.len() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            actual: upstream.len(),
        });
    }
    check_mask(grid, mask)?;
    let k2 = params.cutoff_multiplier * params.cutoff_multiplier;
    let out = scene
        .gaussians
        .par_iter()
        .map(|g| match Kernel::new(g, grid, params.cutoff_multiplier) {
            Some(k) => backward_one(g, &k, grid, k2, upstream, mask),
            None => GaussianGrad::zero(),
        })
        .collect();
    Ok(out)
}

fn backward_one(
    g: &Gaussian,
    k: &Kernel,
    grid: &GridConfig,
    k2: f64,
    upstream: &[f64],
    mask: Option<&[bool]>,
) -> GaussianGrad {
    let mut acc_a = Vector3::zeros();
    let mut acc_s = Vector3::zeros();
    let mut acc_r = Matrix3::zeros();
    let mut sem = [0.0; NUM_CLASSES];
    for ix in k.lo[0]..=k.hi[0] {
        for iy in k.lo[1]..=k.hi[1] {
            for iz in k.lo[2]..=k.hi[2] {
                let v = grid.index(ix, iy, iz);
                if let Some(m) = mask {
                    if !m[v] {
                        continue;
                    }
                }
                let up = &upstream[v * NUM_CLASSES..(v + 1) * NUM_CLASSES];
                let d = grid.voxel_center(ix, iy, iz) - k.position;
                let u = k.rot.tr_mul(&d);
                let a = u.component_mul(&k.inv_s2);
                let m2 = u.dot(&a);
                if m2 > k2 {
                    continue;
                }
                let w = (-0.5 * m2).exp();
                let mut gw = 0.0;
                for j in 0..NUM_CLASSES {
                    gw += up[j] * g.semantics[j];
                    sem[j] += up[j] * w;
                }
                if gw == 0.0 {
                    continue;
                }
                let gww = gw * w;
                acc_a += a * gww;
                acc_s += u.component_mul(&u) * gww;
                acc_r -= d * a.transpose() * gww;
            }
        }
    }
    let position = k.rot * acc_a;
    let scale = Vector3::from_fn(|j, _| acc_s[j] / (g.scale[j] * g.scale[j] * g.scale[j]));
    let q = g.rotation.quaternion();
    let qv = Vector4::new(q.w, q.i, q.j, q.k);
    let raw = quaternion_chain(&qv, &acc_r);
    let rotation = raw - qv * raw.dot(&qv);
    let mean = sem.iter().sum::<f64>() / NUM_CLASSES as f64;
    let semantics = sem.map(|s| s - mean);
    GaussianGrad {
        position,
        scale,
        rotation,
        semantics,
    }
}

/// Pulls a gradient with respect to `R(q)` back to the quaternion
/// components (w, x, y, z).
fn quaternion_chain(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0);
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x);
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y);
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0);
    2.0 * Vector4::new(
        g.component_mul(&dw).sum(),
        g.component_mul(&dx).sum(),
        g.component_mul(&dy).sum(),
        g.component_mul(&dz).sum(),
    )
}

/// Gradient with respect to a body-frame rotation vector `ω` applied as
/// `q ⊗ exp(ω)`, evaluated at `ω = 0`.
pub fn rotvec_gradient(q: &UnitQuaternion<f64>, g: &Vector4<f64>) -> Vector3<f64> {
    let q = q.quaternion();
    let qv = Vector3::new(q.i, q.j, q.k);
    Vector3::from_fn(|j, _| {
        let e = Vector3::ith(j, 1.0);
        let vw = -qv[j];
        let vv = e * q.w + qv.cross(&e);
        0.5 * (g[0] * vw + g[1] * vv.x + g[2] * vv.y + g[3] * vv.z)
    })
}

/// Gradient with respect to logits `l` where `c = softmax(l)`.
pub fn logit_gradient(c: &Semantics, g: &Semantics) -> Semantics {
    let dot: f64 = c.iter().zip(g).map(|(a, b)| a * b).sum();
    std::array::from_fn(|k| c[k] * (g[k] - dot))
}

/// Gradient with respect to `ln s`.
pub fn log_scale_gradient(s: &Vector3<f64>, g: &Vector3<f64>) -> Vector3<f64> {
    s.component_mul(g)
}
