use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pose::SE3Pose;
use crate::{Error, Result};

/// Closed axis-aligned box in ego coordinates (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RangeRecord", into = "RangeRecord")]
pub struct RangeBox {
    min: Vector3<f64>,
    max: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct RangeRecord {
    min: [f64; 3],
    max: [f64; 3],
}

impl TryFrom<RangeRecord> for RangeBox {
    type Error = Error;
    fn try_from(r: RangeRecord) -> Result<Self> {
        RangeBox::new(r.min.into(), r.max.into())
    }
}

impl From<RangeBox> for RangeRecord {
    fn from(r: RangeBox) -> Self {
        Self {
            min: r.min.into(),
            max: r.max.into(),
        }
    }
}

impl RangeBox {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        let ok = (0..3).all(|i| min[i].is_finite() && max[i].is_finite() && min[i] < max[i]);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "degenerate range {min:?}..{max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn min(&self) -> Vector3<f64> {
        self.min
    }

    pub fn max(&self) -> Vector3<f64> {
        self.max
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    /// Boundary points are inside.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|i, _| p[i].clamp(self.min[i], self.max[i]))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        let u = Vector3::new(
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        );
        self.min + self.extent().component_mul(&u)
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let (a, b) = (self.min, self.max);
        [
            Vector3::new(a.x, a.y, a.z),
            Vector3::new(b.x, a.y, a.z),
            Vector3::new(b.x, b.y, a.z),
            Vector3::new(a.x, b.y, a.z),
            Vector3::new(a.x, a.y, b.z),
            Vector3::new(b.x, a.y, b.z),
            Vector3::new(b.x, b.y, b.z),
            Vector3::new(a.x, b.y, b.z),
        ]
    }
}

/// Part of the current perception range that was outside the last frame's
/// range: `range \ m_ego(range)`.
#[derive(Debug, Clone)]
pub struct NewRegion {
    range: RangeBox,
    cur_to_prev: SE3Pose,
    volume: f64,
}

impl NewRegion {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.volume > 0.0
            && self.range.contains(p)
            && !self.range.contains(&self.cur_to_prev.transform_point(p))
    }

    /// Exact volume of the region in m³ (zero when the ranges coincide).
    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn is_empty(&self) -> bool {
        self.volume <= 0.0
    }

    pub fn range(&self) -> &RangeBox {
        &self.range
    }
}

pub fn newly_observed_region(range: &RangeBox, m_ego: &SE3Pose) -> NewRegion {
    let total = range.volume();
    let overlap = transformed_box_overlap(range, m_ego);
    let mut volume = total - overlap;
    if volume <= total * 1e-12 {
        volume = 0.0;
    }
    NewRegion {
        range: *range,
        cur_to_prev: m_ego.inverse(),
        volume,
    }
}

type Face = Vec<Vector3<f64>>;

/// Volume of `range ∩ m(range)` by clipping the transformed box against the
/// six half-spaces of the untransformed one.
fn transformed_box_overlap(range: &RangeBox, m: &SE3Pose) -> f64 {
    let c = range.corners().map(|p| m.transform_point(&p));
    // Corner indices of each face of the box.
    const FACES: [[usize; 4]; 6] = [
        [0, 3, 2, 1],
        [4, 5, 6, 7],
        [0, 1, 5, 4],
        [1, 2, 6, 5],
        [2, 3, 7, 6],
        [3, 0, 4, 7],
    ];
    let mut faces: Vec<Face> = FACES
        .iter()
        .map(|f| f.iter().map(|&i| c[i]).collect())
        .collect();
    for axis in 0..3 {
        let mut n = Vector3::zeros();
        n[axis] = 1.0;
        faces = clip(faces, &n, range.max()[axis]);
        faces = clip(faces, &(-n), -range.min()[axis]);
        if faces.is_empty() {
            return 0.0;
        }
    }
    polyhedron_volume(&faces)
}

/// Keeps the part of a convex polyhedron with `n·x <= d`.
fn clip(faces: Vec<Face>, n: &Vector3<f64>, d: f64) -> Vec<Face> {
    let mut out = Vec::with_capacity(faces.len() + 1);
    let mut cut: Vec<Vector3<f64>> = Vec::new();
    let mut clipped = false;
    for face in faces {
        let mut kept = Vec::with_capacity(face.len() + 2);
        for i in 0..face.len() {
            let a = face[i];
            let b = face[(i + 1) % face.len()];
            let da = n.dot(&a) - d;
            let db = n.dot(&b) - d;
            clipped |= da > 0.0;
            if da <= 0.0 {
                kept.push(a);
                if da == 0.0 {
                    cut.push(a);
                }
            }
            if (da < 0.0 && db > 0.0) || (da > 0.0 && db < 0.0) {
                let p = a + (b - a) * (da / (da - db));
                kept.push(p);
                cut.push(p);
            }
        }
        if kept.len() >= 3 {
            out.push(kept);
        }
    }
    if !clipped {
        return out;
    }
    if let Some(cap) = cap_face(cut, n) {
        out.push(cap);
    }
    out
}

fn cap_face(points: Vec<Vector3<f64>>, n: &Vector3<f64>) -> Option<Face> {
    let mut pts: Vec<Vector3<f64>> = Vec::with_capacity(points.len());
    for p in points {
        if !pts.iter().any(|q| (q - p).norm() < 1e-12) {
            pts.push(p);
        }
    }
    if pts.len() < 3 {
        return None;
    }
    let centroid = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let u = (pts[0] - centroid).normalize();
    let v = n.cross(&u);
    pts.sort_by(|a, b| {
        let (da, db) = (a - centroid, b - centroid);
        let ta = da.dot(&v).atan2(da.dot(&u));
        let tb = db.dot(&v).atan2(db.dot(&u));
        ta.total_cmp(&tb)
    });
    Some(pts)
}

fn polyhedron_volume(faces: &[Face]) -> f64 {
    let count: usize = faces.iter().map(Vec::len).sum();
    if count == 0 {
        return 0.0;
    }
    let centroid = faces.iter().flatten().sum::<Vector3<f64>>() / count as f64;
    faces
        .iter()
        .map(|f| {
            (1..f.len() - 1)
                .map(|i| {
                    let a = f[0] - centroid;
                    let b = f[i] - centroid;
                    let c = f[i + 1] - centroid;
                    a.dot(&b.cross(&c)).abs() / 6.0
                })
                .sum::<f64>()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use std::f64::consts::FRAC_PI_4;

    fn wide_range() -> RangeBox {
        RangeBox::new(
            Vector3::new(-50.0, -50.0, -5.0),
            Vector3::new(50.0, 50.0, 3.0),
        )
        .unwrap()
    }

    #[test]
    fn rejects_degenerate_range() {
        assert!(RangeBox::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 1.0)).is_err());
        assert!(RangeBox::new(Vector3::new(2.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn identity_motion_gives_empty_region() {
        let region = newly_observed_region(&wide_range(), &SE3Pose::identity());
        assert_eq!(region.volume(), 0.0);
        assert!(region.is_empty());
        assert!(!region.contains(&Vector3::new(49.9, 0.0, 0.0)));
    }

    #[test]
    fn forward_motion_gives_front_slab() {
        // Ego moved 2 m forward: last-frame coordinates shift by -2 m.
        let m = SE3Pose::from_translation(Vector3::new(-2.0, 0.0, 0.0));
        let region = newly_observed_region(&wide_range(), &m);
        assert!((region.volume() - 2.0 * 100.0 * 8.0).abs() < 1e-6);
        assert!(region.contains(&Vector3::new(49.0, 3.0, 0.0)));
        assert!(region.contains(&Vector3::new(50.0, 3.0, 0.0)));
        assert!(!region.contains(&Vector3::new(48.0, 3.0, 0.0)));
        assert!(!region.contains(&Vector3::new(47.0, 3.0, 0.0)));
        assert!(!region.contains(&Vector3::new(51.0, 3.0, 0.0)));
    }

    #[test]
    fn yaw_region_volume_matches_monte_carlo() {
        let range = wide_range();
        let m = SE3Pose::from_yaw(FRAC_PI_4 / 3.0, Vector3::zeros());
        let region = newly_observed_region(&range, &m);

        // Oracle: four corner wedges, estimated by membership sampling.
        let mut rng = seed::rng(99);
        let n = 400_000;
        let hits = (0..n)
            .filter(|_| region.contains(&range.sample(&mut rng)))
            .count();
        let mc = range.volume() * hits as f64 / n as f64;
        let stderr = range.volume()
            * ((hits as f64 / n as f64) * (1.0 - hits as f64 / n as f64) / n as f64).sqrt();
        assert!(region.volume() > 0.0);
        assert!(
            (mc - region.volume()).abs() < 4.0 * stderr,
            "mc {mc} exact {}",
            region.volume()
        );

        // Corners are newly visible, the center is not.
        assert!(region.contains(&Vector3::new(49.5, 49.5, 0.0)));
        assert!(region.contains(&Vector3::new(-49.5, -49.5, 0.0)));
        assert!(!region.contains(&Vector3::new(0.0, 0.0, 0.0)));
    }

    #[test]
    fn yaw_region_matches_lattice_count() {
        let a: f64 = 50.0;
        let t: f64 = 0.3;
        let range = wide_range();
        let m = SE3Pose::from_yaw(t, Vector3::zeros());
        let region = newly_observed_region(&range, &m);
        // The region is a prism; count its cross-section on a fine lattice.
        let n = 2000;
        let step = 2.0 * a / n as f64;
        let inv = m.inverse();
        let mut count = 0usize;
        for i in 0..n {
            for j in 0..n {
                let p = Vector3::new(
                    -a + (i as f64 + 0.5) * step,
                    -a + (j as f64 + 0.5) * step,
                    0.0,
                );
                let q = inv.transform_point(&p);
                if q.x.abs() > a || q.y.abs() > a {
                    count += 1;
                }
            }
        }
        let area = count as f64 * step * step;
        assert!((area * 8.0 - region.volume()).abs() / region.volume() < 2e-3);
    }

    #[test]
    fn general_rotation_volume_is_bounded() {
        let range = wide_range();
        let m = SE3Pose::new(
            nalgebra::UnitQuaternion::from_euler_angles(0.05, -0.03, 0.4),
            Vector3::new(3.0, -1.0, 0.2),
        );
        let region = newly_observed_region(&range, &m);
        assert!(region.volume() > 0.0 && region.volume() < range.volume());
        let mut rng = seed::rng(5);
        let n = 200_000;
        let hits = (0..n)
            .filter(|_| region.contains(&range.sample(&mut rng)))
            .count();
        let mc = range.volume() * hits as f64 / n as f64;
        assert!((mc - region.volume()).abs() / region.volume() < 0.03);
    }
}
