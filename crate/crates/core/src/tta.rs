//! Test-time augmentation: invertible point transforms, score averaging
//! across transformed inference runs, and multi-run ensembling.

use nalgebra::{Rotation3, Vector3};
use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::voxelizer::{Point, PointCloud};

/// `p' = R(yaw, pitch, roll) * scale * F * p + (0, 0, tz)` where `F` applies
/// the optional mirror flips.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    pub name: String,
    /// Mirror about the yz-plane (`x -> -x`).
    pub flip_x: bool,
    /// Mirror about the xz-plane (`y -> -y`).
    pub flip_y: bool,
    pub scale: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub tz: f64,
}

impl Transform {
    pub fn identity() -> Self {
        Self { name: "identity".into(), flip_x: false, flip_y: false, scale: 1.0, yaw: 0.0, pitch: 0.0, roll: 0.0, tz: 0.0 }
    }

    fn named(name: String) -> Self {
        Self { name, ..Self::identity() }
    }

    fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.roll, self.pitch, self.yaw)
    }

    fn flip(&self, v: Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            if self.flip_x { -v.x } else { v.x },
            if self.flip_y { -v.y } else { v.y },
            v.z,
        )
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation() * (self.flip(Vector3::from(p)) * self.scale);
        [v.x, v.y, v.z + self.tz]
    }

    pub fn invert(&self, p: [f64; 3]) -> [f64; 3] {
        let v = Vector3::new(p[0], p[1], p[2] - self.tz);
        let u = self.flip(self.rotation().inverse() * v / self.scale);
        [u.x, u.y, u.z]
    }

    /// Transforms point positions; intensity, time offset and order are kept.
    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        let rot = self.rotation();
        PointCloud::new(
            cloud
                .points
                .iter()
                .map(|p| {
                    let v = rot * (self.flip(Vector3::new(p.x, p.y, p.z)) * self.scale);
                    Point::new(v.x, v.y, v.z + self.tz, p.intensity, p.dt)
                })
                .collect(),
        )
    }
}

/// Identity, both mirror flips, two global scales, nine yaws, two pitches,
/// two rolls and two z shifts.
pub fn make_tta_set() -> Vec<Transform> {
    let mut v = vec![Transform::identity()];
    v.push(Transform { flip_x: true, ..Transform::named("flip_yz".into()) });
    v.push(Transform { flip_y: true, ..Transform::named("flip_xz".into()) });
    for s in [0.95, 1.05] {
        v.push(Transform { scale: s, ..Transform::named(format!("scale_{s}")) });
    }
    for d in [22.5, -22.5, 45.0, -45.0, 135.0, -135.0, 157.5, -157.5, 180.0] {
        v.push(Transform { yaw: f64::to_radians(d), ..Transform::named(format!("yaw_{d}")) });
    }
    for d in [8.0, -8.0] {
        v.push(Transform { pitch: f64::to_radians(d), ..Transform::named(format!("pitch_{d}")) });
    }
    for d in [5.0, -5.0] {
        v.push(Transform { roll: f64::to_radians(d), ..Transform::named(format!("roll_{d}")) });
    }
    for t in [0.2, -0.2] {
        v.push(Transform { tz: t, ..Transform::named(format!("tz_{t}")) });
    }
    v
}

/// Runs `infer` on every transformed copy of `cloud` and averages the
/// per-point score rows. Variants run in parallel; the sum is taken in list order.
pub fn tta_infer<F>(cloud: &PointCloud, transforms: &[Transform], infer: F) -> Result<Array2<f64>>
where
    F: Fn(&PointCloud) -> Result<Array2<f64>> + Sync,
{
    if transforms.is_empty() {
        return Err(Error::config("empty transform set"));
    }
    let results: Vec<Result<Array2<f64>>> = transforms
        .par_iter()
        .map(|t| infer(&t.apply_cloud(cloud)).map_err(|e| e.in_stage(&format!("tta variant {}", t.name))))
        .collect();
    let mut mats = Vec::with_capacity(results.len());
    for (r, t) in results.into_iter().zip(transforms) {
        let m = r?;
        if m.nrows() != cloud.len() {
            return Err(Error::internal(format!("variant {} returned {} rows for {} points", t.name, m.nrows(), cloud.len())));
        }
        mats.push(m);
    }
    ensemble_scores(&mats)
}

/// Elementwise mean of equally shaped score matrices.
pub fn ensemble_scores(mats: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = mats.first().ok_or_else(|| Error::input("no score matrices to ensemble"))?;
    let mut sum = first.clone();
    for (i, m) in mats.iter().enumerate().skip(1) {
        if m.dim() != first.dim() {
            return Err(Error::input(format!("score matrix {i} has shape {:?}, expected {:?}", m.dim(), first.dim())));
        }
        sum += m;
    }
    if mats.len() > 1 {
        sum /= mats.len() as f64;
    }
    Ok(sum)
}
