//! Point cloud voxelization, the voxel feature encoder (VFE) and
//! de-voxelization of voxel scores back onto points.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::sparse::{Coord, SparseTensor};

/// Number of per-point features fed to the VFE.
pub const VFE_POINT_FEATURES: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
    /// Seconds relative to the current sweep; 0 for the current sweep, negative for past sweeps.
    pub dt: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64, dt: f64) -> Self {
        Self { x, y, z, intensity, dt }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Points from past sweeps feed the VFE but not losses or metrics.
    pub fn is_current(&self) -> bool {
        self.dt >= 0.0
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite() && self.dt.is_finite()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mask of points that take part in losses and metrics.
    pub fn current_mask(&self) -> Vec<bool> {
        self.points.iter().map(Point::is_current).collect()
    }

    /// Checks finiteness and the past-sweep convention.
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::input(format!("point {i} has a non-finite component")));
            }
            if p.dt > 0.0 {
                return Err(Error::input(format!("point {i} has dt = {} > 0 (future sweep)", p.dt)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelConfig {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub voxel_size: [f64; 3],
}

impl VoxelConfig {
    pub fn new(range_min: [f64; 3], range_max: [f64; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let cfg = Self { range_min, range_max, voxel_size };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            let (lo, hi, s) = (self.range_min[axis], self.range_max[axis], self.voxel_size[axis]);
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::config(format!("voxel_size[{axis}] = {s} must be positive")));
            }
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::config(format!("range[{axis}] = [{lo}, {hi}] is empty")));
            }
            let ratio = (hi - lo) / s;
            if (ratio - ratio.round()).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "range[{axis}] extent {} is not a whole number of {s} m voxels",
                    hi - lo
                )));
            }
        }
        Ok(())
    }

    /// Voxel counts along x, y, z.
    pub fn grid_dims(&self) -> [usize; 3] {
        let mut d = [0; 3];
        for axis in 0..3 {
            d[axis] = ((self.range_max[axis] - self.range_min[axis]) / self.voxel_size[axis]).round() as usize;
        }
        d
    }

    /// Cell index of a point, or `None` when outside the half-open range.
    pub fn quantize(&self, p: [f64; 3]) -> Option<Coord> {
        let dims = self.grid_dims();
        let mut c = [0i32; 3];
        for axis in 0..3 {
            let idx = ((p[axis] - self.range_min[axis]) / self.voxel_size[axis]).floor();
            if idx < 0.0 || idx >= dims[axis] as f64 {
                return None;
            }
            c[axis] = idx as i32;
        }
        Some(c)
    }

    pub fn voxel_center(&self, c: Coord) -> [f64; 3] {
        let mut out = [0.0; 3];
        for axis in 0..3 {
            out[axis] = self.range_min[axis] + (c[axis] as f64 + 0.5) * self.voxel_size[axis];
        }
        out
    }
}

/// Point to voxel assignment produced by [`voxelize`].
#[derive(Debug, Clone, PartialEq)]
pub struct PointVoxelMap {
    /// Row of the voxel holding each point; `None` marks an out-of-range point.
    pub point_to_voxel: Vec<Option<usize>>,
    /// Occupied voxels sorted by `(iz, iy, ix)`.
    pub voxel_coords: Vec<Coord>,
    pub voxel_point_lists: Vec<Vec<usize>>,
    pub grid_dims: [usize; 3],
}

impl PointVoxelMap {
    pub fn num_voxels(&self) -> usize {
        self.voxel_coords.len()
    }

    pub fn num_points(&self) -> usize {
        self.point_to_voxel.len()
    }
}

pub fn voxelize(cloud: &PointCloud, cfg: &VoxelConfig) -> Result<PointVoxelMap> {
    cfg.validate()?;
    let mut cells: BTreeMap<(i32, i32, i32), Vec<usize>> = BTreeMap::new();
    let mut point_cell = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.points.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(Error::input(format!("point {i} has a non-finite coordinate")));
        }
        let c = cfg.quantize(p.xyz());
        if let Some(c) = c {
            cells.entry((c[2], c[1], c[0])).or_default().push(i);
        }
        point_cell.push(c);
    }

    let mut point_to_voxel = vec![None; cloud.len()];
    let mut voxel_coords = Vec::with_capacity(cells.len());
    let mut voxel_point_lists = Vec::with_capacity(cells.len());
    for (row, ((iz, iy, ix), pts)) in cells.into_iter().enumerate() {
        for &p in &pts {
            point_to_voxel[p] = Some(row);
        }
        voxel_coords.push([ix, iy, iz]);
        voxel_point_lists.push(pts);
    }
    debug_assert!(point_cell.iter().zip(&point_to_voxel).all(|(c, v)| c.is_some() == v.is_some()));

    Ok(PointVoxelMap { point_to_voxel, voxel_coords, voxel_point_lists, grid_dims: cfg.grid_dims() })
}

/// Single linear + ReLU layer applied per point, max-pooled per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct VfeConfig {
    pub layer: Linear,
}

impl VfeConfig {
    pub fn new(layer: Linear) -> Result<Self> {
        if layer.in_features() < VFE_POINT_FEATURES {
            return Err(Error::config(format!(
                "VFE input width {} is smaller than the {VFE_POINT_FEATURES} point features",
                layer.in_features()
            )));
        }
        if layer.out_features() == 0 {
            return Err(Error::config("VFE needs at least one output channel"));
        }
        Ok(Self { layer })
    }

    pub fn out_channels(&self) -> usize {
        self.layer.out_features()
    }
}

/// Per-point VFE input: absolute coordinates, intensity, dt, offset from the
/// voxel's point mean and offset from the voxel center. Zero-padded to `width`.
pub fn point_features(p: &Point, cluster_mean: [f64; 3], voxel_center: [f64; 3], width: usize) -> Array1<f64> {
    let mut f = Array1::zeros(width);
    let base = [
        p.x,
        p.y,
        p.z,
        p.intensity,
        p.dt,
        p.x - cluster_mean[0],
        p.y - cluster_mean[1],
        p.z - cluster_mean[2],
        p.x - voxel_center[0],
        p.y - voxel_center[1],
        p.z - voxel_center[2],
    ];
    for (i, v) in base.into_iter().enumerate() {
        f[i] = v;
    }
    f
}

pub fn vfe_forward(cloud: &PointCloud, map: &PointVoxelMap, voxel_cfg: &VoxelConfig, vfe: &VfeConfig) -> Result<SparseTensor> {
    if map.num_points() != cloud.len() {
        return Err(Error::internal(format!(
            "voxel map covers {} points, cloud has {}",
            map.num_points(),
            cloud.len()
        )));
    }
    let width = vfe.layer.in_features();
    if width < VFE_POINT_FEATURES {
        return Err(Error::config(format!("VFE input width {width} < {VFE_POINT_FEATURES}")));
    }
    let c = vfe.out_channels();
    let mut features = Array2::<f64>::zeros((map.num_voxels(), c));
    for (row, (coord, pts)) in map.voxel_coords.iter().zip(&map.voxel_point_lists).enumerate() {
        let n = pts.len() as f64;
        let mut mean = [0.0; 3];
        for &pi in pts {
            let p = cloud.points[pi].xyz();
            for a in 0..3 {
                mean[a] += p[a];
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let center = voxel_cfg.voxel_center(*coord);
        let mut pooled = features.row_mut(row);
        for (k, &pi) in pts.iter().enumerate() {
            let f = point_features(&cloud.points[pi], mean, center, width);
            let h = vfe.layer.forward_row(f.view())?.mapv(|v| v.max(0.0));
            if k == 0 {
                pooled.assign(&h);
            } else {
                pooled.zip_mut_with(&h, |a, &b| *a = a.max(b));
            }
        }
    }
    SparseTensor::new(map.voxel_coords.clone(), features, map.grid_dims, 1)
}

/// Copies each voxel's score row to its points; out-of-range points get a
/// one-hot row at `fallback_class`.
pub fn devoxelize(voxel_scores: &SparseTensor, map: &PointVoxelMap, fallback_class: usize) -> Result<Array2<f64>> {
    if voxel_scores.stride != 1 {
        return Err(Error::internal(format!("devoxelize needs stride 1 scores, got stride {}", voxel_scores.stride)));
    }
    if voxel_scores.num_active() != map.num_voxels() {
        return Err(Error::internal(format!(
            "voxel score rows ({}) do not match voxel map ({})",
            voxel_scores.num_active(),
            map.num_voxels()
        )));
    }
    let k = voxel_scores.channels();
    if fallback_class >= k {
        return Err(Error::input(format!("fallback class {fallback_class} outside {k} classes")));
    }
    let mut out = Array2::zeros((map.num_points(), k));
    for (i, v) in map.point_to_voxel.iter().enumerate() {
        match v {
            Some(r) => out.row_mut(i).assign(&voxel_scores.features.row(*r)),
            None => out[[i, fallback_class]] = 1.0,
        }
    }
    Ok(out)
}
