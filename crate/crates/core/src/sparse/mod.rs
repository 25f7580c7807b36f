//! Sparse voxel tensors and the rulebook-driven convolutions built on them.

mod conv;
mod rulebook;
mod unet;

use std::collections::HashMap;

use ndarray::{s, Array2};

use crate::error::{Error, Result};

pub use conv::{concat_skip, inverse_conv, sparse_conv, ConvMode, ConvSpec};
pub use rulebook::{build_rulebook, kernel_offsets, Rulebook};
pub use unet::{decode, encode, run_unet, run_unet_with_bridge, EncoderState, UNetArch, UNetOutput};

/// Integer voxel coordinate `(ix, iy, iz)`.
pub type Coord = [i32; 3];

/// Strides a tensor may live at relative to full resolution.
pub const ALLOWED_STRIDES: [usize; 4] = [1, 2, 4, 8];

/// Sort key giving the canonical `(iz, iy, ix)` row order.
pub fn order_key(c: &Coord) -> (i32, i32, i32) {
    (c[2], c[1], c[0])
}

/// Linear key `((iz * H) + iy) * W + ix`; collision free inside the grid.
pub fn coord_key(c: &Coord, grid_dims: [usize; 3]) -> u64 {
    let [w, h, _] = grid_dims;
    ((c[2] as u64 * h as u64) + c[1] as u64) * w as u64 + c[0] as u64
}

pub fn in_grid(c: &Coord, grid_dims: [usize; 3]) -> bool {
    (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < grid_dims[a])
}

/// Active voxel coordinates with an `M x C` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    pub coords: Vec<Coord>,
    pub features: Array2<f64>,
    pub grid_dims: [usize; 3],
    pub stride: usize,
}

impl SparseTensor {
    pub fn new(coords: Vec<Coord>, features: Array2<f64>, grid_dims: [usize; 3], stride: usize) -> Result<Self> {
        if !ALLOWED_STRIDES.contains(&stride) {
            return Err(Error::config(format!("tensor stride {stride} not in {ALLOWED_STRIDES:?}")));
        }
        if coords.len() != features.nrows() {
            return Err(Error::internal(format!(
                "{} coordinates but {} feature rows",
                coords.len(),
                features.nrows()
            )));
        }
        let mut seen = HashMap::with_capacity(coords.len());
        for (row, c) in coords.iter().enumerate() {
            if !in_grid(c, grid_dims) {
                return Err(Error::internal(format!("coordinate {c:?} (row {row}) outside grid {grid_dims:?}")));
            }
            if let Some(prev) = seen.insert(coord_key(c, grid_dims), row) {
                return Err(Error::internal(format!("duplicate coordinate {c:?} at rows {prev} and {row}")));
            }
        }
        Ok(Self { coords, features, grid_dims, stride })
    }

    pub fn empty(channels: usize, grid_dims: [usize; 3], stride: usize) -> Self {
        Self { coords: Vec::new(), features: Array2::zeros((0, channels)), grid_dims, stride }
    }

    pub fn num_active(&self) -> usize {
        self.coords.len()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    /// Hash index from coordinate key to row.
    pub fn index(&self) -> HashMap<u64, usize> {
        self.coords
            .iter()
            .enumerate()
            .map(|(row, c)| (coord_key(c, self.grid_dims), row))
            .collect()
    }

    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.num_active() {
            return Err(Error::internal(format!(
                "replacement features have {} rows, tensor has {}",
                features.nrows(),
                self.num_active()
            )));
        }
        Ok(Self { coords: self.coords.clone(), features, grid_dims: self.grid_dims, stride: self.stride })
    }

    /// Columns `[start, end)` as a new tensor with the same sites.
    pub fn slice_channels(&self, start: usize, end: usize) -> Self {
        Self {
            coords: self.coords.clone(),
            features: self.features.slice(s![.., start..end]).to_owned(),
            grid_dims: self.grid_dims,
            stride: self.stride,
        }
    }

    pub fn relu(mut self) -> Self {
        self.features.mapv_inplace(|v| v.max(0.0));
        self
    }
}
