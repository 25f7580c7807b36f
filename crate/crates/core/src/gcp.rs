//! Global context pooling: the bottleneck bridge that turns the stride-8
//! sparse tensor into a dense BEV plane, runs a two-level 2D CNN on it and
//! scatters the result back onto the original sparse sites.

use ndarray::Array2;

use crate::dense2d::{concat_channels, crop, upsample2x, Conv2d, DenseBev};
use crate::error::{Error, Result};
use crate::sparse::SparseTensor;
use crate::weights::WeightStore;

/// Dense BEV plane from a sparse tensor.
///
/// Voxel `(ix, iy, iz)` with feature `c` lands at `[iz * C + c, iy, ix]`;
/// heights are packed z-major into channels.
pub fn sparse_to_bev(bottom: &SparseTensor) -> Result<DenseBev> {
    let [gx, gy, gz] = bottom.grid_dims;
    let c = bottom.channels();
    let mut bev = DenseBev::zeros(c * gz, gy, gx);
    for (row, coord) in bottom.coords.iter().enumerate() {
        if !crate::sparse::in_grid(coord, bottom.grid_dims) {
            return Err(Error::internal(format!("voxel {coord:?} outside BEV grid {:?}", bottom.grid_dims)));
        }
        let [ix, iy, iz] = coord.map(|v| v as usize);
        for ch in 0..c {
            bev.data[[iz * c + ch, iy, ix]] = bottom.features[[row, ch]];
        }
    }
    Ok(bev)
}

/// Inverse of the height packing: reads channel `iz * C + c` at `(iy, ix)`
/// for every template site. `bev` must have a multiple of `grid z` channels.
pub fn gather_bev(bev: &DenseBev, template: &SparseTensor) -> Result<SparseTensor> {
    let [gx, gy, gz] = template.grid_dims;
    if bev.height() != gy || bev.width() != gx {
        return Err(Error::internal(format!(
            "BEV plane {}x{} does not cover template grid {gy}x{gx}",
            bev.height(),
            bev.width()
        )));
    }
    if gz == 0 || !bev.channels().is_multiple_of(gz) {
        return Err(Error::config(format!("{} BEV channels cannot be split over {gz} heights", bev.channels())));
    }
    let c = bev.channels() / gz;
    let mut features = Array2::zeros((template.num_active(), c));
    for (row, coord) in template.coords.iter().enumerate() {
        let [ix, iy, iz] = coord.map(|v| v as usize);
        for ch in 0..c {
            features[[row, ch]] = bev.data[[iz * c + ch, iy, ix]];
        }
    }
    template.with_features(features)
}

/// 1x1 projection followed by [`gather_bev`].
pub fn bev_to_sparse(bev: &DenseBev, template: &SparseTensor, proj: &Conv2d) -> Result<SparseTensor> {
    if proj.kernel() != 1 {
        return Err(Error::config(format!("BEV projection must be 1x1, got {0}x{0}", proj.kernel())));
    }
    let gz = template.grid_dims[2];
    if !proj.out_channels().is_multiple_of(gz) {
        return Err(Error::config(format!(
            "projection output {} is not a multiple of {gz} heights",
            proj.out_channels()
        )));
    }
    gather_bev(&proj.forward(bev)?, template)
}

/// Depth/width of the two extractor levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub level1_depth: usize,
    pub level1_width: usize,
    /// Zero disables the second level.
    pub level2_depth: usize,
    pub level2_width: usize,
    pub kernel: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { level1_depth: 6, level1_width: 128, level2_depth: 6, level2_width: 256, kernel: 3 }
    }
}

impl ExtractorConfig {
    pub fn out_channels(&self) -> usize {
        self.level1_width + if self.level2_depth > 0 { self.level2_width } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.level1_depth == 0 || self.level1_width == 0 {
            return Err(Error::config("GCP level 1 needs positive depth and width"));
        }
        if self.level2_depth > 0 && self.level2_width == 0 {
            return Err(Error::config("GCP level 2 needs a positive width"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("GCP kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    /// Layer names `gcp.l{level}.conv{j}`, `(cin, cout, stride)`.
    fn layers(&self, in_channels: usize) -> Vec<(String, usize, usize, usize)> {
        let mut out = Vec::new();
        let mut cin = in_channels;
        for j in 0..self.level1_depth {
            out.push((format!("gcp.l1.conv{j}"), cin, self.level1_width, 1));
            cin = self.level1_width;
        }
        for j in 0..self.level2_depth {
            out.push((format!("gcp.l2.conv{j}"), cin, self.level2_width, if j == 0 { 2 } else { 1 }));
            cin = self.level2_width;
        }
        out
    }

    pub fn weight_shapes(&self, in_channels: usize) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        self.layers(in_channels)
            .into_iter()
            .flat_map(|(name, cin, cout, _)| {
                [(format!("{name}.weight"), vec![cout, cin, k, k]), (format!("{name}.bias"), vec![cout])]
            })
            .collect()
    }
}

/// Two-level multi-scale 2D CNN (conv + ReLU stacks).
#[derive(Debug, Clone, PartialEq)]
pub struct BevExtractor {
    pub level1: Vec<Conv2d>,
    pub level2: Vec<Conv2d>,
}

impl BevExtractor {
    pub fn from_store(ws: &WeightStore, cfg: &ExtractorConfig, in_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut level1 = Vec::new();
        let mut level2 = Vec::new();
        for (name, cin, cout, stride) in cfg.layers(in_channels) {
            let layer = Conv2d::from_store(ws, &name, cin, cout, cfg.kernel, stride, true)?;
            if name.starts_with("gcp.l1") {
                level1.push(layer);
            } else {
                level2.push(layer);
            }
        }
        Ok(Self { level1, level2 })
    }

    pub fn out_channels(&self) -> usize {
        self.level1.last().map_or(0, Conv2d::out_channels) + self.level2.last().map_or(0, Conv2d::out_channels)
    }

    /// `concat(level1, upsample2x(level2))` at the input resolution.
    pub fn forward(&self, x: &DenseBev) -> Result<DenseBev> {
        let mut l1 = x.clone();
        for layer in &self.level1 {
            l1 = layer.forward(&l1)?;
        }
        if self.level2.is_empty() {
            return Ok(l1);
        }
        let mut l2 = l1.clone();
        for layer in &self.level2 {
            l2 = layer.forward(&l2)?;
        }
        let up = crop(&upsample2x(&l2), x.height(), x.width());
        concat_channels(&[&l1, &up])
    }
}

pub fn bev_extractor(x: &DenseBev, ws: &WeightStore, cfg: &ExtractorConfig) -> Result<DenseBev> {
    BevExtractor::from_store(ws, cfg, x.channels())?.forward(x)
}

/// Loads `gcp.proj` (`[bridge * heights, extractor_out, 1, 1]`).
pub fn projection_from_store(ws: &WeightStore, extractor_out: usize, bridge_channels: usize, heights: usize) -> Result<Conv2d> {
    Conv2d::from_store(ws, "gcp.proj", extractor_out, bridge_channels * heights, 1, 1, false)
}

pub fn projection_shapes(extractor_out: usize, bridge_channels: usize, heights: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("gcp.proj.weight".into(), vec![bridge_channels * heights, extractor_out, 1, 1]),
        ("gcp.proj.bias".into(), vec![bridge_channels * heights]),
    ]
}

/// Result of the bridge: features for the decoder and the BEV plane the heads read.
#[derive(Debug, Clone)]
pub struct GcpOutput {
    pub bridged: SparseTensor,
    pub bev_out: DenseBev,
}

pub fn global_context_pooling(bottom: &SparseTensor, extractor: &BevExtractor, proj: &Conv2d) -> Result<GcpOutput> {
    let bev_in = sparse_to_bev(bottom)?;
    let bev_out = extractor.forward(&bev_in)?;
    let bridged = bev_to_sparse(&bev_out, bottom, proj)?;
    Ok(GcpOutput { bridged, bev_out })
}
