use ndarray::{concatenate, s, Array1, Array2, Array3, Axis};

use super::{Rulebook, SparseTensor};
use crate::error::{Error, Result};
use crate::weights::WeightStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Output sites equal input sites.
    Submanifold,
    /// Standard (dilating) convolution, optionally strided.
    Strided,
    /// Transpose of a recorded strided layer, scattering back to its input sites.
    Inverse,
}

/// Convolution parameters. `weights` is `kernel_volume x in x out`, indexed by
/// the offset order of [`super::kernel_offsets`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Array3<f64>,
    pub bias: Option<Array1<f64>>,
    pub mode: ConvMode,
}

impl ConvSpec {
    pub fn zeros(kernel: [usize; 3], stride: usize, in_channels: usize, out_channels: usize, mode: ConvMode) -> Self {
        let kvol = kernel.iter().product();
        Self {
            kernel,
            stride,
            in_channels,
            out_channels,
            weights: Array3::zeros((kvol, in_channels, out_channels)),
            bias: None,
            mode,
        }
    }

    /// Loads `{prefix}.weight` (`[kvol, in, out]`) and `{prefix}.bias` (`[out]`).
    pub fn from_store(
        ws: &WeightStore,
        prefix: &str,
        kernel: [usize; 3],
        stride: usize,
        in_channels: usize,
        out_channels: usize,
        mode: ConvMode,
    ) -> Result<Self> {
        let kvol: usize = kernel.iter().product();
        let w = ws.get_shaped(&format!("{prefix}.weight"), &[kvol, in_channels, out_channels])?;
        let b = ws.get_shaped(&format!("{prefix}.bias"), &[out_channels])?;
        let spec = Self {
            kernel,
            stride,
            in_channels,
            out_channels,
            weights: Array3::from_shape_vec((kvol, in_channels, out_channels), w.to_f64())
                .map_err(|e| Error::internal(e.to_string()))?,
            bias: Some(Array1::from(b.to_f64())),
            mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.iter().any(|&k| k % 2 == 0) {
            return Err(Error::config(format!("kernel {:?} must be odd along every axis", self.kernel)));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::config(format!("convolution stride {} must be 1 or 2", self.stride)));
        }
        if self.mode == ConvMode::Submanifold && self.stride != 1 {
            return Err(Error::config("submanifold convolution requires stride 1"));
        }
        let expected = (self.kernel_volume(), self.in_channels, self.out_channels);
        if self.weights.dim() != expected {
            return Err(Error::config(format!(
                "weight tensor {:?} does not match kernel/channels {expected:?}",
                self.weights.dim()
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels {
                return Err(Error::config(format!("bias has {} entries, expected {}", b.len(), self.out_channels)));
            }
        }
        Ok(())
    }
}

fn output_init(rows: usize, spec: &ConvSpec) -> Array2<f64> {
    let mut out = Array2::zeros((rows, spec.out_channels));
    if let Some(b) = &spec.bias {
        out += b;
    }
    out
}

/// `out[o] = bias + sum_k sum_{(i, o) in rb[k]} x[i] W[k]`.
///
/// Each offset is a gather, a small GEMM and a scatter-add; offsets are
/// applied in rulebook order so every output row sums in a fixed order.
pub fn sparse_conv(input: &SparseTensor, spec: &ConvSpec, rb: &Rulebook) -> Result<SparseTensor> {
    spec.validate()?;
    if spec.mode == ConvMode::Inverse {
        return Err(Error::config("use inverse_conv for inverse layers"));
    }
    if input.channels() != spec.in_channels {
        return Err(Error::config(format!(
            "layer expects {} input channels, tensor has {}",
            spec.in_channels,
            input.channels()
        )));
    }
    if rb.input_coords != input.coords || rb.offsets.len() != spec.kernel_volume() || rb.conv_stride != spec.stride {
        return Err(Error::internal("rulebook was not built for this input/layer"));
    }
    let mut out = output_init(rb.output_coords.len(), spec);
    for (k, pairs) in rb.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let gathered = input.features.select(Axis(0), &pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let prod = gathered.dot(&spec.weights.slice(s![k, .., ..]));
        for (row, &(_, o)) in prod.outer_iter().zip(pairs) {
            let mut dst = out.row_mut(o);
            dst += &row;
        }
    }
    SparseTensor::new(rb.output_coords.clone(), out, rb.output_grid_dims, input.stride * spec.stride)
}

/// Transposed use of an encoder rulebook: features on its output sites are
/// scattered back onto its input sites, `out[i] = sum_k sum_{(i, o)} x[o] W[k]`.
pub fn inverse_conv(input: &SparseTensor, spec: &ConvSpec, saved_rb: &Rulebook) -> Result<SparseTensor> {
    spec.validate()?;
    if spec.mode != ConvMode::Inverse {
        return Err(Error::config("inverse_conv needs an INVERSE layer spec"));
    }
    if input.coords != saved_rb.output_coords {
        return Err(Error::internal(format!(
            "inverse conv input has {} sites that do not match the saved rulebook's {} output sites",
            input.num_active(),
            saved_rb.output_coords.len()
        )));
    }
    if input.channels() != spec.in_channels {
        return Err(Error::config(format!(
            "layer expects {} input channels, tensor has {}",
            spec.in_channels,
            input.channels()
        )));
    }
    if saved_rb.offsets.len() != spec.kernel_volume() {
        return Err(Error::config("inverse kernel volume differs from the saved rulebook"));
    }
    if !input.stride.is_multiple_of(saved_rb.conv_stride) {
        return Err(Error::internal("inverse conv would produce a fractional stride"));
    }
    let mut out = output_init(saved_rb.input_coords.len(), spec);
    for (k, pairs) in saved_rb.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let gathered = input.features.select(Axis(0), &pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        let prod = gathered.dot(&spec.weights.slice(s![k, .., ..]));
        for (row, &(i, _)) in prod.outer_iter().zip(pairs) {
            let mut dst = out.row_mut(i);
            dst += &row;
        }
    }
    SparseTensor::new(
        saved_rb.input_coords.clone(),
        out,
        saved_rb.input_grid_dims,
        input.stride / saved_rb.conv_stride,
    )
}

/// Channel-wise concatenation `[decoder | encoder]` over identical sites.
pub fn concat_skip(decoder: &SparseTensor, encoder: &SparseTensor) -> Result<SparseTensor> {
    if decoder.stride != encoder.stride || decoder.grid_dims != encoder.grid_dims {
        return Err(Error::internal(format!(
            "skip connection joins stride {} with stride {}",
            decoder.stride, encoder.stride
        )));
    }
    if decoder.num_active() != encoder.num_active() {
        return Err(Error::internal(format!(
            "skip connection joins {} sites with {} sites",
            decoder.num_active(),
            encoder.num_active()
        )));
    }
    if let Some(row) = decoder.coords.iter().zip(&encoder.coords).position(|(a, b)| a != b) {
        return Err(Error::internal(format!(
            "skip connection coordinates differ at row {row}: {:?} vs {:?}",
            decoder.coords[row], encoder.coords[row]
        )));
    }
    let features = concatenate(Axis(1), &[decoder.features.view(), encoder.features.view()])
        .map_err(|e| Error::internal(e.to_string()))?;
    decoder.with_features(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{build_rulebook, Coord};
    use ndarray::array;

    fn single(coord: Coord, feat: Vec<f64>, grid: [usize; 3]) -> SparseTensor {
        let c = feat.len();
        SparseTensor::new(vec![coord], Array2::from_shape_vec((1, c), feat).unwrap(), grid, 1).unwrap()
    }

    #[test]
    fn identity_point_kernel() {
        let t = SparseTensor::new(vec![[0, 0, 0], [2, 1, 0]], array![[1.0, -2.0], [3.5, 0.25]], [4, 4, 4], 1).unwrap();
        let mut spec = ConvSpec::zeros([1, 1, 1], 1, 2, 2, ConvMode::Submanifold);
        spec.weights.slice_mut(s![0, .., ..]).assign(&Array2::eye(2));
        let rb = build_rulebook(&t, &spec).unwrap();
        let out = sparse_conv(&t, &spec, &rb).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn zero_features_stay_zero() {
        let t = SparseTensor::new(vec![[1, 1, 1], [2, 1, 1]], Array2::zeros((2, 3)), [4, 4, 4], 1).unwrap();
        let mut spec = ConvSpec::zeros([3, 3, 3], 2, 3, 2, ConvMode::Strided);
        spec.weights.fill(0.7);
        spec.bias = Some(Array1::zeros(2));
        let rb = build_rulebook(&t, &spec).unwrap();
        let out = sparse_conv(&t, &spec, &rb).unwrap();
        assert!(out.features.iter().all(|&v| v == 0.0));
        assert_eq!(out.stride, 2);
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let t = single([0, 0, 0], vec![1.0], [2, 2, 2]);
        let spec = ConvSpec::zeros([3, 3, 3], 1, 2, 2, ConvMode::Submanifold);
        let rb = build_rulebook(&t, &spec).unwrap();
        assert!(matches!(sparse_conv(&t, &spec, &rb), Err(Error::Config(_))));
    }

    #[test]
    fn down_up_restores_active_set() {
        let t = SparseTensor::new(
            vec![[0, 0, 0], [1, 0, 0], [3, 3, 2], [5, 2, 7]],
            Array2::ones((4, 1)),
            [8, 8, 8],
            1,
        )
        .unwrap();
        let down = ConvSpec::zeros([3, 3, 3], 2, 1, 1, ConvMode::Strided);
        let rb = build_rulebook(&t, &down).unwrap();
        let mid = sparse_conv(&t, &down, &rb).unwrap();
        let up = ConvSpec::zeros([3, 3, 3], 2, 1, 1, ConvMode::Inverse);
        let back = inverse_conv(&mid, &up, &rb).unwrap();
        assert_eq!(back.coords, t.coords);
        assert_eq!(back.stride, 1);
        assert_eq!(back.grid_dims, t.grid_dims);
    }

    #[test]
    fn single_site_two_hop_product() {
        // (2,2,2) downsampled to anchor (1,1,1) through the center offset only
        let t = single([2, 2, 2], vec![3.0], [8, 8, 8]);
        let mut down = ConvSpec::zeros([3, 3, 3], 2, 1, 1, ConvMode::Strided);
        down.weights[[13, 0, 0]] = 2.0;
        down.weights[[0, 0, 0]] = 100.0; // never used: (2,2,2) = 2*o + (-1,-1,-1) has no integer o
        let rb = build_rulebook(&t, &down).unwrap();
        assert_eq!(rb.output_coords, vec![[1, 1, 1]]);
        let mid = sparse_conv(&t, &down, &rb).unwrap();
        assert_eq!(mid.features[[0, 0]], 6.0);
        let mut up = ConvSpec::zeros([3, 3, 3], 2, 1, 1, ConvMode::Inverse);
        up.weights[[13, 0, 0]] = 0.5;
        let back = inverse_conv(&mid, &up, &rb).unwrap();
        assert_eq!(back.features[[0, 0]], 3.0 * 2.0 * 0.5);
    }

    #[test]
    fn inverse_of_empty_is_empty() {
        let t = SparseTensor::empty(2, [8, 8, 8], 1);
        let down = ConvSpec::zeros([3, 3, 3], 2, 2, 2, ConvMode::Strided);
        let rb = build_rulebook(&t, &down).unwrap();
        let mid = sparse_conv(&t, &down, &rb).unwrap();
        assert_eq!(mid.num_active(), 0);
        let back = inverse_conv(&mid, &ConvSpec::zeros([3, 3, 3], 2, 2, 2, ConvMode::Inverse), &rb).unwrap();
        assert_eq!(back.num_active(), 0);
    }

    #[test]
    fn inverse_rejects_foreign_sites() {
        let t = single([2, 2, 2], vec![1.0], [8, 8, 8]);
        let down = ConvSpec::zeros([3, 3, 3], 2, 1, 1, ConvMode::Strided);
        let rb = build_rulebook(&t, &down).unwrap();
        let other = SparseTensor::new(vec![[0, 0, 0]], array![[1.0]], [4, 4, 4], 2).unwrap();
        let up = ConvSpec::zeros([3, 3, 3], 2, 1, 1, ConvMode::Inverse);
        assert!(matches!(inverse_conv(&other, &up, &rb), Err(Error::Internal(_))));
    }

    #[test]
    fn concat_and_split() {
        let a = SparseTensor::new(vec![[0, 0, 0], [1, 0, 0]], array![[1.0, 2.0], [3.0, 4.0]], [2, 2, 2], 1).unwrap();
        let b = a.with_features(array![[5.0, 6.0, 7.0], [8.0, 9.0, 10.0]]).unwrap();
        let c = concat_skip(&a, &b).unwrap();
        assert_eq!(c.channels(), 5);
        assert_eq!(c.features.row(1).to_vec(), vec![3.0, 4.0, 8.0, 9.0, 10.0]);
        assert_eq!(c.slice_channels(0, 2), a);
        assert_eq!(c.slice_channels(2, 5), b);

        let empty = a.with_features(Array2::zeros((2, 0))).unwrap();
        assert_eq!(concat_skip(&a, &empty).unwrap(), a);
    }

    #[test]
    fn concat_mismatch_names_row() {
        let a = SparseTensor::new(vec![[0, 0, 0], [1, 0, 0]], Array2::zeros((2, 1)), [2, 2, 2], 1).unwrap();
        let b = SparseTensor::new(vec![[0, 0, 0], [0, 1, 0]], Array2::zeros((2, 1)), [2, 2, 2], 1).unwrap();
        let err = concat_skip(&a, &b).unwrap_err();
        assert!(matches!(err, Error::Internal(ref m) if m.contains("row 1")));
    }
}
