//! Dense `C x H x W` planes and the 2D layers used on them, plus a direct
//! dense 3D convolution used as a reference for the sparse engine.

use ndarray::{concatenate, s, Array1, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::weights::WeightStore;

/// Bird's-eye-view feature plane, `[channel, row, col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBev {
    pub data: Array3<f64>,
}

impl DenseBev {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { data: Array3::zeros((channels, height, width)) }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// 2D convolution layer, weights `[out, in, k, k]`, zero padding `k / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Option<Array1<f64>>,
    pub stride: usize,
    pub relu: bool,
}

impl Conv2d {
    pub fn new(weight: Array4<f64>, bias: Option<Array1<f64>>, stride: usize, relu: bool) -> Result<Self> {
        let (out, _, kh, kw) = weight.dim();
        if kh != kw || kh % 2 == 0 {
            return Err(Error::config(format!("2D kernel {kh}x{kw} must be square and odd")));
        }
        if stride == 0 {
            return Err(Error::config("2D stride must be positive"));
        }
        if let Some(b) = &bias {
            if b.len() != out {
                return Err(Error::config(format!("bias has {} entries, expected {out}", b.len())));
            }
        }
        Ok(Self { weight, bias, stride, relu })
    }

    /// `k x k` identity mapping `channels -> channels` (center tap 1).
    pub fn identity(channels: usize, k: usize) -> Self {
        let mut w = Array4::zeros((channels, channels, k, k));
        for c in 0..channels {
            w[[c, c, k / 2, k / 2]] = 1.0;
        }
        Self { weight: w, bias: None, stride: 1, relu: false }
    }

    pub fn from_store(ws: &WeightStore, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize, relu: bool) -> Result<Self> {
        let w = ws.get_shaped(&format!("{prefix}.weight"), &[cout, cin, k, k])?;
        let b = ws.get_shaped(&format!("{prefix}.bias"), &[cout])?;
        let weight = Array4::from_shape_vec((cout, cin, k, k), w.to_f64()).map_err(|e| Error::internal(e.to_string()))?;
        Self::new(weight, Some(Array1::from(b.to_f64())), stride, relu)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn forward(&self, x: &DenseBev) -> Result<DenseBev> {
        conv2d(x, self)
    }
}

/// Cross-correlation with zero padding; output is `ceil(H / stride) x ceil(W / stride)`.
pub fn conv2d(x: &DenseBev, layer: &Conv2d) -> Result<DenseBev> {
    let (cout, cin, k, _) = layer.weight.dim();
    if cin != x.channels() {
        return Err(Error::config(format!("conv2d expects {cin} input channels, got {}", x.channels())));
    }
    let (h, w) = (x.height(), x.width());
    let stride = layer.stride;
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let r = (k / 2) as isize;
    let mut out = Array3::zeros((cout, oh, ow));
    if let Some(b) = &layer.bias {
        for (mut plane, &bv) in out.outer_iter_mut().zip(b.iter()) {
            plane.fill(bv);
        }
    }
    // out[:, oy, ox] += W[:, :, ky, kx] . x[:, iy, ix] per tap
    for ky in 0..k {
        for kx in 0..k {
            let tap = layer.weight.slice(s![.., .., ky, kx]);
            for oy in 0..oh {
                let iy = (oy * stride) as isize + ky as isize - r;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for ox in 0..ow {
                    let ix = (ox * stride) as isize + kx as isize - r;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let column = x.data.slice(s![.., iy as usize, ix as usize]);
                    let contrib = tap.dot(&column);
                    let mut dst = out.slice_mut(s![.., oy, ox]);
                    dst += &contrib;
                }
            }
        }
    }
    if layer.relu {
        out.mapv_inplace(|v| v.max(0.0));
    }
    Ok(DenseBev::new(out))
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &DenseBev) -> DenseBev {
    let (c, h, w) = x.data.dim();
    DenseBev::new(Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, y, xx)| x.data[[ch, y / 2, xx / 2]]))
}

pub fn concat_channels(parts: &[&DenseBev]) -> Result<DenseBev> {
    let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
    concatenate(Axis(0), &views)
        .map(DenseBev::new)
        .map_err(|e| Error::internal(format!("channel concat of mismatched planes: {e}")))
}

/// Keeps the top-left `height x width` window.
pub fn crop(x: &DenseBev, height: usize, width: usize) -> DenseBev {
    DenseBev::new(x.data.slice(s![.., ..height, ..width]).to_owned())
}

/// Reference dense 3D cross-correlation.
///
/// `volume` is `[c, z, y, x]`; `weights` is `[kvol, in, out]` with taps
/// numbered `((dz + rz) * ky + (dy + ry)) * kx + (dx + rx)`. Zero padding of
/// `k / 2`, no bias. Written as plain nested loops on purpose: it is the
/// yardstick the sparse engine is measured against.
pub fn dense_conv3d_oracle(volume: &Array4<f64>, weights: &ndarray::Array3<f64>, kernel: [usize; 3], stride: usize) -> Array4<f64> {
    let (cin, dz, dy, dx) = volume.dim();
    let cout = weights.dim().2;
    let [kx, ky, kz] = kernel;
    let (rx, ry, rz) = ((kx / 2) as isize, (ky / 2) as isize, (kz / 2) as isize);
    let (oz, oy, ox) = (dz.div_ceil(stride), dy.div_ceil(stride), dx.div_ceil(stride));
    let mut out = Array4::zeros((cout, oz, oy, ox));
    for co in 0..cout {
        for z in 0..oz {
            for y in 0..oy {
                for x in 0..ox {
                    let mut acc = 0.0;
                    for tz in 0..kz {
                        for ty in 0..ky {
                            for tx in 0..kx {
                                let iz = (z * stride) as isize + tz as isize - rz;
                                let iy = (y * stride) as isize + ty as isize - ry;
                                let ix = (x * stride) as isize + tx as isize - rx;
                                if iz < 0 || iy < 0 || ix < 0 || iz >= dz as isize || iy >= dy as isize || ix >= dx as isize {
                                    continue;
                                }
                                let tap = (tz * ky + ty) * kx + tx;
                                for ci in 0..cin {
                                    acc += volume[[ci, iz as usize, iy as usize, ix as usize]] * weights[[tap, ci, co]];
                                }
                            }
                        }
                    }
                    out[[co, z, y, x]] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3 as A3;
    use proptest::prelude::*;

    fn plane(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> DenseBev {
        DenseBev::new(A3::from_shape_fn((c, h, w), |(a, b, d)| f(a, b, d)))
    }

    #[test]
    fn one_by_one_identity() {
        let x = plane(3, 5, 4, |c, y, xx| (c * 100 + y * 10 + xx) as f64 - 50.0);
        let out = Conv2d::identity(3, 1).forward(&x).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn averaging_kernel_on_one_hot() {
        let x = plane(1, 7, 7, |_, y, xx| if (y, xx) == (3, 3) { 1.0 } else { 0.0 });
        let layer = Conv2d::new(Array4::from_elem((1, 1, 3, 3), 1.0 / 9.0), None, 1, false).unwrap();
        let out = layer.forward(&x).unwrap();
        for y in 0..7 {
            for xx in 0..7 {
                let expected = if (2..=4).contains(&y) && (2..=4).contains(&xx) { 1.0 / 9.0 } else { 0.0 };
                assert_eq!(out.data[[0, y, xx]], expected);
            }
        }
    }

    #[test]
    fn stride_two_halves_shape() {
        let x = DenseBev::zeros(2, 8, 8);
        let layer = Conv2d::new(Array4::zeros((5, 2, 3, 3)), None, 2, true).unwrap();
        let out = layer.forward(&x).unwrap();
        assert_eq!(out.data.dim(), (5, 4, 4));
    }

    #[test]
    fn channel_mismatch() {
        let x = DenseBev::zeros(2, 4, 4);
        let layer = Conv2d::identity(3, 3);
        assert!(matches!(layer.forward(&x), Err(Error::Config(_))));
    }

    #[test]
    fn upsample_shapes_and_values() {
        let x = plane(1, 1, 1, |_, _, _| 2.5);
        assert_eq!(upsample2x(&x).data, A3::from_elem((1, 2, 2), 2.5));
        let y = plane(2, 4, 4, |c, a, b| (c + a * 4 + b) as f64);
        let up = upsample2x(&y);
        assert_eq!(up.data.dim(), (2, 8, 8));
        let back = up.data.slice(s![.., ..;2, ..;2]).to_owned();
        assert_eq!(back, y.data);
    }

    #[test]
    fn oracle_identity_and_imprint() {
        let mut vol = Array4::zeros((1, 5, 5, 5));
        vol[[0, 2, 2, 2]] = 1.0;
        let mut id = ndarray::Array3::zeros((1, 1, 1));
        id[[0, 0, 0]] = 1.0;
        assert_eq!(dense_conv3d_oracle(&vol, &id, [1, 1, 1], 1), vol);

        let w = ndarray::Array3::from_shape_fn((27, 1, 1), |(t, _, _)| t as f64 + 1.0);
        let out = dense_conv3d_oracle(&vol, &w, [3, 3, 3], 1);
        // out[z,y,x] reads in[z+dz, y+dy, x+dx]; the impulse at 2 lands on tap (2-z+1, 2-y+1, 2-x+1)
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    let tap = ((3 - z) * 3 + (3 - y)) * 3 + (3 - x);
                    assert_eq!(out[[0, z, y, x]], tap as f64 + 1.0);
                }
            }
        }
        assert_eq!(out.iter().filter(|v| **v != 0.0).count(), 27);
        assert_eq!(dense_conv3d_oracle(&vol, &w, [3, 3, 3], 2).dim(), (1, 3, 3, 3));
    }

    proptest! {
        #[test]
        fn conv2d_is_linear(seed in 0u64..500, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let f = |s: u64| move |c: usize, y: usize, x: usize| (((c * 31 + y * 7 + x * 3) as u64 * 2654435761 + s) % 1000) as f64 / 500.0 - 1.0;
            let x = plane(2, 6, 5, f(seed));
            let y = plane(2, 6, 5, f(seed + 17));
            let w = Array4::from_shape_fn((3, 2, 3, 3), |(o, i, p, q)| ((o * 18 + i * 9 + p * 3 + q) as f64 * 0.37).sin());
            let layer = Conv2d::new(w, None, 1, false).unwrap();
            let mixed = DenseBev::new(&x.data * a + &y.data * b);
            let lhs = layer.forward(&mixed).unwrap().data;
            let rhs = layer.forward(&x).unwrap().data * a + layer.forward(&y).unwrap().data * b;
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() <= 1e-6);
            }
        }

        #[test]
        fn conv2d_translation_equivariant_inside(shift in 1usize..3) {
            let x = plane(1, 12, 12, |_, y, xx| ((y * 5 + xx * 11) % 7) as f64);
            let shifted = plane(1, 12, 12, |_, y, xx| if xx >= shift { x.data[[0, y, xx - shift]] } else { 0.0 });
            let w = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, p, q)| (p * 3 + q) as f64 - 4.0);
            let layer = Conv2d::new(w, None, 1, false).unwrap();
            let a = layer.forward(&x).unwrap();
            let b = layer.forward(&shifted).unwrap();
            for y in 3..9 {
                for xx in 3..9 {
                    prop_assert!((b.data[[0, y, xx + shift]] - a.data[[0, y, xx]]).abs() < 1e-12);
                }
            }
        }
    }
}
