//! Task heads on the decoder voxels and on the BEV plane, plus detection
//! target rendering and peak-based box decoding.

use std::f64::consts::PI;

use ndarray::{s, Array2, Array3};

use crate::dense2d::{Conv2d, DenseBev};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Linear};
use crate::sparse::SparseTensor;
use crate::weights::WeightStore;

/// Regression channels: `dx, dy, z, log l, log w, log h, sin yaw, cos yaw`.
pub const REG_CHANNELS: usize = 8;
/// Exponent of the IoU term in the rectified box score.
pub const IOU_RECTIFY_ALPHA: f64 = 0.5;
/// Minimum overlap used to size the heatmap Gaussians.
pub const GAUSSIAN_MIN_OVERLAP: f64 = 0.1;
pub const GAUSSIAN_MIN_RADIUS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    /// Length, width, height in meters.
    pub dims: [f64; 3],
    /// Heading in `(-pi, pi]`.
    pub yaw: f64,
    /// Index into the thing classes.
    pub class_id: usize,
    pub score: f64,
}

impl Box3D {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::input(format!("box dims {:?} must be positive", self.dims)));
        }
        if !(self.yaw > -PI && self.yaw <= PI) {
            return Err(Error::input(format!("box yaw {} outside (-pi, pi]", self.yaw)));
        }
        if !self.score.is_finite() || self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::input("box has non-finite fields"));
        }
        Ok(())
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut y = yaw.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    if y <= -PI {
        y += 2.0 * PI;
    }
    y
}

/// Metric placement of the BEV plane: column `c` covers
/// `[x_min + c * cell_x, x_min + (c + 1) * cell_x)`, rows likewise along y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGeometry {
    pub x_min: f64,
    pub y_min: f64,
    pub cell_x: f64,
    pub cell_y: f64,
    pub width: usize,
    pub height: usize,
}

impl BevGeometry {
    /// Continuous `(col, row)` position in cell units.
    pub fn to_cells(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x_min) / self.cell_x, (y - self.y_min) / self.cell_y)
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (cx, cy) = self.to_cells(x, y);
        let (col, row) = (cx.floor(), cy.floor());
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }
}

/// Per-voxel linear classifier producing `M x K` logits.
pub fn seg_head(decoder_out: &SparseTensor, layer: &Linear) -> Result<SparseTensor> {
    if decoder_out.stride != 1 {
        return Err(Error::internal(format!("segmentation head needs stride 1, got {}", decoder_out.stride)));
    }
    let logits = layer.forward(decoder_out.features.view())?;
    decoder_out.with_features(logits)
}

/// 1x1 convolution to `K` class logits per BEV cell.
pub fn bev_seg_head(bev: &DenseBev, layer: &Conv2d) -> Result<DenseBev> {
    if layer.kernel() != 1 {
        return Err(Error::config("BEV segmentation head must be 1x1"));
    }
    layer.forward(bev)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetHead {
    pub heatmap: Conv2d,
    pub reg: Conv2d,
    pub iou: Conv2d,
}

impl DetHead {
    pub fn from_store(ws: &WeightStore, in_channels: usize, num_thing: usize) -> Result<Self> {
        Ok(Self {
            heatmap: Conv2d::from_store(ws, "det.hm", in_channels, num_thing, 1, 1, false)?,
            reg: Conv2d::from_store(ws, "det.reg", in_channels, REG_CHANNELS, 1, 1, false)?,
            iou: Conv2d::from_store(ws, "det.iou", in_channels, 1, 1, 1, false)?,
        })
    }

    pub fn weight_shapes(in_channels: usize, num_thing: usize) -> Vec<(String, Vec<usize>)> {
        [("det.hm", num_thing), ("det.reg", REG_CHANNELS), ("det.iou", 1)]
            .into_iter()
            .flat_map(|(n, c)| [(format!("{n}.weight"), vec![c, in_channels, 1, 1]), (format!("{n}.bias"), vec![c])])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetOutputs {
    /// Per-class center heatmap after the logistic function.
    pub heatmap: Array3<f64>,
    pub reg: Array3<f64>,
    /// Raw IoU-branch output; clamped to `[0, 1]` when rectifying scores.
    pub iou: Array2<f64>,
}

pub fn det_head(bev: &DenseBev, head: &DetHead) -> Result<DetOutputs> {
    if head.reg.out_channels() != REG_CHANNELS || head.iou.out_channels() != 1 {
        return Err(Error::config("detection head needs 8 regression channels and 1 IoU channel"));
    }
    let heatmap = head.heatmap.forward(bev)?.data.mapv(sigmoid);
    let reg = head.reg.forward(bev)?.data;
    let iou = head.iou.forward(bev)?.data.index_axis_move(ndarray::Axis(0), 0);
    Ok(DetOutputs { heatmap, reg, iou })
}

/// Gaussian radius (in cells) keeping at least `min_overlap` IoU for a
/// `height x width` box whose corners shift by the radius.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let b1 = height + width;
    let c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;

    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - min_overlap) * width * height;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (height + width);
    let c3 = (min_overlap - 1.0) * width * height;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;

    r1.min(r2).min(r3)
}

/// Splats `exp(-d^2 / 2 sigma^2)` with `sigma = (2r + 1) / 6` around
/// `(row, col)`, keeping the cellwise maximum.
pub fn draw_gaussian(plane: &mut ndarray::ArrayViewMut2<f64>, row: usize, col: usize, radius: usize) {
    let (h, w) = plane.dim();
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let r = radius as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let (y, x) = (row as isize + dy, col as isize + dx);
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                continue;
            }
            let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            let cell = &mut plane[[y as usize, x as usize]];
            if g > *cell {
                *cell = g;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegTarget {
    pub box_index: usize,
    pub class_id: usize,
    pub row: usize,
    pub col: usize,
    pub values: [f64; REG_CHANNELS],
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetTargets {
    pub heatmap: Array3<f64>,
    pub entries: Vec<RegTarget>,
    /// Boxes whose center fell outside the BEV plane.
    pub skipped: usize,
}

/// Regression values of a box relative to BEV cell `(row, col)`.
pub fn encode_box(b: &Box3D, geom: &BevGeometry, row: usize, col: usize) -> [f64; REG_CHANNELS] {
    let (cx, cy) = geom.to_cells(b.center[0], b.center[1]);
    [
        cx - col as f64,
        cy - row as f64,
        b.center[2],
        b.dims[0].ln(),
        b.dims[1].ln(),
        b.dims[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

pub fn render_targets(gt_boxes: &[Box3D], geom: &BevGeometry, num_thing: usize) -> Result<DetTargets> {
    let mut heatmap = Array3::zeros((num_thing, geom.height, geom.width));
    let mut entries = Vec::new();
    let mut skipped = 0;
    for (i, b) in gt_boxes.iter().enumerate() {
        b.validate()?;
        if b.class_id >= num_thing {
            return Err(Error::input(format!("box {i} has thing class {} >= {num_thing}", b.class_id)));
        }
        let Some((row, col)) = geom.cell_of(b.center[0], b.center[1]) else {
            skipped += 1;
            continue;
        };
        let radius = gaussian_radius(b.dims[0] / geom.cell_x, b.dims[1] / geom.cell_y, GAUSSIAN_MIN_OVERLAP);
        let radius = (radius.max(0.0) as usize).max(GAUSSIAN_MIN_RADIUS);
        draw_gaussian(&mut heatmap.slice_mut(s![b.class_id, .., ..]), row, col, radius);
        entries.push(RegTarget {
            box_index: i,
            class_id: b.class_id,
            row,
            col,
            values: encode_box(b, geom, row, col),
            iou: 1.0,
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} ground-truth boxes outside the BEV range were skipped");
    }
    Ok(DetTargets { heatmap, entries, skipped })
}

/// Box reconstructed from the regression channels at a BEV cell.
pub fn decode_cell(out: &DetOutputs, geom: &BevGeometry, class_id: usize, row: usize, col: usize, score: f64) -> Box3D {
    let r = |c: usize| out.reg[[c, row, col]];
    Box3D {
        center: [
            geom.x_min + (col as f64 + r(0)) * geom.cell_x,
            geom.y_min + (row as f64 + r(1)) * geom.cell_y,
            r(2),
        ],
        dims: [r(3).exp(), r(4).exp(), r(5).exp()],
        yaw: normalize_yaw(r(6).atan2(r(7))),
        class_id,
        score,
    }
}

/// Center peaks with plateau breaking: a cell is a peak when it beats every
/// neighbor of its 3x3 window, ties going to the lowest `(row, col)`.
fn is_peak(plane: &ndarray::ArrayView2<f64>, row: usize, col: usize) -> bool {
    let (h, w) = plane.dim();
    let v = plane[[row, col]];
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            if dy == 0 && dx == 0 {
                continue;
            }
            let (y, x) = (row as isize + dy, col as isize + dx);
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                continue;
            }
            let n = plane[[y as usize, x as usize]];
            if n > v || (n == v && (y as usize, x as usize) < (row, col)) {
                return false;
            }
        }
    }
    true
}

/// Peaks above `score_thresh`, rescored as `hm^(1 - a) * iou^a` and sorted
/// by that score (descending, ties by row, col, class); at most `max_boxes`.
pub fn decode_boxes(out: &DetOutputs, geom: &BevGeometry, max_boxes: usize, score_thresh: f64) -> Vec<Box3D> {
    let (k, h, w) = out.heatmap.dim();
    let mut cands: Vec<(f64, usize, usize, usize)> = Vec::new();
    for cls in 0..k {
        let plane = out.heatmap.slice(s![cls, .., ..]);
        for row in 0..h {
            for col in 0..w {
                let v = plane[[row, col]];
                if v > score_thresh && is_peak(&plane, row, col) {
                    let iou = out.iou[[row, col]].clamp(0.0, 1.0);
                    let score = v.powf(1.0 - IOU_RECTIFY_ALPHA) * iou.powf(IOU_RECTIFY_ALPHA);
                    cands.push((score, row, col, cls));
                }
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    cands
        .into_iter()
        .take(max_boxes)
        .map(|(score, row, col, cls)| decode_cell(out, geom, cls, row, col, score))
        .collect()
}

/// IoU of two boxes after aligning the first to the second's heading.
pub fn yaw_agnostic_iou(a: &Box3D, b: &Box3D) -> f64 {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (a.center[0] - b.center[0], a.center[1] - b.center[1]);
    let local = [c * dx + s * dy, -s * dx + c * dy, a.center[2] - b.center[2]];
    let mut inter = 1.0;
    for axis in 0..3 {
        let lo = (local[axis] - a.dims[axis] / 2.0).max(-b.dims[axis] / 2.0);
        let hi = (local[axis] + a.dims[axis] / 2.0).min(b.dims[axis] / 2.0);
        inter *= (hi - lo).max(0.0);
    }
    let va: f64 = a.dims.iter().product();
    let vb: f64 = b.dims.iter().product();
    inter / (va + vb - inter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array4};

    fn geom() -> BevGeometry {
        BevGeometry { x_min: -8.0, y_min: -8.0, cell_x: 1.0, cell_y: 1.0, width: 16, height: 16 }
    }

    fn gt(x: f64, y: f64, yaw: f64, class_id: usize) -> Box3D {
        Box3D { center: [x, y, 0.3], dims: [4.2, 1.9, 1.6], yaw, class_id, score: 1.0 }
    }

    fn outputs_from_targets(t: &DetTargets, g: &BevGeometry) -> DetOutputs {
        let mut reg = Array3::zeros((REG_CHANNELS, g.height, g.width));
        for e in &t.entries {
            for (c, v) in e.values.iter().enumerate() {
                reg[[c, e.row, e.col]] = *v;
            }
        }
        DetOutputs { heatmap: t.heatmap.clone(), reg, iou: Array2::ones((g.height, g.width)) }
    }

    #[test]
    fn seg_head_bias_picks_class() {
        let t = SparseTensor::new(vec![[0, 0, 0], [1, 1, 1]], array![[0.3, -1.0], [2.0, 5.0]], [2, 2, 2], 1).unwrap();
        let mut bias = Array1::zeros(5);
        bias[3] = 1.0;
        let layer = Linear::new(Array2::zeros((2, 5)), bias).unwrap();
        let out = seg_head(&t, &layer).unwrap();
        for r in 0..2 {
            assert_eq!(crate::nn::argmax(out.features.row(r)), 3);
        }
    }

    #[test]
    fn seg_head_hand_logits_and_empty() {
        let t = SparseTensor::new(vec![[0, 0, 0]], array![[1.0, 2.0]], [1, 1, 1], 1).unwrap();
        let layer = Linear::new(array![[1.0, 0.5, -1.0], [2.0, 0.0, 3.0]], array![0.1, 0.2, 0.3]).unwrap();
        let out = seg_head(&t, &layer).unwrap();
        assert_eq!(out.features.row(0).to_vec(), vec![5.1, 0.7, 5.3]);
        let e = SparseTensor::empty(2, [1, 1, 1], 1);
        assert_eq!(seg_head(&e, &layer).unwrap().features.dim(), (0, 3));
    }

    #[test]
    fn bev_seg_head_hand_case() {
        let bev = DenseBev::new(Array3::from_shape_fn((2, 2, 2), |(c, y, x)| (c + y + x) as f64));
        let layer = Conv2d::new(Array4::from_shape_vec((1, 2, 1, 1), vec![2.0, -1.0]).unwrap(), Some(array![0.5]), 1, false).unwrap();
        let out = bev_seg_head(&bev, &layer).unwrap();
        // 2*(y+x) - (1+y+x) + 0.5 = y + x - 0.5
        assert_eq!(out.data[[0, 1, 1]], 1.5);
        assert_eq!(out.data[[0, 0, 0]], -0.5);
    }

    #[test]
    fn det_head_zero_weights() {
        let bev = DenseBev::new(Array3::from_elem((4, 16, 16), 0.7));
        let mut ws = WeightStore::new();
        for (n, d) in DetHead::weight_shapes(4, 3) {
            ws.insert(n, crate::weights::Tensor::zeros(d));
        }
        let head = DetHead::from_store(&ws, 4, 3).unwrap();
        let out = det_head(&bev, &head).unwrap();
        assert_eq!(out.heatmap.dim(), (3, 16, 16));
        assert_eq!(out.reg.dim(), (8, 16, 16));
        assert_eq!(out.iou.dim(), (16, 16));
        assert!(out.heatmap.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn det_head_hand_case() {
        let bev = DenseBev::new(Array3::from_elem((1, 1, 1), 2.0));
        let conv = |c: usize, w: f64, b: f64| Conv2d::new(Array4::from_elem((c, 1, 1, 1), w), Some(Array1::from_elem(c, b)), 1, false).unwrap();
        let head = DetHead { heatmap: conv(1, 0.5, -1.0), reg: conv(8, 1.0, 0.0), iou: conv(1, 0.25, 0.0) };
        let out = det_head(&bev, &head).unwrap();
        assert_eq!(out.heatmap[[0, 0, 0]], 0.5); // sigmoid(0)
        assert_eq!(out.reg[[7, 0, 0]], 2.0);
        assert_eq!(out.iou[[0, 0]], 0.5);
    }

    #[test]
    fn single_box_unit_peak() {
        let t = render_targets(&[gt(0.5, 0.5, 0.3, 1)], &geom(), 3).unwrap();
        let peak = t.heatmap.iter().cloned().fold(0.0, f64::max);
        assert_eq!(peak, 1.0);
        assert_eq!(t.heatmap[[1, 8, 8]], 1.0);
        assert!(t.heatmap.slice(s![0, .., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_distant_peaks_and_overlap_max() {
        let g = geom();
        let t = render_targets(&[gt(-6.5, -6.5, 0.0, 0), gt(6.5, 6.5, 0.0, 0)], &g, 1).unwrap();
        assert_eq!(t.heatmap.iter().filter(|&&v| v == 1.0).count(), 2);

        let a = render_targets(&[gt(0.5, 0.5, 0.0, 0)], &g, 1).unwrap();
        let b = render_targets(&[gt(2.5, 0.5, 0.0, 0)], &g, 1).unwrap();
        let both = render_targets(&[gt(0.5, 0.5, 0.0, 0), gt(2.5, 0.5, 0.0, 0)], &g, 1).unwrap();
        for ((x, y), z) in a.heatmap.iter().zip(b.heatmap.iter()).zip(both.heatmap.iter()) {
            assert_eq!(*z, x.max(*y));
        }
    }

    #[test]
    fn out_of_range_box_skipped() {
        let t = render_targets(&[gt(100.0, 0.0, 0.0, 0)], &geom(), 1).unwrap();
        assert_eq!(t.skipped, 1);
        assert!(t.entries.is_empty());
    }

    #[test]
    fn gaussian_radius_matches_reference_value() {
        // min over three quadratic roots, hand-evaluated for a 4 x 2 box at overlap 0.1
        let r = gaussian_radius(4.0, 2.0, 0.1);
        let r1 = (6.0 + (36.0f64 - 4.0 * 8.0 * 0.9 / 1.1).sqrt()) / 2.0;
        let r2 = (12.0 + (144.0f64 - 16.0 * 0.9 * 8.0).sqrt()) / 2.0;
        let r3 = (-1.2 + (1.44f64 + 4.0 * 0.4 * 0.9 * 8.0).sqrt()) / 2.0;
        assert!((r - r1.min(r2).min(r3)).abs() < 1e-12);
    }

    #[test]
    fn render_decode_round_trip() {
        let g = geom();
        let b = gt(1.37, -2.81, -2.2, 2);
        let t = render_targets(&[b], &g, 3).unwrap();
        let out = outputs_from_targets(&t, &g);
        let dec = decode_boxes(&out, &g, 10, 0.1);
        assert_eq!(dec.len(), 1);
        let d = dec[0];
        assert!((d.center[0] - b.center[0]).abs() < 0.5 * g.cell_x);
        assert!((d.center[1] - b.center[1]).abs() < 0.5 * g.cell_y);
        assert!((d.yaw - b.yaw).abs() < 1e-6);
        assert_eq!(d.class_id, 2);
        for a in 0..3 {
            assert!((d.dims[a] - b.dims[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_heatmap_decodes_nothing() {
        let out = DetOutputs { heatmap: Array3::zeros((2, 8, 8)), reg: Array3::zeros((8, 8, 8)), iou: Array2::ones((8, 8)) };
        assert!(decode_boxes(&out, &geom(), 5, 0.1).is_empty());
    }

    #[test]
    fn equal_peaks_pick_lowest_row_col() {
        let mut hm = Array3::zeros((1, 8, 8));
        hm[[0, 5, 1]] = 0.9;
        hm[[0, 2, 6]] = 0.9;
        let out = DetOutputs { heatmap: hm, reg: Array3::zeros((8, 8, 8)), iou: Array2::ones((8, 8)) };
        let d = decode_boxes(&out, &geom(), 1, 0.1);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].center[1], -8.0 + 2.0);
        assert_eq!(d[0].center[0], -8.0 + 6.0);
    }

    #[test]
    fn plateau_yields_one_peak_and_scores_descend() {
        let mut hm = Array3::zeros((1, 8, 8));
        hm[[0, 3, 3]] = 0.6;
        hm[[0, 3, 4]] = 0.6;
        hm[[0, 6, 6]] = 0.8;
        let mut iou = Array2::ones((8, 8));
        iou[[6, 6]] = 0.25;
        let out = DetOutputs { heatmap: hm, reg: Array3::zeros((8, 8, 8)), iou };
        let d = decode_boxes(&out, &geom(), 10, 0.1);
        assert_eq!(d.len(), 2);
        assert!(d.windows(2).all(|w| w[0].score >= w[1].score));
        assert!((d[0].score - 0.6f64.sqrt()).abs() < 1e-12);
        assert!((d[1].score - (0.8f64 * 0.25).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn yaw_normalization() {
        assert_eq!(normalize_yaw(PI), PI);
        assert!((normalize_yaw(-PI) - PI).abs() < 1e-12);
        assert!((normalize_yaw(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let b = gt(1.0, 2.0, 0.7, 0);
        assert!((yaw_agnostic_iou(&b, &b) - 1.0).abs() < 1e-12);
        let far = gt(30.0, 2.0, 0.7, 0);
        assert_eq!(yaw_agnostic_iou(&far, &b), 0.0);
    }
}
