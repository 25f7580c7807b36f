//! Second stage: point-box assignment, box-local coordinates, the point
//! scorer, score fusion and panoptic instance assignment.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};

use crate::dense2d::DenseBev;
use crate::error::{Error, Result};
use crate::heads::{BevGeometry, Box3D};
use crate::nn::{argmax, relu_inplace, sigmoid, softmax, Linear};
use crate::voxelizer::PointCloud;
use crate::weights::WeightStore;

/// Box index per point; `None` is the not-in-any-box marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointBoxIndex {
    pub ind: Vec<Option<usize>>,
    pub num_boxes: usize,
}

impl PointBoxIndex {
    pub fn none(n: usize) -> Self {
        Self { ind: vec![None; n], num_boxes: 0 }
    }

    pub fn assigned(&self) -> usize {
        self.ind.iter().filter(|i| i.is_some()).count()
    }
}

/// Coordinates of `p` in the frame of `b`: translated by `-center`, rotated by `-yaw`.
pub fn to_box_frame(p: [f64; 3], b: &Box3D) -> [f64; 3] {
    let (s, c) = b.yaw.sin_cos();
    let dx = p[0] - b.center[0];
    let dy = p[1] - b.center[1];
    [c * dx + s * dy, -s * dx + c * dy, p[2] - b.center[2]]
}

pub fn point_in_box(p: [f64; 3], b: &Box3D) -> bool {
    let l = to_box_frame(p, b);
    l[0].abs() <= b.dims[0] / 2.0 && l[1].abs() <= b.dims[1] / 2.0 && l[2].abs() <= b.dims[2] / 2.0
}

/// Assigns each point the highest-scoring box containing it (ties: lowest index).
pub fn assign_points(cloud: &PointCloud, boxes: &[Box3D]) -> PointBoxIndex {
    let ind = cloud
        .points
        .iter()
        .map(|pt| {
            let p = pt.xyz();
            let mut best: Option<usize> = None;
            for (b, bx) in boxes.iter().enumerate() {
                if point_in_box(p, bx) && best.is_none_or(|k| bx.score > boxes[k].score) {
                    best = Some(b);
                }
            }
            best
        })
        .collect();
    PointBoxIndex { ind, num_boxes: boxes.len() }
}

/// Box-frame coordinates of every assigned point.
pub fn local_transform(cloud: &PointCloud, boxes: &[Box3D], index: &PointBoxIndex) -> Result<Vec<Option<[f64; 3]>>> {
    if index.ind.len() != cloud.len() {
        return Err(Error::input(format!("index has {} entries for {} points", index.ind.len(), cloud.len())));
    }
    index
        .ind
        .iter()
        .zip(&cloud.points)
        .map(|(i, pt)| match i {
            None => Ok(None),
            Some(b) => boxes
                .get(*b)
                .map(|bx| Some(to_box_frame(pt.xyz(), bx)))
                .ok_or_else(|| Error::input(format!("box index {b} out of {} boxes", boxes.len()))),
        })
        .collect()
}

/// Bilinear sample of every BEV channel at metric `(x, y)`; cell centers sit
/// at half-integer cell coordinates and samples clamp to the plane border.
pub fn bilinear_sample(bev: &DenseBev, geom: &BevGeometry, x: f64, y: f64) -> Array1<f64> {
    let (cx, cy) = geom.to_cells(x, y);
    let (h, w) = (bev.height(), bev.width());
    let u = (cx - 0.5).clamp(0.0, (w - 1) as f64);
    let v = (cy - 0.5).clamp(0.0, (h - 1) as f64);
    let (c0, r0) = (u.floor() as usize, v.floor() as usize);
    let (c1, r1) = ((c0 + 1).min(w - 1), (r0 + 1).min(h - 1));
    let (fu, fv) = (u - c0 as f64, v - r0 as f64);
    let d = &bev.data;
    Array1::from_shape_fn(bev.channels(), |ch| {
        (1.0 - fv) * ((1.0 - fu) * d[[ch, r0, c0]] + fu * d[[ch, r0, c1]])
            + fv * ((1.0 - fu) * d[[ch, r1, c0]] + fu * d[[ch, r1, c1]])
    })
}

/// `B x C` BEV features sampled at each box center.
pub fn box_features(bev: &DenseBev, geom: &BevGeometry, boxes: &[Box3D]) -> Array2<f64> {
    let mut out = Array2::zeros((boxes.len(), bev.channels()));
    for (b, bx) in boxes.iter().enumerate() {
        out.row_mut(b).assign(&bilinear_sample(bev, geom, bx.center[0], bx.center[1]));
    }
    out
}

/// Shared point MLP with max-pool aggregation per box.
#[derive(Debug, Clone)]
pub struct SecondStage {
    pub point_hidden: Linear,
    pub point_out: Linear,
    pub box_hidden: Linear,
    pub box_out: Linear,
}

impl SecondStage {
    pub fn zeros(point_channels: usize, box_channels: usize, hidden: usize, num_thing: usize) -> Self {
        Self {
            point_hidden: Linear::zeros(3 + point_channels, hidden),
            point_out: Linear::zeros(hidden, 1),
            box_hidden: Linear::zeros(hidden + box_channels, hidden),
            box_out: Linear::zeros(hidden, num_thing + 1),
        }
    }

    pub fn from_store(ws: &WeightStore, point_channels: usize, box_channels: usize, hidden: usize, num_thing: usize) -> Result<Self> {
        Ok(Self {
            point_hidden: Linear::from_store(ws, "stage2.point_hidden", 3 + point_channels, hidden)?,
            point_out: Linear::from_store(ws, "stage2.point_out", hidden, 1)?,
            box_hidden: Linear::from_store(ws, "stage2.box_hidden", hidden + box_channels, hidden)?,
            box_out: Linear::from_store(ws, "stage2.box_out", hidden, num_thing + 1)?,
        })
    }

    pub fn weight_shapes(point_channels: usize, box_channels: usize, hidden: usize, num_thing: usize) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        for (name, i, o) in [
            ("stage2.point_hidden", 3 + point_channels, hidden),
            ("stage2.point_out", hidden, 1),
            ("stage2.box_hidden", hidden + box_channels, hidden),
            ("stage2.box_out", hidden, num_thing + 1),
        ] {
            v.push((format!("{name}.weight"), vec![i, o]));
            v.push((format!("{name}.bias"), vec![o]));
        }
        v
    }

    pub fn hidden(&self) -> usize {
        self.point_hidden.out_features()
    }

    pub fn num_thing(&self) -> usize {
        self.box_out.out_features() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTwoScores {
    /// Mask score per point, `None` for unassigned points.
    pub s_point: Vec<Option<f64>>,
    /// `B x (K_thing + 1)` rows, the last column being the no-object entry.
    pub s_box: Array2<f64>,
}

/// Runs the scorer. `point_feats` holds each point's voxel decoder features
/// (`N x C_dec`), `box_feats` the sampled BEV features (`B x C_bev`).
pub fn second_stage_forward(
    local: &[Option<[f64; 3]>],
    point_feats: ArrayView2<f64>,
    box_feats: ArrayView2<f64>,
    index: &PointBoxIndex,
    net: &SecondStage,
) -> Result<StageTwoScores> {
    let n = local.len();
    if point_feats.nrows() != n || index.ind.len() != n {
        return Err(Error::input(format!(
            "{n} local points, {} feature rows, {} index entries",
            point_feats.nrows(),
            index.ind.len()
        )));
    }
    if box_feats.nrows() != index.num_boxes {
        return Err(Error::input(format!("{} box feature rows for {} boxes", box_feats.nrows(), index.num_boxes)));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| index.ind[i].is_some()).collect();
    let mut input = Array2::zeros((rows.len(), 3 + point_feats.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        let l = local[i].ok_or_else(|| Error::internal(format!("assigned point {i} has no local coordinates")))?;
        let mut row = input.row_mut(r);
        row[0] = l[0];
        row[1] = l[1];
        row[2] = l[2];
        row.slice_mut(ndarray::s![3..]).assign(&point_feats.row(i));
    }
    let mut hidden = net.point_hidden.forward(input.view())?;
    relu_inplace(&mut hidden);
    let logits = net.point_out.forward(hidden.view())?;
    let mut s_point = vec![None; n];
    for (r, &i) in rows.iter().enumerate() {
        s_point[i] = Some(sigmoid(logits[[r, 0]]));
    }

    let hdim = net.hidden();
    let mut pooled = Array2::<f64>::zeros((index.num_boxes, hdim));
    let mut seen = vec![false; index.num_boxes];
    for (r, &i) in rows.iter().enumerate() {
        let b = index.ind[i].expect("filtered");
        let mut dst = pooled.row_mut(b);
        if !seen[b] {
            dst.assign(&hidden.row(r));
            seen[b] = true;
        } else {
            dst.zip_mut_with(&hidden.row(r), |a, &v| *a = a.max(v));
        }
    }
    let box_in = concatenate(Axis(1), &[pooled.view(), box_feats.reborrow()])
        .map_err(|e| Error::internal(format!("box input concat: {e}")))?;
    let mut bh = net.box_hidden.forward(box_in.view())?;
    relu_inplace(&mut bh);
    let box_logits = net.box_out.forward(bh.view())?;
    let mut s_box = Array2::zeros(box_logits.raw_dim());
    for (mut dst, src) in s_box.rows_mut().into_iter().zip(box_logits.rows()) {
        dst.assign(&softmax(src));
    }
    Ok(StageTwoScores { s_point, s_box })
}

/// Refined thing-vs-nothing distribution per assigned point.
pub fn fuse_s2nd(s_point: &[Option<f64>], s_box: ArrayView2<f64>, index: &PointBoxIndex) -> Result<Vec<Option<Array1<f64>>>> {
    if s_point.len() != index.ind.len() {
        return Err(Error::input("S_point and index lengths differ"));
    }
    let empty = s_box.ncols().checked_sub(1).ok_or_else(|| Error::input("S_box has no columns"))?;
    index
        .ind
        .iter()
        .zip(s_point)
        .enumerate()
        .map(|(i, (b, sp))| match (b, sp) {
            (None, _) => Ok(None),
            (Some(b), Some(sp)) => {
                if *b >= s_box.nrows() {
                    return Err(Error::input(format!("box index {b} out of {} rows", s_box.nrows())));
                }
                let mut row = s_box.row(*b).to_owned() * *sp;
                row[empty] += 1.0 - sp;
                Ok(Some(row))
            }
            (Some(_), None) => Err(Error::input(format!("assigned point {i} has no mask score"))),
        })
        .collect()
}

/// Maps thing-class indices to global semantic class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThingClassMap {
    pub num_classes: usize,
    pub thing_to_global: Vec<usize>,
}

impl ThingClassMap {
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_classes];
        for (t, &g) in self.thing_to_global.iter().enumerate() {
            if g >= self.num_classes {
                return Err(Error::config(format!("thing class {t} maps to {g}, outside {} classes", self.num_classes)));
            }
            if std::mem::replace(&mut seen[g], true) {
                return Err(Error::config(format!("global class {g} mapped by two thing classes")));
            }
        }
        Ok(())
    }

    pub fn num_thing(&self) -> usize {
        self.thing_to_global.len()
    }

    pub fn thing_of(&self, global: usize) -> Option<usize> {
        self.thing_to_global.iter().position(|&g| g == global)
    }

    pub fn stuff_classes(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|&c| self.thing_of(c).is_none()).collect()
    }
}

/// Fuses first-stage and refined scores. Unassigned rows are copied as-is.
pub fn fuse_final(s1: ArrayView2<f64>, s2: &[Option<Array1<f64>>], map: &ThingClassMap) -> Result<Array2<f64>> {
    map.validate()?;
    if s1.ncols() != map.num_classes {
        return Err(Error::config(format!("S_1st has {} classes, class map {}", s1.ncols(), map.num_classes)));
    }
    if s1.nrows() != s2.len() {
        return Err(Error::input(format!("S_1st has {} rows, S_2nd {}", s1.nrows(), s2.len())));
    }
    let kt = map.num_thing();
    let mut out = s1.to_owned();
    for (i, r2) in s2.iter().enumerate() {
        let Some(r2) = r2 else { continue };
        if r2.len() != kt + 1 {
            return Err(Error::config(format!("S_2nd row has {} entries, expected {}", r2.len(), kt + 1)));
        }
        let empty = r2[kt];
        let mut row = out.row_mut(i);
        row.mapv_inplace(|v| v * empty);
        for (t, &g) in map.thing_to_global.iter().enumerate() {
            row[g] += r2[t];
        }
    }
    Ok(out)
}

/// Per-point semantic class and instance id (0 for stuff or unassigned).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PanopticLabel {
    pub semantic: Vec<u32>,
    pub instance: Vec<u32>,
}

impl PanopticLabel {
    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.semantic.len() != self.instance.len() {
            return Err(Error::input(format!(
                "{} semantic labels, {} instance ids",
                self.semantic.len(),
                self.instance.len()
            )));
        }
        Ok(())
    }
}

/// Argmax labels plus instance ids: points of box `b` whose label equals the
/// box's class share one id. Ids follow box order and skip boxes left with no
/// points, so they stay consecutive.
pub fn panoptic_assign(s_final: ArrayView2<f64>, boxes: &[Box3D], index: &PointBoxIndex, map: &ThingClassMap) -> Result<PanopticLabel> {
    if s_final.nrows() != index.ind.len() {
        return Err(Error::input("S_final and index lengths differ"));
    }
    let semantic: Vec<u32> = s_final.rows().into_iter().map(|r| argmax(r) as u32).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); boxes.len()];
    for (i, b) in index.ind.iter().enumerate() {
        if let Some(b) = *b {
            let bx = boxes.get(b).ok_or_else(|| Error::input(format!("box index {b} out of {}", boxes.len())))?;
            let g = *map
                .thing_to_global
                .get(bx.class_id)
                .ok_or_else(|| Error::config(format!("box class {} has no global class", bx.class_id)))?;
            if semantic[i] as usize == g {
                members[b].push(i);
            }
        }
    }
    let mut instance = vec![0u32; semantic.len()];
    for (id, pts) in (1..).zip(members.iter().filter(|m| !m.is_empty())) {
        for &i in pts {
            instance[i] = id;
        }
    }
    Ok(PanopticLabel { semantic, instance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::point_in_box_bruteforce;
    use crate::voxelizer::Point;
    use ndarray::array;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn bx(center: [f64; 3], dims: [f64; 3], yaw: f64, class_id: usize, score: f64) -> Box3D {
        Box3D { center, dims, yaw, class_id, score }
    }

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Point::new(p[0], p[1], p[2], 0.0, 0.0)).collect())
    }

    #[test]
    fn containment_examples() {
        let unit = bx([0.0; 3], [1.0; 3], 0.0, 0, 1.0);
        assert!(point_in_box([0.4, 0.0, 0.0], &unit));
        let long = bx([0.0; 3], [2.0, 0.5, 1.0], FRAC_PI_2, 0, 1.0);
        assert!(point_in_box([0.0, 0.9, 0.0], &long));
        assert!(!point_in_box([0.9, 0.0, 0.0], &long));
        let idx = assign_points(&cloud(&[[0.0; 3], [5.0, 5.0, 5.0]]), &[]);
        assert_eq!(idx.ind, vec![None, None]);
    }

    #[test]
    fn overlapping_boxes_take_highest_score() {
        let a = bx([0.0; 3], [2.0; 3], 0.0, 0, 0.3);
        let b = bx([0.5, 0.0, 0.0], [2.0; 3], 0.0, 1, 0.8);
        let c = bx([0.0; 3], [2.0; 3], 0.0, 1, 0.8);
        let idx = assign_points(&cloud(&[[0.2, 0.0, 0.0], [-0.8, 0.0, 0.0]]), &[a, b, c]);
        assert_eq!(idx.ind, vec![Some(1), Some(2)]);
    }

    #[test]
    fn local_coordinates() {
        let b = bx([1.0, 2.0, 0.5], [4.0, 2.0, 1.0], 0.7, 0, 1.0);
        let (s, c) = 0.7f64.sin_cos();
        let corner = [1.0 + 2.0 * c - 1.0 * s, 2.0 + 2.0 * s + 1.0 * c, 1.0];
        let pc = cloud(&[[1.0, 2.0, 0.5], corner]);
        let idx = assign_points(&pc, &[b]);
        let loc = local_transform(&pc, &[b], &idx).unwrap();
        let l0 = loc[0].unwrap();
        assert!(l0.iter().all(|v| v.abs() < 1e-12));
        let l1 = loc[1].unwrap();
        for (a, e) in l1.iter().zip([2.0, 1.0, 0.5]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_neutral_scores() {
        let net = SecondStage::zeros(4, 3, 5, 2);
        let b = bx([0.0; 3], [2.0; 3], 0.0, 0, 1.0);
        let pc = cloud(&[[0.1, 0.1, 0.1], [9.0, 9.0, 9.0]]);
        let idx = assign_points(&pc, &[b, bx([20.0, 0.0, 0.0], [1.0; 3], 0.0, 1, 0.5)]);
        let loc = local_transform(&pc, &[b], &PointBoxIndex { ind: vec![Some(0), None], num_boxes: 2 }).unwrap();
        let out = second_stage_forward(&loc, Array2::ones((2, 4)).view(), Array2::ones((2, 3)).view(), &idx, &net).unwrap();
        assert_eq!(out.s_point, vec![Some(0.5), None]);
        for r in out.s_box.rows() {
            for v in r {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_point_hand_weights() {
        let mut net = SecondStage::zeros(1, 1, 1, 1);
        // hidden = relu(x + y + z + f)
        net.point_hidden.weight = array![[1.0], [1.0], [1.0], [1.0]];
        net.point_out.weight = array![[2.0]];
        net.point_out.bias = array![-1.0];
        // box hidden = relu(pooled + box_feat); logits = (h, 0)
        net.box_hidden.weight = array![[1.0], [1.0]];
        net.box_out.weight = array![[1.0, 0.0]];
        let idx = PointBoxIndex { ind: vec![Some(0)], num_boxes: 1 };
        let loc = vec![Some([0.1, 0.2, 0.3])];
        let out = second_stage_forward(&loc, array![[0.4]].view(), array![[0.5]].view(), &idx, &net).unwrap();
        // hidden 1.0, logit 1.0
        assert!((out.s_point[0].unwrap() - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
        // box hidden 1.5
        let e = 1.5f64.exp();
        assert!((out.s_box[[0, 0]] - e / (e + 1.0)).abs() < 1e-12);
        assert!((out.s_box.row(0).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn s2nd_examples() {
        let idx = PointBoxIndex { ind: vec![Some(0), Some(0), Some(0), None], num_boxes: 1 };
        let s_box = array![[0.5, 0.3, 0.2]];
        let s2 = fuse_s2nd(&[Some(1.0), Some(0.0), Some(0.6), None], s_box.view(), &idx).unwrap();
        assert_eq!(s2[0].as_ref().unwrap(), &array![0.5, 0.3, 0.2]);
        assert_eq!(s2[1].as_ref().unwrap(), &array![0.0, 0.0, 1.0]);
        let r = s2[2].as_ref().unwrap();
        for (a, e) in r.iter().zip([0.30, 0.18, 0.52]) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!(s2[3].is_none());
    }

    #[test]
    fn final_fusion_example() {
        let map = ThingClassMap { num_classes: 4, thing_to_global: vec![0, 1] };
        let s1 = array![[0.1, 0.2, 0.3, 0.4], [0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25]];
        let s2 = vec![Some(array![0.3, 0.18, 0.52]), Some(array![0.0, 0.0, 1.0]), None];
        let f = fuse_final(s1.view(), &s2, &map).unwrap();
        for (a, e) in f.row(0).iter().zip([0.352, 0.284, 0.156, 0.208]) {
            assert!((a - e).abs() < 1e-12);
        }
        assert_eq!(f.row(1), s1.row(1));
        assert_eq!(f.row(2), s1.row(2));
    }

    #[test]
    fn class_map_errors() {
        let bad = ThingClassMap { num_classes: 3, thing_to_global: vec![1, 1] };
        let s1 = Array2::from_elem((1, 3), 1.0 / 3.0);
        assert!(matches!(fuse_final(s1.view(), &[None], &bad), Err(Error::Config(_))));
        let out = ThingClassMap { num_classes: 3, thing_to_global: vec![3] };
        assert!(out.validate().is_err());
    }

    #[test]
    fn panoptic_examples() {
        let map = ThingClassMap { num_classes: 3, thing_to_global: vec![2] };
        let boxes = [bx([0.0; 3], [1.0; 3], 0.0, 0, 0.9), bx([5.0, 0.0, 0.0], [1.0; 3], 0.0, 0, 0.8)];
        let idx = PointBoxIndex { ind: vec![Some(0), Some(0), Some(1), Some(1), None], num_boxes: 2 };
        let thing = [0.1, 0.1, 0.8];
        let stuff = [0.8, 0.1, 0.1];
        let s = Array2::from_shape_fn((5, 3), |(i, c)| if i == 1 || i == 4 { stuff[c] } else { thing[c] });
        let p = panoptic_assign(s.view(), &boxes, &idx, &map).unwrap();
        assert_eq!(p.semantic, vec![2, 0, 2, 2, 0]);
        assert_eq!(p.instance, vec![1, 0, 2, 2, 0]);
    }

    #[test]
    fn panoptic_ids_stay_consecutive() {
        let map = ThingClassMap { num_classes: 2, thing_to_global: vec![1] };
        let boxes = [bx([0.0; 3], [1.0; 3], 0.0, 0, 0.9), bx([5.0, 0.0, 0.0], [1.0; 3], 0.0, 0, 0.8)];
        let idx = PointBoxIndex { ind: vec![Some(1)], num_boxes: 2 };
        let p = panoptic_assign(array![[0.0, 1.0]].view(), &boxes, &idx, &map).unwrap();
        assert_eq!(p.instance, vec![1]);
    }

    #[test]
    fn bilinear_at_cell_center_and_between() {
        let geom = BevGeometry { x_min: 0.0, y_min: 0.0, cell_x: 1.0, cell_y: 1.0, width: 2, height: 1 };
        let bev = DenseBev::new(ndarray::Array3::from_shape_vec((1, 1, 2), vec![2.0, 4.0]).unwrap());
        assert_eq!(bilinear_sample(&bev, &geom, 0.5, 0.5)[0], 2.0);
        assert_eq!(bilinear_sample(&bev, &geom, 1.0, 0.5)[0], 3.0);
        assert_eq!(bilinear_sample(&bev, &geom, 9.0, 0.5)[0], 4.0);
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (-5.0..5.0f64, -5.0..5.0f64, -1.0..1.0f64, 0.5..4.0f64, 0.5..4.0f64, 0.5..2.0f64, -3.1..3.1f64, 0.0..1.0f64)
            .prop_map(|(x, y, z, l, w, h, yaw, s)| bx([x, y, z], [l, w, h], yaw, 0, s))
    }

    proptest! {
        #[test]
        fn assignment_matches_bruteforce(
            pts in prop::collection::vec((-6.0..6.0f64, -6.0..6.0f64, -2.0..2.0f64), 1..200),
            boxes in prop::collection::vec(arb_box(), 0..10),
        ) {
            let pc = cloud(&pts.iter().map(|&(x, y, z)| [x, y, z]).collect::<Vec<_>>());
            let idx = assign_points(&pc, &boxes);
            for (i, p) in pc.points.iter().enumerate() {
                let mut expected = None;
                let mut best = f64::NEG_INFINITY;
                for (b, bx) in boxes.iter().enumerate() {
                    if point_in_box_bruteforce(p.xyz(), bx.center, bx.dims, bx.yaw) && bx.score > best {
                        best = bx.score;
                        expected = Some(b);
                    }
                }
                prop_assert_eq!(idx.ind[i], expected);
            }
        }

        #[test]
        fn local_norm_is_yaw_invariant(p in (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), b in arb_box()) {
            let l = to_box_frame([p.0, p.1, p.2], &b);
            let n1 = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
            let d = [p.0 - b.center[0], p.1 - b.center[1], p.2 - b.center[2]];
            let n2 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            prop_assert!((n1 - n2).abs() < 1e-9);
        }

        #[test]
        fn s2nd_rows_sum_to_one(sp in 0.0..=1.0f64, raw in prop::collection::vec(0.01..1.0f64, 2..6)) {
            let total: f64 = raw.iter().sum();
            let s_box = Array2::from_shape_vec((1, raw.len()), raw.iter().map(|v| v / total).collect()).unwrap();
            let s2 = fuse_s2nd(&[Some(sp)], s_box.view(), &PointBoxIndex { ind: vec![Some(0)], num_boxes: 1 }).unwrap();
            prop_assert!((s2[0].as_ref().unwrap().sum() - 1.0).abs() < 1e-9);
        }
    }
}
