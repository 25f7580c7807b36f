//! End-to-end orchestration: voxelize, VFE, U-Net with the BEV bridge,
//! heads, second stage and panoptic output.

mod config;
mod synth;

pub use config::{GcpMode, PipelineConfig, PROFILES};
pub use synth::{synth_scene, Scene, GROUND_Z, PAST_SWEEP_DT, PAST_SWEEP_FRACTION};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dense2d::{Conv2d, DenseBev};
use crate::error::{Error, Result};
use crate::gcp::{bev_to_sparse, projection_from_store, projection_shapes, sparse_to_bev, BevExtractor};
use crate::heads::{
    decode_boxes, decode_cell, det_head, render_targets, yaw_agnostic_iou, BevGeometry, Box3D, DetHead, DetOutputs,
    REG_CHANNELS,
};
use crate::losses::{
    binary_cross_entropy, cross_entropy, gaussian_focal, l1_loss, lovasz_softmax, LossComponents, TaskLossReport,
};
use crate::nn::{softmax_rows, Linear};
use crate::refine::{
    assign_points, box_features, fuse_final, fuse_s2nd, local_transform, panoptic_assign, PanopticLabel,
    PointBoxIndex, SecondStage,
};
use crate::sparse::{run_unet_with_bridge, SparseTensor};
use crate::tta::{tta_infer, Transform};
use crate::voxelizer::{devoxelize, vfe_forward, voxelize, PointCloud, PointVoxelMap, VfeConfig, VFE_POINT_FEATURES};
use crate::weights::{Tensor, WeightStore};

/// `(name, dims)` of every tensor the pipeline reads, in initialization order.
pub fn weight_shapes(cfg: &PipelineConfig) -> Vec<(String, Vec<usize>)> {
    let k = cfg.num_classes;
    let c_bev = cfg.gcp.out_channels();
    let mut v = vec![
        ("vfe.weight".to_string(), vec![VFE_POINT_FEATURES, cfg.vfe_channels]),
        ("vfe.bias".to_string(), vec![cfg.vfe_channels]),
    ];
    v.extend(cfg.unet.weight_shapes());
    v.extend(cfg.gcp.weight_shapes(cfg.bev_in_channels()));
    v.extend(projection_shapes(c_bev, cfg.unet.bridge_channels, cfg.bottom_grid()[2]));
    v.push(("seg.cls.weight".into(), vec![cfg.unet.output_channels(), k]));
    v.push(("seg.cls.bias".into(), vec![k]));
    v.push(("bev.seg.weight".into(), vec![k, c_bev, 1, 1]));
    v.push(("bev.seg.bias".into(), vec![k]));
    v.extend(DetHead::weight_shapes(c_bev, cfg.num_thing()));
    v.extend(SecondStage::weight_shapes(cfg.unet.output_channels(), c_bev, cfg.stage2_hidden, cfg.num_thing()));
    v
}

/// `(fan_in, fan_out)` from the tensor layout conventions: `[in, out]`
/// linear, `[taps, in, out]` sparse conv, `[out, in, k, k]` dense conv.
fn fans(dims: &[usize]) -> (usize, usize) {
    match dims {
        [i, o] => (*i, *o),
        [t, i, o] => (t * i, t * o),
        [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
        _ => (1, 1),
    }
}

/// Uniform `[-a, a]` weights with `a = sqrt(6 / (fan_in + fan_out))`, zero
/// biases. Tensors draw from one seeded stream in [`weight_shapes`] order.
pub fn init_weights(cfg: &PipelineConfig, seed: u64) -> Result<WeightStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = WeightStore::new();
    for (name, dims) in weight_shapes(cfg) {
        let n: usize = dims.iter().product();
        let data = if dims.len() == 1 {
            vec![0f32; n]
        } else {
            let (fi, fo) = fans(&dims);
            let a = (6.0 / (fi + fo) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-a..=a) as f32).collect()
        };
        ws.insert(name, Tensor::new(dims, data)?);
    }
    Ok(ws)
}

/// Every layer of the pipeline, loaded and shape-checked.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: PipelineConfig,
    pub weights: WeightStore,
    pub vfe: VfeConfig,
    pub extractor: BevExtractor,
    pub proj: Conv2d,
    pub seg: Linear,
    pub bev_seg: Conv2d,
    pub det: DetHead,
    pub stage2: SecondStage,
}

impl Model {
    pub fn new(cfg: &PipelineConfig, weights: WeightStore) -> Result<Self> {
        cfg.validate()?;
        let load = || -> Result<Self> {
            let c_bev = cfg.gcp.out_channels();
            let vfe_w = Linear::from_store(&weights, "vfe", VFE_POINT_FEATURES, cfg.vfe_channels)?;
            for (name, dims) in cfg.unet.weight_shapes() {
                weights.get_shaped(&name, &dims)?;
            }
            Ok(Self {
                cfg: cfg.clone(),
                vfe: VfeConfig::new(vfe_w)?,
                extractor: BevExtractor::from_store(&weights, &cfg.gcp, cfg.bev_in_channels())?,
                proj: projection_from_store(&weights, c_bev, cfg.unet.bridge_channels, cfg.bottom_grid()[2])?,
                seg: Linear::from_store(&weights, "seg.cls", cfg.unet.output_channels(), cfg.num_classes)?,
                bev_seg: Conv2d::from_store(&weights, "bev.seg", c_bev, cfg.num_classes, 1, 1, false)?,
                det: DetHead::from_store(&weights, c_bev, cfg.num_thing())?,
                stage2: SecondStage::from_store(&weights, cfg.unet.output_channels(), c_bev, cfg.stage2_hidden, cfg.num_thing())?,
                weights: weights.clone(),
            })
        };
        load().map_err(|e| e.in_stage("weights"))
    }
}

/// First-stage activations shared by the semantic and detection branches.
#[derive(Debug, Clone)]
pub struct StageOne {
    pub map: PointVoxelMap,
    pub decoder_out: SparseTensor,
    pub voxel_logits: Array2<f64>,
    pub bev_out: DenseBev,
    /// Identity mode only: whether the bridged tensor equals the bottom tensor bitwise.
    pub gcp_roundtrip_exact: Option<bool>,
}

pub fn stage_one(cloud: &PointCloud, model: &Model) -> Result<StageOne> {
    let cfg = &model.cfg;
    cloud.validate().map_err(|e| e.in_stage("input"))?;
    let map = voxelize(cloud, &cfg.voxel).map_err(|e| e.in_stage("voxelize"))?;
    let feats = vfe_forward(cloud, &map, &cfg.voxel, &model.vfe).map_err(|e| e.in_stage("vfe"))?;
    let mut bev_out = None;
    let mut exact = None;
    let unet = run_unet_with_bridge(&feats, &cfg.unet, &model.weights, |bottom| {
        let bev_in = sparse_to_bev(bottom)?;
        let out = model.extractor.forward(&bev_in)?;
        let bridged = match cfg.gcp_mode {
            GcpMode::Full => bev_to_sparse(&out, bottom, &model.proj)?,
            GcpMode::Identity => {
                let b = bev_to_sparse(&bev_in, bottom, &Conv2d::identity(bev_in.channels(), 1))?;
                exact = Some(&b == bottom);
                b
            }
        };
        bev_out = Some(out);
        Ok(bridged)
    })
    .map_err(|e| e.in_stage("unet/gcp"))?;
    let decoder_out = unet.decoder_out;
    if decoder_out.coords != map.voxel_coords {
        return Err(Error::internal("decoder sites differ from the voxel sites").in_stage("unet"));
    }
    let voxel_logits = model.seg.forward(decoder_out.features.view()).map_err(|e| e.in_stage("seg head"))?;
    let bev_out = bev_out.ok_or_else(|| Error::internal("bridge not run"))?;
    Ok(StageOne { map, decoder_out, voxel_logits, bev_out, gcp_roundtrip_exact: exact })
}

/// Per-point first-stage class probabilities.
pub fn semantic_scores(cloud: &PointCloud, model: &Model) -> Result<Array2<f64>> {
    let s1 = stage_one(cloud, model)?;
    point_scores(&s1, model)
}

fn point_scores(s1: &StageOne, model: &Model) -> Result<Array2<f64>> {
    let probs = s1.decoder_out.with_features(softmax_rows(s1.voxel_logits.view()))?;
    devoxelize(&probs, &s1.map, model.cfg.fallback_class).map_err(|e| e.in_stage("devoxelize"))
}

/// Ground truth for the loss report.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub labels: PanopticLabel,
    /// Boxes with thing-class indices.
    pub boxes: Vec<Box3D>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub s_1st: Array2<f64>,
    pub boxes: Vec<Box3D>,
    pub index: PointBoxIndex,
    pub s_final: Array2<f64>,
    pub panoptic: PanopticLabel,
    pub losses: Option<TaskLossReport>,
    /// Binary CE of the mask scores and CE of the box scores against ground truth.
    pub stage2_losses: Option<(f64, f64)>,
    pub gcp_roundtrip_exact: Option<bool>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub ground_truth: Option<&'a GroundTruth>,
    /// Averages the first-stage scores over these transforms.
    pub tta: Option<&'a [Transform]>,
}

pub fn run_pipeline(cloud: &PointCloud, model: &Model, opts: &RunOptions) -> Result<PipelineOutput> {
    let cfg = &model.cfg;
    let s1 = stage_one(cloud, model)?;
    let s_1st = match opts.tta {
        Some(ts) => tta_infer(cloud, ts, |c| semantic_scores(c, model)).map_err(|e| e.in_stage("tta"))?,
        None => point_scores(&s1, model)?,
    };

    let det = det_head(&s1.bev_out, &model.det).map_err(|e| e.in_stage("det head"))?;
    let geom = cfg.bev_geometry();
    let boxes = decode_boxes(&det, &geom, cfg.max_boxes, cfg.score_threshold);

    let index = assign_points(cloud, &boxes);
    let local = local_transform(cloud, &boxes, &index)?;
    let mut point_feats = Array2::zeros((cloud.len(), s1.decoder_out.channels()));
    for (i, v) in s1.map.point_to_voxel.iter().enumerate() {
        if let Some(r) = v {
            point_feats.row_mut(i).assign(&s1.decoder_out.features.row(*r));
        }
    }
    let bfeats = box_features(&s1.bev_out, &geom, &boxes);
    let s2 = crate::refine::second_stage_forward(&local, point_feats.view(), bfeats.view(), &index, &model.stage2)
        .map_err(|e| e.in_stage("stage 2"))?;
    let s_2nd = fuse_s2nd(&s2.s_point, s2.s_box.view(), &index)?;
    let map = cfg.thing_map();
    let s_final = fuse_final(s_1st.view(), &s_2nd, &map).map_err(|e| e.in_stage("fusion"))?;
    let panoptic = panoptic_assign(s_final.view(), &boxes, &index, &map)?;

    let (losses, stage2_losses) = match opts.ground_truth {
        Some(gt) => {
            let l = loss_report(cloud, model, &s1, &det, &geom, gt).map_err(|e| e.in_stage("losses"))?;
            let l2 = stage2_losses(cloud, &boxes, &index, &s2, gt, &map.thing_to_global)?;
            (Some(l), Some(l2))
        }
        None => (None, None),
    };
    Ok(PipelineOutput {
        s_1st,
        boxes,
        index,
        s_final,
        panoptic,
        losses,
        stage2_losses,
        gcp_roundtrip_exact: s1.gcp_roundtrip_exact,
    })
}

/// Most frequent ground-truth class per group among current points, lowest
/// class on ties; `None` for groups without current points.
fn majority_labels(groups: impl Iterator<Item = Option<usize>>, n_groups: usize, cloud: &PointCloud, gt: &[u32], k: usize) -> Result<Vec<Option<usize>>> {
    let mut counts = vec![vec![0usize; k]; n_groups];
    for (i, g) in groups.enumerate() {
        if let Some(g) = g {
            if cloud.points[i].is_current() {
                let c = gt[i] as usize;
                if c >= k {
                    return Err(Error::input(format!("ground-truth class {c} at point {i} outside {k} classes")));
                }
                counts[g][c] += 1;
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|c| {
            let best = c.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
            (*best.1 > 0).then_some(best.0)
        })
        .collect())
}

fn seg_terms(logits: &Array2<f64>, labels: &[Option<usize>]) -> Result<(f64, f64)> {
    let y: Vec<usize> = labels.iter().map(|l| l.unwrap_or(0)).collect();
    let ignore: Vec<bool> = labels.iter().map(Option::is_none).collect();
    let (ce, _) = cross_entropy(logits.view(), &y, &ignore)?;
    let (lv, _) = lovasz_softmax(softmax_rows(logits.view()).view(), &y, &ignore)?;
    Ok((ce, lv))
}

fn loss_report(
    cloud: &PointCloud,
    model: &Model,
    s1: &StageOne,
    det: &DetOutputs,
    geom: &BevGeometry,
    gt: &GroundTruth,
) -> Result<TaskLossReport> {
    let cfg = &model.cfg;
    let k = cfg.num_classes;
    if gt.labels.len() != cloud.len() {
        return Err(Error::input(format!("{} ground-truth labels for {} points", gt.labels.len(), cloud.len())));
    }
    let vox_labels = majority_labels(s1.map.point_to_voxel.iter().copied(), s1.map.num_voxels(), cloud, &gt.labels.semantic, k)?;
    let (ce_v, lovasz_v) = seg_terms(&s1.voxel_logits, &vox_labels)?;

    let bev_logits = model.bev_seg.forward(&s1.bev_out)?.data;
    let (h, w) = (geom.height, geom.width);
    let cells = bev_logits.to_shape((k, h * w)).map_err(|e| Error::internal(e.to_string()))?.t().to_owned();
    let cell_of = cloud.points.iter().map(|p| geom.cell_of(p.x, p.y).map(|(r, c)| r * w + c));
    let bev_labels = majority_labels(cell_of, h * w, cloud, &gt.labels.semantic, k)?;
    let (ce_bev, lovasz_bev) = seg_terms(&cells, &bev_labels)?;

    let targets = render_targets(&gt.boxes, geom, cfg.num_thing())?;
    let (hm, _) = gaussian_focal(
        det.heatmap.as_standard_layout().as_slice().expect("standard layout"),
        targets.heatmap.as_standard_layout().as_slice().expect("standard layout"),
    )?;
    let mut pred = Vec::new();
    let mut tgt = Vec::new();
    let mut iou_pred = Vec::new();
    let mut iou_tgt = Vec::new();
    for e in &targets.entries {
        for c in 0..REG_CHANNELS {
            pred.push(det.reg[[c, e.row, e.col]]);
            tgt.push(e.values[c]);
        }
        let decoded = decode_cell(det, geom, e.class_id, e.row, e.col, 1.0);
        iou_pred.push(det.iou[[e.row, e.col]]);
        iou_tgt.push(yaw_agnostic_iou(&decoded, &gt.boxes[e.box_index]));
    }
    let (reg, _) = l1_loss(&pred, &tgt, &vec![true; pred.len()])?;
    let (iou, _) = l1_loss(&iou_pred, &iou_tgt, &vec![true; iou_pred.len()])?;

    let components = LossComponents { ce_v, lovasz_v, hm, reg, iou, ce_bev, lovasz_bev };
    TaskLossReport::new(components, cfg.loss_weighting, &cfg.log_vars)
}

fn stage2_losses(
    cloud: &PointCloud,
    boxes: &[Box3D],
    index: &PointBoxIndex,
    s2: &crate::refine::StageTwoScores,
    gt: &GroundTruth,
    thing_to_global: &[usize],
) -> Result<(f64, f64)> {
    let n = cloud.len();
    let mut prob = vec![0.0; n];
    let mut target = vec![0.0; n];
    let mut mask = vec![false; n];
    for i in 0..n {
        if let (Some(b), Some(sp)) = (index.ind[i], s2.s_point[i]) {
            prob[i] = sp;
            let same = gt.labels.instance[i] > 0 && gt.labels.semantic[i] as usize == thing_to_global[boxes[b].class_id];
            target[i] = if same { 1.0 } else { 0.0 };
            mask[i] = cloud.points[i].is_current();
        }
    }
    let bce = binary_cross_entropy(&prob, &target, &mask)?;
    let empty = thing_to_global.len();
    let labels: Vec<usize> = boxes
        .iter()
        .map(|b| {
            gt.boxes
                .iter()
                .map(|g| (yaw_agnostic_iou(b, g), g.class_id))
                .filter(|(iou, _)| *iou > 0.5)
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .map_or(empty, |(_, c)| c)
        })
        .collect();
    let log_probs = s2.s_box.mapv(|p| p.max(1e-12).ln());
    let (ce, _) = cross_entropy(log_probs.view(), &labels, &vec![false; labels.len()])?;
    Ok((bce, ce))
}

/// Semantic labels of the current-sweep points only.
pub fn current_only(labels: &[u32], cloud: &PointCloud) -> Vec<u32> {
    labels.iter().zip(&cloud.points).filter(|(_, p)| p.is_current()).map(|(l, _)| *l).collect()
}

/// Panoptic labels restricted to current-sweep points.
pub fn current_panoptic(l: &PanopticLabel, cloud: &PointCloud) -> PanopticLabel {
    PanopticLabel { semantic: current_only(&l.semantic, cloud), instance: current_only(&l.instance, cloud) }
}

/// Column means, used for quick summaries of score matrices.
pub fn mean_rows(m: &Array2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(m.ncols()))
}
