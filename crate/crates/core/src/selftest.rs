//! Acceptance checks shared by the `acceptance` test target and `voxmt selftest`.
//!
//! Each check is seeded, runs its randomized cases and reports a single
//! pass/fail outcome with a short detail string.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dense2d::{dense_conv3d_oracle, Conv2d};
use crate::gcp::{global_context_pooling, BevExtractor};
use crate::heads::{decode_boxes, encode_box, render_targets, BevGeometry, Box3D, DetOutputs, REG_CHANNELS};
use crate::losses::{
    cross_entropy, gaussian_focal, l1_loss, lovasz_softmax, total_uncertainty_loss, uncertainty_weighted,
    UncertaintyParams,
};
use crate::metrics::{miou, pq};
use crate::oracle::{central_difference, rel_err};
use crate::pipeline::{init_weights, run_pipeline, synth_scene, Model, PipelineConfig, PipelineOutput, RunOptions};
use crate::weights::Tensor;
use crate::refine::{fuse_final, fuse_s2nd, PanopticLabel, PointBoxIndex, ThingClassMap};
use crate::sparse::{build_rulebook, inverse_conv, sparse_conv, ConvMode, ConvSpec, Coord, SparseTensor};
use crate::tta::{make_tta_set, tta_infer};
use crate::voxelizer::{Point, PointCloud};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {:<34} {}  ({:.2}s) {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

pub const NAMES: [&str; 10] = [
    "sparse conv vs dense oracle",
    "active-set preservation",
    "GCP round trip and BEV dims",
    "loss gradients vs finite differences",
    "score fusion conservation and limits",
    "heatmap render/decode round trip",
    "Lovasz vertex equivalence",
    "PQ = SQ * RQ and perfect scores",
    "end-to-end toy pipeline",
    "TTA inverses and invariance",
];

type Check = (bool, String);

pub fn run_criterion(id: u32) -> Outcome {
    let start = Instant::now();
    let (passed, detail) = match id {
        1 => sparse_vs_dense(),
        2 => active_sets(),
        3 => gcp_round_trip(),
        4 => gradients(),
        5 => fusion(),
        6 => render_decode(),
        7 => lovasz_vertices(),
        8 => panoptic_metrics(),
        9 => end_to_end(),
        10 => tta_checks(),
        _ => (false, format!("no criterion {id}")),
    };
    let name = NAMES.get(id.wrapping_sub(1) as usize).copied().unwrap_or("unknown");
    Outcome { id, name, passed, detail, elapsed: start.elapsed() }
}

pub fn run_all() -> Vec<Outcome> {
    (1..=10).map(run_criterion).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, grid: [usize; 3], max_active: usize, channels: usize, stride: usize) -> SparseTensor {
    let total = grid.iter().product::<usize>();
    let n = rng.gen_range(1..=max_active.min(total));
    let mut set = BTreeSet::new();
    while set.len() < n {
        let c = [
            rng.gen_range(0..grid[2] as i32),
            rng.gen_range(0..grid[1] as i32),
            rng.gen_range(0..grid[0] as i32),
        ];
        set.insert(c);
    }
    let coords: Vec<Coord> = set.into_iter().map(|[z, y, x]| [x, y, z]).collect();
    let features = Array2::from_shape_fn((coords.len(), channels), |_| rng.gen_range(-1.0..1.0));
    SparseTensor::new(coords, features, grid, stride).expect("valid random tensor")
}

fn random_spec(rng: &mut ChaCha8Rng, k: usize, stride: usize, cin: usize, cout: usize, mode: ConvMode) -> ConvSpec {
    let mut spec = ConvSpec::zeros([k; 3], stride, cin, cout, mode);
    spec.weights = Array3::from_shape_fn(spec.weights.raw_dim(), |_| rng.gen_range(-1.0..1.0));
    spec
}

fn densify(t: &SparseTensor) -> Array4<f64> {
    let [gx, gy, gz] = t.grid_dims;
    let mut v = Array4::zeros((t.channels(), gz, gy, gx));
    for (r, c) in t.coords.iter().enumerate() {
        for ch in 0..t.channels() {
            v[[ch, c[2] as usize, c[1] as usize, c[0] as usize]] = t.features[[r, ch]];
        }
    }
    v
}

fn sparse_vs_dense() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut violations = 0;
    let mut sites = 0;
    for case in 0..100 {
        let grid = [rng.gen_range(2..=32), rng.gen_range(2..=32), rng.gen_range(2..=32)];
        let k = if case % 2 == 0 { 3 } else { 1 };
        let (mode, stride) = match case % 3 {
            0 => (ConvMode::Submanifold, 1),
            1 => (ConvMode::Strided, 1),
            _ => (ConvMode::Strided, 2),
        };
        let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let x = random_tensor(&mut rng, grid, 500, cin, 1);
        let spec = random_spec(&mut rng, k, stride, cin, cout, mode);
        let y = match build_rulebook(&x, &spec).and_then(|rb| sparse_conv(&x, &spec, &rb)) {
            Ok(y) => y,
            Err(e) => return (false, format!("case {case}: {e}")),
        };
        let dense = dense_conv3d_oracle(&densify(&x), &spec.weights, spec.kernel, stride);
        let mut active = BTreeSet::new();
        for (r, c) in y.coords.iter().enumerate() {
            active.insert(*c);
            for ch in 0..cout {
                let d = dense[[ch, c[2] as usize, c[1] as usize, c[0] as usize]];
                let e = rel_err(y.features[[r, ch]], d);
                worst = worst.max(e);
                sites += 1;
                if e > 1e-5 {
                    violations += 1;
                }
            }
        }
        if mode == ConvMode::Strided {
            // the standard layer must cover every site the dense result reaches
            for ((ch, z, yy, xx), v) in dense.indexed_iter() {
                let _ = ch;
                if *v != 0.0 && !active.contains(&[xx as i32, yy as i32, z as i32]) {
                    violations += 1;
                }
            }
        }
    }
    (violations == 0, format!("{sites} site-channels, {violations} violations, max rel err {worst:.2e}"))
}

fn active_sets() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut failures = 0;
    for _ in 0..100 {
        let grid = [rng.gen_range(2..=24), rng.gen_range(2..=24), rng.gen_range(2..=24)];
        let x = random_tensor(&mut rng, grid, 400, 2, 1);
        let sub = random_spec(&mut rng, 3, 1, 2, 3, ConvMode::Submanifold);
        let y = build_rulebook(&x, &sub).and_then(|rb| sparse_conv(&x, &sub, &rb));
        let down = random_spec(&mut rng, 3, 2, 2, 4, ConvMode::Strided);
        let up = random_spec(&mut rng, 3, 2, 4, 2, ConvMode::Inverse);
        let restored = build_rulebook(&x, &down)
            .and_then(|rb| sparse_conv(&x, &down, &rb).and_then(|d| inverse_conv(&d, &up, &rb)));
        match (y, restored) {
            (Ok(y), Ok(r)) if y.coords == x.coords && r.coords == x.coords && r.grid_dims == x.grid_dims => {}
            _ => failures += 1,
        }
    }
    (failures == 0, format!("100 tensors, {failures} failures"))
}

fn gcp_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut failures = 0;
    for _ in 0..50 {
        let grid = [rng.gen_range(1..=12), rng.gen_range(1..=12), rng.gen_range(1..=6)];
        let c = rng.gen_range(1..=6);
        let t = random_tensor(&mut rng, grid, 200, c, 8);
        let ch = c * grid[2];
        let extractor = BevExtractor { level1: vec![Conv2d::identity(ch, 3)], level2: vec![] };
        match global_context_pooling(&t, &extractor, &Conv2d::identity(ch, 1)) {
            Ok(out) if out.bridged == t => {}
            _ => failures += 1,
        }
    }
    let waymo = PipelineConfig::profile("waymo").expect("built-in profile");
    let [w, h, _] = waymo.bottom_grid();
    let dims = (h, w, waymo.bev_in_channels());
    let ok = failures == 0 && dims == (188, 188, 1280);
    (ok, format!("50 tensors, {failures} mismatches; waymo BEV {}x{}x{}", dims.0, dims.1, dims.2))
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

/// Probabilities whose per-class errors are pairwise separated, so small
/// perturbations never reorder the Lovasz sort.
fn untied_probs(rng: &mut ChaCha8Rng, m: usize, k: usize, labels: &[usize]) -> Array2<f64> {
    loop {
        let p = Array2::from_shape_fn((m, k), |_| rng.gen_range(0.02..0.98));
        let separated = (0..k).all(|c| {
            let mut e: Vec<f64> = (0..m).map(|i| ((labels[i] == c) as u8 as f64 - p[[i, c]]).abs()).collect();
            e.sort_by(f64::total_cmp);
            e.windows(2).all(|w| w[1] - w[0] > 1e-3)
        });
        if separated {
            return p;
        }
    }
}

fn gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let h = 1e-4;
    let mut worst = [0.0f64; 5];
    for _ in 0..20 {
        let (m, k) = (rng.gen_range(3..8), rng.gen_range(2..5));
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
        let ignore: Vec<bool> = (0..m).map(|i| i > 0 && rng.gen_bool(0.2)).collect();
        let logits = Array2::from_shape_fn((m, k), |_| rng.gen_range(-3.0..3.0));
        let (_, g) = cross_entropy(logits.view(), &labels, &ignore).expect("valid");
        let fd = central_difference(logits.as_slice().expect("contiguous"), h, |x| {
            cross_entropy(ndarray::ArrayView2::from_shape((m, k), x).expect("shape"), &labels, &ignore).expect("valid").0
        });
        worst[0] = worst[0].max(max_rel(g.as_slice().expect("contiguous"), &fd));

        let n = 64;
        let target: Vec<f64> = (0..n).map(|i| if i % 13 == 0 { 1.0 } else { rng.gen_range(0.0..0.95) }).collect();
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.02..0.98)).collect();
        let (_, g) = gaussian_focal(&pred, &target).expect("valid");
        let fd = central_difference(&pred, h, |x| gaussian_focal(x, &target).expect("valid").0);
        worst[1] = worst[1].max(max_rel(&g, &fd));

        let t: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p: Vec<f64> = t
            .iter()
            .map(|v| v + rng.gen_range(0.01..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let mask: Vec<bool> = (0..16).map(|i| i % 5 != 0).collect();
        let (_, g) = l1_loss(&p, &t, &mask).expect("valid");
        let fd = central_difference(&p, h, |x| l1_loss(x, &t, &mask).expect("valid").0);
        worst[2] = worst[2].max(max_rel(&g, &fd));

        let probs = untied_probs(&mut rng, m, k, &labels);
        let none = vec![false; m];
        let (_, g) = lovasz_softmax(probs.view(), &labels, &none).expect("valid");
        let fd = central_difference(probs.as_slice().expect("contiguous"), h, |x| {
            lovasz_softmax(ndarray::ArrayView2::from_shape((m, k), x).expect("shape"), &labels, &none).expect("valid").0
        });
        worst[3] = worst[3].max(max_rel(g.as_slice().expect("contiguous"), &fd));

        let l = [rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0)];
        let s = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let (_, g) = uncertainty_weighted(&l, &s).expect("matching lengths");
        let fd = central_difference(&s, h, |x| uncertainty_weighted(&l, x).expect("matching lengths").0);
        worst[4] = worst[4].max(max_rel(&g, &fd));
    }
    let mut stationary = true;
    for l in [0.5, 1.0, 4.0] {
        let s = f64::ln(l);
        let p = UncertaintyParams { seg: s, det: s, bev: s };
        let (t0, g) = total_uncertainty_loss(l, l, l, &p);
        let bumped = |d: f64| total_uncertainty_loss(l, l, l, &UncertaintyParams { seg: s + d, det: s + d, bev: s + d }).0;
        stationary &= g.iter().all(|v| v.abs() <= 1e-8) && bumped(1e-3) > t0 && bumped(-1e-3) > t0;
    }
    let ok = worst.iter().all(|&w| w < 1e-4) && stationary;
    (
        ok,
        format!(
            "max rel err ce {:.1e}, focal {:.1e}, l1 {:.1e}, lovasz {:.1e}, uncertainty {:.1e}; stationarity {}",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            worst[4],
            if stationary { "ok" } else { "violated" }
        ),
    )
}

fn fusion() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let kt = rng.gen_range(1..6);
        let raw: Vec<f64> = (0..=kt).map(|_| rng.gen_range(0.0..1.0) + 1e-9).collect();
        let sum: f64 = raw.iter().sum();
        let s_box = Array2::from_shape_vec((1, kt + 1), raw.iter().map(|v| v / sum).collect()).expect("shape");
        let sp = rng.gen_range(0.0..=1.0);
        let idx = PointBoxIndex { ind: vec![Some(0)], num_boxes: 1 };
        let row = fuse_s2nd(&[Some(sp)], s_box.view(), &idx).expect("valid")[0].clone().expect("assigned");
        worst = worst.max((row.sum() - 1.0).abs());
    }
    let map = ThingClassMap { num_classes: 5, thing_to_global: vec![2, 3, 4] };
    let s1 = Array2::from_shape_fn((3, 5), |_| rng.gen_range(0.0..1.0));
    let s_box = ndarray::array![[0.3, 0.3, 0.4, 0.0], [0.0, 0.0, 0.0, 1.0]];
    let idx = PointBoxIndex { ind: vec![Some(1), None, Some(1)], num_boxes: 2 };
    let s2 = fuse_s2nd(&[Some(0.0), None, Some(0.0)], s_box.view(), &idx).expect("valid");
    let f = fuse_final(s1.view(), &s2, &map).expect("valid");
    // rows 0 and 2: zero mask score on an all-empty box; row 1: unassigned
    let limits = (0..3).all(|r| f.row(r) == s1.row(r));
    let ok = worst <= 1e-9 && limits;
    (ok, format!("1000 draws, max |sum - 1| {worst:.1e}; limits {}", if limits { "exact" } else { "differ" }))
}

fn render_decode() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let geom = BevGeometry { x_min: -16.0, y_min: -16.0, cell_x: 0.8, cell_y: 0.8, width: 40, height: 40 };
    let mut failures = 0;
    let (mut worst_c, mut worst_y) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let b = Box3D {
            center: [rng.gen_range(-14.0..14.0), rng.gen_range(-14.0..14.0), rng.gen_range(-1.0..1.0)],
            dims: [rng.gen_range(0.5..5.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..2.0)],
            yaw: std::f64::consts::PI - rng.gen_range(0.0..2.0 * std::f64::consts::PI),
            class_id: rng.gen_range(0..3),
            score: 1.0,
        };
        let t = match render_targets(&[b], &geom, 3) {
            Ok(t) => t,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        let mut reg = Array3::zeros((REG_CHANNELS, geom.height, geom.width));
        for r in 0..geom.height {
            for c in 0..geom.width {
                for (ch, v) in encode_box(&b, &geom, r, c).into_iter().enumerate() {
                    reg[[ch, r, c]] = v;
                }
            }
        }
        let out = DetOutputs { heatmap: t.heatmap, reg, iou: Array2::ones((geom.height, geom.width)) };
        let dec = decode_boxes(&out, &geom, 1, 0.5);
        match dec.first() {
            Some(d) if d.class_id == b.class_id => {
                let dc = ((d.center[0] - b.center[0]) / geom.cell_x).abs().max(((d.center[1] - b.center[1]) / geom.cell_y).abs());
                let dy = (d.yaw - b.yaw).abs();
                let dy = dy.min(2.0 * std::f64::consts::PI - dy);
                worst_c = worst_c.max(dc);
                worst_y = worst_y.max(dy);
                if dc > 1.0 || dy > 1e-6 {
                    failures += 1;
                }
            }
            _ => failures += 1,
        }
    }
    (failures == 0, format!("50 boxes, {failures} failures, max center err {worst_c:.2e} cells, max yaw err {worst_y:.1e}"))
}

fn lovasz_vertices() -> Check {
    let mut cases = 0usize;
    let mut worst = 0.0f64;
    for n in 1..=8usize {
        for gt_bits in 0u32..(1 << n) {
            let labels: Vec<usize> = (0..n).map(|i| (gt_bits >> i & 1) as usize).collect();
            for pr_bits in 0u32..(1 << n) {
                let pred: Vec<usize> = (0..n).map(|i| (pr_bits >> i & 1) as usize).collect();
                let probs = Array2::from_shape_fn((n, 2), |(i, c)| if pred[i] == c { 1.0 } else { 0.0 });
                let (v, _) = lovasz_softmax(probs.view(), &labels, &vec![false; n]).expect("valid");
                let mut expected = 0.0;
                let mut present = 0;
                for c in 0..2 {
                    let g: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                    if !g.iter().any(|&x| x) {
                        continue;
                    }
                    present += 1;
                    let inter = (0..n).filter(|&i| g[i] && pred[i] == c).count();
                    let union = (0..n).filter(|&i| g[i] || pred[i] == c).count();
                    expected += 1.0 - inter as f64 / union as f64;
                }
                expected /= present as f64;
                worst = worst.max((v - expected).abs());
                cases += 1;
            }
        }
    }
    (worst < 1e-12, format!("{cases} labelings, max |loss - (1 - IoU)| {worst:.1e}"))
}

fn panoptic_metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let things = [2u32, 3, 4];
    let stuff = [0u32, 1];
    let mut worst = 0.0f64;
    let random_label = |rng: &mut ChaCha8Rng, n: usize| {
        let semantic: Vec<u32> = (0..n).map(|_| rng.gen_range(0..5)).collect();
        let instance = semantic.iter().map(|&s| if s >= 2 { rng.gen_range(0..4) } else { 0 }).collect();
        PanopticLabel { semantic, instance }
    };
    for _ in 0..100 {
        let n = rng.gen_range(10..300);
        let g = random_label(&mut rng, n);
        // perturb a copy so that some segments still match
        let mut p = g.clone();
        for i in 0..n {
            if rng.gen_bool(0.3) {
                p.semantic[i] = rng.gen_range(0..5);
                p.instance[i] = if p.semantic[i] >= 2 { rng.gen_range(0..4) } else { 0 };
            }
        }
        match pq(&p, &g, &things, &stuff) {
            Ok(r) => {
                for c in &r.per_class {
                    worst = worst.max((c.pq - c.sq * c.rq).abs());
                }
            }
            Err(_) => worst = f64::INFINITY,
        }
    }
    let g = random_label(&mut rng, 200);
    let perfect_pq = pq(&g, &g, &things, &stuff).map(|r| r.pq).unwrap_or(0.0);
    let perfect_miou = miou(&g.semantic, &g.semantic, 5, &[]).map(|r| r.mean).unwrap_or(0.0);
    let ok = worst <= 1e-12 && perfect_pq == 1.0 && perfect_miou == 1.0;
    (ok, format!("100 pairs, max |PQ - SQ*RQ| {worst:.1e}; perfect PQ {perfect_pq}, mIoU {perfect_miou}"))
}

fn end_to_end() -> Check {
    let cfg = match PipelineConfig::profile("toy") {
        Ok(c) => c,
        Err(e) => return (false, e.to_string()),
    };
    let run = || -> crate::Result<Check> {
        let model = Model::new(&cfg, init_weights(&cfg, 2024)?)?;
        let scene = synth_scene(42, 8, 20_000, &cfg.thing_classes);
        let t0 = Instant::now();
        let a = run_pipeline(&scene.cloud, &model, &RunOptions::default())?;
        let secs = t0.elapsed().as_secs_f64();
        let b = run_pipeline(&scene.cloud, &model, &RunOptions::default())?;
        let n = scene.cloud.len();
        let total = a.panoptic.len() == n
            && a.panoptic.instance.len() == n
            && a.panoptic.semantic.iter().all(|&c| (c as usize) < cfg.num_classes);
        let deterministic = a.s_1st == b.s_1st && a.s_final == b.s_final && a.panoptic == b.panoptic && a.boxes == b.boxes;
        // Random weights rarely yield thing labels inside boxes, so the id
        // check also runs with the heads biased toward the first thing class.
        let mut biased_ws = model.weights.clone();
        let thing = cfg.thing_classes[0];
        let mut seg_bias = vec![0f32; cfg.num_classes];
        seg_bias[thing] = 5.0;
        biased_ws.insert("seg.cls.bias", Tensor::new(vec![cfg.num_classes], seg_bias)?);
        let mut hm_bias = vec![-3f32; cfg.num_thing()];
        hm_bias[0] = 3.0;
        biased_ws.insert("det.hm.bias", Tensor::new(vec![cfg.num_thing()], hm_bias)?);
        // large, ground-level boxes so that decoded boxes contain points
        let reg_bias = vec![0.0, 0.0, -1.0, 6f32.ln(), 6f32.ln(), 4f32.ln(), 0.0, 1.0];
        biased_ws.insert("det.reg.bias", Tensor::new(vec![REG_CHANNELS], reg_bias)?);
        let biased = run_pipeline(&scene.cloud, &Model::new(&cfg, biased_ws)?, &RunOptions::default())?;
        let consistent = ids_consistent(&a, &cfg) && ids_consistent(&biased, &cfg);
        let max_id = biased.panoptic.instance.iter().copied().max().unwrap_or(0);
        let mut quiet = cfg.clone();
        quiet.score_threshold = 1.0;
        let qm = Model::new(&quiet, model.weights.clone())?;
        let q = run_pipeline(&scene.cloud, &qm, &RunOptions::default())?;
        let unchanged = q.boxes.is_empty() && q.s_final == q.s_1st;
        let ok = total && deterministic && consistent && max_id > 0 && unchanged && secs <= 10.0;
        Ok((
            ok,
            format!(
                "{n} points, {} boxes, {secs:.2}s; total {total}, deterministic {deterministic}, consistent ids {consistent} ({max_id} biased-run instances), no-box identity {unchanged}",
                a.boxes.len()
            ),
        ))
    };
    run().unwrap_or_else(|e| (false, e.to_string()))
}

/// Every nonzero id covers points of one box, all labeled with that box's class.
fn ids_consistent(out: &PipelineOutput, cfg: &PipelineConfig) -> bool {
    let n = out.panoptic.len();
    let max_id = out.panoptic.instance.iter().copied().max().unwrap_or(0);
    (1..=max_id).all(|id| {
        let pts: Vec<usize> = (0..n).filter(|&i| out.panoptic.instance[i] == id).collect();
        let boxes: BTreeSet<Option<usize>> = pts.iter().map(|&i| out.index.ind[i]).collect();
        let classes: BTreeSet<u32> = pts.iter().map(|&i| out.panoptic.semantic[i]).collect();
        match (boxes.iter().next(), classes.iter().next()) {
            (Some(Some(b)), Some(&c)) if boxes.len() == 1 && classes.len() == 1 => {
                cfg.thing_classes[out.boxes[*b].class_id] as u32 == c
            }
            _ => false,
        }
    })
}

fn tta_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let set = make_tta_set();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let p = [rng.gen_range(-80.0..80.0), rng.gen_range(-80.0..80.0), rng.gen_range(-5.0..5.0)];
        for t in &set {
            let q = t.invert(t.apply(p));
            for a in 0..3 {
                worst = worst.max((q[a] - p[a]).abs());
            }
        }
    }
    let mut pts: Vec<Point> = (0..50)
        .map(|_| Point::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-2.0..2.0), 0.5, 0.0))
        .collect();
    pts.shuffle(&mut rng);
    let cloud = PointCloud::new(pts);
    let row = [0.125, 0.25, 0.5, 0.125];
    let constant = |c: &PointCloud| -> crate::Result<Array2<f64>> { Ok(Array2::from_shape_fn((c.len(), 4), |(_, k)| row[k])) };
    let single = constant(&cloud).expect("constant");
    let invariant = match tta_infer(&cloud, &set, constant) {
        Ok(m) => (&m - &single).iter().all(|v| v.abs() <= 1e-15),
        Err(_) => false,
    };
    let ok = set.len() == 20 && worst <= 1e-9 && invariant;
    (ok, format!("{} transforms, max round-trip err {worst:.1e}; constant scores invariant {invariant}", set.len()))
}
