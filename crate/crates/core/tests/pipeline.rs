use voxmt_core::pipeline::{
    init_weights, run_pipeline, semantic_scores, synth_scene, GcpMode, GroundTruth, Model, PipelineConfig,
    RunOptions,
};
use voxmt_core::refine::point_in_box;
use voxmt_core::tta::{make_tta_set, Transform};

fn toy_model(seed: u64) -> (PipelineConfig, Model) {
    let cfg = PipelineConfig::profile("toy").unwrap();
    let m = Model::new(&cfg, init_weights(&cfg, seed).unwrap()).unwrap();
    (cfg, m)
}

#[test]
fn first_stage_rows_are_distributions() {
    let (_, model) = toy_model(4);
    let scene = synth_scene(4, 6, 5000, &[2, 3, 4]);
    let s = semantic_scores(&scene.cloud, &model).unwrap();
    for r in s.rows() {
        assert!((r.sum() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn single_identity_tta_is_plain_inference() {
    let (_, model) = toy_model(5);
    let scene = synth_scene(5, 4, 3000, &[2, 3, 4]);
    let plain = run_pipeline(&scene.cloud, &model, &RunOptions::default()).unwrap();
    let id = [Transform::identity()];
    let tta = run_pipeline(&scene.cloud, &model, &RunOptions { ground_truth: None, tta: Some(&id) }).unwrap();
    assert_eq!(plain.s_1st, tta.s_1st);
    assert_eq!(plain.panoptic, tta.panoptic);
}

#[test]
fn full_tta_stays_on_simplex() {
    let (_, model) = toy_model(6);
    let scene = synth_scene(6, 3, 2000, &[2, 3, 4]);
    let set = make_tta_set();
    let out = run_pipeline(&scene.cloud, &model, &RunOptions { ground_truth: None, tta: Some(&set) }).unwrap();
    for r in out.s_1st.rows() {
        assert!((r.sum() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn loss_report_groups_match_components() {
    let (_, model) = toy_model(7);
    let scene = synth_scene(7, 5, 4000, &[2, 3, 4]);
    let gt = GroundTruth { labels: scene.labels.clone(), boxes: scene.boxes.clone() };
    let out = run_pipeline(&scene.cloud, &model, &RunOptions { ground_truth: Some(&gt), tta: None }).unwrap();
    let l = out.losses.unwrap();
    let c = l.components;
    assert_eq!(l.seg, c.ce_v + c.lovasz_v);
    assert_eq!(l.det, c.hm + 2.0 * c.reg + c.iou);
    assert_eq!(l.bev, c.ce_bev + c.lovasz_bev);
    assert!((l.total - (l.seg + l.det + l.bev) / 2.0).abs() < 1e-12);
    let (bce, ce) = out.stage2_losses.unwrap();
    assert!(bce.is_finite() && ce.is_finite());
}

#[test]
fn instance_points_sit_in_their_box() {
    let (_, model) = toy_model(8);
    let scene = synth_scene(8, 8, 6000, &[2, 3, 4]);
    let out = run_pipeline(&scene.cloud, &model, &RunOptions::default()).unwrap();
    for (i, &id) in out.panoptic.instance.iter().enumerate() {
        if id > 0 {
            let b = out.index.ind[i].expect("instance points are assigned");
            assert!(point_in_box(scene.cloud.points[i].xyz(), &out.boxes[b]));
        }
    }
}

#[test]
fn identity_bridge_mode_reports_exact_round_trip() {
    let mut cfg = PipelineConfig::profile("toy").unwrap();
    cfg.gcp_mode = GcpMode::Identity;
    let model = Model::new(&cfg, init_weights(&cfg, 1).unwrap()).unwrap();
    let scene = synth_scene(1, 4, 3000, &cfg.thing_classes);
    let out = run_pipeline(&scene.cloud, &model, &RunOptions::default()).unwrap();
    assert_eq!(out.gcp_roundtrip_exact, Some(true));
}

#[test]
fn out_of_range_points_still_get_labels() {
    let (cfg, model) = toy_model(2);
    let mut scene = synth_scene(2, 2, 1000, &[2, 3, 4]);
    scene.cloud.points[0].x = 500.0;
    let out = run_pipeline(&scene.cloud, &model, &RunOptions::default()).unwrap();
    assert_eq!(out.panoptic.semantic[0] as usize, cfg.fallback_class);
}
