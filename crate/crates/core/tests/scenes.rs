use std::collections::BTreeMap;

use metareg::geometry::Pose;
use metareg::metrics::{evaluate, relative, rotation_error, translation_error};
use metareg::pipeline::{register_pair, register_scene, PipelineConfig};
use metareg::synth::{generate_aisle, generate_scene, SynthConfig};
use metareg::FrameId;

#[test]
fn room_scene_recovers_every_pose() {
    let scene = generate_scene(&SynthConfig::default()).unwrap();
    let result = register_scene(&scene.frames, &PipelineConfig::default()).unwrap();
    assert!(result.failed.is_empty(), "failed: {:?}", result.failed);
    assert_eq!(result.order.len(), 8);
    assert_eq!(result.steps.len(), 7);

    let gt = scene.gt_poses();
    let seed = result.seed_frame;
    for (id, pose) in &result.poses {
        let truth = relative(&gt[id], &gt[&seed]);
        let re = rotation_error(pose.rotation(), truth.rotation()).to_degrees();
        let te = translation_error(pose.translation(), truth.translation());
        assert!(re < 1.0 && te < 0.02, "frame {id}: re {re} deg, te {te}");
    }
}

#[test]
fn room_scene_reported_poses_align_overlapping_points() {
    let scene = generate_scene(&SynthConfig { frame_count: 4, ..SynthConfig::default() }).unwrap();
    let result = register_scene(&scene.frames, &PipelineConfig::default()).unwrap();
    let gt = scene.gt_poses();
    for edge in scene.overlaps.iter().filter(|e| e.ratio > 0.1) {
        let (i, j) = (edge.a, edge.b);
        // Frame j points carried into frame i by the reported poses versus
        // by ground truth.
        let est = result.poses[&i].compose(&result.poses[&j].inverse());
        let truth = relative(&gt[&i], &gt[&j]);
        let frame_j = &scene.frames[j];
        let worst = frame_j
            .keypoints()
            .iter()
            .map(|p| (est.apply(p) - truth.apply(p)).norm())
            .fold(0.0, f64::max);
        assert!(worst < 0.05, "pair ({i}, {j}) worst displacement {worst}");
    }
}

#[test]
fn noiseless_pairs_are_exact() {
    let cfg = SynthConfig {
        frame_count: 4,
        keypoint_noise: 0.0,
        descriptor_noise: 0.0,
        outlier_fraction: 0.0,
        ..SynthConfig::default()
    };
    let scene = generate_scene(&cfg).unwrap();
    let gt = scene.gt_poses();
    for (a, b) in scene.pairs_above(0.1) {
        let est = register_pair(&scene.frames[a], &scene.frames[b], &PipelineConfig::default()).unwrap();
        let t = est.transform.expect("noiseless overlapping pair registers");
        let truth = gt[&b].compose(&gt[&a].inverse());
        let diff = (t.to_matrix4() - truth.to_matrix4()).abs().max();
        assert!(diff < 1e-6, "pair ({a}, {b}) off by {diff}");
    }
}

#[test]
fn aisle_needs_the_growing_meta_shape() {
    let scene = generate_aisle(42).unwrap();
    let cfg = PipelineConfig::default();
    let (first, wall) = (&scene.frames[0], &scene.frames[1]);

    let direct = register_pair(first, wall, &cfg).unwrap();
    assert!(!direct.is_success());
    assert!(direct.inlier_count < cfg.min_inliers);

    let result = register_scene(&scene.frames, &cfg).unwrap();
    assert!(result.failed.is_empty());
    let pos = |id: FrameId| result.order.iter().position(|&x| x == id).unwrap();
    assert!(pos(0) < pos(1) && pos(2) < pos(1), "order {:?}", result.order);

    let report = evaluate(&result.poses, &scene.gt_poses(), &[(0, 1), (0, 2), (1, 2)], "meters").unwrap();
    assert_eq!(report.registration_recall, 1.0, "{report:?}");
}

#[test]
fn scene_results_are_reproducible() {
    let scene = generate_scene(&SynthConfig { frame_count: 4, ..SynthConfig::default() }).unwrap();
    let cfg = PipelineConfig { seed: 5, ..PipelineConfig::default() };
    let a = register_scene(&scene.frames, &cfg).unwrap();
    let b = register_scene(&scene.frames, &cfg).unwrap();
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    assert_eq!(a.meta, b.meta);
    let poses: BTreeMap<FrameId, Pose> = a.poses.clone();
    assert_eq!(poses[&a.seed_frame], Pose::identity());
}
