use std::fs;

use vf_cli::{cmd_bench, cmd_gen_scene, cmd_reconstruct, cmd_train_tiny, load_config, recount_pairs, trend};
use vf_core::scene::SyntheticScene;
use vf_core::voxel::{ActiveSet, Grid, VoxelCoord};

#[test]
fn trend_reports_window_means() {
    let (means, monotone) = trend(&[4.0, 2.0, 3.0, 1.0, 0.5], 2);
    assert_eq!(means, vec![3.0, 2.0, 0.5]);
    assert!(monotone);
    let (_, monotone) = trend(&[1.0, 1.0, 2.0, 2.0], 2);
    assert!(!monotone);
}

#[test]
fn bench_counts_agree_with_the_recount() {
    let r = cmd_bench([12, 10, 8], 0.3, 3, 2, 1, true).unwrap();
    assert!(r.recount_agrees);
    assert!(r.ratio > 0.0 && r.ratio < 1.0);
    assert!(r.attention_seconds.is_some());
    assert!(r.dense_pairs >= r.sparse_pairs);
}

#[test]
fn empty_volumes_have_no_pairs() {
    let r = cmd_bench([6, 6, 6], 0.0, 3, 1, 0, false).unwrap();
    assert_eq!(r.active_voxels, 0.0);
    assert_eq!(r.ratio, 0.0);
    assert!(r.attention_seconds.is_none());
}

#[test]
fn bench_rejects_bad_arguments() {
    assert!(cmd_bench([4; 3], 1.5, 3, 1, 0, false).is_err());
    assert!(cmd_bench([4; 3], 0.5, 0, 1, 0, false).is_err());
    assert!(cmd_bench([4; 3], 0.5, 3, 0, 0, false).is_err());
}

#[test]
fn recount_on_a_full_grid() {
    let set = ActiveSet::full(Grid::new(0, 1.0, [3, 3, 3], [0.0; 3]));
    // Per axis the clipped windows hold 2 + 3 + 2 cells.
    assert_eq!(recount_pairs(&set, 3), 7 * 7 * 7);
    let single = ActiveSet::from_coords(*set.grid(), vec![VoxelCoord::new(1, 1, 1)]).unwrap();
    assert_eq!(recount_pairs(&single, 5), 1);
}

#[test]
fn tiny_config_loads_and_validates() {
    let config = load_config(None).unwrap();
    assert_eq!(config.feature_channels, 8);
    assert_eq!(config.train.steps, 2000);
    assert!(load_config(Some("/nonexistent/config.toml".as_ref())).is_err());
}

#[test]
fn short_training_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("scene");
    let run = dir.path().join("run");
    let scene = cmd_gen_scene(&scene_dir, 3).unwrap();
    assert_eq!(SyntheticScene::load(&scene_dir).unwrap().spec, scene.spec);
    let config = load_config(None).unwrap();
    let train = cmd_train_tiny(&scene_dir, &config, 3, &run).unwrap();
    assert_eq!(train.losses.len(), 3);
    assert!(train.losses.iter().all(|l| l.is_finite()));
    assert_eq!(fs::read_to_string(run.join("loss.txt")).unwrap().lines().count(), 3);
    assert!(run.join("train.json").exists());
    match cmd_reconstruct(&scene_dir, &config, &train.checkpoint, &run) {
        Ok(rec) => {
            assert!(rec.vertices > 0);
            for f in ["mesh.ply", "metrics.json", "metrics.txt", "timing.log"] {
                assert!(run.join(f).exists(), "{f}");
            }
        }
        // Three steps may not yet produce occupancy above the threshold.
        Err(e) => assert!(e.to_string().contains("degenerate") || e.to_string().contains("zero crossing"), "{e}"),
    }
}

#[test]
fn mismatched_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("scene");
    cmd_gen_scene(&scene_dir, 0).unwrap();
    let mut config = load_config(None).unwrap();
    config.feature_channels = 5;
    assert!(cmd_train_tiny(&scene_dir, &config, 1, &dir.path().join("run")).is_err());
}
