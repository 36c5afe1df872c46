use std::path::Path;

use splatrig::dataset::{Dataset, Split};
use splatrig::deform::PriorMode;
use splatrig::scene::{logit, SourceTag};
use splatrig::synth::{generate, SynthConfig};
use splatrig::train::{checkpoint, densify_and_prune, TrainConfig, TrainState};

fn tiny(dir: &Path) -> Dataset {
    let cfg = SynthConfig {
        icosphere_subdivision: 1,
        expressions: 3,
        background_points: 80,
        attached_points: 12,
        width: 24,
        height: 24,
        train_frames: 6,
        setting1_frames: 2,
        setting2_frames: 2,
        train_cameras: 2,
        ..Default::default()
    };
    generate(&cfg, dir).unwrap();
    Dataset::load(dir).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig { iterations: 20, densify_until: 0, mlp_hidden: 16, triplane_resolution: 8, ..Default::default() }
}

#[test]
fn init_uses_mesh_vertices_and_points() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny(dir.path());
    let st = TrainState::new(&ds, small_config()).unwrap();
    let cloud = &st.model.cloud;
    assert_eq!(cloud.len(), ds.mesh.vertex_count() + ds.init_points.positions.len());
    let seeded = cloud.source_tags.iter().filter(|t| **t == SourceTag::MeshSeeded).count();
    assert_eq!(seeded, ds.mesh.vertex_count());
    for i in 0..cloud.len() {
        assert!((cloud.opacity(i) - 0.1).abs() < 1e-6);
        assert_eq!(cloud.rotations[i], [1.0, 0.0, 0.0, 0.0]);
    }
}

#[test]
fn loss_decreases_over_a_short_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny(dir.path());
    let mut st = TrainState::new(&ds, TrainConfig { iterations: 120, ..small_config() }).unwrap();
    let log = st.run(&ds, None).unwrap();
    let first = log.first().unwrap();
    let last = log.last().unwrap();
    assert_eq!(first.iteration, 1);
    assert_eq!(last.iteration, 120);
    assert!(first.total > 0.0);
    assert!(last.total < first.total, "{} -> {}", first.total, last.total);
}

#[test]
fn rejects_non_training_frames() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny(dir.path());
    let mut st = TrainState::new(&ds, small_config()).unwrap();
    let held_out = ds.split(Split::Setting1)[0];
    let err = st.train_step(&ds, held_out).unwrap_err();
    assert_eq!(err.kind(), "argument");
    assert_eq!(st.iteration, 0);
}

#[test]
fn ground_truth_from_the_model_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = tiny(dir.path());
    let st = TrainState::new(&ds, small_config()).unwrap();
    for f in 0..ds.frame_count() {
        let p = &ds.params[f];
        let code = ds.split(Split::Train).contains(&f).then_some(f);
        ds.images[f] = st.model.render(&ds.mesh, &p.exp, p.pose, code, ds.camera(f)).unwrap();
    }
    let mut st = TrainState::new(&ds, small_config()).unwrap();
    let before = st.model.cloud.clone();
    let out = st.step(&ds).unwrap();
    assert!(out.total.abs() < 1e-12, "loss {}", out.total);
    // round-off gradients may nudge parameters, nothing more
    let moved = |a: &[[f64; 3]], b: &[[f64; 3]]| {
        a.iter().zip(b).flat_map(|(x, y)| (0..3).map(move |k| (x[k] - y[k]).abs())).fold(0.0, f64::max)
    };
    assert!(moved(&st.model.cloud.positions, &before.positions) < 1e-9);
    assert!(moved(&st.model.cloud.colors, &before.colors) < 1e-9);
}

#[test]
fn densify_is_a_noop_without_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny(dir.path());
    let mut st = TrainState::new(&ds, small_config()).unwrap();
    let n = st.model.cloud.len();
    let r = densify_and_prune(&mut st, &ds.mesh).unwrap();
    assert_eq!((r.cloned, r.split, r.pruned, r.after), (0, 0, 0, n));
}

#[test]
fn densify_prunes_clones_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny(dir.path());
    let mut st = TrainState::new(&ds, small_config()).unwrap();
    let n = st.model.cloud.len();
    let split_above = st.config.split_scale_fraction * st.scene_extent;

    // 0: transparent, pruned. 1: small and hot, cloned. 2: large and hot, split.
    st.model.cloud.opacity_logits[0] = logit(1e-4);
    st.model.cloud.log_scales[1] = [(0.5 * split_above).ln(); 3];
    st.model.cloud.log_scales[2] = [(4.0 * split_above).ln(); 3];
    for i in [1, 2] {
        st.stats.accum[i] = 1.0;
        st.stats.count[i] = 1;
    }
    let kept_position = st.model.cloud.positions[3];
    let r = densify_and_prune(&mut st, &ds.mesh).unwrap();
    assert_eq!((r.pruned, r.cloned, r.split), (1, 1, 1));
    // -1 pruned, +1 clone, +2 children -1 parent
    assert_eq!(r.after, n + 1);
    let cloud = &st.model.cloud;
    assert_eq!(cloud.len(), n + 1);
    assert_eq!(cloud.positions[1], kept_position);
    assert_eq!(cloud.source_tags.iter().filter(|t| **t == SourceTag::Densified).count(), 3);
    // survivors, then the clone, then both split children
    let child = cloud.log_scales[n - 1];
    assert!((child[0] - ((4.0 * split_above).ln() - 1.6f64.ln())).abs() < 1e-6);
    assert_eq!(st.model.cache.len(), cloud.len());
    assert!(st.stats.accum.iter().all(|&a| a == 0.0));
}

#[test]
fn densify_respects_the_gaussian_cap() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny(dir.path());
    let mut st = TrainState::new(&ds, small_config()).unwrap();
    let n = st.model.cloud.len();
    st.config.max_gaussians = n;
    st.stats.accum.iter_mut().for_each(|a| *a = 1.0);
    st.stats.count.iter_mut().for_each(|c| *c = 1);
    let r = densify_and_prune(&mut st, &ds.mesh).unwrap();
    assert_eq!(r.after, n);
}

#[test]
fn checkpoint_round_trip_renders_identically() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny(&dir.path().join("data"));
    let mut st = TrainState::new(&ds, TrainConfig { prior_mode: PriorMode::Fixed, ..small_config() }).unwrap();
    st.run(&ds, None).unwrap();
    let ck = dir.path().join("ck");
    checkpoint::save(&st, &ds.mesh, &ck).unwrap();
    // overwrite in place
    checkpoint::save(&st, &ds.mesh, &ck).unwrap();
    let loaded = checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.manifest.iteration, 20);
    assert_eq!(loaded.model.cloud.len(), st.model.cloud.len());
    for f in [0, ds.split(Split::Setting2)[0]] {
        let p = &ds.params[f];
        let a = st.model.render(&ds.mesh, &p.exp, p.pose, None, ds.camera(f)).unwrap();
        let b = loaded.model.render(&loaded.mesh, &p.exp, p.pose, None, ds.camera(f)).unwrap();
        assert_eq!(a.data, b.data);
    }
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny(&dir.path().join("data"));
    let cfg = TrainConfig { iterations: 30, densify_until: 30, densify_interval: 10, ..small_config() };

    let mut full = TrainState::new(&ds, cfg.clone()).unwrap();
    full.run(&ds, None).unwrap();

    let mut half = TrainState::new(&ds, TrainConfig { iterations: 15, densify_until: 15, ..cfg.clone() }).unwrap();
    half.run(&ds, None).unwrap();
    let ck = dir.path().join("ck");
    checkpoint::save(&half, &ds.mesh, &ck).unwrap();
    let mut resumed = checkpoint::load(&ck).unwrap().into_state(&ds).unwrap();
    resumed.config.iterations = 30;
    resumed.config.densify_until = 30;
    resumed.run(&ds, None).unwrap();

    assert_eq!(resumed.iteration, full.iteration);
    assert_eq!(resumed.model.cloud.positions, full.model.cloud.positions);
    assert_eq!(resumed.model.cloud.colors, full.model.cloud.colors);
    assert_eq!(resumed.model.cloud.opacity_logits, full.model.cloud.opacity_logits);
}

#[test]
fn corrupt_checkpoint_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny(&dir.path().join("data"));
    let st = TrainState::new(&ds, small_config()).unwrap();
    let ck = dir.path().join("ck");
    checkpoint::save(&st, &ds.mesh, &ck).unwrap();
    let blob = ck.join("tensors.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    assert!(checkpoint::load(&ck).is_err());
    assert!(checkpoint::load(&dir.path().join("missing")).is_err());
}
