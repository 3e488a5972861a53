use handreg_core::geometry::{BoundingBox, Vec3};
use handreg_core::hand_model::{skin, HandParams, HandTemplate, FINGER_JOINT_BASE, NUM_SHAPE, PARAM_DIM, SKELETON_EDGES};
use handreg_core::metadata::compute_metadata;
use handreg_core::synth::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(n: usize) -> SynthConfig {
    SynthConfig {
        n_train: n,
        n_val: 0,
        n_test: 0,
        shard_size: 7,
        ..SynthConfig::default()
    }
}

fn template() -> HandTemplate {
    HandTemplate::build(0, SynthConfig::default().vertex_budget).unwrap()
}

#[test]
fn records_are_deterministic_per_seed_and_id() {
    let a = Generator::new(small_config(1), rig_preset(), 5).unwrap();
    let b = Generator::new(small_config(1), rig_preset(), 5).unwrap();
    let c = Generator::new(small_config(1), rig_preset(), 6).unwrap();
    for id in 0..5 {
        assert_eq!(a.record(id).unwrap(), b.record(id).unwrap());
        assert_ne!(a.record(id).unwrap().0, c.record(id).unwrap().0);
    }
    assert_ne!(a.record(0).unwrap().0.params, a.record(1).unwrap().0.params);
}

#[test]
fn sampled_hands_stay_within_their_ranges() {
    let t = template();
    let ws = Workspace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dirs: Vec<Vec3> = FINGER_JOINT_BASE.iter().map(|&b| (t.joints[b + 2] - t.joints[b]).normalize()).collect();
    let (mut near, mut far) = (f64::MAX, 0.0f64);
    for _ in 0..10_000 {
        let p = sample_hand(&mut rng, &t, &ws);
        let d = p.global_trans.norm();
        assert!((ws.distance_mm.0 - 1e-9..=ws.distance_mm.1 + 1e-9).contains(&d));
        near = near.min(d);
        far = far.max(d);
        let dir = p.global_trans / d;
        assert!(dir.z.atan2(dir.x).is_finite());
        assert!((-dir.y).asin().abs() <= ws.elevation_max_deg.to_radians() + 1e-9);
        assert!(dir.x.atan2(dir.z).abs() <= ws.azimuth_max_deg.to_radians() + 1e-9);
        assert!(p.global_rot.norm() <= std::f64::consts::PI + 1e-9);
        assert!(p.shape.iter().all(|s| s.abs() <= SHAPE_LIMIT));
        for (f, d) in dirs.iter().enumerate() {
            let kind = usize::from(f != 0);
            let axis = Vec3::z().cross(d).normalize();
            for (k, &(lo, hi)) in FLEX_LIMITS[kind].iter().enumerate() {
                let w = p.joint_pose[FINGER_JOINT_BASE[f] + k - 1];
                let flex = w.dot(&axis);
                assert!(flex >= lo - 1e-9 && flex <= hi + 1e-9, "finger {f} joint {k}: {flex}");
            }
        }
    }
    assert!(near < ws.distance_mm.0 + 5.0 && far > ws.distance_mm.1 - 5.0);
    assert_eq!(NUM_SHAPE, 10);
}

#[test]
fn both_view_classes_occur() {
    let gen = Generator::new(small_config(1), rig_preset(), 7).unwrap();
    let recs: Vec<SampleRecord> = (0..60).map(|id| gen.record(id).unwrap().0).collect();
    assert!(recs.iter().any(SampleRecord::is_stereo));
    assert!(recs.iter().any(|r| r.visible() == [true, false]));
    assert!(recs.iter().any(|r| r.visible() == [false, true]));
    assert!(recs.iter().all(|r| r.present_views().count() >= 1));
}

fn hand_at(pos: Vec3) -> HandParams {
    let mut p = HandParams::from_slice(&[0.0; PARAM_DIM]).unwrap();
    p.global_rot = Vec3::new(std::f64::consts::PI, 0.0, 0.0);
    p.global_trans = pos;
    p
}

#[test]
fn render_draws_keypoint_blobs() {
    let rig = rig_preset();
    let cam = &rig.left;
    let t = template();
    let axis = cam.world_from_cam().rotation * Vec3::z();
    let state = skin(&t, &hand_at(cam.center_world() + axis * 350.0));
    let kp2d = visible_projection(cam, &state.keypoints3d).unwrap();
    let bbox = keypoint_box(cam, &kp2d).unwrap();
    let size = 64;
    let img = render_crop(cam, &bbox, &state, size, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let again = render_crop(cam, &bbox, &state, size, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(img, again);
    assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    let proj = crop_projection(cam, &bbox, &state.keypoints3d, size).unwrap();
    for (p, _) in proj.keypoints.iter().flatten() {
        let (x, y) = (p.x.round() as usize, p.y.round() as usize);
        assert!(x < size && y < size);
        assert!(img[y * size + x] > 0.5, "dim blob at ({x}, {y})");
    }
    // the hand fills the middle of the crop, the corners are background
    assert!(img[0] < 0.1 && img[size * size - 1] < 0.1);
    let far = BoundingBox::new(0.0, 0.0, 20.0, 20.0).unwrap();
    assert!(matches!(render_crop(cam, &far, &state, size, &mut ChaCha8Rng::seed_from_u64(1)), Err(SynthError::EmptyRender)));
}

#[test]
fn doubling_distance_halves_projected_bones() {
    let rig = rig_preset();
    let cam = &rig.left;
    let t = template();
    let axis = cam.world_from_cam().rotation * Vec3::z();
    let near = skin(&t, &hand_at(cam.center_world() + axis * 250.0));
    let far = skin(&t, &hand_at(cam.center_world() + axis * 500.0));
    let (cx, cy) = (cam.cx(), cam.cy());
    let bbox = BoundingBox::new(cx - 150.0, cy - 150.0, cx + 150.0, cy + 150.0).unwrap();
    let size = 256;
    let pn = crop_projection(cam, &bbox, &near.keypoints3d, size).unwrap();
    let pf = crop_projection(cam, &bbox, &far.keypoints3d, size).unwrap();
    for &(a, b) in SKELETON_EDGES.iter() {
        let len = |p: &CropProjection| (p.keypoints[a].unwrap().0 - p.keypoints[b].unwrap().0).norm();
        assert!((len(&pf) - 0.5 * len(&pn)).abs() < 2.0, "edge ({a}, {b})");
    }
}

#[test]
fn parallel_and_serial_generation_agree() {
    let cfg = SynthConfig {
        n_train: 10,
        n_val: 6,
        n_test: 5,
        shard_size: 4,
        ..SynthConfig::default()
    };
    let a = build_dataset(&cfg, &rig_preset(), 9, true).unwrap();
    let b = build_dataset(&cfg, &rig_preset(), 9, false).unwrap();
    assert_eq!(a.files, b.files);
    assert_eq!(a.manifest.shards, 6);
}

#[test]
fn generated_views_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_train: 20,
        n_val: 5,
        n_test: 5,
        shard_size: 8,
        ..SynthConfig::default()
    };
    let manifest = generate_dataset(&cfg, &rig_preset(), 13, dir.path(), true).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.manifest, manifest);
    assert_eq!(DatasetManifest::from_text(&manifest.to_text()).unwrap(), manifest);
    assert_eq!(ds.split(Split::Train).len(), 20);
    assert_eq!(ds.split(Split::Val)[0].id, 20);
    assert_eq!(ds.split(Split::Test).len(), 5);
    assert_eq!(manifest.split_of(27), Split::Test);
    assert_eq!(manifest.stereo_records, ds.records.iter().filter(|r| r.is_stereo()).count());
    let t = ds.template().unwrap();
    for r in &ds.records {
        let reg = t.regress_keypoints(&r.vertices);
        for (a, b) in reg.iter().zip(&r.keypoints3d) {
            assert!((a - b).norm() < 1e-9);
        }
        assert_eq!(skin(&t, &r.params).keypoints3d, r.keypoints3d);
        for (v, view) in r.present_views() {
            let cam = ds.rig.camera(v);
            assert_eq!(view.meta, compute_metadata(cam, &view.bbox, cfg.crop_size).unwrap());
            assert_eq!(view.crop.len(), cfg.crop_size * cfg.crop_size);
            for (p, q) in view.kp2d.iter().zip(&r.keypoints3d) {
                assert!(view.bbox.contains(p));
                assert!((cam.project(q).unwrap() - p).norm() < 1e-6);
                let pc = cam.to_camera(q);
                assert!(pc.z > 0.0 && handreg_core::geometry::FisheyeCamera::incidence_angle(&pc) <= VISIBLE_THETA);
            }
        }
        for v in 0..2 {
            if r.views[v].is_none() {
                assert!(visible_projection(ds.rig.camera(v), &r.keypoints3d).is_none());
            }
        }
    }
}

#[test]
fn stereo_fraction_tracks_its_target() {
    let cfg = SynthConfig {
        n_train: 1000,
        n_val: 0,
        n_test: 0,
        ..SynthConfig::default()
    };
    let built = build_dataset(&cfg, &rig_preset(), 21, true).unwrap();
    let f = built.manifest.stereo_fraction();
    assert!((f - cfg.stereo_target).abs() <= 0.05, "stereo fraction {f}");
}

#[test]
fn corrupt_files_are_rejected() {
    let cfg = small_config(3);
    let built = build_dataset(&cfg, &rig_preset(), 1, false).unwrap();
    let shard = &built.files[0].1;
    assert_eq!(decode_shard(shard).unwrap().len(), 3);
    assert!(decode_shard(&shard[..shard.len() - 1]).is_err());
    let mut bad = shard.clone();
    bad[0] = b'x';
    assert!(decode_shard(&bad).is_err());
    assert!(DatasetManifest::from_text("direg3d-dataset v2\n").is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Dataset::open(dir.path()), Err(SynthError::Io { .. })));
    assert!(SynthConfig { stereo_target: 1.5, ..cfg }.validate().is_err());
}

#[test]
fn crops_survive_pgm() {
    let gen = Generator::new(small_config(1), rig_preset(), 2).unwrap();
    let rec = gen.record(0).unwrap().0;
    let (_, view) = rec.present_views().next().unwrap();
    let pgm = to_pgm(&view.crop, 32);
    assert_eq!(from_pgm(&pgm).unwrap(), (32, 32, view.crop.clone()));
    assert_eq!(quantize(&view.crop_f64()), view.crop);
}
