use std::path::Path;

use handreg_core::geometry::{FisheyeCamera, Vec3};
use handreg_core::hand_model::{bone_vectors, read_obj, skin, write_obj, HandTemplate, NUM_KEYPOINTS};
use handreg_core::harness::*;
use handreg_core::losses::{LossWeights, LOG_SCALE_MAX, LOG_SCALE_MIN};
use handreg_core::regressor::{predict_state, Network, Prediction};
use handreg_core::synth::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(dir: &Path, n: usize) -> Dataset {
    let cfg = SynthConfig {
        n_train: n,
        n_val: 10,
        n_test: 24,
        shard_size: 16,
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, &rig_preset(), 31, dir, true).unwrap();
    Dataset::open(dir).unwrap()
}

fn config(dir: &Path, steps: usize) -> TrainConfig {
    let mut c = TrainConfig::new(dir.to_path_buf(), 4);
    c.batch_size = 8;
    c.max_steps = steps;
    c
}

// ------------------------------------------------------------- metrics

fn brute_auc(errors: &[f64]) -> f64 {
    let pck: Vec<f64> = (0..=50).map(|t| errors.iter().filter(|&&e| e <= t as f64).count() as f64 / errors.len() as f64).collect();
    let mut area = 0.0;
    for t in 0..50 {
        area += 0.5 * (pck[t] + pck[t + 1]);
    }
    area / 50.0
}

#[test]
fn mkpe_examples_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt: Vec<Vec3> = (0..21).map(|_| Vec3::new(rng.random(), rng.random(), rng.random()) * 300.0).collect();
    assert_eq!(compute_mkpe(&gt, &gt).unwrap(), 0.0);
    let off: Vec<Vec3> = gt.iter().map(|p| p + Vec3::new(3.0, 4.0, 0.0)).collect();
    assert!((compute_mkpe(&off, &gt).unwrap() - 5.0).abs() < 1e-12);
    for _ in 0..50 {
        let pred: Vec<Vec3> = (0..21).map(|_| Vec3::new(rng.random(), rng.random(), rng.random()) * 300.0).collect();
        let mut acc = 0.0;
        for k in 0..21 {
            let (dx, dy, dz) = (pred[k].x - gt[k].x, pred[k].y - gt[k].y, pred[k].z - gt[k].z);
            acc += (dx * dx + dy * dy + dz * dz).sqrt();
        }
        assert!((compute_mkpe(&pred, &gt).unwrap() - acc / 21.0).abs() < 1e-12);
    }
    assert!(matches!(compute_mkpe(&gt[..20], &gt), Err(HarnessError::ShapeMismatch { expected: 21, got: 20 })));
}

#[test]
fn auc_examples_and_oracle() {
    assert_eq!(compute_auc(&[0.0; 40], AUC_MAX_MM).unwrap(), 1.0);
    assert_eq!(compute_auc(&[50.5, 80.0, 1e6], AUC_MAX_MM).unwrap(), 0.0);
    let mut e = vec![10.0; 50];
    e.extend([60.0; 50]);
    let want = 0.5 * (50.0 - 10.0 + 0.5) / 50.0;
    assert!((brute_auc(&e) - want).abs() < 1e-12);
    assert!((compute_auc(&e, AUC_MAX_MM).unwrap() - want).abs() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.random_range(1..300);
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..70.0)).collect();
        assert!((compute_auc(&e, AUC_MAX_MM).unwrap() - brute_auc(&e)).abs() < 1e-9);
    }
    assert!(matches!(compute_auc(&[], AUC_MAX_MM), Err(HarnessError::EmptyInput(_))));
}

proptest! {
    #[test]
    fn pck_is_monotone_and_auc_bounded(e in prop::collection::vec(0.0..120.0f64, 1..200)) {
        let pck = pck_curve(&e, 50).unwrap();
        prop_assert_eq!(pck.len(), PCK_THRESHOLDS);
        prop_assert!(pck.windows(2).all(|w| w[0] <= w[1]));
        let auc = auc_from_pck(&pck);
        prop_assert!((0.0..=1.0).contains(&auc));
    }
}

// ------------------------------------------------------------- training

fn l1(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs().sum()).sum::<f64>() / (3 * a.len()) as f64
}

/// Plain-loop loss terms of one prediction.
struct Terms {
    t: [f64; 6],
    sum2d: [f64; 2],
    cnt2d: [usize; 2],
}

fn reproject(cam: &FisheyeCamera, pts: &[Vec3], gt: &[handreg_core::geometry::Vec2]) -> (f64, usize) {
    let (mut s, mut n) = (0.0, 0);
    for (p, q) in pts.iter().zip(gt) {
        if let Ok(px) = cam.project(p) {
            s += (px.x - q.x).abs() + (px.y - q.y).abs();
            n += 1;
        }
    }
    (s, n)
}

fn terms(net: &Network, t: &HandTemplate, p: &Prediction, rec: &PreparedRecord, proj: &[(&FisheyeCamera, &[handreg_core::geometry::Vec2])]) -> Terms {
    let gt = &rec.keypoints;
    let state = skin(t, &p.hand_params);
    let (_, decoded) = predict_state(t, &net.decoder, &net.store, p).unwrap();
    let kp3d = l1(&p.indep_keypoints, gt) + l1(&state.keypoints3d, gt);
    let mesh = l1(&state.vertices, &rec.vertices) + l1(&decoded, &rec.vertices);
    let (bp, bg) = (bone_vectors(&p.indep_keypoints), bone_vectors(gt));
    let bone_len = bp.lengths.iter().zip(&bg.lengths).map(|(a, b)| (a - b).abs()).sum::<f64>() / bp.lengths.len() as f64;
    let bone_ang = bp.angles.iter().zip(&bg.angles).map(|(a, b)| (a - b).abs()).sum::<f64>() / bp.angles.len() as f64;
    let mut var = 0.0;
    for k in 0..NUM_KEYPOINTS {
        let e = (p.indep_keypoints[k] - gt[k]).abs().sum();
        let s = p.keypoint_log_scale[k].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX);
        var += e * (-s).exp() + 3.0 * s;
    }
    var /= NUM_KEYPOINTS as f64;
    let v = p.hand_params.to_vec();
    let reg = v[6..].iter().map(|x| x * x).sum::<f64>() / 55.0;
    let mut sum2d = [0.0; 2];
    let mut cnt2d = [0; 2];
    for (i, (cam, kp)) in proj.iter().enumerate() {
        (sum2d[i], cnt2d[i]) = reproject(cam, &p.indep_keypoints, kp);
    }
    Terms {
        t: [kp3d, mesh, bone_len, bone_ang, var, reg],
        sum2d,
        cnt2d,
    }
}

/// Batch objective of one path from per-sample terms.
fn path_total(all: &[Terms], w: &LossWeights, stereo: bool) -> f64 {
    let wa = w.as_array();
    let n = all.len() as f64;
    let mut total = 0.0;
    for i in 0..6 {
        total += wa[i] * all.iter().map(|x| x.t[i]).sum::<f64>() / n;
    }
    let s0: f64 = all.iter().map(|x| x.sum2d[0]).sum();
    let c0: usize = all.iter().map(|x| x.cnt2d[0]).sum();
    total += wa[6] * if c0 > 0 { 0.5 * s0 / c0 as f64 } else { 0.0 };
    if stereo {
        let s1: f64 = all.iter().map(|x| x.sum2d[1]).sum();
        let c1: usize = all.iter().map(|x| x.cnt2d[1]).sum();
        total += wa[7] * 0.5 * (s0 + s1) / (c0 + c1) as f64;
    }
    total
}

#[test]
fn first_step_loss_matches_an_independent_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 12);
    let mut cfg = config(dir.path(), 1);
    cfg.batch_size = 12;
    let (_, data, template) = prepare_training(&ds, 0).unwrap();
    let mut nc = cfg.network.clone();
    nc.init_seed = cfg.seed;
    nc.num_vertices = template.num_vertices();
    let net = Network::new(nc, data.head_stats()).unwrap();
    assert!(data.stereo_count() > 0 && data.stereo_count() < 12);

    let rig = &data.rig;
    let mut mono = Vec::new();
    for v in &data.views {
        let p = net.predict_mono(&[&v.crop], &[v.meta], &[v.frame]).unwrap().remove(0);
        mono.push(terms(&net, &template, &p, &data.records[v.record], &[(rig.camera(v.view), &v.kp2d)]));
    }
    let mut stereo = Vec::new();
    for r in data.records.iter().filter(|r| r.is_stereo()) {
        let (l, rv) = (&data.views[r.views[0].unwrap()], &data.views[r.views[1].unwrap()]);
        let p = net.predict_stereo(&[&l.crop], &[l.meta], &[&rv.crop], &[rv.meta], &[r.rel.unwrap()], &[l.frame]).unwrap().remove(0);
        stereo.push(terms(&net, &template, &p, r, &[(&rig.left, &l.kp2d), (&rig.right, &rv.kp2d)]));
    }
    let oracle = path_total(&mono, &cfg.weights, false) + path_total(&stereo, &cfg.weights, true);

    let mut trainer = Trainer::new(net, &template, &data, &cfg).unwrap();
    let m = trainer.step().unwrap();
    assert!((m.total - oracle).abs() < 1e-9 * oracle.max(1.0), "{} vs {oracle}", m.total);
    assert!((m.mono.total + m.stereo.unwrap().total - m.total).abs() < 1e-9 * m.total);
}

#[test]
fn training_and_evaluation_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 24);
    let cfg = config(dir.path(), 6);
    let a = train_with(&cfg, &ds, |_| {}).unwrap();
    let b = train_with(&cfg, &ds, |_| {}).unwrap();
    assert_eq!(a.log.rows.len(), 6);
    assert_eq!(a.log.to_text(), b.log.to_text());
    let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    a.model.save(&pa, Some(&cfg)).unwrap();
    b.model.save(&pb, Some(&cfg)).unwrap();
    let bytes = std::fs::read(&pa).unwrap();
    assert_eq!(bytes, std::fs::read(&pb).unwrap());

    let loaded = TrainedModel::load(&pa).unwrap();
    let r1 = evaluate(&loaded, &ds, Split::Test).unwrap();
    let r2 = evaluate(&TrainedModel::load(&pa).unwrap(), &ds, Split::Test).unwrap();
    assert_eq!(r1.to_text(), r2.to_text());
    assert_eq!(std::fs::read(&pa).unwrap(), bytes);
    assert_eq!(r1.to_text(), evaluate(&a.model, &ds, Split::Test).unwrap().to_text());

    let mut other = cfg.clone();
    other.seed = 5;
    assert_ne!(train_with(&other, &ds, |_| {}).unwrap().log.to_text(), a.log.to_text());
}

#[test]
fn mono_mode_never_builds_the_stereo_path() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 16);
    let mut cfg = config(dir.path(), 3);
    cfg.stereo_mode = StereoMode::Mono;
    let out = train_with(&cfg, &ds, |_| {}).unwrap();
    assert!(out.log.rows.iter().all(|r| r.stereo.is_none()));
    cfg.stereo_mode = StereoMode::Mixed;
    cfg.batch_size = 16;
    let out = train_with(&cfg, &ds, |_| {}).unwrap();
    assert!(out.log.rows[0].stereo.is_some());
}

#[test]
fn non_finite_weights_abort_with_the_term_named() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 8);
    let cfg = config(dir.path(), 1);
    let (_, data, template) = prepare_training(&ds, 0).unwrap();
    let mut nc = cfg.network.clone();
    nc.num_vertices = template.num_vertices();
    let mut net = Network::new(nc, data.head_stats()).unwrap();
    let id = net.store.find("head.kp.b").unwrap();
    net.store.get_mut(id).data_mut()[0] = f64::NAN;
    let mut t = Trainer::new(net, &template, &data, &cfg).unwrap();
    match t.step() {
        Err(e @ HarnessError::NonFiniteLoss { .. }) => {
            assert!(e.to_string().contains("kp3d"), "{e}");
            assert_eq!(e.exit_code(), 3);
        }
        other => panic!("expected a non-finite loss, got {:?}", other.map(|m| m.total)),
    }
}

// ------------------------------------------------------------- evaluation

#[test]
fn baseline_rows_match_direct_computation() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 20);
    let out = train_with(&config(dir.path(), 2), &ds, |_| {}).unwrap();
    let report = evaluate(&out.model, &ds, Split::Test).unwrap();

    let train = ds.split(Split::Train);
    let mut mean = [Vec3::zeros(); 21];
    for r in train {
        for k in 0..21 {
            mean[k] += r.keypoints3d[k] / train.len() as f64;
        }
    }
    let test = ds.split(Split::Test);
    let direct = test.iter().map(|r| compute_mkpe(&mean, &r.keypoints3d).unwrap()).sum::<f64>() / test.len() as f64;
    let row = report.row(ROW_MEAN_POSE).unwrap();
    assert!((row.mkpe - direct).abs() < 1e-9);
    assert_eq!(row.samples, test.len());

    let tri = report.row(ROW_TRIANGULATION).unwrap();
    assert!(tri.mkpe < 0.01, "{}", tri.mkpe);
    assert_eq!(tri.samples, report.stereo_records);
    assert_eq!(report.stereo_records, test.iter().filter(|r| r.is_stereo()).count());

    let views: usize = test.iter().map(|r| r.present_views().count()).sum();
    assert_eq!(report.row(ROW_MONO).unwrap().samples, views);
    assert_eq!(report.row(ROW_STEREO).unwrap().samples, report.stereo_records);
    for r in &report.rows {
        assert!((0.0..=1.0).contains(&r.auc));
        assert!(r.pck.windows(2).all(|w| w[0] <= w[1]));
        assert!((auc_from_pck(&r.pck) - r.auc).abs() < 1e-12);
    }
    assert_eq!(report.per_keypoint_mkpe.len(), 21);
    let back = EvalReport::from_text(&report.to_text()).unwrap();
    assert_eq!(back.to_text(), report.to_text());
    assert!(report.table().contains("12.37"));
}

#[test]
fn inference_routes_by_view_count() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 8);
    let out = train_with(&config(dir.path(), 1), &ds, |_| {}).unwrap();
    let model = out.model;
    let rec = ds.split(Split::Test).iter().find(|r| r.is_stereo()).unwrap();
    let view = |v: usize| {
        let s = rec.views[v].as_ref().unwrap();
        InferView {
            view: v,
            crop: s.crop_f64(),
            bbox: s.bbox,
        }
    };
    model.net.reset_backbone_runs();
    let mono = infer(&model, &ds.rig, &[view(0)]).unwrap();
    assert_eq!(mono.path, InferPath::Mono);
    assert_eq!(model.net.backbone_runs(), 1);
    model.net.reset_backbone_runs();
    let stereo = infer(&model, &ds.rig, &[view(1), view(0)]).unwrap();
    assert_eq!(stereo.path, InferPath::Stereo);
    assert_eq!(model.net.backbone_runs(), 2);
    assert_eq!(stereo.state.keypoints3d.len(), 21);
    assert!(infer(&model, &ds.rig, &[]).is_err());
    assert!(infer(&model, &ds.rig, &[view(0), view(0)]).is_err());

    let obj = write_obj(&stereo.decoded_vertices, &model.template.faces);
    let (v, f) = read_obj(&obj).unwrap();
    assert_eq!(f, model.template.faces);
    for (a, b) in v.iter().zip(&stereo.decoded_vertices) {
        assert!((a - b).norm() < 1e-5);
    }
}

// ------------------------------------------------------------- plots and config

#[test]
fn plot_tables() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 8);
    let out = train_with(&config(dir.path(), 2), &ds, |_| {}).unwrap();
    let report = evaluate(&out.model, &ds, Split::Test).unwrap();
    let table = pck_table(&report).unwrap();
    assert_eq!(table.lines().count(), 1 + 51);
    for (method, auc) in auc_from_table(&table).unwrap() {
        assert!((auc - report.row(&method).unwrap().auc).abs() < 1e-9);
    }
    let losses = loss_table(&out.log.to_text()).unwrap();
    assert_eq!(losses.lines().count(), 3);
    assert!(matches!(loss_table(&MetricsLog::header()), Err(HarnessError::EmptyInput(_))));
    assert!(loss_table("").is_err());
}

#[test]
fn train_config_text() {
    let dir = tempfile::tempdir().unwrap();
    let _ = dataset(dir.path(), 4);
    let mut cfg = config(dir.path(), 7);
    cfg.lr = 5e-4;
    cfg.stereo_mode = StereoMode::Mono;
    cfg.network.use_metadata = false;
    let back = TrainConfig::from_text(&cfg.to_text(), dir.path(), None).unwrap();
    assert_eq!(back.to_text(), cfg.to_text());
    assert_eq!(back.seed, 4);
    let no_seed: String = cfg.to_text().lines().filter(|l| !l.starts_with("seed")).map(|l| format!("{l}\n")).collect();
    assert!(matches!(TrainConfig::from_text(&no_seed, dir.path(), None), Err(HarnessError::Config(_))));
    let missing = dir.path().join("nowhere");
    let e = TrainConfig::from_text(&cfg.to_text(), dir.path(), Some(&missing)).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    let mut bad = cfg.clone();
    bad.batch_size = 0;
    assert!(bad.validate().is_err());
}
