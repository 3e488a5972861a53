use handreg_autodiff::gradcheck::{check_gradients, max_rel_err};
use handreg_autodiff::{Graph, ParamStore, Tensor};
use handreg_core::geometry::{rodrigues, RigidTransform, Vec3};
use handreg_core::hand_model::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn template() -> &'static HandTemplate {
    static T: OnceLock<HandTemplate> = OnceLock::new();
    T.get_or_init(|| HandTemplate::build(0, DEFAULT_VERTEX_BUDGET).unwrap())
}

fn v3() -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-1.2..1.2f64).prop_map(Vec3::from)
}

fn params_strategy() -> impl Strategy<Value = HandParams> {
    (v3(), prop::array::uniform3(-400.0..400.0f64), prop::array::uniform15(v3()), prop::array::uniform10(-2.0..2.0f64)).prop_map(
        |(r, t, pose, shape)| HandParams {
            global_rot: r,
            global_trans: Vec3::from(t),
            joint_pose: pose,
            shape,
        },
    )
}

fn random_params(rng: &mut ChaCha8Rng) -> HandParams {
    let mut v: Vec<f64> = (0..PARAM_DIM).map(|_| rng.random_range(-0.8..0.8)).collect();
    for x in &mut v[3..6] {
        *x *= 300.0;
    }
    HandParams::from_slice(&v).unwrap()
}

fn max_dist(a: &[Vec3], b: &[Vec3]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn skinning_is_rigidly_equivariant(p in params_strategy(), w in v3(), tau in prop::array::uniform3(-300.0..300.0f64)) {
        let t = template();
        let motion = RigidTransform::from_axis_angle(w, Vec3::from(tau));
        let moved = skin(t, &p.transformed(&motion));
        let expected = skin(t, &p).transformed(&motion);
        prop_assert!(max_dist(&moved.vertices, &expected.vertices) < 1e-9);
        prop_assert!(max_dist(&moved.keypoints3d, &expected.keypoints3d) < 1e-9);
        prop_assert!(max_dist(&moved.posed_joints, &expected.posed_joints) < 1e-9);
    }

    #[test]
    fn kinematics_preserve_bone_lengths(p in params_strategy()) {
        let t = template();
        let kin = forward_kinematics(t, &p);
        let rest = t.shaped_joints(&p.shape);
        for j in 1..NUM_JOINTS {
            let parent = t.parents[j].unwrap();
            let posed = (kin.posed_joints[j] - kin.posed_joints[parent]).norm();
            let r = (rest[j] - rest[parent]).norm();
            prop_assert!((posed - r).abs() < 1e-9, "joint {j}: {posed} vs {r}");
        }
    }

    #[test]
    fn keypoints_are_regressed_from_vertices(p in params_strategy()) {
        let t = template();
        let s = skin(t, &p);
        for (k, row) in t.regressor.iter().enumerate() {
            let mut acc = Vec3::zeros();
            for (w, v) in row.iter().zip(&s.vertices) {
                acc += v * *w;
            }
            prop_assert!((acc - s.keypoints3d[k]).norm() < 1e-9);
        }
    }

    #[test]
    fn global_translation_shifts_joints(tau in prop::array::uniform3(-500.0..500.0f64)) {
        let t = template();
        let p = HandParams { global_trans: Vec3::from(tau), ..HandParams::default() };
        let kin = forward_kinematics(t, &p);
        for (a, b) in kin.posed_joints.iter().zip(&t.joints) {
            prop_assert!((a - b - Vec3::from(tau)).norm() < 1e-12);
        }
    }
}

#[test]
fn template_invariants_over_seeds() {
    for seed in 0..10 {
        let t = HandTemplate::build(seed, DEFAULT_VERTEX_BUDGET).unwrap();
        assert_eq!(t, HandTemplate::build(seed, DEFAULT_VERTEX_BUDGET).unwrap());
        let nv = t.num_vertices();
        assert!((nv as f64 - 256.0).abs() <= 25.6, "seed {seed}: {nv} vertices");
        for w in &t.weights {
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(t.regressor.len(), NUM_KEYPOINTS);
        for r in &t.regressor {
            assert_eq!(r.len(), nv);
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(t.parents[0], None);
        for j in 1..NUM_JOINTS {
            // parents precede children, so following parents always reaches the root
            assert!(t.parents[j].unwrap() < j);
        }
        assert!(t.faces.iter().flatten().all(|&i| i < nv));
    }
}

#[test]
fn vertex_budget_tracking_and_minimum() {
    for budget in [100, 150, 256, 400, 800] {
        let nv = HandTemplate::build(3, budget).unwrap().num_vertices() as f64;
        assert!((nv - budget as f64).abs() <= 0.1 * budget as f64, "budget {budget}: {nv}");
    }
    assert!(matches!(HandTemplate::build(0, 99), Err(HandModelError::BudgetTooSmall(99))));
}

#[test]
fn zero_parameters_give_the_template() {
    let t = template();
    let s = skin(t, &HandParams::default());
    assert!(max_dist(&s.vertices, &t.vertices) < 1e-12);
    assert!(max_dist(&s.posed_joints, &t.joints) < 1e-12);
}

#[test]
fn unit_shape_adds_its_basis_column() {
    let t = template();
    for k in 0..NUM_SHAPE {
        let mut p = HandParams::default();
        p.shape[k] = 1.0;
        let s = skin(t, &p);
        let expected: Vec<Vec3> = (0..t.num_vertices()).map(|v| t.vertices[v] + t.shape_direction(v, k)).collect();
        assert!(max_dist(&s.vertices, &expected) < 1e-12);
    }
}

#[test]
fn template_keypoints_give_rest_bone_lengths() {
    let t = template();
    let geo = bone_vectors(&t.rest_keypoints());
    let rest = t.rest_bone_lengths(&[0.0; NUM_SHAPE]);
    for (a, b) in geo.lengths.iter().zip(rest) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn straight_chains_have_zero_angles() {
    let mut kp = vec![Vec3::zeros(); NUM_KEYPOINTS];
    for f in 0..5 {
        let dir = Vec3::new(f as f64 - 2.0, 10.0, 0.5).normalize();
        for k in 0..4 {
            kp[keypoint_index(f, k)] = dir * (20.0 * (k + 1) as f64);
        }
    }
    let geo = bone_vectors(&kp);
    for (i, &(a, b)) in ANGLE_PAIRS.iter().enumerate() {
        assert!(geo.angle_valid[i]);
        assert!(geo.angles[i].abs() < 1e-6, "pair ({a}, {b}): {}", geo.angles[i]);
    }
}

#[test]
fn bone_vectors_match_per_edge_recomputation() {
    let t = template();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let kp = skin(t, &random_params(&mut rng)).keypoints3d;
        let geo = bone_vectors(&kp);
        for (b, &(p, c)) in SKELETON_EDGES.iter().enumerate() {
            let d = [kp[c].x - kp[p].x, kp[c].y - kp[p].y, kp[c].z - kp[p].z];
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert!((geo.lengths[b] - len).abs() < 1e-12);
        }
        for (i, &(a, b)) in ANGLE_PAIRS.iter().enumerate() {
            let (u, v) = (geo.bones[a], geo.bones[b]);
            let dot = u.x * v.x + u.y * v.y + u.z * v.z;
            let ang = (dot / (geo.lengths[a] * geo.lengths[b])).clamp(-1.0, 1.0).acos();
            assert!((geo.angles[i] - ang).abs() < 1e-12);
        }
    }
}

#[test]
fn degenerate_bones_are_flagged() {
    let kp = vec![Vec3::new(1.0, 2.0, 3.0); NUM_KEYPOINTS];
    let geo = bone_vectors(&kp);
    assert!(geo.angle_valid.iter().all(|v| !v));
    assert!(geo.angles.iter().all(|&a| a == 0.0));
}

#[test]
fn graph_skinning_matches_reference() {
    let t = template();
    let tt = TemplateTensors::new(t);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ps: Vec<HandParams> = (0..3).map(|_| random_params(&mut rng)).collect();
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[3, PARAM_DIM], ps.iter().flat_map(|p| p.to_vec()).collect()).unwrap());
    let s = skin_graph(&mut g, &tt, x).unwrap();
    let nv = t.num_vertices();
    for (b, p) in ps.iter().enumerate() {
        let r = skin(t, p);
        let vs = &g.value(s.vertices).data()[b * nv * 3..(b + 1) * nv * 3];
        let kp = &g.value(s.keypoints).data()[b * 63..(b + 1) * 63];
        for (v, c) in r.vertices.iter().zip(vs.chunks(3)) {
            assert!((v - Vec3::new(c[0], c[1], c[2])).norm() < 1e-9);
        }
        for (v, c) in r.keypoints3d.iter().zip(kp.chunks(3)) {
            assert!((v - Vec3::new(c[0], c[1], c[2])).norm() < 1e-9);
        }
    }
}

#[test]
fn rodrigues_graph_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ws: Vec<Vec3> = (0..8)
        .map(|i| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)) * if i == 0 { 0.0 } else { 1.0 })
        .collect();
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[8, 3], ws.iter().flat_map(|w| [w.x, w.y, w.z]).collect()).unwrap());
    let r = rodrigues_graph(&mut g, x).unwrap();
    for (i, w) in ws.iter().enumerate() {
        let m = rodrigues(w);
        let got = &g.value(r).data()[9 * i..9 * i + 9];
        for row in 0..3 {
            for col in 0..3 {
                assert!((m[(row, col)] - got[3 * row + col]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn skin_gradients_match_finite_differences() {
    let tt = TemplateTensors::new(template());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..3 {
        let mut p = random_params(&mut rng).to_vec();
        for x in &mut p[3..6] {
            *x /= 300.0;
        }
        let w: Vec<f64> = (0..template().num_vertices() * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wk: Vec<f64> = (0..63).map(|_| rng.random_range(-1.0..1.0)).collect();
        let checks = check_gradients(&[Tensor::new(&[1, PARAM_DIM], p).unwrap()], 1e-6, |g, v| {
            let s = skin_graph(g, &tt, v[0]).map_err(|e| handreg_autodiff::AutodiffError::InvalidArgument { op: "skin", msg: e.to_string() })?;
            let wv = g.input(Tensor::new(&[1, template().num_vertices(), 3], w.clone())?);
            let wkv = g.input(Tensor::new(&[1, 21, 3], wk.clone())?);
            let a = g.mul(s.vertices, wv)?;
            let b = g.mul(s.keypoints, wkv)?;
            let a = g.sum(a);
            let b = g.sum(b);
            g.add(a, b)
        })
        .unwrap();
        let err = max_rel_err(&checks);
        assert!(err < 1e-4, "trial {trial}: {err:e}");
    }
}

#[test]
fn decoder_gradients_and_shapes() {
    let nv = template().num_vertices();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let dec = MeshDecoder::new(&mut store, "dec", nv, &mut rng);
    assert!(dec.decode_mesh(&store, &[0.0; LATENT_DIM]).unwrap().iter().all(|v| v.norm() == 0.0));
    assert!(matches!(dec.decode_mesh(&store, &[0.0; 3]), Err(HandModelError::DimensionMismatch { .. })));
    let w2: Vec<f64> = (0..MeshDecoder::HIDDEN * nv * 3).map(|_| rng.random_range(-0.2..0.2)).collect();
    store.set(dec.w2, Tensor::new(&[MeshDecoder::HIDDEN, nv * 3], w2).unwrap()).unwrap();
    let z: Vec<f64> = (0..LATENT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    let out = dec.decode_mesh(&store, &z).unwrap();
    assert_eq!(out.len(), nv);
    assert!(out.iter().any(|v| v.norm() > 0.0));
    let wo: Vec<f64> = (0..nv * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let checks = check_gradients(&[Tensor::new(&[1, LATENT_DIM], z).unwrap()], 1e-6, |g, v| {
        let p = store.bind(g);
        let o = dec
            .decode_graph(g, &p, v[0])
            .map_err(|e| handreg_autodiff::AutodiffError::InvalidArgument { op: "decode", msg: e.to_string() })?;
        let w = g.input(Tensor::new(&[1, nv, 3], wo.clone())?);
        let m = g.mul(o, w)?;
        Ok(g.sum(m))
    })
    .unwrap();
    assert!(max_rel_err(&checks) < 1e-4);
}

#[test]
fn obj_round_trip_of_posed_mesh() {
    let t = template();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = skin(t, &random_params(&mut rng));
    let (v, f) = read_obj(&write_obj(&s.vertices, &t.faces)).unwrap();
    assert_eq!(f, t.faces);
    assert!(max_dist(&v, &s.vertices) < 1e-5);
    assert!(read_obj("v 1 2\n").is_err());
}
