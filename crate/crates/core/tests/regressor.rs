use handreg_autodiff::{BoundParams, Graph, Tensor, Var};
use handreg_core::geometry::{BoundingBox, RigidTransform, Vec3};
use handreg_core::hand_model::{HandTemplate, TemplateTensors, LATENT_DIM, NUM_KEYPOINTS, PARAM_DIM};
use handreg_core::metadata::META_DIM;
use handreg_core::regressor::*;
use handreg_core::synth::rig_preset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64) -> (Network, HandTemplate) {
    let t = HandTemplate::build(0, 256).unwrap();
    let config = NetworkConfig {
        num_vertices: t.num_vertices(),
        init_seed: seed,
        ..NetworkConfig::test_preset()
    };
    (Network::new(config, HeadStats::default()).unwrap(), t)
}

struct Inputs {
    crops: Vec<Vec<f64>>,
    metas: Vec<[f64; META_DIM]>,
    rels: Vec<[f64; REL_DIM]>,
}

fn inputs(n: usize, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Inputs {
        crops: (0..2 * n).map(|_| (0..32 * 32).map(|_| rng.random_range(0.0..1.0)).collect()).collect(),
        metas: (0..2 * n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect(),
        rels: (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect(),
    }
}

fn frames(n: usize) -> Vec<RigidTransform> {
    vec![RigidTransform::identity(); n]
}

fn mono(net: &Network, x: &Inputs, n: usize) -> Vec<Prediction> {
    let crops: Vec<&[f64]> = x.crops[..n].iter().map(Vec::as_slice).collect();
    net.predict_mono(&crops, &x.metas[..n], &frames(n)).unwrap()
}

fn stereo(net: &Network, x: &Inputs, n: usize, swap: bool) -> Vec<Prediction> {
    let (a, b) = if swap { (n, 0) } else { (0, n) };
    let cl: Vec<&[f64]> = x.crops[a..a + n].iter().map(Vec::as_slice).collect();
    let cr: Vec<&[f64]> = x.crops[b..b + n].iter().map(Vec::as_slice).collect();
    net.predict_stereo(&cl, &x.metas[a..a + n], &cr, &x.metas[b..b + n], &x.rels, &frames(n)).unwrap()
}

#[test]
fn output_shapes_and_finiteness() {
    let (net, _) = setup(1);
    let x = inputs(3, 1);
    for p in mono(&net, &x, 3).iter().chain(&stereo(&net, &x, 3, false)) {
        assert!(p.is_finite());
        assert_eq!(p.hand_params.to_vec().len(), PARAM_DIM);
        assert_eq!(p.mesh_latent.len(), LATENT_DIM);
        assert_eq!(p.indep_keypoints.len(), NUM_KEYPOINTS);
        assert_eq!(p.keypoint_log_scale.len(), NUM_KEYPOINTS);
    }
}

#[test]
fn forward_is_deterministic_and_batch_independent() {
    let (a, _) = setup(2);
    let (b, _) = setup(2);
    let x = inputs(4, 2);
    assert_eq!(mono(&a, &x, 4), mono(&b, &x, 4));
    assert_eq!(stereo(&a, &x, 4, false), stereo(&b, &x, 4, false));
    // a one-element batch gives the same answer as its row in a bigger batch
    let one = mono(&a, &x, 1);
    let four = mono(&a, &x, 4);
    let d: f64 = one[0].indep_keypoints.iter().zip(&four[0].indep_keypoints).map(|(p, q)| (p - q).norm()).sum();
    assert!(d < 1e-9);
    let (c, _) = setup(3);
    assert_ne!(mono(&a, &x, 1), mono(&c, &x, 1));
}

#[test]
fn stereo_runs_the_backbone_once_per_view() {
    let (net, _) = setup(4);
    let x = inputs(1, 4);
    net.reset_backbone_runs();
    stereo(&net, &x, 1, false);
    assert_eq!(net.backbone_runs(), 2);
    net.reset_backbone_runs();
    mono(&net, &x, 1);
    assert_eq!(net.backbone_runs(), 1);
}

#[test]
fn stereo_adds_only_the_trunk() {
    let (net, _) = setup(5);
    let c = &net.config;
    let f = c.fusion_width;
    let trunk = c.stereo_input_dim() * f + f + f * f + f;
    assert_eq!(net.stereo_trunk_param_count(), trunk);
    assert_eq!(net.mono_param_count() + trunk, net.store.numel());
    let mono_trunk = (c.image_feature_dim() + c.meta_width) * f + f + f * f + f;
    assert!(net.mono_param_count() > mono_trunk);
}

#[test]
fn view_order_matters() {
    let (net, _) = setup(6);
    let x = inputs(2, 6);
    let a = stereo(&net, &x, 2, false);
    let b = stereo(&net, &x, 2, true);
    let d: f64 = a[0].indep_keypoints.iter().zip(&b[0].indep_keypoints).map(|(p, q)| (p - q).norm()).sum();
    assert!(d > 1e-6);
}

#[test]
fn metadata_ablation_ignores_metadata() {
    let t = HandTemplate::build(0, 256).unwrap();
    let config = NetworkConfig {
        num_vertices: t.num_vertices(),
        use_metadata: false,
        ..NetworkConfig::test_preset()
    };
    let net = Network::new(config, HeadStats::default()).unwrap();
    let x = inputs(1, 7);
    let mut y = inputs(1, 7);
    y.metas[0] = [0.5; META_DIM];
    assert_eq!(mono(&net, &x, 1), mono(&net, &y, 1));
    let (full, _) = setup(0);
    assert_ne!(mono(&full, &x, 1), mono(&full, &y, 1));
}

#[test]
fn world_from_view_maps_the_view_axis_to_the_box_ray() {
    let rig = rig_preset();
    let b = BoundingBox::new(400.0, 250.0, 470.0, 330.0).unwrap();
    let f = world_from_view(&rig.left, &b).unwrap();
    let p = f.apply(&Vec3::new(0.0, 0.0, 300.0));
    let px = rig.left.project(&p).unwrap();
    assert!((px - b.center()).norm() < 1e-6);
    assert!((f.apply(&Vec3::zeros()) - rig.left.center_world()).norm() < 1e-9);
}

/// Fixed random projection of both paths' outputs, for gradient probes.
fn probe_loss(net: &Network, t: &TemplateTensors, g: &mut Graph, x: &Inputs, p: &BoundParams) -> Var {
    let c = g.input(Tensor::new(&[1, 1, 32, 32], x.crops[0].clone()).unwrap());
    let cr = g.input(Tensor::new(&[1, 1, 32, 32], x.crops[1].clone()).unwrap());
    let m = g.input(Tensor::new(&[1, META_DIM], x.metas[0].to_vec()).unwrap());
    let mr = g.input(Tensor::new(&[1, META_DIM], x.metas[1].to_vec()).unwrap());
    let rel = g.input(Tensor::new(&[1, REL_DIM], x.rels[0].to_vec()).unwrap());
    let frames = RigidBatch::new(&frames(1));
    let hm = net.forward_mono(g, p, c, m).unwrap();
    let hs = net.forward_stereo(g, p, c, m, cr, mr, rel).unwrap();
    let mut terms = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for h in [hm, hs] {
        let w = net.world_outputs(g, p, t, h, &frames).unwrap();
        for v in [w.keypoints, w.mano_keypoints, w.mano_vertices, w.decoded_vertices, h.log_scale] {
            let shape = g.shape(v).to_vec();
            let n = shape.iter().product();
            let c = g.input(Tensor::new(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
            let s = g.mul(v, c).unwrap();
            terms.push(g.sum(s));
        }
    }
    terms.into_iter().reduce(|a, b| g.add(a, b).unwrap()).unwrap()
}

fn gradients(net: &Network, t: &TemplateTensors, x: &Inputs) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let p = net.store.bind(&mut g);
    let l = probe_loss(net, t, &mut g, x, &p);
    g.backward(l).unwrap();
    (g.value(l).item(), net.store.grads(&g, &p))
}

fn loss_value(net: &Network, t: &TemplateTensors, x: &Inputs) -> f64 {
    let mut g = Graph::new();
    let p = net.store.bind(&mut g);
    let l = probe_loss(net, t, &mut g, x, &p);
    g.value(l).item()
}

/// Gives the zero-initialized decoder output stage some weight so that
/// gradients reach the latent head.
fn wake_decoder(net: &mut Network) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ids: Vec<_> = net.store.ids().filter(|&id| net.store.name(id).starts_with("decoder")).collect();
    for id in ids {
        for v in net.store.get_mut(id).data_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.01..0.01);
            }
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let (mut net, template) = setup(8);
    wake_decoder(&mut net);
    let t = TemplateTensors::new(&template);
    let x = inputs(1, 8);
    let (_, grads) = gradients(&net, &t, &x);
    for (id, gr) in net.store.ids().zip(&grads) {
        assert!(gr.is_finite());
        assert!(gr.data().iter().any(|v| *v != 0.0), "no gradient reaches {}", net.store.name(id));
    }
}

#[test]
fn probed_weights_match_finite_differences() {
    let (mut net, template) = setup(9);
    wake_decoder(&mut net);
    let t = TemplateTensors::new(&template);
    let x = inputs(1, 9);
    let (_, grads) = gradients(&net, &t, &x);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-6;
    for name in ["stem.w", "stage2.conv1.w", "meta.fc1.w", "mono.fc2.w", "stereo.fc1.w", "head.params.w", "head.latent.w", "head.kp.b", "head.scale.w"] {
        let id = net.store.find(name).unwrap_or_else(|| panic!("{name}"));
        for _ in 0..3 {
            let i = rng.random_range(0..net.store.get(id).numel());
            let orig = net.store.get(id).data()[i];
            net.store.get_mut(id).data_mut()[i] = orig + h;
            let up = loss_value(&net, &t, &x);
            net.store.get_mut(id).data_mut()[i] = orig - h;
            let down = loss_value(&net, &t, &x);
            net.store.get_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[id_index(&net, id)].data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            assert!(rel < 1e-4, "{name}[{i}]: fd {fd} vs analytic {an}");
        }
    }
}

fn id_index(net: &Network, id: handreg_autodiff::ParamId) -> usize {
    net.store.ids().position(|j| j == id).unwrap()
}

#[test]
fn checkpoint_round_trip() {
    let (net, _) = setup(10);
    let mut ckpt = handreg_autodiff::Checkpoint::new();
    net.save_into(&mut ckpt);
    let back = Network::load_from(&ckpt).unwrap();
    let x = inputs(2, 10);
    assert_eq!(mono(&net, &x, 2), mono(&back, &x, 2));
    assert_eq!(back.config, net.config);
    assert_eq!(back.heads, net.heads);
}

#[test]
fn bad_inputs_are_rejected() {
    let (net, _) = setup(11);
    let short = vec![0.0; 10];
    assert!(net.predict_mono(&[&short], &[[0.0; META_DIM]], &frames(1)).is_err());
    let mut g = Graph::new();
    let p = net.store.bind(&mut g);
    let c = g.input(Tensor::zeros(&[1, 1, 16, 16]));
    let m = g.input(Tensor::zeros(&[1, META_DIM]));
    assert!(net.forward_mono(&mut g, &p, c, m).is_err());
}
