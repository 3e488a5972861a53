//! The regression network: a residual CNN image branch, a fully connected
//! metadata branch, separate mono and stereo fusion trunks, and shared
//! heads for hand parameters, mesh latent, keypoints and keypoint scales.
//!
//! Heads regress in the *view frame*: the virtual camera of the (left)
//! view, rotated about the physical camera centre to look at the box
//! centre. A fixed rigid transform per view then maps every output to the
//! world frame, so the reported keypoints are world millimetres.

use std::sync::atomic::{AtomicUsize, Ordering};

use handreg_autodiff::{AutodiffError, BoundParams, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{self, BoundingBox, FisheyeCamera, GeometryError, RigidTransform, Vec3};
use crate::hand_model::{
    self, blend, forward_kinematics, skin, HandModelError, HandParams, HandState, HandTemplate, MeshDecoder, SkinnedVars,
    TemplateTensors, LATENT_DIM, NUM_KEYPOINTS, PARAM_DIM,
};
use crate::kv::{KvDoc, KvError, KvWriter};
use crate::metadata::META_DIM;

pub const IMAGE_FEATURE_DIM_DEFAULT: usize = 64;
pub const REL_DIM: usize = 12;
/// Divisor applied to the relative translation before it enters the net.
pub const REL_TRANSLATION_SCALE: f64 = 1000.0;
const KP_DIM: usize = NUM_KEYPOINTS * 3;

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    HandModel(#[from] HandModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("network config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<KvError> for RegressorError {
    fn from(e: KvError) -> Self {
        RegressorError::Config(e.to_string())
    }
}

pub type Result<T, E = RegressorError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub crop_size: usize,
    /// Channel width of the stem and of each of the four residual stages.
    pub widths: [usize; 4],
    pub meta_width: usize,
    pub fusion_width: usize,
    pub num_vertices: usize,
    /// When false the metadata inputs are replaced by zeros (ablation).
    pub use_metadata: bool,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            crop_size: 128,
            widths: [8, 16, 32, 64],
            meta_width: 64,
            fusion_width: 128,
            num_vertices: 250,
            use_metadata: true,
            init_seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Small crops for tests and desk-scale runs.
    pub fn test_preset() -> Self {
        Self {
            crop_size: 32,
            ..Self::default()
        }
    }

    pub fn image_feature_dim(&self) -> usize {
        self.widths[3]
    }

    pub fn stereo_input_dim(&self) -> usize {
        2 * self.image_feature_dim() + 2 * META_DIM + REL_DIM
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size < 16 || !self.crop_size.is_multiple_of(16) {
            return Err(RegressorError::Config(format!(
                "crop_size must be a positive multiple of 16, got {}",
                self.crop_size
            )));
        }
        if self.widths.contains(&0) || self.meta_width == 0 || self.fusion_width == 0 || self.num_vertices == 0 {
            return Err(RegressorError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.entry("crop_size", self.crop_size)
            .list("widths", &self.widths)
            .entry("meta_width", self.meta_width)
            .entry("fusion_width", self.fusion_width)
            .entry("num_vertices", self.num_vertices)
            .entry("use_metadata", self.use_metadata)
            .entry("init_seed", self.init_seed);
    }

    pub fn read_kv(doc: &KvDoc, base: &NetworkConfig) -> Result<Self> {
        let widths = if doc.contains("widths") {
            let v: Vec<usize> = doc.require_list("widths")?;
            v.try_into()
                .map_err(|_| RegressorError::Config("widths needs exactly 4 values".into()))?
        } else {
            base.widths
        };
        let c = Self {
            crop_size: doc.get_or("crop_size", base.crop_size)?,
            widths,
            meta_width: doc.get_or("meta_width", base.meta_width)?,
            fusion_width: doc.get_or("fusion_width", base.fusion_width)?,
            num_vertices: doc.get_or("num_vertices", base.num_vertices)?,
            use_metadata: doc.get_or("use_metadata", base.use_metadata)?,
            init_seed: doc.get_or("init_seed", base.init_seed)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new(None);
        self.write_kv(&mut w);
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::read_kv(&KvDoc::parse(text, None)?, &Self::default())
    }
}

/// Output standardization: `head = mean + std ⊙ raw`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadStats {
    pub kp_mean: Vec<f64>,
    pub kp_std: Vec<f64>,
    pub param_mean: Vec<f64>,
    pub param_std: Vec<f64>,
    pub log_scale_init: f64,
}

impl Default for HeadStats {
    fn default() -> Self {
        let mut kp_mean = vec![0.0; KP_DIM];
        for k in 0..NUM_KEYPOINTS {
            kp_mean[3 * k + 2] = 400.0;
        }
        let mut param_mean = vec![0.0; PARAM_DIM];
        param_mean[5] = 400.0;
        let mut param_std = vec![0.3; PARAM_DIM];
        param_std[3..6].copy_from_slice(&[50.0, 50.0, 100.0]);
        Self {
            kp_mean,
            kp_std: vec![50.0; KP_DIM],
            param_mean,
            param_std,
            log_scale_init: 2.0,
        }
    }
}

impl HeadStats {
    /// Per-dimension mean and standard deviation of view-frame targets.
    pub fn fit(keypoints: &[Vec<f64>], params: &[Vec<f64>]) -> Self {
        let stats = |rows: &[Vec<f64>], dim: usize, floor: f64| {
            let n = rows.len().max(1) as f64;
            let mut mean = vec![0.0; dim];
            for r in rows {
                for (m, x) in mean.iter_mut().zip(r) {
                    *m += x / n;
                }
            }
            let mut var = vec![0.0; dim];
            for r in rows {
                for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                    *v += (x - m) * (x - m) / n;
                }
            }
            (mean, var.into_iter().map(|v| v.sqrt().max(floor)).collect::<Vec<_>>())
        };
        let (kp_mean, kp_std) = stats(keypoints, KP_DIM, 1.0);
        let (param_mean, param_std) = stats(params, PARAM_DIM, 0.05);
        Self {
            kp_mean,
            kp_std,
            param_mean,
            param_std,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add_he(format!("{name}.w"), &[fan_in, out], fan_in, gain, rng),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[out])),
        }
    }

    fn apply(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        Ok(g.add(y, p.var(self.b))?)
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add_he(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, gain, rng),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, cout, 1, 1])),
            stride,
        }
    }

    fn apply(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p.var(self.w), self.stride)?;
        Ok(g.add(y, p.var(self.b))?)
    }
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    skip: Conv,
}

impl ResBlock {
    fn apply(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.conv1.apply(g, p, x)?;
        let h = g.relu(h);
        let h = self.conv2.apply(g, p, h)?;
        let s = self.skip.apply(g, p, x)?;
        let y = g.add(h, s)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
struct Layers {
    stem: Conv,
    blocks: Vec<ResBlock>,
    meta: [Linear; 2],
    mono: [Linear; 2],
    stereo: [Linear; 2],
    head_params: Linear,
    head_latent: Linear,
    head_kp: Linear,
    head_scale: Linear,
}

/// Head outputs in the view frame, batched over the leading axis.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[B, 61]`
    pub params: Var,
    /// `[B, 32]`
    pub latent: Var,
    /// `[B, 21, 3]`
    pub keypoints: Var,
    /// `[B, 21]`
    pub log_scale: Var,
}

/// One network prediction with every geometric field in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub hand_params: HandParams,
    pub mesh_latent: Vec<f64>,
    pub indep_keypoints: Vec<Vec3>,
    pub keypoint_log_scale: Vec<f64>,
}

impl Prediction {
    pub fn is_finite(&self) -> bool {
        self.hand_params.to_vec().iter().all(|v| v.is_finite())
            && self.mesh_latent.iter().all(|v| v.is_finite())
            && self.indep_keypoints.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self.keypoint_log_scale.iter().all(|v| v.is_finite())
    }
}

/// Transform from the view frame of `bbox` in `cam` to the world frame.
pub fn world_from_view(cam: &FisheyeCamera, bbox: &BoundingBox) -> Result<RigidTransform> {
    let q = geometry::virtual_rotation(cam, bbox)?;
    let wc = cam.world_from_cam();
    Ok(RigidTransform {
        rotation: wc.rotation * q,
        translation: wc.translation,
    })
}

/// Flattened relative virtual extrinsics as fed to the stereo trunk.
pub fn rel_vector(rel: &RigidTransform) -> [f64; REL_DIM] {
    let mut out = [0.0; REL_DIM];
    out[..9].copy_from_slice(&geometry::flatten_row_major(&rel.rotation));
    for i in 0..3 {
        out[9 + i] = rel.translation[i] / REL_TRANSLATION_SCALE;
    }
    out
}

/// Per-sample rigid transforms applied to `[B, K, 3]` point sets.
#[derive(Clone, Debug)]
pub struct RigidBatch {
    rot_t: Tensor,
    trans: Tensor,
}

impl RigidBatch {
    pub fn new(ts: &[RigidTransform]) -> Self {
        let b = ts.len();
        Self {
            rot_t: Tensor::new(&[b, 3, 3], ts.iter().flat_map(|t| t.rotation.iter().copied()).collect()).unwrap(),
            trans: Tensor::new(&[b, 1, 3], ts.iter().flat_map(|t| t.translation.iter().copied()).collect()).unwrap(),
        }
    }

    pub fn apply(&self, g: &mut Graph, points: Var) -> Result<Var> {
        let r = g.input(self.rot_t.clone());
        let t = g.input(self.trans.clone());
        let y = g.matmul(points, r)?;
        Ok(g.add(y, t)?)
    }
}

/// Every geometric output of one forward pass, in world coordinates.
#[derive(Clone, Copy, Debug)]
pub struct WorldOutputs {
    pub heads: HeadVars,
    /// `[B, 21, 3]` independent keypoints.
    pub keypoints: Var,
    /// `[B, 21, 3]` keypoints of the skinned parametric hand.
    pub mano_keypoints: Var,
    /// `[B, V, 3]`
    pub mano_vertices: Var,
    /// `[B, V, 3]` template plus decoded offsets, posed like the hand.
    pub decoded_vertices: Var,
}

pub struct Network {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub decoder: MeshDecoder,
    pub heads: HeadStats,
    layers: Layers,
    backbone_runs: AtomicUsize,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            decoder: self.decoder.clone(),
            heads: self.heads.clone(),
            layers: self.layers.clone(),
            backbone_runs: AtomicUsize::new(self.backbone_runs()),
        }
    }
}

impl Network {
    pub fn new(config: NetworkConfig, heads: HeadStats) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let w = config.widths;
        let stem = Conv::new(&mut store, "stem", 1, w[0], 3, 1, 1.0, &mut rng);
        let mut blocks = Vec::new();
        let mut cin = w[0];
        for (i, &cout) in w.iter().enumerate() {
            let name = format!("stage{i}");
            blocks.push(ResBlock {
                conv1: Conv::new(&mut store, &format!("{name}.conv1"), cin, cout, 3, 2, 1.0, &mut rng),
                conv2: Conv::new(&mut store, &format!("{name}.conv2"), cout, cout, 3, 1, 0.5, &mut rng),
                skip: Conv::new(&mut store, &format!("{name}.skip"), cin, cout, 1, 2, 1.0, &mut rng),
            });
            cin = cout;
        }
        let mw = config.meta_width;
        let fw = config.fusion_width;
        let feat = config.image_feature_dim();
        let meta = [
            Linear::new(&mut store, "meta.fc1", META_DIM, mw, 1.0, &mut rng),
            Linear::new(&mut store, "meta.fc2", mw, mw, 1.0, &mut rng),
        ];
        let mono = [
            Linear::new(&mut store, "mono.fc1", feat + mw, fw, 1.0, &mut rng),
            Linear::new(&mut store, "mono.fc2", fw, fw, 1.0, &mut rng),
        ];
        let stereo = [
            Linear::new(&mut store, "stereo.fc1", config.stereo_input_dim(), fw, 1.0, &mut rng),
            Linear::new(&mut store, "stereo.fc2", fw, fw, 1.0, &mut rng),
        ];
        let head_gain = 0.05;
        let layers = Layers {
            stem,
            blocks,
            meta,
            mono,
            stereo,
            head_params: Linear::new(&mut store, "head.params", fw, PARAM_DIM, head_gain, &mut rng),
            head_latent: Linear::new(&mut store, "head.latent", fw, LATENT_DIM, head_gain, &mut rng),
            head_kp: Linear::new(&mut store, "head.kp", fw, KP_DIM, head_gain, &mut rng),
            head_scale: Linear::new(&mut store, "head.scale", fw, NUM_KEYPOINTS, head_gain, &mut rng),
        };
        let decoder = MeshDecoder::new(&mut store, "decoder", config.num_vertices, &mut rng);
        Ok(Self {
            config,
            store,
            decoder,
            heads,
            layers,
            backbone_runs: AtomicUsize::new(0),
        })
    }

    /// Number of images pushed through the CNN backbone so far.
    pub fn backbone_runs(&self) -> usize {
        self.backbone_runs.load(Ordering::Relaxed)
    }

    pub fn reset_backbone_runs(&self) {
        self.backbone_runs.store(0, Ordering::Relaxed);
    }

    fn stereo_ids(&self) -> Vec<ParamId> {
        self.layers.stereo.iter().flat_map(|l| l.ids()).collect()
    }

    pub fn stereo_trunk_param_count(&self) -> usize {
        self.stereo_ids().iter().map(|&id| self.store.get(id).numel()).sum()
    }

    /// Parameters used by the mono path (everything except the stereo trunk).
    pub fn mono_param_count(&self) -> usize {
        self.store.numel() - self.stereo_trunk_param_count()
    }

    /// `[N, 1, S, S]` crops → `[N, F]` pooled features.
    pub fn image_features(&self, g: &mut Graph, p: &BoundParams, crops: Var) -> Result<Var> {
        let s = g.shape(crops).to_vec();
        let c = self.config.crop_size;
        if s.len() != 4 || s[1] != 1 || s[2] != c || s[3] != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "image_features",
                lhs: s,
                rhs: vec![0, 1, c, c],
            }
            .into());
        }
        self.backbone_runs.fetch_add(s[0], Ordering::Relaxed);
        let mut h = self.layers.stem.apply(g, p, crops)?;
        h = g.relu(h);
        for b in &self.layers.blocks {
            h = b.apply(g, p, h)?;
        }
        let hs = g.shape(h).to_vec();
        let h = g.reshape(h, &[hs[0], hs[1], hs[2] * hs[3]])?;
        Ok(g.mean_axis(h, 2)?)
    }

    fn meta_input(&self, g: &mut Graph, meta: Var) -> Result<Var> {
        let s = g.shape(meta).to_vec();
        if s.len() != 2 || s[1] != META_DIM {
            return Err(AutodiffError::ShapeMismatch {
                op: "metadata",
                lhs: s,
                rhs: vec![0, META_DIM],
            }
            .into());
        }
        if self.config.use_metadata {
            Ok(meta)
        } else {
            Ok(g.input(Tensor::zeros(&s)))
        }
    }

    fn mlp(g: &mut Graph, p: &BoundParams, layers: &[Linear; 2], x: Var) -> Result<Var> {
        let h = layers[0].apply(g, p, x)?;
        let h = g.relu(h);
        let h = layers[1].apply(g, p, h)?;
        Ok(g.relu(h))
    }

    fn apply_heads(&self, g: &mut Graph, p: &BoundParams, h: Var) -> Result<HeadVars> {
        let b = g.shape(h)[0];
        let standardize = |g: &mut Graph, raw: Var, mean: &[f64], std: &[f64]| -> Result<Var> {
            let m = g.input(Tensor::vector(mean));
            let s = g.input(Tensor::vector(std));
            let y = g.mul(raw, s)?;
            Ok(g.add(y, m)?)
        };
        let raw = self.layers.head_params.apply(g, p, h)?;
        let params = standardize(g, raw, &self.heads.param_mean, &self.heads.param_std)?;
        let latent = self.layers.head_latent.apply(g, p, h)?;
        let raw = self.layers.head_kp.apply(g, p, h)?;
        let kp = standardize(g, raw, &self.heads.kp_mean, &self.heads.kp_std)?;
        let keypoints = g.reshape(kp, &[b, NUM_KEYPOINTS, 3])?;
        let ls = self.layers.head_scale.apply(g, p, h)?;
        let log_scale = g.offset(ls, self.heads.log_scale_init);
        Ok(HeadVars {
            params,
            latent,
            keypoints,
            log_scale,
        })
    }

    /// Mono trunk and heads on precomputed image features.
    pub fn mono_from_features(&self, g: &mut Graph, p: &BoundParams, feats: Var, meta: Var) -> Result<HeadVars> {
        let meta = self.meta_input(g, meta)?;
        let m = Self::mlp(g, p, &self.layers.meta, meta)?;
        let x = g.concat(&[feats, m], 1)?;
        let h = Self::mlp(g, p, &self.layers.mono, x)?;
        self.apply_heads(g, p, h)
    }

    /// Stereo trunk and heads on precomputed features of both views.
    #[allow(clippy::too_many_arguments)]
    pub fn stereo_from_features(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        feat_l: Var,
        meta_l: Var,
        feat_r: Var,
        meta_r: Var,
        rel: Var,
    ) -> Result<HeadVars> {
        let ml = self.meta_input(g, meta_l)?;
        let mr = self.meta_input(g, meta_r)?;
        let rs = g.shape(rel).to_vec();
        if rs.len() != 2 || rs[1] != REL_DIM {
            return Err(AutodiffError::ShapeMismatch {
                op: "relative_extrinsics",
                lhs: rs,
                rhs: vec![0, REL_DIM],
            }
            .into());
        }
        let x = g.concat(&[feat_l, feat_r, ml, mr, rel], 1)?;
        let h = Self::mlp(g, p, &self.layers.stereo, x)?;
        self.apply_heads(g, p, h)
    }

    pub fn forward_mono(&self, g: &mut Graph, p: &BoundParams, crops: Var, meta: Var) -> Result<HeadVars> {
        let f = self.image_features(g, p, crops)?;
        self.mono_from_features(g, p, f, meta)
    }

    /// Runs the backbone once over both views and fuses the features.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_stereo(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        crop_l: Var,
        meta_l: Var,
        crop_r: Var,
        meta_r: Var,
        rel: Var,
    ) -> Result<HeadVars> {
        let b = g.shape(crop_l)[0];
        let both = g.concat(&[crop_l, crop_r], 0)?;
        let f = self.image_features(g, p, both)?;
        let fl = g.slice(f, 0, 0, b)?;
        let fr = g.slice(f, 0, b, 2 * b)?;
        self.stereo_from_features(g, p, fl, meta_l, fr, meta_r, rel)
    }

    /// Skins the parameter head, decodes the mesh head, and maps every
    /// geometric output from the view frame to the world frame.
    pub fn world_outputs(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        template: &TemplateTensors,
        heads: HeadVars,
        frames: &RigidBatch,
    ) -> Result<WorldOutputs> {
        let skinned: SkinnedVars = hand_model::skin_graph(g, template, heads.params)?;
        let offsets = self.decoder.decode_graph(g, p, heads.latent)?;
        let rest = template.rest_vertices(g);
        let rest = g.add(offsets, rest)?;
        let decoded = hand_model::repose_graph(g, template, &skinned, rest)?;
        Ok(WorldOutputs {
            heads,
            keypoints: frames.apply(g, heads.keypoints)?,
            mano_keypoints: frames.apply(g, skinned.keypoints)?,
            mano_vertices: frames.apply(g, skinned.vertices)?,
            decoded_vertices: frames.apply(g, decoded)?,
        })
    }

    fn crops_tensor(&self, crops: &[&[f64]]) -> Result<Tensor> {
        let c = self.config.crop_size;
        let mut data = Vec::with_capacity(crops.len() * c * c);
        for crop in crops {
            if crop.len() != c * c {
                return Err(AutodiffError::DataLength {
                    shape: vec![1, c, c],
                    len: crop.len(),
                }
                .into());
            }
            data.extend_from_slice(crop);
        }
        Ok(Tensor::new(&[crops.len(), 1, c, c], data)?)
    }

    fn collect(g: &Graph, heads: &HeadVars, frames: &[RigidTransform]) -> Result<Vec<Prediction>> {
        let params = g.value(heads.params).data();
        let latent = g.value(heads.latent).data();
        let kp = g.value(heads.keypoints).data();
        let ls = g.value(heads.log_scale).data();
        frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let hp = HandParams::from_slice(&params[i * PARAM_DIM..(i + 1) * PARAM_DIM])?;
                Ok(Prediction {
                    hand_params: hp.transformed(f),
                    mesh_latent: latent[i * LATENT_DIM..(i + 1) * LATENT_DIM].to_vec(),
                    indep_keypoints: kp[i * KP_DIM..(i + 1) * KP_DIM]
                        .chunks(3)
                        .map(|c| f.apply(&Vec3::new(c[0], c[1], c[2])))
                        .collect(),
                    keypoint_log_scale: ls[i * NUM_KEYPOINTS..(i + 1) * NUM_KEYPOINTS].to_vec(),
                })
            })
            .collect()
    }

    /// Mono predictions for a batch of views.
    pub fn predict_mono(&self, crops: &[&[f64]], metas: &[[f64; META_DIM]], frames: &[RigidTransform]) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let c = g.input(self.crops_tensor(crops)?);
        let m = g.input(Tensor::new(&[metas.len(), META_DIM], metas.concat())?);
        let heads = self.forward_mono(&mut g, &p, c, m)?;
        Self::collect(&g, &heads, frames)
    }

    /// Stereo predictions for a batch of view pairs; outputs use the
    /// left view frames.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_stereo(
        &self,
        crops_l: &[&[f64]],
        metas_l: &[[f64; META_DIM]],
        crops_r: &[&[f64]],
        metas_r: &[[f64; META_DIM]],
        rels: &[[f64; REL_DIM]],
        frames_l: &[RigidTransform],
    ) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let n = metas_l.len();
        let cl = g.input(self.crops_tensor(crops_l)?);
        let cr = g.input(self.crops_tensor(crops_r)?);
        let ml = g.input(Tensor::new(&[n, META_DIM], metas_l.concat())?);
        let mr = g.input(Tensor::new(&[n, META_DIM], metas_r.concat())?);
        let rel = g.input(Tensor::new(&[n, REL_DIM], rels.concat())?);
        let heads = self.forward_stereo(&mut g, &p, cl, ml, cr, mr, rel)?;
        Self::collect(&g, &heads, frames_l)
    }

    /// Parameters, network config and head statistics.
    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        ckpt.push_text("network_config", self.config.to_text());
        ckpt.push_params("net.", &self.store);
        ckpt.push_array("heads.kp_mean", Tensor::vector(&self.heads.kp_mean));
        ckpt.push_array("heads.kp_std", Tensor::vector(&self.heads.kp_std));
        ckpt.push_array("heads.param_mean", Tensor::vector(&self.heads.param_mean));
        ckpt.push_array("heads.param_std", Tensor::vector(&self.heads.param_std));
        ckpt.push_array("heads.log_scale_init", Tensor::scalar(self.heads.log_scale_init));
    }

    pub fn load_from(ckpt: &Checkpoint) -> Result<Self> {
        let missing = |n: &str| RegressorError::Checkpoint(format!("missing {n}"));
        let config = NetworkConfig::from_text(ckpt.text("network_config").ok_or_else(|| missing("network_config"))?)?;
        let arr = |n: &str| -> Result<Vec<f64>> { Ok(ckpt.array(n).ok_or_else(|| missing(n))?.data().to_vec()) };
        let heads = HeadStats {
            kp_mean: arr("heads.kp_mean")?,
            kp_std: arr("heads.kp_std")?,
            param_mean: arr("heads.param_mean")?,
            param_std: arr("heads.param_std")?,
            log_scale_init: arr("heads.log_scale_init")?[0],
        };
        if heads.kp_mean.len() != KP_DIM || heads.param_mean.len() != PARAM_DIM {
            return Err(RegressorError::Checkpoint("head statistics have the wrong size".into()));
        }
        let mut net = Network::new(config, heads)?;
        ckpt.load_params("net.", &mut net.store)?;
        Ok(net)
    }
}

/// The skinned parametric hand of a prediction and the decoded mesh posed
/// by the same joint transforms.
pub fn predict_state(t: &HandTemplate, decoder: &MeshDecoder, store: &ParamStore, p: &Prediction) -> Result<(HandState, Vec<Vec3>)> {
    let state = skin(t, &p.hand_params);
    let kin = forward_kinematics(t, &p.hand_params);
    let offsets = decoder.decode_mesh(store, &p.mesh_latent)?;
    let rest: Vec<Vec3> = t.vertices.iter().zip(&offsets).map(|(v, o)| v + o).collect();
    Ok((state, blend(t, &kin, &rest)))
}
