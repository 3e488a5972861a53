//! Training, evaluation, inference and report plumbing.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use handreg_autodiff::{optimizer_step, AdamConfig, AdamState, AutodiffError, BoundParams, Checkpoint, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{self, BoundingBox, GeometryError, RigidTransform, StereoRig, Vec2, Vec3};
use crate::hand_model::{skin, HandModelError, HandParams, HandState, HandTemplate, TemplateTensors, NUM_KEYPOINTS};
use crate::kv::{KvDoc, KvError, KvWriter};
use crate::losses::{self, CameraBatch, LossError, LossReport, LossVars, LossWeights};
use crate::metadata::{compute_metadata, MetadataError, NormalizationStats, META_DIM};
use crate::regressor::{predict_state, rel_vector, world_from_view, Network, NetworkConfig, Prediction, RegressorError, RigidBatch, WorldOutputs, REL_DIM};
use crate::synth::{Dataset, SampleRecord, Split, SynthError};

pub const TRAIN_CONFIG_HEADER: &str = "direg3d-train v1";
pub const REPORT_HEADER: &str = "direg3d-report v1";
pub const AUC_MAX_MM: f64 = 50.0;
pub const PCK_THRESHOLDS: usize = 51;
/// Published figures on a different, private dataset; printed for context.
pub const REFERENCE_ROWS: [(&str, f64, f64); 2] = [("mono", 12.37, 0.755), ("stereo", 11.39, 0.774)];
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    HandModel(#[from] HandModelError),
    #[error("non-finite loss term `{term}` at step {step}")]
    NonFiniteLoss { term: String, step: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("shape mismatch: expected {expected} keypoints, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl From<KvError> for HarnessError {
    fn from(e: KvError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl HarnessError {
    /// Process exit code: 2 for data and configuration problems, 3 for
    /// numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::NonFiniteLoss { .. } | HarnessError::Autodiff(_) | HarnessError::Loss(_) | HarnessError::Regressor(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

// ---------------------------------------------------------------- metrics

/// Mean Euclidean distance over 21 keypoints.
pub fn compute_mkpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    Ok(keypoint_errors(pred, gt)?.iter().sum::<f64>() / NUM_KEYPOINTS as f64)
}

pub fn keypoint_errors(pred: &[Vec3], gt: &[Vec3]) -> Result<Vec<f64>> {
    for s in [pred, gt] {
        if s.len() != NUM_KEYPOINTS {
            return Err(HarnessError::ShapeMismatch {
                expected: NUM_KEYPOINTS,
                got: s.len(),
            });
        }
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).collect())
}

/// Fraction of errors `≤ τ` at `τ = 0, 1, …, max_mm`.
pub fn pck_curve(errors: &[f64], max_mm: usize) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(HarnessError::EmptyInput("keypoint errors"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok((0..=max_mm)
        .map(|t| sorted.partition_point(|&e| e <= t as f64) as f64 / n)
        .collect())
}

/// Trapezoidal area under a PCK curve sampled at unit steps, normalized.
pub fn auc_from_pck(pck: &[f64]) -> f64 {
    let area: f64 = pck.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    area / (pck.len() - 1) as f64
}

/// Normalized area under the PCK curve on `[0, max_mm]`.
pub fn compute_auc(errors: &[f64], max_mm: f64) -> Result<f64> {
    if !(max_mm >= 1.0 && max_mm.fract() == 0.0) {
        return Err(HarnessError::Config(format!("AUC range must be a positive whole number of mm, got {max_mm}")));
    }
    Ok(auc_from_pck(&pck_curve(errors, max_mm as usize)?))
}

// ---------------------------------------------------------------- config

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StereoMode {
    Mono,
    Mixed,
}

impl StereoMode {
    pub fn name(self) -> &'static str {
        match self {
            StereoMode::Mono => "mono",
            StereoMode::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mono" => Some(StereoMode::Mono),
            "mixed" => Some(StereoMode::Mixed),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data: PathBuf,
    pub network: NetworkConfig,
    pub weights: LossWeights,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub stereo_mode: StereoMode,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    /// Use only the first `train_limit` training records (0 = all).
    pub train_limit: usize,
}

impl TrainConfig {
    pub fn new(data: PathBuf, seed: u64) -> Self {
        Self {
            data,
            network: NetworkConfig::test_preset(),
            weights: LossWeights::default(),
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed,
            stereo_mode: StereoMode::Mixed,
            max_steps: 0,
            train_limit: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        self.network.validate()?;
        self.weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new(Some(TRAIN_CONFIG_HEADER));
        w.entry("data", self.data.display())
            .entry("seed", self.seed)
            .entry("lr", self.lr)
            .entry("batch_size", self.batch_size)
            .entry("epochs", self.epochs)
            .entry("stereo_mode", self.stereo_mode.name())
            .entry("max_steps", self.max_steps)
            .entry("train_limit", self.train_limit);
        self.network.write_kv(&mut w);
        self.weights.write_kv(&mut w);
        w.finish()
    }

    /// Parses a config; `data` is resolved against `base_dir` and, unless
    /// `data_override` is given, must point at an existing dataset.
    pub fn from_text(text: &str, base_dir: &Path, data_override: Option<&Path>) -> Result<Self> {
        let doc = KvDoc::parse(text, Some(TRAIN_CONFIG_HEADER))?;
        let seed = doc
            .require("seed")
            .map_err(|_| HarnessError::Config("`seed` is mandatory".into()))?;
        let data = match data_override {
            Some(d) => d.to_path_buf(),
            None => base_dir.join(doc.require_str("data")?),
        };
        let mut c = Self::new(data, seed);
        c.network = NetworkConfig::read_kv(&doc, &c.network)?;
        c.weights = LossWeights::read_kv(&doc)?;
        c.lr = doc.get_or("lr", c.lr)?;
        c.batch_size = doc.get_or("batch_size", c.batch_size)?;
        c.epochs = doc.get_or("epochs", c.epochs)?;
        c.max_steps = doc.get_or("max_steps", c.max_steps)?;
        c.train_limit = doc.get_or("train_limit", c.train_limit)?;
        if let Some(m) = doc.get_str("stereo_mode") {
            c.stereo_mode = StereoMode::parse(m).ok_or_else(|| HarnessError::Config(format!("unknown stereo_mode `{m}`")))?;
        }
        c.validate()?;
        let manifest = c.data.join(crate::synth::MANIFEST_FILE);
        if !manifest.is_file() {
            return Err(HarnessError::Data(format!("no dataset manifest at {}", manifest.display())));
        }
        Ok(c)
    }
}

// ---------------------------------------------------------------- data

/// One view ready for the network.
#[derive(Clone, Debug)]
pub struct PreparedView {
    pub record: usize,
    pub view: usize,
    pub crop: Vec<f64>,
    pub meta: [f64; META_DIM],
    pub frame: RigidTransform,
    pub kp2d: Vec<Vec2>,
}

#[derive(Clone, Debug)]
pub struct PreparedRecord {
    /// Indices into [`PreparedData::views`].
    pub views: [Option<usize>; 2],
    pub rel: Option<[f64; REL_DIM]>,
    pub keypoints: Vec<Vec3>,
    pub vertices: Vec<Vec3>,
    pub params: HandParams,
}

impl PreparedRecord {
    pub fn is_stereo(&self) -> bool {
        self.views[0].is_some() && self.views[1].is_some()
    }
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub rig: StereoRig,
    pub views: Vec<PreparedView>,
    pub records: Vec<PreparedRecord>,
}

impl PreparedData {
    pub fn new(records: &[SampleRecord], rig: &StereoRig, stats: &NormalizationStats) -> Result<Self> {
        let mut views = Vec::new();
        let mut out = Vec::with_capacity(records.len());
        for (ri, r) in records.iter().enumerate() {
            let mut idx = [None, None];
            for (v, s) in r.present_views() {
                let cam = rig.camera(v);
                idx[v] = Some(views.len());
                views.push(PreparedView {
                    record: ri,
                    view: v,
                    crop: s.crop_f64(),
                    meta: stats.normalize(&s.meta),
                    frame: world_from_view(cam, &s.bbox)?,
                    kp2d: s.kp2d.clone(),
                });
            }
            let rel = match (&r.views[0], &r.views[1]) {
                (Some(l), Some(rv)) => Some(rel_vector(&geometry::virtual_relative_extrinsics(&rig.left, &l.bbox, &rig.right, &rv.bbox)?)),
                _ => None,
            };
            out.push(PreparedRecord {
                views: idx,
                rel,
                keypoints: r.keypoints3d.clone(),
                vertices: r.vertices.clone(),
                params: r.params.clone(),
            });
        }
        Ok(Self {
            rig: *rig,
            views,
            records: out,
        })
    }

    pub fn stereo_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_stereo()).count()
    }

    /// Output standardization fitted on view-frame targets.
    pub fn head_stats(&self) -> crate::regressor::HeadStats {
        let mut kps = Vec::with_capacity(self.views.len());
        let mut params = Vec::with_capacity(self.views.len());
        for v in &self.views {
            let r = &self.records[v.record];
            let inv = v.frame.inverse();
            kps.push(r.keypoints.iter().flat_map(|p| inv.apply(p).iter().copied().collect::<Vec<_>>()).collect());
            params.push(r.params.transformed(&inv).to_vec());
        }
        crate::regressor::HeadStats::fit(&kps, &params)
    }
}

fn points_tensor<'a>(sets: impl Iterator<Item = &'a [Vec3]>, b: usize, k: usize) -> Result<Tensor> {
    let data: Vec<f64> = sets.flat_map(|s| s.iter().flat_map(|p| [p.x, p.y, p.z])).collect();
    Ok(Tensor::new(&[b, k, 3], data)?)
}

// ---------------------------------------------------------------- model

/// A network together with everything needed to run it on raw views.
#[derive(Clone)]
pub struct TrainedModel {
    pub net: Network,
    pub stats: NormalizationStats,
    pub template: HandTemplate,
    pub rig: StereoRig,
}

impl TrainedModel {
    pub fn to_checkpoint(&self, train_config: Option<&TrainConfig>) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.net.save_into(&mut c);
        c.push_text("meta_stats", self.stats.to_text());
        let mut t = KvWriter::new(None);
        t.entry("template_seed", self.template.seed)
            .entry("vertex_budget", self.template.vertex_budget);
        c.push_text("template", t.finish());
        c.push_text("rig", self.rig.to_text());
        if let Some(tc) = train_config {
            c.push_text("train_config", tc.to_text());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let text = |n: &str| c.text(n).ok_or_else(|| HarnessError::Data(format!("checkpoint lacks `{n}`")));
        let net = Network::load_from(c)?;
        let stats = NormalizationStats::from_text(text("meta_stats")?)?;
        let t = KvDoc::parse(text("template")?, None)?;
        let template = HandTemplate::build(t.require("template_seed")?, t.require("vertex_budget")?)?;
        if template.num_vertices() != net.config.num_vertices {
            return Err(HarnessError::Data("checkpoint template and network disagree on vertex count".into()));
        }
        let rig = StereoRig::from_text(text("rig")?)?;
        Ok(Self { net, stats, template, rig })
    }

    pub fn save(&self, path: &Path, train_config: Option<&TrainConfig>) -> Result<()> {
        write_file(path, &self.to_checkpoint(train_config).to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let c = Checkpoint::read_from(&mut bytes.as_slice())?;
        Self::from_checkpoint(&c)
    }
}

// ---------------------------------------------------------------- training

/// Loss reports of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub mono: LossReport,
    pub stereo: Option<LossReport>,
    pub total: f64,
}

const LOG_TERMS: [&str; 9] = ["kp3d", "mesh", "bone_len", "bone_ang", "var", "reg", "kp2d", "stereo2d", "total"];

fn report_columns(r: Option<&LossReport>) -> Vec<String> {
    match r {
        None => vec!["-".into(); LOG_TERMS.len()],
        Some(r) => r
            .terms()
            .iter()
            .chain(std::iter::once(&Some(r.total)))
            .map(|t| t.map_or("-".into(), |v| format!("{v:.17e}")))
            .collect(),
    }
}

/// Tab-separated metrics log, one row per optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<StepMetrics>,
}

impl MetricsLog {
    pub fn header() -> String {
        let mut cols = vec!["step".to_string(), "epoch".into(), "total".into()];
        for p in ["mono", "stereo"] {
            cols.extend(LOG_TERMS.iter().map(|t| format!("{p}.{t}")));
        }
        cols.join("\t")
    }

    pub fn row_text(m: &StepMetrics) -> String {
        let mut cols = vec![m.step.to_string(), m.epoch.to_string(), format!("{:.17e}", m.total)];
        cols.extend(report_columns(Some(&m.mono)));
        cols.extend(report_columns(m.stereo.as_ref()));
        cols.join("\t")
    }

    pub fn to_text(&self) -> String {
        let mut s = Self::header();
        s.push('\n');
        for r in &self.rows {
            s.push_str(&Self::row_text(r));
            s.push('\n');
        }
        s
    }
}

/// `(step, total, mono total, stereo total)` per logged step.
pub fn parse_loss_curve(text: &str) -> Result<Vec<(usize, f64, f64, Option<f64>)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or(HarnessError::EmptyInput("metrics log"))?.split('\t').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| HarnessError::Data(format!("metrics log lacks column `{name}`")))
    };
    let (cs, ct, cm, cst) = (col("step")?, col("total")?, col("mono.total")?, col("stereo.total")?);
    let mut out = Vec::new();
    for (i, l) in lines.enumerate() {
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != header.len() {
            return Err(HarnessError::Data(format!("metrics log row {} has {} columns", i + 1, f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| HarnessError::Data(format!("bad number `{s}` in metrics log")));
        let step = f[cs].parse().map_err(|_| HarnessError::Data("bad step".into()))?;
        let stereo = if f[cst] == "-" { None } else { Some(num(f[cst])?) };
        out.push((step, num(f[ct])?, num(f[cm])?, stereo));
    }
    if out.is_empty() {
        return Err(HarnessError::EmptyInput("metrics log"));
    }
    Ok(out)
}

/// Ground truth of a batch for one prediction path.
struct PathTargets {
    keypoints: Tensor,
    vertices: Tensor,
    cams: CameraBatch,
    gt2d: Tensor,
    visible: Tensor,
    second_view: Option<(CameraBatch, Tensor, Tensor)>,
}

fn kp2d_tensor(views: &[&PreparedView]) -> Result<(Tensor, Tensor)> {
    let b = views.len();
    let data = views.iter().flat_map(|v| v.kp2d.iter().flat_map(|p| [p.x, p.y])).collect();
    Ok((
        Tensor::new(&[b, NUM_KEYPOINTS, 2], data)?,
        Tensor::full(&[b, NUM_KEYPOINTS], 1.0),
    ))
}

fn path_losses(g: &mut Graph, out: &WorldOutputs, t: &PathTargets) -> Result<LossVars> {
    let gt_kp = g.input(t.keypoints.clone());
    let gt_v = g.input(t.vertices.clone());
    let a = losses::loss_keypoints_3d(g, out.keypoints, gt_kp)?;
    let b = losses::loss_keypoints_3d(g, out.mano_keypoints, gt_kp)?;
    let kp3d = g.add(a, b)?;
    let a = losses::loss_mesh(g, out.mano_vertices, gt_v)?;
    let b = losses::loss_mesh(g, out.decoded_vertices, gt_v)?;
    let mesh = g.add(a, b)?;
    let bone_len = losses::loss_bone_length(g, out.keypoints, gt_kp)?;
    let bone_ang = losses::loss_bone_angle(g, out.keypoints, gt_kp)?;
    let var = losses::loss_keypoint_variance(g, out.keypoints, out.heads.log_scale, gt_kp)?;
    let reg = losses::loss_param_reg(g, out.heads.params)?;
    let masked_zero = |g: &mut Graph, r: std::result::Result<Var, LossError>| match r {
        Err(LossError::AllMasked) => Ok(g.constant(0.0)),
        other => other,
    };
    let r = losses::loss_projection_2d(g, &t.cams, out.keypoints, &t.gt2d, &t.visible);
    let kp2d = masked_zero(g, r)?;
    let stereo2d = match &t.second_view {
        None => None,
        Some((cams_r, gt_r, vis_r)) => {
            let r = losses::loss_stereo_reprojection(g, &t.cams, cams_r, out.keypoints, (&t.gt2d, &t.visible), (gt_r, vis_r));
            Some(masked_zero(g, r)?)
        }
    };
    Ok(LossVars {
        kp3d,
        mesh,
        bone_len,
        bone_ang,
        var,
        reg,
        kp2d,
        stereo2d,
    })
}

/// The graph, total loss node and per-path term nodes of one batch.
pub struct BatchGraph {
    pub graph: Graph,
    pub params: BoundParams,
    pub total: Var,
    pub mono: LossVars,
    pub stereo: Option<LossVars>,
}

/// Builds the training objective over `batch` (record indices): the mono
/// path on every present view and, with `stereo`, the stereo path on the
/// stereo records, sharing one backbone pass.
pub fn batch_graph(
    net: &Network,
    template: &TemplateTensors,
    data: &PreparedData,
    batch: &[usize],
    weights: &LossWeights,
    stereo: bool,
) -> Result<BatchGraph> {
    let mut g = Graph::new();
    let p = net.store.bind(&mut g);
    let mut view_ids = Vec::new();
    let mut slot = std::collections::HashMap::new();
    for &r in batch {
        for vi in data.records[r].views.iter().flatten() {
            slot.insert(*vi, view_ids.len());
            view_ids.push(*vi);
        }
    }
    if view_ids.is_empty() {
        return Err(HarnessError::EmptyInput("batch views"));
    }
    let views: Vec<&PreparedView> = view_ids.iter().map(|&i| &data.views[i]).collect();
    let n = views.len();
    let c = net.config.crop_size;
    let crops = Tensor::new(&[n, 1, c, c], views.iter().flat_map(|v| v.crop.iter().copied()).collect())?;
    let metas = Tensor::new(&[n, META_DIM], views.iter().flat_map(|v| v.meta).collect())?;
    let crops = g.input(crops);
    let metas = g.input(metas);
    let feats = net.image_features(&mut g, &p, crops)?;

    let recs = |vs: &[&PreparedView]| vs.iter().map(|v| &data.records[v.record]).collect::<Vec<_>>();
    let mono_recs = recs(&views);
    let heads = net.mono_from_features(&mut g, &p, feats, metas)?;
    let frames = RigidBatch::new(&views.iter().map(|v| v.frame).collect::<Vec<_>>());
    let out = net.world_outputs(&mut g, &p, template, heads, &frames)?;
    let (gt2d, visible) = kp2d_tensor(&views)?;
    let targets = PathTargets {
        keypoints: points_tensor(mono_recs.iter().map(|r| r.keypoints.as_slice()), n, NUM_KEYPOINTS)?,
        vertices: points_tensor(mono_recs.iter().map(|r| r.vertices.as_slice()), n, template.num_vertices())?,
        cams: CameraBatch::new(&views.iter().map(|v| data.rig.camera(v.view)).collect::<Vec<_>>()),
        gt2d,
        visible,
        second_view: None,
    };
    let mono = path_losses(&mut g, &out, &targets)?;
    let mut total = mono.total(&mut g, weights)?;

    let stereo_recs: Vec<usize> = if stereo {
        batch.iter().copied().filter(|&r| data.records[r].is_stereo()).collect()
    } else {
        Vec::new()
    };
    let stereo_vars = if stereo_recs.is_empty() {
        None
    } else {
        let m = stereo_recs.len();
        let li: Vec<usize> = stereo_recs.iter().map(|&r| slot[&data.records[r].views[0].unwrap()]).collect();
        let ri: Vec<usize> = stereo_recs.iter().map(|&r| slot[&data.records[r].views[1].unwrap()]).collect();
        let fl = g.gather_rows(feats, &li)?;
        let fr = g.gather_rows(feats, &ri)?;
        let ml = g.gather_rows(metas, &li)?;
        let mr = g.gather_rows(metas, &ri)?;
        let rel = Tensor::new(&[m, REL_DIM], stereo_recs.iter().flat_map(|&r| data.records[r].rel.unwrap()).collect())?;
        let rel = g.input(rel);
        let heads = net.stereo_from_features(&mut g, &p, fl, ml, fr, mr, rel)?;
        let lviews: Vec<&PreparedView> = li.iter().map(|&i| views[i]).collect();
        let rviews: Vec<&PreparedView> = ri.iter().map(|&i| views[i]).collect();
        let frames = RigidBatch::new(&lviews.iter().map(|v| v.frame).collect::<Vec<_>>());
        let out = net.world_outputs(&mut g, &p, template, heads, &frames)?;
        let srecs = recs(&lviews);
        let (gl, vl) = kp2d_tensor(&lviews)?;
        let (gr, vr) = kp2d_tensor(&rviews)?;
        let targets = PathTargets {
            keypoints: points_tensor(srecs.iter().map(|r| r.keypoints.as_slice()), m, NUM_KEYPOINTS)?,
            vertices: points_tensor(srecs.iter().map(|r| r.vertices.as_slice()), m, template.num_vertices())?,
            cams: CameraBatch::new(&vec![&data.rig.left; m]),
            gt2d: gl,
            visible: vl,
            second_view: Some((CameraBatch::new(&vec![&data.rig.right; m]), gr, vr)),
        };
        let vars = path_losses(&mut g, &out, &targets)?;
        let st = vars.total(&mut g, weights)?;
        total = g.add(total, st)?;
        Some(vars)
    };
    Ok(BatchGraph {
        graph: g,
        params: p,
        total,
        mono,
        stereo: stereo_vars,
    })
}

fn check_finite(r: &LossReport, prefix: &str, step: usize) -> Result<()> {
    for (name, v) in LossWeights::NAMES.iter().zip(r.terms()) {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(HarnessError::NonFiniteLoss {
                    term: format!("{prefix}.{name}"),
                    step,
                });
            }
        }
    }
    Ok(())
}

/// Single-owner optimizer loop over prepared data.
pub struct Trainer<'a> {
    pub net: Network,
    pub data: &'a PreparedData,
    pub weights: LossWeights,
    pub stereo_mode: StereoMode,
    pub batch_size: usize,
    template: TemplateTensors,
    adam: AdamState,
    hyper: AdamConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub epoch: usize,
    pub step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(net: Network, template: &HandTemplate, data: &'a PreparedData, config: &TrainConfig) -> Result<Self> {
        if data.records.is_empty() {
            return Err(HarnessError::EmptyInput("training records"));
        }
        if net.config.num_vertices != template.num_vertices() {
            return Err(HarnessError::Config("network vertex count differs from the hand template".into()));
        }
        let mut t = Self {
            net,
            data,
            weights: config.weights,
            stereo_mode: config.stereo_mode,
            batch_size: config.batch_size,
            template: TemplateTensors::new(template),
            adam: AdamState::default(),
            hyper: AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            order: (0..data.records.len()).collect(),
            cursor: 0,
            epoch: 0,
            step: 0,
        };
        t.order.shuffle(&mut t.rng);
        Ok(t)
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let b = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        b
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Loss of `batch` under the current weights, without updating them.
    pub fn evaluate_batch(&self, batch: &[usize]) -> Result<StepMetrics> {
        let bg = batch_graph(&self.net, &self.template, self.data, batch, &self.weights, self.stereo_mode == StereoMode::Mixed)?;
        Ok(self.metrics(&bg))
    }

    fn metrics(&self, bg: &BatchGraph) -> StepMetrics {
        StepMetrics {
            step: self.step,
            epoch: self.epoch,
            mono: bg.mono.report(&bg.graph, &self.weights),
            stereo: bg.stereo.map(|s| s.report(&bg.graph, &self.weights)),
            total: bg.graph.value(bg.total).item(),
        }
    }

    /// One optimizer step on the next batch; returns the pre-update losses.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch = self.next_batch();
        let mut bg = batch_graph(&self.net, &self.template, self.data, &batch, &self.weights, self.stereo_mode == StereoMode::Mixed)?;
        let m = self.metrics(&bg);
        check_finite(&m.mono, "mono", self.step)?;
        if let Some(s) = &m.stereo {
            check_finite(s, "stereo", self.step)?;
        }
        if !m.total.is_finite() {
            return Err(HarnessError::NonFiniteLoss {
                term: "total".into(),
                step: self.step,
            });
        }
        bg.graph.backward(bg.total)?;
        let grads = self.net.store.grads(&bg.graph, &bg.params);
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(HarnessError::NonFiniteLoss {
                term: format!("gradient of {}", self.net.store.ids().nth(i).map_or("?", |id| self.net.store.name(id))),
                step: self.step,
            });
        }
        optimizer_step(&mut self.net.store, &grads, &mut self.adam, &self.hyper)?;
        self.step += 1;
        Ok(m)
    }
}

pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: MetricsLog,
}

/// Metadata statistics, prepared data and template of a training split.
pub fn prepare_training(dataset: &Dataset, limit: usize) -> Result<(NormalizationStats, PreparedData, HandTemplate)> {
    let mut train = dataset.split(Split::Train);
    if limit > 0 && limit < train.len() {
        train = &train[..limit];
    }
    if train.is_empty() {
        return Err(HarnessError::EmptyInput("training split"));
    }
    let stats = NormalizationStats::fit(train.iter().flat_map(|r| r.views.iter().flatten().map(|v| &v.meta)))?;
    let data = PreparedData::new(train, &dataset.rig, &stats)?;
    Ok((stats, data, dataset.template()?))
}

/// Trains a fresh network. `on_step` sees every step's metrics.
pub fn train_with(config: &TrainConfig, dataset: &Dataset, mut on_step: impl FnMut(&StepMetrics)) -> Result<TrainOutcome> {
    config.validate()?;
    if config.network.crop_size != dataset.manifest.config.crop_size {
        return Err(HarnessError::Config(format!(
            "network crop_size {} differs from the dataset's {}",
            config.network.crop_size, dataset.manifest.config.crop_size
        )));
    }
    let (stats, data, template) = prepare_training(dataset, config.train_limit)?;
    let mut net_config = config.network.clone();
    net_config.init_seed = config.seed;
    net_config.num_vertices = template.num_vertices();
    let net = Network::new(net_config, data.head_stats())?;
    let mut trainer = Trainer::new(net, &template, &data, config)?;
    let total_steps = match config.max_steps {
        0 => config.epochs * trainer.steps_per_epoch(),
        m => m.min(config.epochs * trainer.steps_per_epoch()),
    };
    let mut log = MetricsLog::default();
    for _ in 0..total_steps {
        let m = trainer.step()?;
        on_step(&m);
        log.rows.push(m);
    }
    let model = TrainedModel {
        net: trainer.net,
        stats,
        template,
        rig: dataset.rig,
    };
    Ok(TrainOutcome { model, log })
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let dataset = Dataset::open(&config.data)?;
    train_with(config, &dataset, |_| {})
}

// ---------------------------------------------------------------- evaluation

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub samples: usize,
    pub mkpe: f64,
    pub auc: f64,
    /// MKPE of the keypoints regressed from the skinned parametric hand.
    pub mano_mkpe: Option<f64>,
    pub pck: Vec<f64>,
}

impl ReportRow {
    fn from_errors(method: &str, samples: usize, errors: &[f64], mano: Option<&[f64]>) -> Result<Self> {
        let pck = pck_curve(errors, AUC_MAX_MM as usize)?;
        let mean = |e: &[f64]| e.iter().sum::<f64>() / e.len() as f64;
        Ok(Self {
            method: method.into(),
            samples,
            mkpe: mean(errors),
            auc: auc_from_pck(&pck),
            mano_mkpe: mano.map(mean),
            pck,
        })
    }
}

pub const ROW_MONO: &str = "mono";
pub const ROW_MONO_ON_STEREO: &str = "mono@stereo-subset";
pub const ROW_STEREO: &str = "stereo";
pub const ROW_OVERALL: &str = "overall";
pub const ROW_MEAN_POSE: &str = "baseline:mean-pose";
pub const ROW_TRIANGULATION: &str = "baseline:triangulation-oracle";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub records: usize,
    pub stereo_records: usize,
    pub rows: Vec<ReportRow>,
    /// Per-keypoint MKPE of the overall row.
    pub per_keypoint_mkpe: Vec<f64>,
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new(Some(REPORT_HEADER));
        w.entry("split", &self.split)
            .entry("records", self.records)
            .entry("stereo_records", self.stereo_records)
            .entry("rows", self.rows.len());
        for (i, r) in self.rows.iter().enumerate() {
            let k = |s: &str| format!("row{i}.{s}");
            w.entry(&k("method"), &r.method)
                .entry(&k("samples"), r.samples)
                .entry(&k("mkpe_mm"), format!("{:.17e}", r.mkpe))
                .entry(&k("auc"), format!("{:.17e}", r.auc));
            if let Some(m) = r.mano_mkpe {
                w.entry(&k("mano_mkpe_mm"), format!("{m:.17e}"));
            }
            let pck: Vec<String> = r.pck.iter().map(|v| format!("{v:.17e}")).collect();
            w.list(&k("pck"), &pck);
        }
        let per: Vec<String> = self.per_keypoint_mkpe.iter().map(|v| format!("{v:.17e}")).collect();
        w.list("per_keypoint_mkpe_mm", &per);
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text, Some(REPORT_HEADER))?;
        let n: usize = doc.require("rows")?;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let k = |s: &str| format!("row{i}.{s}");
            rows.push(ReportRow {
                method: doc.require_str(&k("method"))?.to_string(),
                samples: doc.require(&k("samples"))?,
                mkpe: doc.require(&k("mkpe_mm"))?,
                auc: doc.require(&k("auc"))?,
                mano_mkpe: doc.get(&k("mano_mkpe_mm"))?,
                pck: doc.require_list(&k("pck"))?,
            });
        }
        let r = Self {
            split: doc.require_str("split")?.to_string(),
            records: doc.require("records")?,
            stereo_records: doc.require("stereo_records")?,
            rows,
            per_keypoint_mkpe: doc.require_list("per_keypoint_mkpe_mm")?,
        };
        if r.rows.iter().any(|row| row.pck.len() != PCK_THRESHOLDS) {
            return Err(HarnessError::Data(format!("report PCK curves must have {PCK_THRESHOLDS} samples")));
        }
        Ok(r)
    }

    /// Results table with the published reference figures as context.
    pub fn table(&self) -> String {
        let mut s = format!("split: {} ({} records, {} stereo)\n", self.split, self.records, self.stereo_records);
        s.push_str(&format!("{:<30} {:>8} {:>10} {:>8} {:>12}\n", "method", "samples", "MKPE (mm)", "AUC", "MANO (mm)"));
        for r in &self.rows {
            let mano = r.mano_mkpe.map_or("-".to_string(), |m| format!("{m:.2}"));
            s.push_str(&format!("{:<30} {:>8} {:>10.2} {:>8.3} {:>12}\n", r.method, r.samples, r.mkpe, r.auc, mano));
        }
        s.push_str("reference figures published for a private 150k-image dataset (context only):\n");
        for (m, mkpe, auc) in REFERENCE_ROWS {
            s.push_str(&format!("  {m:<28} {:>8} {mkpe:>10.2} {auc:>8.3}\n", ""));
        }
        s
    }
}

/// World-frame training-set mean of each keypoint.
pub fn mean_pose(records: &[SampleRecord]) -> Result<Vec<Vec3>> {
    if records.is_empty() {
        return Err(HarnessError::EmptyInput("mean-pose records"));
    }
    let mut m = vec![Vec3::zeros(); NUM_KEYPOINTS];
    for r in records {
        for (a, p) in m.iter_mut().zip(&r.keypoints3d) {
            *a += p;
        }
    }
    let n = records.len() as f64;
    Ok(m.into_iter().map(|p| p / n).collect())
}

/// Keypoints triangulated from the stored 2D keypoints of both views.
pub fn triangulate_record(rig: &StereoRig, r: &SampleRecord) -> Result<Option<Vec<Vec3>>> {
    let (Some(l), Some(rv)) = (&r.views[0], &r.views[1]) else {
        return Ok(None);
    };
    let pts = l
        .kp2d
        .iter()
        .zip(&rv.kp2d)
        .map(|(a, b)| geometry::triangulate(&rig.left, &rig.right, a, b))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Some(pts))
}

fn predict_chunked<T: Sync>(items: &[T], f: impl Fn(&[T]) -> Result<Vec<Prediction>> + Sync + Send) -> Result<Vec<Prediction>> {
    let chunks: Vec<Vec<Prediction>> = items.par_chunks(EVAL_CHUNK).map(f).collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Mono predictions for every prepared view, in view order.
pub fn predict_views(model: &TrainedModel, data: &PreparedData) -> Result<Vec<Prediction>> {
    predict_chunked(&data.views, |vs| {
        let crops: Vec<&[f64]> = vs.iter().map(|v| v.crop.as_slice()).collect();
        let metas: Vec<[f64; META_DIM]> = vs.iter().map(|v| v.meta).collect();
        let frames: Vec<RigidTransform> = vs.iter().map(|v| v.frame).collect();
        Ok(model.net.predict_mono(&crops, &metas, &frames)?)
    })
}

/// Stereo predictions for the given stereo records.
pub fn predict_pairs(model: &TrainedModel, data: &PreparedData, records: &[usize]) -> Result<Vec<Prediction>> {
    predict_chunked(records, |rs| {
        let view = |r: usize, v: usize| &data.views[data.records[r].views[v].expect("stereo record")];
        let crops_l: Vec<&[f64]> = rs.iter().map(|&r| view(r, 0).crop.as_slice()).collect();
        let crops_r: Vec<&[f64]> = rs.iter().map(|&r| view(r, 1).crop.as_slice()).collect();
        let metas_l: Vec<[f64; META_DIM]> = rs.iter().map(|&r| view(r, 0).meta).collect();
        let metas_r: Vec<[f64; META_DIM]> = rs.iter().map(|&r| view(r, 1).meta).collect();
        let rels: Vec<[f64; REL_DIM]> = rs.iter().map(|&r| data.records[r].rel.expect("stereo record")).collect();
        let frames: Vec<RigidTransform> = rs.iter().map(|&r| view(r, 0).frame).collect();
        Ok(model.net.predict_stereo(&crops_l, &metas_l, &crops_r, &metas_r, &rels, &frames)?)
    })
}

fn errors_of(template: &HandTemplate, pred: &Prediction, gt: &[Vec3]) -> Result<(Vec<f64>, Vec<f64>)> {
    let indep = keypoint_errors(&pred.indep_keypoints, gt)?;
    let mano = keypoint_errors(&skin(template, &pred.hand_params).keypoints3d, gt)?;
    Ok((indep, mano))
}

/// Mono MKPE/AUC over every view, mono and stereo over the stereo records,
/// the routed system over all records, and the two baselines.
pub fn evaluate(model: &TrainedModel, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    let records = dataset.split(split);
    if records.is_empty() {
        return Err(HarnessError::EmptyInput("evaluation split"));
    }
    let data = PreparedData::new(records, &dataset.rig, &model.stats)?;
    let t = &model.template;
    let mono_preds = predict_views(model, &data)?;
    let stereo_ids: Vec<usize> = (0..data.records.len()).filter(|&r| data.records[r].is_stereo()).collect();
    let stereo_preds = predict_pairs(model, &data, &stereo_ids)?;

    let mut mono = (Vec::new(), Vec::new());
    let mut mono_sub = (Vec::new(), Vec::new());
    let mut overall = (Vec::new(), Vec::new());
    for (v, p) in data.views.iter().zip(&mono_preds) {
        let rec = &data.records[v.record];
        let (e, m) = errors_of(t, p, &rec.keypoints)?;
        if rec.is_stereo() {
            mono_sub.0.extend_from_slice(&e);
            mono_sub.1.extend_from_slice(&m);
        } else {
            overall.0.extend_from_slice(&e);
            overall.1.extend_from_slice(&m);
        }
        mono.0.extend(e);
        mono.1.extend(m);
    }
    let mut stereo = (Vec::new(), Vec::new());
    for (&r, p) in stereo_ids.iter().zip(&stereo_preds) {
        let (e, m) = errors_of(t, p, &data.records[r].keypoints)?;
        stereo.0.extend_from_slice(&e);
        stereo.1.extend_from_slice(&m);
        overall.0.extend(e);
        overall.1.extend(m);
    }

    let mut rows = vec![ReportRow::from_errors(ROW_MONO, data.views.len(), &mono.0, Some(&mono.1))?];
    if !stereo_ids.is_empty() {
        rows.push(ReportRow::from_errors(ROW_MONO_ON_STEREO, 2 * stereo_ids.len(), &mono_sub.0, Some(&mono_sub.1))?);
        rows.push(ReportRow::from_errors(ROW_STEREO, stereo_ids.len(), &stereo.0, Some(&stereo.1))?);
    }
    rows.push(ReportRow::from_errors(ROW_OVERALL, records.len(), &overall.0, Some(&overall.1))?);

    let mean = mean_pose(dataset.split(Split::Train))?;
    let mut base = Vec::new();
    for r in records {
        base.extend(keypoint_errors(&mean, &r.keypoints3d)?);
    }
    rows.push(ReportRow::from_errors(ROW_MEAN_POSE, records.len(), &base, None)?);
    let mut tri = Vec::new();
    for r in records {
        if let Some(p) = triangulate_record(&dataset.rig, r)? {
            tri.extend(keypoint_errors(&p, &r.keypoints3d)?);
        }
    }
    if !tri.is_empty() {
        rows.push(ReportRow::from_errors(ROW_TRIANGULATION, stereo_ids.len(), &tri, None)?);
    }

    let n_overall = overall.0.len() / NUM_KEYPOINTS;
    let per_keypoint_mkpe = (0..NUM_KEYPOINTS)
        .map(|k| overall.0.iter().skip(k).step_by(NUM_KEYPOINTS).sum::<f64>() / n_overall as f64)
        .collect();
    Ok(EvalReport {
        split: split.name().into(),
        records: records.len(),
        stereo_records: stereo_ids.len(),
        rows,
        per_keypoint_mkpe,
    })
}

// ---------------------------------------------------------------- inference

/// One input view for [`infer`].
#[derive(Clone, Debug)]
pub struct InferView {
    /// 0 = left camera, 1 = right camera.
    pub view: usize,
    pub crop: Vec<f64>,
    pub bbox: BoundingBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferPath {
    Mono,
    Stereo,
}

impl fmt::Display for InferPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferPath::Mono => "mono",
            InferPath::Stereo => "stereo",
        })
    }
}

pub struct InferResult {
    pub path: InferPath,
    pub prediction: Prediction,
    pub state: HandState,
    pub decoded_vertices: Vec<Vec3>,
}

/// Runs the mono path on one view and the stereo path on a left/right pair.
pub fn infer(model: &TrainedModel, rig: &StereoRig, views: &[InferView]) -> Result<InferResult> {
    let c = model.net.config.crop_size;
    for v in views {
        if v.view > 1 {
            return Err(HarnessError::Config(format!("view index {} is not 0 or 1", v.view)));
        }
        if v.crop.len() != c * c {
            return Err(HarnessError::Data(format!("crop has {} pixels, the network expects {c}×{c}", v.crop.len())));
        }
    }
    let prep = |v: &InferView| -> Result<([f64; META_DIM], RigidTransform)> {
        let cam = rig.camera(v.view);
        let meta = compute_metadata(cam, &v.bbox, c)?;
        Ok((model.stats.normalize(&meta), world_from_view(cam, &v.bbox)?))
    };
    let (path, prediction) = match views {
        [v] => {
            let (m, f) = prep(v)?;
            (InferPath::Mono, model.net.predict_mono(&[&v.crop], &[m], &[f])?.remove(0))
        }
        [a, b] => {
            let (l, r) = match (a.view, b.view) {
                (0, 1) => (a, b),
                (1, 0) => (b, a),
                _ => return Err(HarnessError::Config("stereo inference needs one left and one right view".into())),
            };
            let (ml, fl) = prep(l)?;
            let (mr, _) = prep(r)?;
            let rel = rel_vector(&geometry::virtual_relative_extrinsics(&rig.left, &l.bbox, &rig.right, &r.bbox)?);
            let p = model.net.predict_stereo(&[&l.crop], &[ml], &[&r.crop], &[mr], &[rel], &[fl])?.remove(0);
            (InferPath::Stereo, p)
        }
        _ => return Err(HarnessError::Config(format!("inference takes 1 or 2 views, got {}", views.len()))),
    };
    if !prediction.is_finite() {
        return Err(HarnessError::NonFiniteLoss {
            term: "prediction".into(),
            step: 0,
        });
    }
    let (state, decoded_vertices) = predict_state(&model.template, &model.net.decoder, &model.net.store, &prediction)?;
    Ok(InferResult {
        path,
        prediction,
        state,
        decoded_vertices,
    })
}

// ---------------------------------------------------------------- plots

/// `threshold_mm` followed by one PCK column per report row; 51 data rows.
pub fn pck_table(report: &EvalReport) -> Result<String> {
    if report.rows.is_empty() {
        return Err(HarnessError::EmptyInput("report rows"));
    }
    let mut s = String::from("threshold_mm");
    for r in &report.rows {
        s.push('\t');
        s.push_str(&r.method);
    }
    s.push('\n');
    for t in 0..PCK_THRESHOLDS {
        s.push_str(&t.to_string());
        for r in &report.rows {
            s.push_str(&format!("\t{:.17e}", r.pck[t]));
        }
        s.push('\n');
    }
    Ok(s)
}

/// `step`, `total`, `mono_total`, `stereo_total` from a metrics log.
pub fn loss_table(log_text: &str) -> Result<String> {
    let rows = parse_loss_curve(log_text)?;
    let mut s = String::from("step\ttotal\tmono_total\tstereo_total\n");
    for (step, t, m, st) in rows {
        let st = st.map_or("nan".to_string(), |v| format!("{v:.17e}"));
        s.push_str(&format!("{step}\t{t:.17e}\t{m:.17e}\t{st}\n"));
    }
    Ok(s)
}

/// Re-integrates every PCK column of a table written by [`pck_table`].
pub fn auc_from_table(table: &str) -> Result<Vec<(String, f64)>> {
    let mut lines = table.lines();
    let header: Vec<&str> = lines.next().ok_or(HarnessError::EmptyInput("PCK table"))?.split('\t').skip(1).collect();
    let mut cols = vec![Vec::new(); header.len()];
    for l in lines {
        for (c, v) in cols.iter_mut().zip(l.split('\t').skip(1)) {
            c.push(v.parse::<f64>().map_err(|_| HarnessError::Data(format!("bad PCK value `{v}`")))?);
        }
    }
    Ok(header.into_iter().map(String::from).zip(cols.iter().map(|c| auc_from_pck(c))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_constructed_example() {
        let mut e = vec![10.0; 50];
        e.extend(vec![60.0; 50]);
        let want = 0.5 * (50.0 - 10.0 + 0.5) / 50.0;
        assert!((compute_auc(&e, 50.0).unwrap() - want).abs() < 1e-12);
        assert!(compute_auc(&[], 50.0).is_err());
    }

    #[test]
    fn mkpe_three_four_five() {
        let gt: Vec<Vec3> = (0..21).map(|i| Vec3::new(i as f64, 0.0, 1.0)).collect();
        let pred: Vec<Vec3> = gt.iter().map(|p| p + Vec3::new(3.0, 4.0, 0.0)).collect();
        assert!((compute_mkpe(&pred, &gt).unwrap() - 5.0).abs() < 1e-12);
        assert!(compute_mkpe(&pred[..20], &gt).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::EmptyInput("x").exit_code(), 2);
        assert_eq!(
            HarnessError::NonFiniteLoss {
                term: "kp3d".into(),
                step: 1
            }
            .exit_code(),
            3
        );
    }
}
