//! Synthetic stereo fisheye hand data: a head-mounted rig preset, hand
//! sampling, stick-figure crop rendering, and sharded on-disk datasets.
//!
//! Shard layout (little-endian):
//!
//! ```text
//! magic          "direg3d-shard v1\n"
//! record_count   u32
//! crop_size      u32
//! vertex_count   u32
//! record*        id u64, view_flags u8 (bit 0 left, bit 1 right)
//!                params f64 × 61, keypoints f64 × 63, vertices f64 × 3V
//!                per present view: box f64 × 4, metadata f64 × 28,
//!                keypoints_2d f64 × 42, crop u8 × crop_size²
//! ```

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{axis_angle, rodrigues, BoundingBox, FisheyeCamera, GeometryError, Mat3, RigidTransform, StereoRig, Vec2, Vec3};
use crate::hand_model::{
    self, skin, HandModelError, HandParams, HandState, HandTemplate, FINGER_JOINT_BASE, NUM_KEYPOINTS, NUM_SHAPE, PARAM_DIM,
    SKELETON_EDGES,
};
use crate::kv::{KvDoc, KvError, KvWriter};
use crate::metadata::{compute_metadata, MetadataError, MetadataVector, META_DIM};

pub const SHARD_MAGIC: &[u8; 17] = b"direg3d-shard v1\n";
pub const MANIFEST_HEADER: &str = "direg3d-dataset v1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const RIG_FILE: &str = "rig.txt";
pub const RIG_PRESET_NAME: &str = "hmd-fisheye-pair";
/// Largest incidence angle at which a keypoint counts as visible.
pub const VISIBLE_THETA: f64 = 80.0 * PI / 180.0;
const MAX_ATTEMPTS: usize = 10_000;
const NOISE_MAX: f64 = 0.08;
const NOMINAL_PALM_MM: f64 = 90.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    HandModel(#[from] HandModelError),
    #[error("no keypoint lands inside the crop")]
    EmptyRender,
    #[error("record {0}: no valid hand after {MAX_ATTEMPTS} attempts")]
    Exhausted(u64),
    #[error("config: {0}")]
    Config(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl From<KvError> for SynthError {
    fn from(e: KvError) -> Self {
        SynthError::Config(e.to_string())
    }
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Two outward-yawed fisheye cameras about 100 mm apart.
pub fn rig_preset() -> StereoRig {
    let cam = |fx, fy, cx, cy, k, yaw: f64, x: f64| {
        let world_from_cam = RigidTransform::from_axis_angle(Vec3::new(0.0, yaw, 0.0), Vec3::new(x, 0.0, 0.0));
        FisheyeCamera::new(fx, fy, cx, cy, k, 640, 640, FRAC_PI_2, world_from_cam.inverse()).expect("preset camera is valid")
    };
    let yaw = 35f64.to_radians();
    StereoRig {
        left: cam(200.0, 200.0, 319.5, 319.5, [-0.03, 0.005, -0.001, 0.0], -yaw, -50.0),
        right: cam(201.0, 200.5, 320.5, 318.5, [-0.028, 0.0045, -0.0012, 0.0001], yaw, 50.0),
    }
}

/// Hand placement volume around the rig, spherical about its midpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Workspace {
    pub distance_mm: (f64, f64),
    pub azimuth_max_deg: f64,
    pub elevation_max_deg: f64,
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            distance_mm: (200.0, 700.0),
            azimuth_max_deg: 105.0,
            elevation_max_deg: 35.0,
        }
    }
}

/// Flexion range per finger joint `[thumb, others][joint] = (lo, hi)`.
pub const FLEX_LIMITS: [[(f64, f64); 3]; 2] = [[(-0.3, 0.6), (0.0, 0.8), (0.0, 1.0)], [(-0.2, 1.3), (0.0, 1.5), (0.0, 1.1)]];
pub const ABDUCTION_LIMIT: [f64; 2] = [0.35, 0.25];
pub const TWIST_LIMIT: f64 = 0.05;
pub const GLOBAL_TILT_MAX: f64 = 0.8;
pub const SHAPE_STD: f64 = 0.5;
pub const SHAPE_LIMIT: f64 = 2.0;

/// Rest-pose direction of each finger, thumb first.
fn finger_directions(t: &HandTemplate) -> [Vec3; 5] {
    let mut d = [Vec3::zeros(); 5];
    for (f, base) in FINGER_JOINT_BASE.iter().enumerate() {
        d[f] = (t.joints[base + 2] - t.joints[*base]).normalize();
    }
    d
}

/// Samples a hand pose, shape and placement.
pub fn sample_hand<R: Rng + ?Sized>(rng: &mut R, t: &HandTemplate, ws: &Workspace) -> HandParams {
    let dist = rng.random_range(ws.distance_mm.0..=ws.distance_mm.1);
    let (az_max, el_max) = (ws.azimuth_max_deg.to_radians(), ws.elevation_max_deg.to_radians());
    let az = rng.random_range(-az_max..=az_max);
    let el = rng.random_range(-el_max..=el_max);
    let dir = Vec3::new(az.sin() * el.cos(), -el.sin(), az.cos() * el.cos());

    // palm towards the rig, fingers roughly up (−y), then a random tilt
    let cz = dir;
    let up = -Vec3::y();
    let cy = (up - cz * up.dot(&cz)).normalize();
    let cx = cy.cross(&cz);
    let base = Mat3::from_columns(&[cx, cy, cz]);
    let tilt_axis = loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v / n;
        }
    };
    let tilt = rng.random_range(0.0..GLOBAL_TILT_MAX);
    let global = base * rodrigues(&(tilt_axis * tilt));

    let dirs = finger_directions(t);
    let mut joint_pose = [Vec3::zeros(); 15];
    let noise = Normal::new(0.0, 0.15).unwrap();
    for (f, d) in dirs.iter().enumerate() {
        let kind = usize::from(f != 0);
        let flex_axis = Vec3::z().cross(d).normalize();
        let curl: f64 = rng.random_range(0.0..1.0);
        let abd = rng.random_range(-ABDUCTION_LIMIT[kind]..=ABDUCTION_LIMIT[kind]);
        for (k, &(lo, hi)) in FLEX_LIMITS[kind].iter().enumerate() {
            let c = (curl + noise.sample(rng)).clamp(0.0, 1.0);
            let flex = lo + (hi - lo) * c;
            let twist = rng.random_range(-TWIST_LIMIT..=TWIST_LIMIT);
            let abduction = if k == 0 { abd } else { 0.0 };
            joint_pose[FINGER_JOINT_BASE[f] + k - 1] = flex_axis * flex + Vec3::z() * abduction + d * twist;
        }
    }

    let shape_dist = Normal::new(0.0, SHAPE_STD).unwrap();
    let mut shape = [0.0; NUM_SHAPE];
    for s in shape.iter_mut() {
        *s = shape_dist.sample(rng).clamp(-SHAPE_LIMIT, SHAPE_LIMIT);
    }
    HandParams {
        global_rot: axis_angle(&global),
        global_trans: dir * dist,
        joint_pose,
        shape,
    }
}

/// Full-frame projections of all keypoints, or `None` if any keypoint is
/// outside the visible cone or the image.
pub fn visible_projection(cam: &FisheyeCamera, keypoints: &[Vec3]) -> Option<Vec<Vec2>> {
    keypoints
        .iter()
        .map(|p| {
            let pc = cam.to_camera(p);
            if pc.z <= 0.0 || FisheyeCamera::incidence_angle(&pc) > VISIBLE_THETA {
                return None;
            }
            cam.project_camera(&pc).ok().filter(|px| cam.in_image(px))
        })
        .collect()
}

/// Detector box: the tight box around the projected keypoints, clamped.
pub fn keypoint_box(cam: &FisheyeCamera, kp2d: &[Vec2]) -> Result<BoundingBox> {
    Ok(BoundingBox::around(kp2d)?.clamp_to(cam.width(), cam.height())?)
}

fn hand_scale(state: &HandState) -> f64 {
    let palm = (state.keypoints3d[hand_model::keypoint_index(2, 0)] - state.keypoints3d[0]).norm();
    palm / NOMINAL_PALM_MM
}

/// Drawing positions of one view in crop pixels.
pub struct CropProjection {
    /// Crop position and camera depth of each keypoint (`None` when not
    /// projectable).
    pub keypoints: Vec<Option<(Vec2, f64)>>,
    /// Polylines of each bone, each point with its camera depth.
    pub bones: Vec<Vec<(Vec2, f64)>>,
    /// Crop pixels per full-frame pixel.
    pub scale: f64,
}

const BONE_SUBDIVISIONS: usize = 8;

/// Projects keypoints and bone polylines through the fisheye model and the
/// crop transform of `bbox`'s crop window.
pub fn crop_projection(cam: &FisheyeCamera, bbox: &BoundingBox, keypoints: &[Vec3], crop_size: usize) -> Result<CropProjection> {
    let window = bbox.crop_window();
    let k = crate::geometry::crop_intrinsics(cam, &window, crop_size)?;
    let to_crop = |p: &Vec3| -> Option<(Vec2, f64)> {
        let pc = cam.to_camera(p);
        cam.project_camera(&pc).ok().map(|px| (k.full_to_crop(cam, &px), pc.z))
    };
    let kps = keypoints.iter().map(to_crop).collect();
    let bones = SKELETON_EDGES
        .iter()
        .map(|&(a, b)| {
            (0..=BONE_SUBDIVISIONS)
                .filter_map(|i| {
                    let t = i as f64 / BONE_SUBDIVISIONS as f64;
                    to_crop(&(keypoints[a] + (keypoints[b] - keypoints[a]) * t))
                })
                .collect()
        })
        .collect();
    Ok(CropProjection {
        keypoints: kps,
        bones,
        scale: crop_size as f64 / window.width(),
    })
}

fn segment_distance(p: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    let ab = b - a;
    let l2 = ab.norm_squared();
    let t = if l2 > 0.0 { ((p - a).dot(&ab) / l2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

/// Base bone brightness per finger, thumb first.
const FINGER_INTENSITY: [f64; 5] = [0.9, 0.78, 0.66, 0.54, 0.42];

/// Stick-figure rendering of a hand into the square crop of `bbox`:
/// anti-aliased bones whose brightness depends on depth relative to the
/// wrist, Gaussian keypoint blobs with peak 1 and width proportional to
/// inverse depth, over uniform background noise drawn from `rng`.
pub fn render_crop<R: Rng + ?Sized>(
    cam: &FisheyeCamera,
    bbox: &BoundingBox,
    state: &HandState,
    crop_size: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let proj = crop_projection(cam, bbox, &state.keypoints3d, crop_size)?;
    let n = crop_size;
    let inside = |p: &Vec2| p.x >= -0.5 && p.y >= -0.5 && p.x < n as f64 - 0.5 && p.y < n as f64 - 0.5;
    if !proj.keypoints.iter().flatten().any(|(p, _)| inside(p)) {
        return Err(SynthError::EmptyRender);
    }
    let mut img: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..NOISE_MAX)).collect();
    let scale = hand_scale(state);
    let palm = NOMINAL_PALM_MM * scale;
    let radius_mm = 5.0 * scale;
    let wrist_z = cam.to_camera(&state.keypoints3d[0]).z;
    let sigma_at = |z: f64| (proj.scale * cam.fx() * radius_mm / z).max(0.3);

    let mut splat = |x0: f64, y0: f64, reach: f64, f: &dyn Fn(&Vec2) -> f64| {
        let lo_x = ((x0 - reach).floor().max(0.0)) as usize;
        let lo_y = ((y0 - reach).floor().max(0.0)) as usize;
        let hi_x = ((x0 + reach).ceil().min(n as f64 - 1.0)).max(-1.0);
        let hi_y = ((y0 + reach).ceil().min(n as f64 - 1.0)).max(-1.0);
        if hi_x < 0.0 || hi_y < 0.0 {
            return;
        }
        for y in lo_y..=hi_y as usize {
            for x in lo_x..=hi_x as usize {
                let v = f(&Vec2::new(x as f64, y as f64));
                let px = &mut img[y * n + x];
                if v > *px {
                    *px = v;
                }
            }
        }
    };

    for (b, line) in proj.bones.iter().enumerate() {
        let finger = b / 4;
        for w in line.windows(2) {
            let ((a, za), (c, zc)) = (w[0], w[1]);
            let z = 0.5 * (za + zc);
            let modulation = (1.0 - 0.5 * (z - wrist_z) / palm).clamp(0.5, 1.3);
            let intensity = (FINGER_INTENSITY[finger] * modulation).min(0.95);
            let half_width = sigma_at(z).clamp(0.4, 1.5);
            let centre = (a + c) * 0.5;
            let reach = 0.5 * (c - a).norm() + half_width + 1.0;
            splat(centre.x, centre.y, reach, &|p| {
                let cover = (half_width + 0.5 - segment_distance(p, &a, &c)).clamp(0.0, 1.0);
                intensity * cover
            });
        }
    }
    for (p, z) in proj.keypoints.iter().flatten() {
        let sigma = sigma_at(*z);
        let inv = 1.0 / (2.0 * sigma * sigma);
        let centre = *p;
        splat(p.x, p.y, 3.0 * sigma + 1.0, &|q| (-(q - centre).norm_squared() * inv).exp());
    }
    Ok(img)
}

pub fn quantize(img: &[f64]) -> Vec<u8> {
    img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn dequantize(img: &[u8]) -> Vec<f64> {
    img.iter().map(|&v| v as f64 / 255.0).collect()
}

/// Binary PGM (P5) encoding of a square crop.
pub fn to_pgm(crop: &[u8], size: usize) -> Vec<u8> {
    let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
    out.extend_from_slice(crop);
    out
}

/// Decodes the P5 images written by [`to_pgm`] (and other 8-bit P5 files).
pub fn from_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| SynthError::Format(format!("pgm: {m}"));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary greymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, maxv) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxv != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let data = bytes.get(i..i + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Ok((w, h, data.to_vec()))
}

/// One camera's share of a record.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSample {
    pub bbox: BoundingBox,
    pub meta: MetadataVector,
    pub kp2d: Vec<Vec2>,
    pub crop: Vec<u8>,
}

impl ViewSample {
    pub fn crop_f64(&self) -> Vec<f64> {
        dequantize(&self.crop)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub views: [Option<ViewSample>; 2],
    pub params: HandParams,
    pub keypoints3d: Vec<Vec3>,
    pub vertices: Vec<Vec3>,
}

impl SampleRecord {
    pub fn is_stereo(&self) -> bool {
        self.views[0].is_some() && self.views[1].is_some()
    }

    pub fn visible(&self) -> [bool; 2] {
        [self.views[0].is_some(), self.views[1].is_some()]
    }

    /// `(view index, view)` pairs of the present views.
    pub fn present_views(&self) -> impl Iterator<Item = (usize, &ViewSample)> {
        self.views.iter().enumerate().filter_map(|(i, v)| v.as_ref().map(|v| (i, v)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub crop_size: usize,
    pub stereo_target: f64,
    pub template_seed: u64,
    pub vertex_budget: usize,
    pub shard_size: usize,
    pub workspace: Workspace,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 5000,
            n_val: 500,
            n_test: 500,
            crop_size: 32,
            stereo_target: 0.35,
            template_seed: 0,
            vertex_budget: hand_model::DEFAULT_VERTEX_BUDGET,
            shard_size: 1000,
            workspace: Workspace::default(),
        }
    }
}

impl SynthConfig {
    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        if self.total() == 0 {
            return bad("dataset must contain at least one record");
        }
        if !(0.0..=1.0).contains(&self.stereo_target) {
            return bad("stereo_target must lie in [0, 1]");
        }
        if self.crop_size == 0 || self.shard_size == 0 {
            return bad("crop_size and shard_size must be positive");
        }
        let (lo, hi) = self.workspace.distance_mm;
        if !(lo > 0.0 && lo <= hi) {
            return bad("invalid distance range");
        }
        Ok(())
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.entry("n_train", self.n_train)
            .entry("n_val", self.n_val)
            .entry("n_test", self.n_test)
            .entry("crop_size", self.crop_size)
            .entry("stereo_target", self.stereo_target)
            .entry("template_seed", self.template_seed)
            .entry("vertex_budget", self.vertex_budget)
            .entry("shard_size", self.shard_size)
            .entry("distance_min_mm", self.workspace.distance_mm.0)
            .entry("distance_max_mm", self.workspace.distance_mm.1)
            .entry("azimuth_max_deg", self.workspace.azimuth_max_deg)
            .entry("elevation_max_deg", self.workspace.elevation_max_deg);
    }

    pub fn read_kv(doc: &KvDoc) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            n_train: doc.get_or("n_train", d.n_train)?,
            n_val: doc.get_or("n_val", d.n_val)?,
            n_test: doc.get_or("n_test", d.n_test)?,
            crop_size: doc.get_or("crop_size", d.crop_size)?,
            stereo_target: doc.get_or("stereo_target", d.stereo_target)?,
            template_seed: doc.get_or("template_seed", d.template_seed)?,
            vertex_budget: doc.get_or("vertex_budget", d.vertex_budget)?,
            shard_size: doc.get_or("shard_size", d.shard_size)?,
            workspace: Workspace {
                distance_mm: (
                    doc.get_or("distance_min_mm", d.workspace.distance_mm.0)?,
                    doc.get_or("distance_max_mm", d.workspace.distance_mm.1)?,
                ),
                azimuth_max_deg: doc.get_or("azimuth_max_deg", d.workspace.azimuth_max_deg)?,
                elevation_max_deg: doc.get_or("elevation_max_deg", d.workspace.elevation_max_deg)?,
            },
        };
        c.validate()?;
        Ok(c)
    }
}

/// Everything record generation needs, built once.
pub struct Generator {
    pub config: SynthConfig,
    pub rig: StereoRig,
    pub template: HandTemplate,
    pub seed: u64,
}

impl Generator {
    pub fn new(config: SynthConfig, rig: StereoRig, seed: u64) -> Result<Self> {
        config.validate()?;
        let template = HandTemplate::build(config.template_seed, config.vertex_budget)?;
        Ok(Self {
            config,
            rig,
            template,
            seed,
        })
    }

    pub fn record_rng(&self, id: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ id)
    }

    /// Generates record `id`; returns it with the number of rejected draws.
    pub fn record(&self, id: u64) -> Result<(SampleRecord, usize)> {
        let mut rng = self.record_rng(id);
        let want_stereo = rng.random_bool(self.config.stereo_target);
        for attempt in 0..MAX_ATTEMPTS {
            let params = sample_hand(&mut rng, &self.template, &self.config.workspace);
            let state = skin(&self.template, &params);
            let proj = [
                visible_projection(&self.rig.left, &state.keypoints3d),
                visible_projection(&self.rig.right, &state.keypoints3d),
            ];
            let stereo = proj[0].is_some() && proj[1].is_some();
            if proj.iter().all(Option::is_none) || stereo != want_stereo {
                continue;
            }
            match self.build_views(&state, proj, &mut rng) {
                Ok(views) => {
                    let rec = SampleRecord {
                        id,
                        views,
                        params,
                        keypoints3d: state.keypoints3d,
                        vertices: state.vertices,
                    };
                    return Ok((rec, attempt));
                }
                Err(SynthError::EmptyRender) | Err(SynthError::Geometry(_)) | Err(SynthError::Metadata(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Err(SynthError::Exhausted(id))
    }

    fn build_views(&self, state: &HandState, proj: [Option<Vec<Vec2>>; 2], rng: &mut ChaCha8Rng) -> Result<[Option<ViewSample>; 2]> {
        let mut out = [None, None];
        for (v, kp2d) in proj.into_iter().enumerate() {
            let Some(kp2d) = kp2d else { continue };
            let cam = self.rig.camera(v);
            let bbox = keypoint_box(cam, &kp2d)?;
            let meta = compute_metadata(cam, &bbox, self.config.crop_size)?;
            let crop = render_crop(cam, &bbox, state, self.config.crop_size, rng)?;
            out[v] = Some(ViewSample {
                bbox,
                meta,
                kp2d,
                crop: quantize(&crop),
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: SynthConfig,
    pub seed: u64,
    pub records: usize,
    pub shards: usize,
    pub stereo_records: usize,
    pub resampled: usize,
    pub rig_preset: String,
}

impl DatasetManifest {
    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        let (a, b) = (self.config.n_train, self.config.n_train + self.config.n_val);
        match split {
            Split::Train => 0..a,
            Split::Val => a..b,
            Split::Test => b..self.records,
        }
    }

    pub fn split_of(&self, id: usize) -> Split {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|s| self.split_range(*s).contains(&id))
            .unwrap_or(Split::Test)
    }

    pub fn stereo_fraction(&self) -> f64 {
        self.stereo_records as f64 / self.records.max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new(Some(MANIFEST_HEADER));
        w.entry("format_version", self.format_version)
            .entry("seed", self.seed)
            .entry("records", self.records)
            .entry("shards", self.shards)
            .entry("rig_preset", &self.rig_preset)
            .entry("rig_file", RIG_FILE);
        for s in [Split::Train, Split::Val, Split::Test] {
            let r = self.split_range(s);
            w.entry(&format!("split.{}", s.name()), format!("{} {}", r.start, r.end));
        }
        self.config.write_kv(&mut w);
        w.entry("stereo_records", self.stereo_records)
            .entry("stereo_fraction", format!("{:.4}", self.stereo_fraction()))
            .entry("resampled", self.resampled);
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text, Some(MANIFEST_HEADER))?;
        let m = Self {
            format_version: doc.require("format_version")?,
            config: SynthConfig::read_kv(&doc)?,
            seed: doc.require("seed")?,
            records: doc.require("records")?,
            shards: doc.require("shards")?,
            stereo_records: doc.require("stereo_records")?,
            resampled: doc.require("resampled")?,
            rig_preset: doc.require_str("rig_preset")?.to_string(),
        };
        if m.format_version != 1 {
            return Err(SynthError::Format(format!("unsupported format version {}", m.format_version)));
        }
        if m.records != m.config.total() {
            return Err(SynthError::Format("record count disagrees with split sizes".into()));
        }
        Ok(m)
    }
}

pub fn shard_file_name(i: usize) -> String {
    format!("shard-{i:04}.bin")
}

struct Writer(Vec<u8>);

impl Writer {
    fn f64s(&mut self, v: impl IntoIterator<Item = f64>) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn vec3s(&mut self, v: &[Vec3]) {
        self.f64s(v.iter().flat_map(|p| [p.x, p.y, p.z]));
    }
}

pub fn encode_shard(records: &[SampleRecord], crop_size: usize, num_vertices: usize) -> Vec<u8> {
    let mut w = Writer(SHARD_MAGIC.to_vec());
    for n in [records.len(), crop_size, num_vertices] {
        w.0.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for r in records {
        w.0.extend_from_slice(&r.id.to_le_bytes());
        let flags = u8::from(r.views[0].is_some()) | (u8::from(r.views[1].is_some()) << 1);
        w.0.push(flags);
        w.f64s(r.params.to_vec());
        w.vec3s(&r.keypoints3d);
        w.vec3s(&r.vertices);
        for v in r.views.iter().flatten() {
            w.f64s(v.bbox.corners());
            w.f64s(v.meta.0);
            w.f64s(v.kp2d.iter().flat_map(|p| [p.x, p.y]));
            w.0.extend_from_slice(&v.crop);
        }
    }
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| SynthError::Format("truncated shard".into()))?;
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(8 * n)?.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn vec3s(&mut self, n: usize) -> Result<Vec<Vec3>> {
        Ok(self.f64s(3 * n)?.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    }
}

pub fn decode_shard(bytes: &[u8]) -> Result<Vec<SampleRecord>> {
    if bytes.len() < SHARD_MAGIC.len() || &bytes[..SHARD_MAGIC.len()] != SHARD_MAGIC {
        return Err(SynthError::Format("bad shard magic".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: SHARD_MAGIC.len(),
    };
    let count = r.u32()? as usize;
    let crop = r.u32()? as usize;
    let nv = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u64()?;
        let flags = r.take(1)?[0];
        let params = HandParams::from_slice(&r.f64s(PARAM_DIM)?)?;
        let keypoints3d = r.vec3s(NUM_KEYPOINTS)?;
        let vertices = r.vec3s(nv)?;
        let mut views = [None, None];
        for (v, slot) in views.iter_mut().enumerate() {
            if flags & (1 << v) == 0 {
                continue;
            }
            let b = r.f64s(4)?;
            let meta: [f64; META_DIM] = r.f64s(META_DIM)?.try_into().unwrap();
            let kp2d = r.f64s(2 * NUM_KEYPOINTS)?.chunks(2).map(|c| Vec2::new(c[0], c[1])).collect();
            let crop = r.take(crop * crop)?.to_vec();
            *slot = Some(ViewSample {
                bbox: BoundingBox::new(b[0], b[1], b[2], b[3])?,
                meta: MetadataVector(meta),
                kp2d,
                crop,
            });
        }
        out.push(SampleRecord {
            id,
            views,
            params,
            keypoints3d,
            vertices,
        });
    }
    if r.pos != bytes.len() {
        return Err(SynthError::Format("trailing bytes in shard".into()));
    }
    Ok(out)
}

/// Files of a generated dataset, in write order.
pub struct DatasetFiles {
    pub manifest: DatasetManifest,
    pub files: Vec<(String, Vec<u8>)>,
}

/// Generates all records and their serialized files. With `parallel` the
/// shards are built on the rayon pool; the bytes are identical either way.
pub fn build_dataset(config: &SynthConfig, rig: &StereoRig, seed: u64, parallel: bool) -> Result<DatasetFiles> {
    let gen = Generator::new(config.clone(), *rig, seed)?;
    let total = config.total();
    let shards = total.div_ceil(config.shard_size);
    let build_shard = |s: usize| -> Result<(Vec<SampleRecord>, usize)> {
        let lo = s * config.shard_size;
        let hi = (lo + config.shard_size).min(total);
        let mut recs = Vec::with_capacity(hi - lo);
        let mut resampled = 0;
        for id in lo..hi {
            let (r, n) = gen.record(id as u64)?;
            resampled += n;
            recs.push(r);
        }
        Ok((recs, resampled))
    };
    let built: Vec<(Vec<SampleRecord>, usize)> = if parallel {
        (0..shards).into_par_iter().map(build_shard).collect::<Result<_>>()?
    } else {
        (0..shards).map(build_shard).collect::<Result<_>>()?
    };
    let nv = gen.template.num_vertices();
    let mut stereo_records = 0;
    let mut resampled = 0;
    let mut files = Vec::with_capacity(shards + 2);
    for (i, (recs, n)) in built.iter().enumerate() {
        stereo_records += recs.iter().filter(|r| r.is_stereo()).count();
        resampled += n;
        files.push((shard_file_name(i), encode_shard(recs, config.crop_size, nv)));
    }
    if resampled > 0 {
        log::info!("resampled {resampled} hand draws that failed the view requirements");
    }
    let manifest = DatasetManifest {
        format_version: 1,
        config: config.clone(),
        seed,
        records: total,
        shards,
        stereo_records,
        resampled,
        rig_preset: RIG_PRESET_NAME.into(),
    };
    files.push((RIG_FILE.into(), rig.to_text().into_bytes()));
    files.push((MANIFEST_FILE.into(), manifest.to_text().into_bytes()));
    Ok(DatasetFiles { manifest, files })
}

/// [`build_dataset`] and write everything under `out`.
pub fn generate_dataset(config: &SynthConfig, rig: &StereoRig, seed: u64, out: &Path, parallel: bool) -> Result<DatasetManifest> {
    let built = build_dataset(config, rig, seed, parallel)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    for (name, bytes) in &built.files {
        let p = out.join(name);
        fs::write(&p, bytes).map_err(io_err(&p))?;
    }
    Ok(built.manifest)
}

/// A dataset loaded into memory.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub rig: StereoRig,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(io_err(&p))
        };
        let manifest = DatasetManifest::from_text(&String::from_utf8_lossy(&read(MANIFEST_FILE)?))?;
        let rig = StereoRig::from_text(&String::from_utf8_lossy(&read(RIG_FILE)?))?;
        let mut records = Vec::with_capacity(manifest.records);
        for i in 0..manifest.shards {
            records.extend(decode_shard(&read(&shard_file_name(i))?)?);
        }
        if records.len() != manifest.records || records.iter().enumerate().any(|(i, r)| r.id != i as u64) {
            return Err(SynthError::Format("shards do not hold the manifest's records in order".into()));
        }
        Ok(Self { manifest, rig, records })
    }

    pub fn split(&self, split: Split) -> &[SampleRecord] {
        &self.records[self.manifest.split_range(split)]
    }

    pub fn template(&self) -> Result<HandTemplate> {
        Ok(HandTemplate::build(self.manifest.config.template_seed, self.manifest.config.vertex_budget)?)
    }
}
