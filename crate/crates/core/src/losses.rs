//! Training objective: keypoint and mesh L1, bone length and angle,
//! Laplace keypoint variance, parameter regularization, and 2D projection
//! losses through the fisheye model.
//!
//! All terms are built on an autodiff [`Graph`] and batched over the
//! leading axis.

use std::fmt;

use handreg_autodiff::{AutodiffError, Graph, Tensor, Var};
use thiserror::Error;

use crate::geometry::FisheyeCamera;
use crate::hand_model::{ANGLE_PAIRS, DEGENERATE_BONE_MM, NUM_ANGLES, NUM_BONES, NUM_KEYPOINTS, PARAM_DIM, SKELETON_EDGES};
use crate::kv::{KvDoc, KvError, KvWriter};

/// Log-scale clamp of the variance term.
pub const LOG_SCALE_MIN: f64 = -5.0;
pub const LOG_SCALE_MAX: f64 = 5.0;

const LEN_EPS: f64 = 1e-12;
const RADIAL_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("no keypoint is projectable")]
    AllMasked,
    #[error("invalid loss weights: {0}")]
    Weights(String),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub kp3d: f64,
    pub mesh: f64,
    pub bone_len: f64,
    pub bone_ang: f64,
    pub var: f64,
    pub reg: f64,
    pub kp2d: f64,
    pub stereo2d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kp3d: 1.0,
            mesh: 1.0,
            bone_len: 0.5,
            bone_ang: 0.5,
            var: 0.1,
            reg: 0.01,
            kp2d: 0.01,
            stereo2d: 0.01,
        }
    }
}

impl LossWeights {
    pub const NAMES: [&'static str; 8] = ["kp3d", "mesh", "bone_len", "bone_ang", "var", "reg", "kp2d", "stereo2d"];

    pub fn as_array(&self) -> [f64; 8] {
        [self.kp3d, self.mesh, self.bone_len, self.bone_ang, self.var, self.reg, self.kp2d, self.stereo2d]
    }

    pub fn from_array(a: [f64; 8]) -> Result<Self> {
        let w = Self {
            kp3d: a[0],
            mesh: a[1],
            bone_len: a[2],
            bone_ang: a[3],
            var: a[4],
            reg: a[5],
            kp2d: a[6],
            stereo2d: a[7],
        };
        w.validate()?;
        Ok(w)
    }

    pub fn only_kp3d() -> Self {
        Self::from_array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LossError::Weights("weights must be finite and non-negative".into()));
        }
        if a.iter().all(|w| *w == 0.0) {
            return Err(LossError::Weights("at least one weight must be positive".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        for (name, v) in Self::NAMES.iter().zip(self.as_array()) {
            w.entry(&format!("w_{name}"), v);
        }
    }

    pub fn read_kv(doc: &KvDoc) -> std::result::Result<Self, KvError> {
        let d = Self::default().as_array();
        let mut a = [0.0; 8];
        for (i, name) in Self::NAMES.iter().enumerate() {
            a[i] = doc.get_or(&format!("w_{name}"), d[i])?;
        }
        Self::from_array(a).map_err(|e| KvError::Value {
            key: "w_*".into(),
            value: e.to_string(),
        })
    }
}

/// Scalar value of every term plus the weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub kp3d: f64,
    pub mesh: f64,
    pub bone_len: f64,
    pub bone_ang: f64,
    pub var: f64,
    pub reg: f64,
    pub kp2d: f64,
    /// `None` for mono samples: the term is absent, not zero.
    pub stereo2d: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> [Option<f64>; 8] {
        [
            Some(self.kp3d),
            Some(self.mesh),
            Some(self.bone_len),
            Some(self.bone_ang),
            Some(self.var),
            Some(self.reg),
            Some(self.kp2d),
            self.stereo2d,
        ]
    }

    /// Weighted total without the variance term, which can be negative.
    pub fn nonnegative_total(&self, w: &LossWeights) -> f64 {
        self.total - w.var * self.var
    }

    /// Tab-separated `name=value` pairs; absent terms print as `-`.
    pub fn fields(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = LossWeights::NAMES
            .iter()
            .zip(self.terms())
            .map(|(n, v)| (n.to_string(), v.map_or("-".to_string(), |v| format!("{v}"))))
            .collect();
        out.push(("total".into(), format!("{}", self.total)));
        out
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.fields().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Graph nodes of every term for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub kp3d: Var,
    pub mesh: Var,
    pub bone_len: Var,
    pub bone_ang: Var,
    pub var: Var,
    pub reg: Var,
    pub kp2d: Var,
    pub stereo2d: Option<Var>,
}

impl LossVars {
    fn as_array(&self) -> [Option<Var>; 8] {
        [
            Some(self.kp3d),
            Some(self.mesh),
            Some(self.bone_len),
            Some(self.bone_ang),
            Some(self.var),
            Some(self.reg),
            Some(self.kp2d),
            self.stereo2d,
        ]
    }

    /// Weighted sum as a graph node.
    pub fn total(&self, g: &mut Graph, w: &LossWeights) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (v, wi) in self.as_array().into_iter().zip(w.as_array()) {
            let Some(v) = v else { continue };
            let t = g.scale(v, wi);
            acc = Some(match acc {
                None => t,
                Some(a) => g.add(a, t)?,
            });
        }
        Ok(acc.expect("kp3d term is always present"))
    }

    pub fn report(&self, g: &Graph, w: &LossWeights) -> LossReport {
        let val = |v: Var| g.value(v).item();
        let terms = [
            val(self.kp3d),
            val(self.mesh),
            val(self.bone_len),
            val(self.bone_ang),
            val(self.var),
            val(self.reg),
            val(self.kp2d),
        ];
        let stereo2d = self.stereo2d.map(val);
        total_loss(terms, stereo2d, w)
    }
}

/// Weighted sum of already evaluated terms. The seven always-present terms
/// come in [`LossWeights::NAMES`] order.
pub fn total_loss(terms: [f64; 7], stereo2d: Option<f64>, w: &LossWeights) -> LossReport {
    let wa = w.as_array();
    let mut total = 0.0;
    for (t, wi) in terms.iter().zip(wa) {
        total += wi * t;
    }
    if let Some(s) = stereo2d {
        total += wa[7] * s;
    }
    LossReport {
        kp3d: terms[0],
        mesh: terms[1],
        bone_len: terms[2],
        bone_ang: terms[3],
        var: terms[4],
        reg: terms[5],
        kp2d: terms[6],
        stereo2d,
        total,
    }
}

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Mean elementwise L1 distance.
pub fn loss_l1(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    same_shape(g, "l1", pred, gt)?;
    let d = g.sub(pred, gt)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Keypoint L1 over `[.., 21, 3]`.
pub fn loss_keypoints_3d(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    loss_l1(g, pred, gt)
}

/// Vertex L1 over `[.., V, 3]`.
pub fn loss_mesh(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    loss_l1(g, pred, gt)
}

fn edge_matrix() -> Tensor {
    let mut e = vec![0.0; NUM_BONES * NUM_KEYPOINTS];
    for (b, &(p, c)) in SKELETON_EDGES.iter().enumerate() {
        e[b * NUM_KEYPOINTS + c] = 1.0;
        e[b * NUM_KEYPOINTS + p] = -1.0;
    }
    Tensor::new(&[NUM_BONES, NUM_KEYPOINTS], e).unwrap()
}

fn pair_matrix(first: bool) -> Tensor {
    let mut m = vec![0.0; NUM_ANGLES * NUM_BONES];
    for (i, &(a, b)) in ANGLE_PAIRS.iter().enumerate() {
        m[i * NUM_BONES + if first { a } else { b }] = 1.0;
    }
    Tensor::new(&[NUM_ANGLES, NUM_BONES], m).unwrap()
}

/// `[B, 21, 3]` → `[B, 20, 3]`.
pub fn bones_graph(g: &mut Graph, kp: Var) -> Result<Var> {
    let e = g.input(edge_matrix());
    Ok(g.matmul(e, kp)?)
}

fn norm_last(g: &mut Graph, v: Var, eps: f64) -> Result<Var> {
    let sq = g.square(v);
    let rank = g.shape(v).len();
    let s = g.sum_axis(sq, rank - 1)?;
    let s = g.offset(s, eps);
    Ok(g.sqrt(s))
}

/// `[B, 20, 3]` → `[B, 20]`.
pub fn bone_lengths_graph(g: &mut Graph, bones: Var) -> Result<Var> {
    norm_last(g, bones, LEN_EPS)
}

/// `[B, 20, 3]` → `[B, 15]`, as `atan2(|a×b|, a·b)`.
pub fn bone_angles_graph(g: &mut Graph, bones: Var) -> Result<Var> {
    let p1 = g.input(pair_matrix(true));
    let p2 = g.input(pair_matrix(false));
    let a = g.matmul(p1, bones)?;
    let b = g.matmul(p2, bones)?;
    let comp = |g: &mut Graph, v: Var, i: usize| g.slice(v, 2, i, i + 1);
    let (ax, ay, az) = (comp(g, a, 0)?, comp(g, a, 1)?, comp(g, a, 2)?);
    let (bx, by, bz) = (comp(g, b, 0)?, comp(g, b, 1)?, comp(g, b, 2)?);
    let mut cross = Vec::with_capacity(3);
    for (p, q, r, s) in [(ay, bz, az, by), (az, bx, ax, bz), (ax, by, ay, bx)] {
        let l = g.mul(p, q)?;
        let r = g.mul(r, s)?;
        cross.push(g.sub(l, r)?);
    }
    let c = g.concat(&cross, 2)?;
    let sin = norm_last(g, c, LEN_EPS)?;
    let ab = g.mul(a, b)?;
    let cos = g.sum_axis(ab, 2)?;
    Ok(g.atan2(sin, cos)?)
}

/// Mean absolute difference of the 20 bone lengths.
pub fn loss_bone_length(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    same_shape(g, "bone_length", pred, gt)?;
    let bp = bones_graph(g, pred)?;
    let bg = bones_graph(g, gt)?;
    let lp = bone_lengths_graph(g, bp)?;
    let lg = bone_lengths_graph(g, bg)?;
    loss_l1(g, lp, lg)
}

/// Mean absolute difference of the 15 inter-bone angles; angles next to a
/// bone shorter than 1e-9 mm (in either skeleton) are masked out.
pub fn loss_bone_angle(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    same_shape(g, "bone_angle", pred, gt)?;
    let bp = bones_graph(g, pred)?;
    let bg = bones_graph(g, gt)?;
    let mask = angle_mask(g, bp, bg)?;
    let ap = bone_angles_graph(g, bp)?;
    let ag = bone_angles_graph(g, bg)?;
    let d = g.sub(ap, ag)?;
    let d = g.abs(d);
    masked_mean(g, d, mask)
}

fn angle_mask(g: &mut Graph, bp: Var, bg: Var) -> Result<Tensor> {
    let batch = g.shape(bp)[0];
    let short = |t: &Tensor, b: usize, bone: usize| {
        let o = (b * NUM_BONES + bone) * 3;
        let v = &t.data()[o..o + 3];
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() < DEGENERATE_BONE_MM
    };
    let (tp, tg) = (g.value(bp), g.value(bg));
    let mut m = vec![0.0; batch * NUM_ANGLES];
    for b in 0..batch {
        for (i, &(x, y)) in ANGLE_PAIRS.iter().enumerate() {
            let bad = short(tp, b, x) || short(tp, b, y) || short(tg, b, x) || short(tg, b, y);
            m[b * NUM_ANGLES + i] = if bad { 0.0 } else { 1.0 };
        }
    }
    Ok(Tensor::new(&[batch, NUM_ANGLES], m)?)
}

/// `Σ mask·x / Σ mask`, zero when everything is masked.
fn masked_mean(g: &mut Graph, x: Var, mask: Tensor) -> Result<Var> {
    let count: f64 = mask.data().iter().sum();
    let m = g.input(mask);
    let xm = g.mul(x, m)?;
    let s = g.sum(xm);
    Ok(g.scale(s, if count > 0.0 { 1.0 / count } else { 0.0 }))
}

/// Laplace negative log-likelihood with one isotropic log-scale per
/// keypoint: `mean_k(‖e_k‖₁ exp(−s_k) + 3 s_k)`, `s` clamped to [−5, 5].
pub fn loss_keypoint_variance(g: &mut Graph, pred: Var, log_scale: Var, gt: Var) -> Result<Var> {
    same_shape(g, "keypoint_variance", pred, gt)?;
    let s_pred = g.shape(pred).to_vec();
    if g.shape(log_scale) != &s_pred[..s_pred.len() - 1] {
        return Err(AutodiffError::ShapeMismatch {
            op: "keypoint_variance",
            lhs: g.shape(log_scale).to_vec(),
            rhs: s_pred,
        }
        .into());
    }
    let d = g.sub(pred, gt)?;
    let d = g.abs(d);
    let e = g.sum_axis(d, s_pred.len() - 1)?;
    let s = g.clamp(log_scale, LOG_SCALE_MIN, LOG_SCALE_MAX);
    let ns = g.neg(s);
    let w = g.exp(ns);
    let a = g.mul(e, w)?;
    let b = g.scale(s, 3.0);
    let t = g.add(a, b)?;
    Ok(g.mean(t))
}

/// Mean square of joint pose and shape (the last 55 of the 61 values).
pub fn loss_param_reg(g: &mut Graph, params: Var) -> Result<Var> {
    let s = g.shape(params).to_vec();
    if s.last() != Some(&PARAM_DIM) {
        return Err(AutodiffError::ShapeMismatch {
            op: "param_reg",
            lhs: s,
            rhs: vec![PARAM_DIM],
        }
        .into());
    }
    let axis = s.len() - 1;
    let r = g.slice(params, axis, 6, PARAM_DIM)?;
    let r = g.square(r);
    Ok(g.mean(r))
}

/// Per-sample camera data for the differentiable projection.
#[derive(Clone, Debug)]
pub struct CameraBatch {
    batch: usize,
    /// `[B, 3, 3]`, transposed rotation of `cam_from_world`.
    rot_t: Tensor,
    /// `[B, 1, 3]`
    trans: Tensor,
    /// each `[B, 1]`: fx, fy, cx, cy, k1..k4
    coeffs: [Tensor; 8],
    theta_max: Vec<f64>,
}

impl CameraBatch {
    pub fn new(cams: &[&FisheyeCamera]) -> Self {
        let b = cams.len();
        let mut rot_t = Vec::with_capacity(9 * b);
        let mut trans = Vec::with_capacity(3 * b);
        let mut coeffs: [Vec<f64>; 8] = Default::default();
        for c in cams {
            let t = c.cam_from_world();
            rot_t.extend(t.rotation.iter()); // column-major of R = row-major of Rᵀ
            trans.extend(t.translation.iter());
            let k = c.distortion();
            for (v, x) in coeffs.iter_mut().zip([c.fx(), c.fy(), c.cx(), c.cy(), k[0], k[1], k[2], k[3]]) {
                v.push(x);
            }
        }
        Self {
            batch: b,
            rot_t: Tensor::new(&[b, 3, 3], rot_t).unwrap(),
            trans: Tensor::new(&[b, 1, 3], trans).unwrap(),
            coeffs: coeffs.map(|v| Tensor::new(&[b, 1], v).unwrap()),
            theta_max: cams.iter().map(|c| c.theta_max()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }
}

/// Projected pixels and the mask of projectable points.
pub struct Projection {
    /// `[B, K]`
    pub u: Var,
    /// `[B, K]`
    pub v: Var,
    /// `[B, K]`, 1 where the point is in front of the camera and inside
    /// the field of view.
    pub valid: Tensor,
}

/// Differentiable fisheye projection of world points `[B, K, 3]`.
pub fn project_graph(g: &mut Graph, cams: &CameraBatch, points: Var) -> Result<Projection> {
    let s = g.shape(points).to_vec();
    if s.len() != 3 || s[0] != cams.batch || s[2] != 3 {
        return Err(AutodiffError::ShapeMismatch {
            op: "project",
            lhs: s,
            rhs: vec![cams.batch, 0, 3],
        }
        .into());
    }
    let (b, k) = (s[0], s[1]);
    let rt = g.input(cams.rot_t.clone());
    let tr = g.input(cams.trans.clone());
    let pc = g.matmul(points, rt)?;
    let pc = g.add(pc, tr)?;
    let x = g.slice(pc, 2, 0, 1)?;
    let x = g.reshape(x, &[b, k])?;
    let y = g.slice(pc, 2, 1, 2)?;
    let y = g.reshape(y, &[b, k])?;
    let z = g.slice(pc, 2, 2, 3)?;
    let z = g.reshape(z, &[b, k])?;

    let x2 = g.square(x);
    let y2 = g.square(y);
    let r2 = g.add(x2, y2)?;
    let r2 = g.offset(r2, RADIAL_EPS);
    let r = g.sqrt(r2);
    let theta = g.atan2(r, z)?;

    let mut valid = vec![0.0; b * k];
    {
        let (zv, tv) = (g.value(z).data(), g.value(theta).data());
        for i in 0..b * k {
            if zv[i] > 0.0 && tv[i] <= cams.theta_max[i / k] {
                valid[i] = 1.0;
            }
        }
    }

    let c: Vec<Var> = cams.coeffs.iter().map(|t| g.input(t.clone())).collect();
    let t2 = g.square(theta);
    // Horner: 1 + t2 (k1 + t2 (k2 + t2 (k3 + t2 k4)))
    let mut poly = g.mul(t2, c[7])?;
    for ki in [6, 5, 4] {
        poly = g.add(poly, c[ki])?;
        poly = g.mul(poly, t2)?;
    }
    let poly = g.offset(poly, 1.0);
    let theta_d = g.mul(theta, poly)?;
    let scale = g.div(theta_d, r)?;
    let u = g.mul(scale, x)?;
    let u = g.mul(u, c[0])?;
    let u = g.add(u, c[2])?;
    let v = g.mul(scale, y)?;
    let v = g.mul(v, c[1])?;
    let v = g.add(v, c[3])?;
    Ok(Projection {
        u,
        v,
        valid: Tensor::new(&[b, k], valid)?,
    })
}

/// Masked L1 pixel error terms of one view, as `(sum, count)` so views can
/// be pooled.
fn projection_sums(g: &mut Graph, cams: &CameraBatch, points: Var, gt2d: &Tensor, gt_visible: &Tensor) -> Result<(Var, f64)> {
    let proj = project_graph(g, cams, points)?;
    let s = g.shape(proj.u).to_vec();
    if gt2d.shape() != [s[0], s[1], 2] || gt_visible.shape() != s.as_slice() {
        return Err(AutodiffError::ShapeMismatch {
            op: "projection_2d",
            lhs: gt2d.shape().to_vec(),
            rhs: s,
        }
        .into());
    }
    let mut gu = Vec::with_capacity(gt2d.numel() / 2);
    let mut gv = Vec::with_capacity(gt2d.numel() / 2);
    for p in gt2d.data().chunks(2) {
        gu.push(p[0]);
        gv.push(p[1]);
    }
    let mask: Vec<f64> = proj.valid.data().iter().zip(gt_visible.data()).map(|(a, b)| a * b).collect();
    let count: f64 = mask.iter().sum();
    let gu = g.input(Tensor::new(&s, gu)?);
    let gv = g.input(Tensor::new(&s, gv)?);
    let du = g.sub(proj.u, gu)?;
    let du = g.abs(du);
    let dv = g.sub(proj.v, gv)?;
    let dv = g.abs(dv);
    let d = g.add(du, dv)?;
    let m = g.input(Tensor::new(&s, mask)?);
    let dm = g.mul(d, m)?;
    Ok((g.sum(dm), count))
}

/// Mean L1 pixel error over projectable, visible keypoints and both
/// coordinates. `gt2d: [B, K, 2]`, `gt_visible: [B, K]` (1 or 0).
pub fn loss_projection_2d(g: &mut Graph, cams: &CameraBatch, points: Var, gt2d: &Tensor, gt_visible: &Tensor) -> Result<Var> {
    let (sum, count) = projection_sums(g, cams, points, gt2d, gt_visible)?;
    if count == 0.0 {
        return Err(LossError::AllMasked);
    }
    Ok(g.scale(sum, 0.5 / count))
}

/// Pooled projection error over both views: keypoints masked in one view
/// contribute through the other only.
pub fn loss_stereo_reprojection(
    g: &mut Graph,
    cams_l: &CameraBatch,
    cams_r: &CameraBatch,
    points: Var,
    gt_l: (&Tensor, &Tensor),
    gt_r: (&Tensor, &Tensor),
) -> Result<Var> {
    let (sl, cl) = projection_sums(g, cams_l, points, gt_l.0, gt_l.1)?;
    let (sr, cr) = projection_sums(g, cams_r, points, gt_r.0, gt_r.1)?;
    if cl + cr == 0.0 {
        return Err(LossError::AllMasked);
    }
    let s = g.add(sl, sr)?;
    Ok(g.scale(s, 0.5 / (cl + cr)))
}
