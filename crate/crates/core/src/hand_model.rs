//! Procedural parametric hand with the usual 16-joint kinematic tree,
//! a linear shape basis, linear blend skinning and a 21-keypoint regressor,
//! plus a small latent-to-vertex decoder.
//!
//! Joint order (parents in [`JOINT_PARENTS`]):
//! wrist, index 1-3, middle 4-6, pinky 7-9, ring 10-12, thumb 13-15.
//!
//! Keypoint order: wrist, then thumb, index, middle, ring, pinky with four
//! keypoints each (three joints and the fingertip).
//!
//! Rest pose: wrist at the origin, fingers along +y, back of the hand
//! facing +z. Units are millimetres.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use handreg_autodiff::{AutodiffError, BoundParams, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{axis_angle, rodrigues, Mat3, RigidTransform, Vec3};

pub const NUM_JOINTS: usize = 16;
pub const NUM_KEYPOINTS: usize = 21;
pub const NUM_BONES: usize = 20;
pub const NUM_ANGLES: usize = 15;
pub const NUM_SHAPE: usize = 10;
pub const NUM_POSED: usize = 15;
pub const PARAM_DIM: usize = 3 + 3 + 3 * NUM_POSED + NUM_SHAPE;
pub const LATENT_DIM: usize = 32;
pub const DEFAULT_VERTEX_BUDGET: usize = 256;
pub const MIN_VERTEX_BUDGET: usize = 100;

pub const JOINT_PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(0),
    Some(4),
    Some(5),
    Some(0),
    Some(7),
    Some(8),
    Some(0),
    Some(10),
    Some(11),
    Some(0),
    Some(13),
    Some(14),
];

pub const FINGER_NAMES: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];

/// First joint of each finger, in keypoint finger order.
pub const FINGER_JOINT_BASE: [usize; 5] = [13, 1, 4, 10, 7];

pub const fn keypoint_index(finger: usize, k: usize) -> usize {
    1 + 4 * finger + k
}

/// `(parent, child)` keypoint pairs; bone `4f + k` belongs to finger `f`.
pub const SKELETON_EDGES: [(usize, usize); NUM_BONES] = {
    let mut e = [(0, 0); NUM_BONES];
    let mut f = 0;
    while f < 5 {
        let mut k = 0;
        while k < 4 {
            let parent = if k == 0 { 0 } else { keypoint_index(f, k - 1) };
            e[4 * f + k] = (parent, keypoint_index(f, k));
            k += 1;
        }
        f += 1;
    }
    e
};

/// Consecutive bone pairs along each finger.
pub const ANGLE_PAIRS: [(usize, usize); NUM_ANGLES] = {
    let mut p = [(0, 0); NUM_ANGLES];
    let mut f = 0;
    while f < 5 {
        let mut k = 0;
        while k < 3 {
            p[3 * f + k] = (4 * f + k, 4 * f + k + 1);
            k += 1;
        }
        f += 1;
    }
    p
};

/// Joint driving each skeleton bone.
pub fn bone_joint(bone: usize) -> usize {
    let (f, k) = (bone / 4, bone % 4);
    if k == 0 {
        0
    } else {
        FINGER_JOINT_BASE[f] + k - 1
    }
}

/// Keypoint located at each joint.
pub fn joint_keypoint(joint: usize) -> usize {
    if joint == 0 {
        return 0;
    }
    let f = FINGER_JOINT_BASE.iter().position(|&b| joint >= b && joint < b + 3).unwrap();
    keypoint_index(f, joint - FINGER_JOINT_BASE[f])
}

#[derive(Debug, Error)]
pub enum HandModelError {
    #[error("vertex budget {0} is below the minimum of {MIN_VERTEX_BUDGET}")]
    BudgetTooSmall(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("obj line {line}: {msg}")]
    Obj { line: usize, msg: String },
}

pub type Result<T, E = HandModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct HandParams {
    pub global_rot: Vec3,
    pub global_trans: Vec3,
    pub joint_pose: [Vec3; NUM_POSED],
    pub shape: [f64; NUM_SHAPE],
}

impl Default for HandParams {
    fn default() -> Self {
        Self {
            global_rot: Vec3::zeros(),
            global_trans: Vec3::zeros(),
            joint_pose: [Vec3::zeros(); NUM_POSED],
            shape: [0.0; NUM_SHAPE],
        }
    }
}

impl HandParams {
    /// `[global_rot, global_trans, joint_pose (15×3), shape]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(PARAM_DIM);
        v.extend(self.global_rot.iter());
        v.extend(self.global_trans.iter());
        for p in &self.joint_pose {
            v.extend(p.iter());
        }
        v.extend(self.shape);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != PARAM_DIM {
            return Err(HandModelError::DimensionMismatch {
                expected: PARAM_DIM,
                got: v.len(),
            });
        }
        let v3 = |i: usize| Vec3::new(v[i], v[i + 1], v[i + 2]);
        let mut joint_pose = [Vec3::zeros(); NUM_POSED];
        for (j, p) in joint_pose.iter_mut().enumerate() {
            *p = v3(6 + 3 * j);
        }
        let mut shape = [0.0; NUM_SHAPE];
        shape.copy_from_slice(&v[6 + 3 * NUM_POSED..]);
        Ok(Self {
            global_rot: v3(0),
            global_trans: v3(3),
            joint_pose,
            shape,
        })
    }

    /// Parameters of the same hand after a rigid motion `t` of its frame.
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            global_rot: axis_angle(&(t.rotation * rodrigues(&self.global_rot))),
            global_trans: t.apply(&self.global_trans),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandState {
    pub keypoints3d: Vec<Vec3>,
    pub vertices: Vec<Vec3>,
    pub posed_joints: Vec<Vec3>,
}

impl HandState {
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        let map = |v: &Vec<Vec3>| v.iter().map(|p| t.apply(p)).collect();
        Self {
            keypoints3d: map(&self.keypoints3d),
            vertices: map(&self.vertices),
            posed_joints: map(&self.posed_joints),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandTemplate {
    pub seed: u64,
    pub vertex_budget: usize,
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub joints: [Vec3; NUM_JOINTS],
    pub parents: [Option<usize>; NUM_JOINTS],
    /// `V × 16`, rows sum to one.
    pub weights: Vec<[f64; NUM_JOINTS]>,
    /// Linear map of each shape mode; `B[v, :, k] = A_k · v`.
    pub shape_maps: [Mat3; NUM_SHAPE],
    /// `21 × V`, rows sum to one.
    pub regressor: Vec<Vec<f64>>,
}

struct Finger {
    base: Vec3,
    dir: Vec3,
    lengths: [f64; 3],
    radius: f64,
}

fn nominal_fingers() -> [Finger; 5] {
    let splay = |b: Vec3| (0.25 * b.normalize() + 0.75 * Vec3::y()).normalize();
    let finger = |x: f64, y: f64, lengths: [f64; 3], radius: f64| {
        let base = Vec3::new(x, y, 0.0);
        Finger {
            base,
            dir: splay(base),
            lengths,
            radius,
        }
    };
    [
        Finger {
            base: Vec3::new(24.0, 22.0, -6.0),
            dir: Vec3::new(0.75, 0.6, -0.28).normalize(),
            lengths: [36.0, 30.0, 25.0],
            radius: 9.0,
        },
        finger(22.0, 86.0, [40.0, 24.0, 19.0], 8.0),
        finger(2.0, 90.0, [44.0, 28.0, 21.0], 8.2),
        finger(-17.0, 84.0, [41.0, 27.0, 20.0], 7.8),
        finger(-33.0, 74.0, [33.0, 19.0, 17.0], 7.0),
    ]
}

/// Rings around a tube and vertices per ring for a budget.
pub fn mesh_resolution(budget: usize) -> (usize, usize) {
    let segs = ((budget as f64 / 10.0).sqrt().round() as usize).clamp(3, 12);
    let rings = ((budget as f64 / (5 * segs) as f64).round() as usize).max(5);
    (rings, segs)
}

fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

impl HandTemplate {
    pub fn build(seed: u64, vertex_budget: usize) -> Result<Self> {
        if vertex_budget < MIN_VERTEX_BUDGET {
            return Err(HandModelError::BudgetTooSmall(vertex_budget));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fingers = nominal_fingers();
        for f in fingers.iter_mut() {
            f.base.x += rng.random_range(-1.5..1.5);
            f.base.y += rng.random_range(-1.5..1.5);
            for l in f.lengths.iter_mut() {
                *l *= rng.random_range(0.97..1.03);
            }
        }

        // centreline points: wrist, three joints, tip
        let chains: Vec<[Vec3; 5]> = fingers
            .iter()
            .map(|f| {
                let p1 = f.base;
                let p2 = p1 + f.dir * f.lengths[0];
                let p3 = p2 + f.dir * f.lengths[1];
                let p4 = p3 + f.dir * f.lengths[2];
                [Vec3::zeros(), p1, p2, p3, p4]
            })
            .collect();

        let mut joints = [Vec3::zeros(); NUM_JOINTS];
        for (f, chain) in chains.iter().enumerate() {
            for k in 0..3 {
                joints[FINGER_JOINT_BASE[f] + k] = chain[k + 1];
            }
        }

        let (rings, segs) = mesh_resolution(vertex_budget);
        let ring_len = segs;
        let mut vertices = Vec::with_capacity(5 * rings * segs);
        let mut faces = Vec::new();
        // vertex index of the first vertex of each key ring per finger
        let mut key_rings = [[0usize; 5]; 5];

        for (f, chain) in chains.iter().enumerate() {
            let seg_len: Vec<f64> = (0..4).map(|s| (chain[s + 1] - chain[s]).norm()).collect();
            let extras = distribute(rings - 5, &seg_len);
            let radius_at = |key: usize, frac: f64| {
                let r = [0.8, 1.0, 0.9, 0.8, 0.65];
                let a = r[key];
                let b = r[(key + 1).min(4)];
                fingers[f].radius * (a + (b - a) * frac)
            };
            let dirs: Vec<Vec3> = (0..4).map(|s| (chain[s + 1] - chain[s]).normalize()).collect();
            let first = vertices.len() / ring_len;
            let mut ring_count = 0;
            for s in 0..4 {
                let steps = extras[s] + 1;
                for i in 0..steps {
                    let frac = i as f64 / steps as f64;
                    let centre = chain[s] + (chain[s + 1] - chain[s]) * frac;
                    let dir = if i == 0 && s > 0 {
                        (dirs[s - 1] + dirs[s]).normalize()
                    } else {
                        dirs[s]
                    };
                    if i == 0 {
                        key_rings[f][s] = vertices.len();
                    }
                    push_ring(&mut vertices, &centre, &dir, radius_at(s, frac), segs);
                    ring_count += 1;
                }
            }
            key_rings[f][4] = vertices.len();
            push_ring(&mut vertices, &chain[4], &dirs[3], radius_at(4, 0.0), segs);
            ring_count += 1;
            debug_assert_eq!(ring_count, rings);
            for r in 0..rings - 1 {
                let a = (first + r) * ring_len;
                let b = a + ring_len;
                for i in 0..segs {
                    let j = (i + 1) % segs;
                    faces.push([a + i, a + j, b + j]);
                    faces.push([a + i, b + j, b + i]);
                }
            }
        }

        let nv = vertices.len();
        let mut regressor = vec![vec![0.0; nv]; NUM_KEYPOINTS];
        for key in key_rings.iter() {
            for i in 0..segs {
                regressor[0][key[0] + i] += 1.0 / (5 * segs) as f64;
            }
        }
        for (f, key) in key_rings.iter().enumerate() {
            for k in 0..4 {
                for i in 0..segs {
                    regressor[keypoint_index(f, k)][key[k + 1] + i] = 1.0 / segs as f64;
                }
            }
        }

        let bones: Vec<(Vec3, Vec3, usize)> = (0..NUM_BONES)
            .map(|b| {
                let (f, k) = (b / 4, b % 4);
                (chains[f][k], chains[f][k + 1], bone_joint(b))
            })
            .collect();
        let weights = vertices
            .iter()
            .map(|v| {
                let mut d: Vec<(f64, usize)> = bones
                    .iter()
                    .map(|(a, b, j)| (point_segment_distance(v, a, b), *j))
                    .collect();
                d.sort_by(|x, y| x.0.total_cmp(&y.0));
                let inv = [1.0 / (d[0].0 + 1.0), 1.0 / (d[1].0 + 1.0)];
                let mut row = [0.0; NUM_JOINTS];
                row[d[0].1] += inv[0] / (inv[0] + inv[1]);
                row[d[1].1] += inv[1] / (inv[0] + inv[1]);
                row
            })
            .collect();

        let mut shape_maps = [Mat3::zeros(); NUM_SHAPE];
        shape_maps[0] = Mat3::identity() * 0.15;
        shape_maps[1] = Mat3::from_diagonal(&Vec3::new(0.0, 0.08, 0.0));
        shape_maps[2] = Mat3::from_diagonal(&Vec3::new(0.08, 0.0, 0.0));
        shape_maps[3] = Mat3::from_diagonal(&Vec3::new(0.0, 0.0, 0.1));
        let normal = Normal::new(0.0, 0.02).unwrap();
        for m in shape_maps.iter_mut().skip(4) {
            let a = Mat3::from_fn(|_, _| normal.sample(&mut rng));
            *m = (a + a.transpose()) * 0.5;
        }

        Ok(Self {
            seed,
            vertex_budget,
            vertices,
            faces,
            joints,
            parents: JOINT_PARENTS,
            weights,
            shape_maps,
            regressor,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// `B[:, :, k]` for one vertex.
    pub fn shape_direction(&self, v: usize, k: usize) -> Vec3 {
        self.shape_maps[k] * self.vertices[v]
    }

    fn shape_offset(&self, p: &Vec3, shape: &[f64; NUM_SHAPE]) -> Vec3 {
        let mut m = Mat3::zeros();
        for (a, s) in self.shape_maps.iter().zip(shape) {
            m += a * *s;
        }
        m * p
    }

    pub fn shaped_vertices(&self, shape: &[f64; NUM_SHAPE]) -> Vec<Vec3> {
        self.vertices.iter().map(|v| v + self.shape_offset(v, shape)).collect()
    }

    pub fn shaped_joints(&self, shape: &[f64; NUM_SHAPE]) -> [Vec3; NUM_JOINTS] {
        self.joints.map(|j| j + self.shape_offset(&j, shape))
    }

    /// `M · vertices`.
    pub fn regress_keypoints(&self, vertices: &[Vec3]) -> Vec<Vec3> {
        self.regressor
            .iter()
            .map(|row| row.iter().zip(vertices).fold(Vec3::zeros(), |acc, (w, v)| acc + v * *w))
            .collect()
    }

    pub fn rest_keypoints(&self) -> Vec<Vec3> {
        self.regress_keypoints(&self.vertices)
    }

    /// Lengths of the 20 skeleton bones in the rest pose for a shape.
    pub fn rest_bone_lengths(&self, shape: &[f64; NUM_SHAPE]) -> [f64; NUM_BONES] {
        bone_vectors(&self.regress_keypoints(&self.shaped_vertices(shape))).lengths
    }
}

fn distribute(n: usize, lengths: &[f64]) -> Vec<usize> {
    let total: f64 = lengths.iter().sum();
    let exact: Vec<f64> = lengths.iter().map(|l| n as f64 * l / total).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - out.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

fn push_ring(out: &mut Vec<Vec3>, centre: &Vec3, dir: &Vec3, radius: f64, segs: usize) {
    let n1 = Vec3::z().cross(dir).normalize();
    let n2 = dir.cross(&n1);
    for i in 0..segs {
        let a = TAU * i as f64 / segs as f64;
        out.push(centre + (n1 * a.cos() + n2 * a.sin()) * radius);
    }
}

/// Output of [`forward_kinematics`].
#[derive(Clone, Debug)]
pub struct Kinematics {
    pub posed_joints: [Vec3; NUM_JOINTS],
    /// Global transform of each joint frame, `G_j`.
    pub global: [RigidTransform; NUM_JOINTS],
    /// Shape-adjusted rest joints.
    pub rest_joints: [Vec3; NUM_JOINTS],
}

impl Kinematics {
    /// `G_j · [I | −J_j]`, the motion applied to rest-pose points.
    pub fn relative(&self, j: usize) -> RigidTransform {
        let g = &self.global[j];
        RigidTransform {
            rotation: g.rotation,
            translation: g.translation - g.rotation * self.rest_joints[j],
        }
    }
}

pub fn forward_kinematics(t: &HandTemplate, p: &HandParams) -> Kinematics {
    let rest = t.shaped_joints(&p.shape);
    let mut global = [RigidTransform::identity(); NUM_JOINTS];
    global[0] = RigidTransform {
        rotation: rodrigues(&p.global_rot),
        translation: rest[0],
    };
    for j in 1..NUM_JOINTS {
        let parent = t.parents[j].expect("non-root joint has a parent");
        let local = RigidTransform {
            rotation: rodrigues(&p.joint_pose[j - 1]),
            translation: rest[j] - rest[parent],
        };
        global[j] = global[parent].compose(&local);
    }
    let mut posed_joints = [Vec3::zeros(); NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        global[j].translation += p.global_trans;
        posed_joints[j] = global[j].translation;
    }
    Kinematics {
        posed_joints,
        global,
        rest_joints: rest,
    }
}

/// Poses arbitrary rest-pose vertices with the skinning weights.
pub fn blend(t: &HandTemplate, kin: &Kinematics, rest_vertices: &[Vec3]) -> Vec<Vec3> {
    let rel: Vec<RigidTransform> = (0..NUM_JOINTS).map(|j| kin.relative(j)).collect();
    rest_vertices
        .iter()
        .zip(&t.weights)
        .map(|(v, w)| {
            let mut r = Mat3::zeros();
            let mut tr = Vec3::zeros();
            for j in 0..NUM_JOINTS {
                if w[j] != 0.0 {
                    r += rel[j].rotation * w[j];
                    tr += rel[j].translation * w[j];
                }
            }
            r * v + tr
        })
        .collect()
}

pub fn skin(t: &HandTemplate, p: &HandParams) -> HandState {
    let kin = forward_kinematics(t, p);
    let vertices = blend(t, &kin, &t.shaped_vertices(&p.shape));
    HandState {
        keypoints3d: t.regress_keypoints(&vertices),
        vertices,
        posed_joints: kin.posed_joints.to_vec(),
    }
}

/// Bone vectors, lengths and inter-bone angles of a 21-keypoint skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct BoneGeometry {
    pub bones: [Vec3; NUM_BONES],
    pub lengths: [f64; NUM_BONES],
    pub angles: [f64; NUM_ANGLES],
    /// False where either bone of the pair is shorter than 1e-9 mm; the
    /// angle is then reported as 0.
    pub angle_valid: [bool; NUM_ANGLES],
}

pub const DEGENERATE_BONE_MM: f64 = 1e-9;

pub fn bone_vectors(kp: &[Vec3]) -> BoneGeometry {
    let mut bones = [Vec3::zeros(); NUM_BONES];
    let mut lengths = [0.0; NUM_BONES];
    for (b, &(p, c)) in SKELETON_EDGES.iter().enumerate() {
        bones[b] = kp[c] - kp[p];
        lengths[b] = bones[b].norm();
    }
    let mut angles = [0.0; NUM_ANGLES];
    let mut angle_valid = [false; NUM_ANGLES];
    for (i, &(a, b)) in ANGLE_PAIRS.iter().enumerate() {
        if lengths[a] < DEGENERATE_BONE_MM || lengths[b] < DEGENERATE_BONE_MM {
            continue;
        }
        let c = (bones[a].dot(&bones[b]) / (lengths[a] * lengths[b])).clamp(-1.0, 1.0);
        angles[i] = c.acos();
        angle_valid[i] = true;
    }
    BoneGeometry {
        bones,
        lengths,
        angles,
        angle_valid,
    }
}

pub fn write_obj(vertices: &[Vec3], faces: &[[usize; 3]]) -> String {
    let mut s = String::new();
    for v in vertices {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

/// Reads the `v` and `f` records written by [`write_obj`].
pub fn read_obj(text: &str) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: &str| HandModelError::Obj {
            line: i + 1,
            msg: msg.into(),
        };
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it.map(|t| t.parse().map_err(|_| err("bad coordinate"))).collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(err("expected 3 coordinates"));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        head.parse::<usize>().ok().filter(|&i| i > 0).map(|i| i - 1).ok_or_else(|| err("bad index"))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(err("expected a triangle"));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

/// Two-stage decoder: `latent → hidden (relu) → V×3` vertex offsets.
#[derive(Clone, Debug)]
pub struct MeshDecoder {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub num_vertices: usize,
}

impl MeshDecoder {
    pub const HIDDEN: usize = 64;

    /// Registers the decoder weights; the final stage starts at zero.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, num_vertices: usize, rng: &mut R) -> Self {
        let h = Self::HIDDEN;
        Self {
            w1: store.add_he(format!("{prefix}.w1"), &[LATENT_DIM, h], LATENT_DIM, 1.0, rng),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[h])),
            w2: store.add(format!("{prefix}.w2"), Tensor::zeros(&[h, num_vertices * 3])),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[num_vertices * 3])),
            num_vertices,
        }
    }

    /// `z: [B, L]` → `[B, V, 3]`.
    pub fn decode_graph(&self, g: &mut Graph, p: &BoundParams, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 2 || s[1] != LATENT_DIM {
            return Err(HandModelError::DimensionMismatch {
                expected: LATENT_DIM,
                got: *s.last().unwrap_or(&0),
            });
        }
        let h = g.matmul(z, p.var(self.w1))?;
        let h = g.add(h, p.var(self.b1))?;
        let h = g.relu(h);
        let o = g.matmul(h, p.var(self.w2))?;
        let o = g.add(o, p.var(self.b2))?;
        Ok(g.reshape(o, &[s[0], self.num_vertices, 3])?)
    }

    pub fn decode_mesh(&self, store: &ParamStore, z: &[f64]) -> Result<Vec<Vec3>> {
        if z.len() != LATENT_DIM {
            return Err(HandModelError::DimensionMismatch {
                expected: LATENT_DIM,
                got: z.len(),
            });
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let zv = g.input(Tensor::new(&[1, LATENT_DIM], z.to_vec())?);
        let out = self.decode_graph(&mut g, &p, zv)?;
        Ok(g.value(out).data().chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    }
}

fn vec3_tensor(points: &[Vec3]) -> Tensor {
    Tensor::new(&[points.len(), 3], points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()).expect("shape matches data")
}

/// Template data as constant tensors for the differentiable hand.
#[derive(Clone, Debug)]
pub struct TemplateTensors {
    /// `[V*3]`
    vertices: Tensor,
    /// `[NUM_SHAPE, V*3]`
    vertex_basis: Tensor,
    /// `[48]`
    joints: Tensor,
    /// `[NUM_SHAPE, 48]`
    joint_basis: Tensor,
    /// `[V, 16]`
    weights: Tensor,
    /// `[21, V]`
    regressor: Tensor,
    num_vertices: usize,
}

impl TemplateTensors {
    pub fn new(t: &HandTemplate) -> Self {
        let nv = t.num_vertices();
        let basis = |pts: &[Vec3]| {
            let mut data = Vec::with_capacity(NUM_SHAPE * pts.len() * 3);
            for a in &t.shape_maps {
                for p in pts {
                    data.extend((a * p).iter());
                }
            }
            Tensor::new(&[NUM_SHAPE, pts.len() * 3], data).expect("shape matches data")
        };
        Self {
            vertices: vec3_tensor(&t.vertices).reshaped(&[nv * 3]).unwrap(),
            vertex_basis: basis(&t.vertices),
            joints: vec3_tensor(&t.joints).reshaped(&[NUM_JOINTS * 3]).unwrap(),
            joint_basis: basis(&t.joints),
            weights: Tensor::new(&[nv, NUM_JOINTS], t.weights.iter().flatten().copied().collect()).unwrap(),
            regressor: Tensor::new(&[NUM_KEYPOINTS, nv], t.regressor.iter().flatten().copied().collect()).unwrap(),
            num_vertices: nv,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    /// Rest vertices as a constant `[V, 3]`.
    pub fn rest_vertices(&self, g: &mut Graph) -> Var {
        g.input(self.vertices.reshaped(&[self.num_vertices, 3]).unwrap())
    }
}

/// Batched axis-angle to rotation matrix: `[.., 3]` → `[.., 3, 3]`.
pub fn rodrigues_graph(g: &mut Graph, w: Var) -> Result<Var> {
    let s = g.shape(w).to_vec();
    let lead = &s[..s.len() - 1];
    let mut skew_map = vec![0.0; 27];
    // rows: x, y, z; columns: row-major entries of [w]×
    skew_map[5] = -1.0;
    skew_map[7] = 1.0;
    skew_map[9 + 2] = 1.0;
    skew_map[9 + 6] = -1.0;
    skew_map[18 + 1] = -1.0;
    skew_map[18 + 3] = 1.0;
    let skew_map = g.input(Tensor::new(&[3, 9], skew_map)?);
    let mat_shape: Vec<usize> = lead.iter().copied().chain([3, 3]).collect();
    let scalar_shape: Vec<usize> = lead.iter().copied().chain([1, 1]).collect();
    let k = g.matmul(w, skew_map)?;
    let k = g.reshape(k, &mat_shape)?;
    let k2 = g.matmul(k, k)?;
    let sq = g.square(w);
    let t2 = g.sum_axis(sq, s.len() - 1)?;
    let t2 = g.reshape(t2, &scalar_shape)?;
    let a = g.sinc_sqrt(t2);
    let b = g.cosc_sqrt(t2);
    let ak = g.mul(a, k)?;
    let bk2 = g.mul(b, k2)?;
    let eye = g.input(Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?);
    let r = g.add(ak, bk2)?;
    Ok(g.add(r, eye)?)
}

/// Differentiable skinning output, all batched over the leading axis.
#[derive(Clone, Copy, Debug)]
pub struct SkinnedVars {
    /// `[B, V, 3]`
    pub vertices: Var,
    /// `[B, 21, 3]`
    pub keypoints: Var,
    /// `[B, 16, 3]`
    pub joints: Var,
    /// `[B, 16, 3, 4]` relative joint transforms `G_j [I | −J_j]`
    /// without the global translation.
    pub relative: Var,
    /// `[B, 1, 3]`
    pub translation: Var,
}

/// Skins a batch of parameter vectors `[B, 61]`.
pub fn skin_graph(g: &mut Graph, t: &TemplateTensors, params: Var) -> Result<SkinnedVars> {
    let s = g.shape(params).to_vec();
    if s.len() != 2 || s[1] != PARAM_DIM {
        return Err(HandModelError::DimensionMismatch {
            expected: PARAM_DIM,
            got: *s.last().unwrap_or(&0),
        });
    }
    let b = s[0];
    let nv = t.num_vertices;
    let shape = g.slice(params, 1, 6 + 3 * NUM_POSED, PARAM_DIM)?;

    let jb = g.input(t.joint_basis.clone());
    let j0 = g.input(t.joints.clone());
    let rest_j = g.matmul(shape, jb)?;
    let rest_j = g.add(rest_j, j0)?;
    let rest_j = g.reshape(rest_j, &[b, NUM_JOINTS, 3, 1])?;

    let vb = g.input(t.vertex_basis.clone());
    let v0 = g.input(t.vertices.clone());
    let rest_v = g.matmul(shape, vb)?;
    let rest_v = g.add(rest_v, v0)?;
    let rest_v = g.reshape(rest_v, &[b, nv, 3])?;

    let kin = kinematics_graph(g, params, rest_j)?;
    let vertices = blend_graph(g, t, &kin, rest_v)?;
    let keypoints = regress_graph(g, t, vertices)?;
    Ok(SkinnedVars {
        vertices,
        keypoints,
        joints: kin.joints,
        relative: kin.relative,
        translation: kin.translation,
    })
}

/// Poses rest vertices `[B, V, 3]` with transforms from an earlier
/// [`skin_graph`] call.
pub fn repose_graph(g: &mut Graph, t: &TemplateTensors, skinned: &SkinnedVars, rest_vertices: Var) -> Result<Var> {
    let kin = KinVars {
        joints: skinned.joints,
        relative: skinned.relative,
        translation: skinned.translation,
    };
    blend_graph(g, t, &kin, rest_vertices)
}

pub fn regress_graph(g: &mut Graph, t: &TemplateTensors, vertices: Var) -> Result<Var> {
    let m = g.input(t.regressor.clone());
    Ok(g.matmul(m, vertices)?)
}

struct KinVars {
    joints: Var,
    relative: Var,
    translation: Var,
}

fn kinematics_graph(g: &mut Graph, params: Var, rest_j: Var) -> Result<KinVars> {
    let b = g.shape(params)[0];
    let grot = g.slice(params, 1, 0, 3)?;
    let grot = g.reshape(grot, &[b, 1, 3])?;
    let pose = g.slice(params, 1, 6, 6 + 3 * NUM_POSED)?;
    let pose = g.reshape(pose, &[b, NUM_POSED, 3])?;
    let rots = g.concat(&[grot, pose], 1)?;
    let rots = rodrigues_graph(g, rots)?;

    let mut rot_g: Vec<Var> = Vec::with_capacity(NUM_JOINTS);
    let mut pos_g: Vec<Var> = Vec::with_capacity(NUM_JOINTS);
    let mut rest: Vec<Var> = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let r = g.slice(rots, 1, j, j + 1)?;
        let r = g.reshape(r, &[b, 3, 3])?;
        let rj = g.slice(rest_j, 1, j, j + 1)?;
        let rj = g.reshape(rj, &[b, 3, 1])?;
        match JOINT_PARENTS[j] {
            None => {
                rot_g.push(r);
                pos_g.push(rj);
            }
            Some(p) => {
                let off = g.sub(rj, rest[p])?;
                let moved = g.matmul(rot_g[p], off)?;
                let pos = g.add(pos_g[p], moved)?;
                let rot = g.matmul(rot_g[p], r)?;
                rot_g.push(rot);
                pos_g.push(pos);
            }
        }
        rest.push(rj);
    }
    let mut rel = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let rr = g.matmul(rot_g[j], rest[j])?;
        let tr = g.sub(pos_g[j], rr)?;
        let m = g.concat(&[rot_g[j], tr], 2)?;
        rel.push(g.reshape(m, &[b, 1, 3, 4])?);
    }
    let relative = g.concat(&rel, 1)?;
    let trans = g.slice(params, 1, 3, 6)?;
    let translation = g.reshape(trans, &[b, 1, 3])?;
    let joints = g.concat(&pos_g, 2)?;
    // [B, 3, 16] → [B, 16, 3]
    let joints = transpose_last2(g, joints)?;
    let joints = g.add(joints, translation)?;
    Ok(KinVars {
        joints,
        relative,
        translation,
    })
}

/// Swaps the last two axes of a `[B, m, n]` tensor via identity products.
fn transpose_last2(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, m, n) = (s[0], s[1], s[2]);
    // out[b, j, i] = x[b, i, j]: reshape columns into rows one at a time
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let c = g.slice(x, 2, j, j + 1)?;
        cols.push(g.reshape(c, &[b, 1, m])?);
    }
    Ok(g.concat(&cols, 1)?)
}

fn blend_graph(g: &mut Graph, t: &TemplateTensors, kin: &KinVars, rest_v: Var) -> Result<Var> {
    let b = g.shape(kin.relative)[0];
    let nv = t.num_vertices;
    let w = g.input(t.weights.clone());
    let rel = g.reshape(kin.relative, &[b, NUM_JOINTS, 12])?;
    let blended = g.matmul(w, rel)?;
    let blended = g.reshape(blended, &[b, nv, 3, 4])?;
    let ones = g.input(Tensor::full(&[b, nv, 1], 1.0));
    let homo = g.concat(&[rest_v, ones], 2)?;
    let homo = g.reshape(homo, &[b, nv, 4, 1])?;
    let posed = g.matmul(blended, homo)?;
    let posed = g.reshape(posed, &[b, nv, 3])?;
    Ok(g.add(posed, kin.translation)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skeleton_tables() {
        assert_eq!(SKELETON_EDGES[0], (0, 1));
        assert_eq!(SKELETON_EDGES[3], (3, 4));
        assert_eq!(SKELETON_EDGES[4], (0, 5));
        assert_eq!(ANGLE_PAIRS[14], (18, 19));
        assert_eq!(bone_joint(4), 0);
        assert_eq!(bone_joint(5), 1);
        assert_eq!(bone_joint(1), 13);
        assert_eq!(joint_keypoint(0), 0);
        assert_eq!(joint_keypoint(1), 5);
        assert_eq!(joint_keypoint(15), 3);
        assert_eq!(PARAM_DIM, 61);
    }

    #[test]
    fn resolution_tracks_budget() {
        for budget in [100, 150, 256, 400, 1000, 3000] {
            let (r, s) = mesh_resolution(budget);
            let n = 5 * r * s;
            assert!((n as f64 - budget as f64).abs() <= 0.1 * budget as f64, "{budget} -> {n}");
        }
        assert!(matches!(HandTemplate::build(0, 99), Err(HandModelError::BudgetTooSmall(99))));
    }

    #[test]
    fn rest_keypoints_sit_on_joints() {
        let t = HandTemplate::build(3, 256).unwrap();
        let kp = t.rest_keypoints();
        for j in 0..NUM_JOINTS {
            assert!((kp[joint_keypoint(j)] - t.joints[j]).norm() < 1e-12);
        }
    }

    #[test]
    fn params_round_trip() {
        let v: Vec<f64> = (0..PARAM_DIM).map(|i| i as f64 * 0.1).collect();
        assert_eq!(HandParams::from_slice(&v).unwrap().to_vec(), v);
        assert!(HandParams::from_slice(&v[1..]).is_err());
    }

    #[test]
    fn decoder_starts_at_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = MeshDecoder::new(&mut store, "dec", 250, &mut rng);
        let out = d.decode_mesh(&store, &[0.3; LATENT_DIM]).unwrap();
        assert_eq!(out.len(), 250);
        assert!(out.iter().all(|v| *v == Vec3::zeros()));
        assert!(d.decode_mesh(&store, &[0.0; 3]).is_err());
    }

    #[test]
    fn obj_round_trip() {
        let t = HandTemplate::build(0, 120).unwrap();
        let (v, f) = read_obj(&write_obj(&t.vertices, &t.faces)).unwrap();
        assert_eq!(v, t.vertices);
        assert_eq!(f, t.faces);
    }
}
