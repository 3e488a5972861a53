//! Fisheye camera model, rig extrinsics, crop intrinsics and the virtual
//! cameras used for stereo fusion.
//!
//! All 3D quantities are in millimetres, pixels use the convention that
//! integer coordinates are pixel centres.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::kv::{KvDoc, KvError, KvWriter};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Margin applied when a detection box is expanded to the square crop window.
pub const CROP_MARGIN: f64 = 1.25;

pub const RIG_HEADER: &str = "direg3d-rig v1";

const NEWTON_MAX_ITERS: usize = 20;
const NEWTON_TOL: f64 = 1e-12;
const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("point is behind the camera (z = {0})")]
    PointBehindCamera(f64),
    #[error("incidence angle {theta} exceeds field of view {theta_max}")]
    OutsideFov { theta: f64, theta_max: f64 },
    #[error("pixel ({0}, {1}) lies outside the image")]
    OutsideImage(f64, f64),
    #[error("newton iteration did not converge (residual {0:e})")]
    NoConvergence(f64),
    #[error("degenerate bounding box")]
    DegenerateBox,
    #[error("ray is not unit length (norm {0})")]
    NonUnitRay(f64),
    #[error("ray is antipodal to the optical axis")]
    AntipodalRay,
    #[error("rays are nearly parallel (angle {0:e} rad)")]
    NearParallelRays(f64),
    #[error("rig file: {0}")]
    Rig(#[from] KvError),
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

/// Rotation plus translation, `p' = R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validates `RᵀR = I` and `det R = 1` within 1e-9.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(GeometryError::InvalidRotation(format!(
                "orthogonality error {ortho:e}, det {det}"
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        Self {
            rotation: rodrigues(&axis_angle),
            translation,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major_3x4(m: &[f64]) -> Result<Self> {
        if m.len() != 12 {
            return Err(GeometryError::InvalidRotation(format!("expected 12 values, got {}", m.len())));
        }
        let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::new(rotation, Vec3::new(m[3], m[7], m[11]))
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn rodrigues(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-12 {
        return Mat3::identity() + k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Mat3::identity() + k * a + k * k * b
}

/// Axis-angle vector of a rotation matrix (angle in `[0, π]`).
pub fn axis_angle(r: &Mat3) -> Vec3 {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    rot.scaled_axis()
}

pub fn skew(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Equidistant fisheye camera with a four-term odd distortion polynomial
/// `θ_d = θ (1 + k1 θ² + k2 θ⁴ + k3 θ⁶ + k4 θ⁸)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FisheyeCamera {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    k: [f64; 4],
    width: u32,
    height: u32,
    theta_max: f64,
    cam_from_world: RigidTransform,
}

impl FisheyeCamera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        k: [f64; 4],
        width: u32,
        height: u32,
        theta_max: f64,
        cam_from_world: RigidTransform,
    ) -> Result<Self> {
        let bad = |m: String| Err(GeometryError::InvalidCamera(m));
        if !(fx > 0.0 && fy > 0.0) {
            return bad(format!("focal lengths must be positive ({fx}, {fy})"));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return bad(format!("principal point ({cx}, {cy}) outside {width}x{height}"));
        }
        if !(theta_max > 0.0 && theta_max <= std::f64::consts::PI) {
            return bad(format!("field of view half-angle {theta_max} out of range"));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return bad("non-finite distortion coefficient".into());
        }
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            k,
            width,
            height,
            theta_max,
            cam_from_world,
        };
        // θ_d′ is a polynomial in θ²; a dense scan plus both endpoints
        // catches any sign change of the derivative on [0, θ_max].
        const SAMPLES: usize = 4096;
        for i in 0..=SAMPLES {
            let theta = theta_max * i as f64 / SAMPLES as f64;
            let d = cam.distortion_derivative(theta);
            if d <= 0.0 {
                return bad(format!("distortion not monotonic at θ = {theta:.4} (θ_d′ = {d:e})"));
            }
        }
        Ok(cam)
    }

    /// Default FOV half-angle: 90°.
    pub const DEFAULT_THETA_MAX: f64 = FRAC_PI_2;

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn distortion(&self) -> [f64; 4] {
        self.k
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn theta_max(&self) -> f64 {
        self.theta_max
    }
    pub fn cam_from_world(&self) -> &RigidTransform {
        &self.cam_from_world
    }
    pub fn world_from_cam(&self) -> RigidTransform {
        self.cam_from_world.inverse()
    }

    /// Optical centre in world coordinates.
    pub fn center_world(&self) -> Vec3 {
        self.world_from_cam().translation
    }

    pub fn intrinsic_matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn distort(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let [k1, k2, k3, k4] = self.k;
        theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
    }

    pub fn distortion_derivative(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let [k1, k2, k3, k4] = self.k;
        1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))
    }

    /// Inverts the distortion polynomial by Newton iteration.
    pub fn undistort(&self, theta_d: f64) -> Result<f64> {
        let mut theta = theta_d.min(self.theta_max);
        let mut residual = self.distort(theta) - theta_d;
        for _ in 0..NEWTON_MAX_ITERS {
            if residual.abs() < NEWTON_TOL {
                return Ok(theta);
            }
            theta = (theta - residual / self.distortion_derivative(theta)).clamp(0.0, self.theta_max);
            residual = self.distort(theta) - theta_d;
        }
        if residual.abs() < NEWTON_TOL {
            Ok(theta)
        } else {
            Err(GeometryError::NoConvergence(residual.abs()))
        }
    }

    pub fn to_camera(&self, p_world: &Vec3) -> Vec3 {
        self.cam_from_world.apply(p_world)
    }

    /// Projects a world point to pixels.
    pub fn project(&self, p_world: &Vec3) -> Result<Vec2> {
        self.project_camera(&self.to_camera(p_world))
    }

    /// Projects a point already expressed in the camera frame.
    pub fn project_camera(&self, p: &Vec3) -> Result<Vec2> {
        if p.z <= 0.0 {
            return Err(GeometryError::PointBehindCamera(p.z));
        }
        let r = (p.x * p.x + p.y * p.y).sqrt();
        let theta = r.atan2(p.z);
        if theta > self.theta_max {
            return Err(GeometryError::OutsideFov {
                theta,
                theta_max: self.theta_max,
            });
        }
        let theta_d = self.distort(theta);
        let phi = p.y.atan2(p.x);
        Ok(Vec2::new(
            self.fx * theta_d * phi.cos() + self.cx,
            self.fy * theta_d * phi.sin() + self.cy,
        ))
    }

    pub fn in_image(&self, px: &Vec2) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// Unit camera-frame ray through a pixel.
    pub fn unproject(&self, px: &Vec2) -> Result<Vec3> {
        if !self.in_image(px) {
            return Err(GeometryError::OutsideImage(px.x, px.y));
        }
        let mx = (px.x - self.cx) / self.fx;
        let my = (px.y - self.cy) / self.fy;
        let theta_d = (mx * mx + my * my).sqrt();
        if theta_d > self.distort(self.theta_max) {
            return Err(GeometryError::OutsideImage(px.x, px.y));
        }
        if theta_d == 0.0 {
            return Ok(Vec3::z());
        }
        let theta = self.undistort(theta_d)?;
        let (s, c) = theta.sin_cos();
        Ok(Vec3::new(s * mx / theta_d, s * my / theta_d, c))
    }

    /// Incidence angle of a camera-frame point.
    pub fn incidence_angle(p_cam: &Vec3) -> f64 {
        (p_cam.x * p_cam.x + p_cam.y * p_cam.y).sqrt().atan2(p_cam.z)
    }
}

/// Axis-aligned pixel rectangle in the full frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite());
        if finite && self.x_min < self.x_max && self.y_min < self.y_max {
            Ok(())
        } else {
            Err(GeometryError::DegenerateBox)
        }
    }

    /// Tight box around a set of pixels.
    pub fn around(points: &[Vec2]) -> Result<Self> {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in points {
            b[0] = b[0].min(p.x);
            b[1] = b[1].min(p.y);
            b[2] = b[2].max(p.x);
            b[3] = b[3].max(p.y);
        }
        Self::new(b[0], b[1], b[2], b[3])
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Square of side `margin · max(width, height)` about the same centre.
    pub fn square_about_center(&self, margin: f64) -> Self {
        let half = 0.5 * margin * self.width().max(self.height());
        let c = self.center();
        Self {
            x_min: c.x - half,
            y_min: c.y - half,
            x_max: c.x + half,
            y_max: c.y + half,
        }
    }

    /// The square crop window fed to the network.
    pub fn crop_window(&self) -> Self {
        self.square_about_center(CROP_MARGIN)
    }

    pub fn clamp_to(&self, width: u32, height: u32) -> Result<Self> {
        let (w, h) = (width as f64 - 1.0, height as f64 - 1.0);
        Self::new(
            self.x_min.clamp(0.0, w),
            self.y_min.clamp(0.0, h),
            self.x_max.clamp(0.0, w),
            self.y_max.clamp(0.0, h),
        )
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }
}

/// Intrinsic matrix of a cropped and resized square image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropIntrinsics {
    pub matrix: Mat3,
    pub size: usize,
}

impl CropIntrinsics {
    /// Row-major flattening.
    pub fn flatten(&self) -> [f64; 9] {
        flatten_row_major(&self.matrix)
    }

    /// Maps a full-frame pixel into crop pixels.
    pub fn full_to_crop(&self, cam: &FisheyeCamera, px: &Vec2) -> Vec2 {
        let s = self.matrix[(0, 0)] / cam.fx();
        let x0 = cam.cx() - self.matrix[(0, 2)] / s;
        let y0 = cam.cy() - self.matrix[(1, 2)] / s;
        Vec2::new(s * (px.x - x0), s * (px.y - y0))
    }

    /// Maps a crop pixel back into the full frame.
    pub fn crop_to_full(&self, cam: &FisheyeCamera, px: &Vec2) -> Vec2 {
        let s = self.matrix[(0, 0)] / cam.fx();
        let x0 = cam.cx() - self.matrix[(0, 2)] / s;
        let y0 = cam.cy() - self.matrix[(1, 2)] / s;
        Vec2::new(px.x / s + x0, px.y / s + y0)
    }
}

pub fn flatten_row_major(m: &Mat3) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

/// `K' = diag(s, s, 1) · T(−x_min, −y_min) · K` with
/// `s = out_size / max(width, height)`.
pub fn crop_intrinsics(cam: &FisheyeCamera, bbox: &BoundingBox, out_size: usize) -> Result<CropIntrinsics> {
    bbox.validate()?;
    if out_size == 0 {
        return Err(GeometryError::DegenerateBox);
    }
    let s = out_size as f64 / bbox.width().max(bbox.height());
    let scale = Mat3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0);
    let shift = Mat3::new(1.0, 0.0, -bbox.x_min, 0.0, 1.0, -bbox.y_min, 0.0, 0.0, 1.0);
    let mut matrix = scale * shift * cam.intrinsic_matrix();
    // the product already has this row; pin it exactly
    matrix[(2, 0)] = 0.0;
    matrix[(2, 1)] = 0.0;
    matrix[(2, 2)] = 1.0;
    Ok(CropIntrinsics { matrix, size: out_size })
}

/// Camera-frame unit ray through the box centre.
pub fn bbox_center_ray(cam: &FisheyeCamera, bbox: &BoundingBox) -> Result<Vec3> {
    cam.unproject(&bbox.center())
}

/// Minimal rotation taking the optical axis `ẑ` onto `ray`.
///
/// For `ray ≈ −ẑ` the axis is ambiguous and [`GeometryError::AntipodalRay`]
/// is returned; [`rotation_to_ray_or_flip`] substitutes a rotation by π
/// about +x instead.
pub fn rotation_to_ray(ray: &Vec3) -> Result<Mat3> {
    let n = ray.norm();
    if (n - 1.0).abs() > 1e-9 {
        return Err(GeometryError::NonUnitRay(n));
    }
    if (ray + Vec3::z()).norm() < 1e-6 {
        return Err(GeometryError::AntipodalRay);
    }
    let v = Vec3::z().cross(ray);
    let c = ray.z;
    if v.norm() == 0.0 {
        return Ok(Mat3::identity());
    }
    // Rodrigues with axis ẑ×ray and angle acos(c), written in the form
    // that stays accurate near the identity.
    let k = skew(&v);
    Ok(Mat3::identity() + k + k * k * (1.0 / (1.0 + c)))
}

/// [`rotation_to_ray`], mapping the antipodal case to `diag(1, −1, −1)`.
pub fn rotation_to_ray_or_flip(ray: &Vec3) -> Result<Mat3> {
    match rotation_to_ray(ray) {
        Err(GeometryError::AntipodalRay) => Ok(Mat3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0)),
        other => other,
    }
}

/// Rotation of the virtual camera looking at the centre of `bbox`:
/// `p_physical = Q · p_virtual`.
pub fn virtual_rotation(cam: &FisheyeCamera, bbox: &BoundingBox) -> Result<Mat3> {
    rotation_to_ray_or_flip(&bbox_center_ray(cam, bbox)?)
}

/// Transform from the physical left camera frame to the physical right one.
pub fn physical_relative_extrinsics(cam_l: &FisheyeCamera, cam_r: &FisheyeCamera) -> RigidTransform {
    cam_r.cam_from_world().compose(&cam_l.world_from_cam())
}

/// Transform from the virtual left camera frame to the virtual right one,
/// each virtual camera looking at its detection box centre:
/// `R = Q_rᵀ R_rl Q_l`, `t = Q_rᵀ t_rl`.
pub fn virtual_relative_extrinsics(
    cam_l: &FisheyeCamera,
    box_l: &BoundingBox,
    cam_r: &FisheyeCamera,
    box_r: &BoundingBox,
) -> Result<RigidTransform> {
    let q_l = virtual_rotation(cam_l, box_l)?;
    let q_r = virtual_rotation(cam_r, box_r)?;
    let rl = physical_relative_extrinsics(cam_l, cam_r);
    let q_rt = q_r.transpose();
    Ok(RigidTransform {
        rotation: q_rt * rl.rotation * q_l,
        translation: q_rt * rl.translation,
    })
}

/// Midpoint of the common perpendicular of the two back-projected rays.
pub fn triangulate(cam_l: &FisheyeCamera, cam_r: &FisheyeCamera, px_l: &Vec2, px_r: &Vec2) -> Result<Vec3> {
    let (wl, wr) = (cam_l.world_from_cam(), cam_r.world_from_cam());
    let d1 = wl.rotation * cam_l.unproject(px_l)?;
    let d2 = wr.rotation * cam_r.unproject(px_r)?;
    let (o1, o2) = (wl.translation, wr.translation);
    let sin_angle = d1.cross(&d2).norm() / (d1.norm() * d2.norm());
    if sin_angle < 1e-6 {
        return Err(GeometryError::NearParallelRays(sin_angle.asin()));
    }
    let w0 = o1 - o2;
    let (a, b, c) = (d1.dot(&d1), d1.dot(&d2), d2.dot(&d2));
    let (d, e) = (d1.dot(&w0), d2.dot(&w0));
    let denom = a * c - b * b;
    let s = (b * e - c * d) / denom;
    let t = (a * e - b * d) / denom;
    Ok(0.5 * ((o1 + d1 * s) + (o2 + d2 * t)))
}

/// Calibrated two-camera rig.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereoRig {
    pub left: FisheyeCamera,
    pub right: FisheyeCamera,
}

impl StereoRig {
    pub fn camera(&self, view: usize) -> &FisheyeCamera {
        match view {
            0 => &self.left,
            _ => &self.right,
        }
    }

    /// Serialises to the `direg3d-rig v1` key-value calibration format.
    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new(Some(RIG_HEADER));
        for (name, cam) in [("left", &self.left), ("right", &self.right)] {
            w.entry(&format!("{name}.fx"), cam.fx)
                .entry(&format!("{name}.fy"), cam.fy)
                .entry(&format!("{name}.cx"), cam.cx)
                .entry(&format!("{name}.cy"), cam.cy);
            for (i, k) in cam.k.iter().enumerate() {
                w.entry(&format!("{name}.k{}", i + 1), k);
            }
            w.entry(&format!("{name}.width"), cam.width)
                .entry(&format!("{name}.height"), cam.height)
                .entry(&format!("{name}.theta_max"), cam.theta_max)
                .list(&format!("{name}.cam_from_world"), &cam.cam_from_world.to_row_major_3x4());
        }
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text, Some(RIG_HEADER))?;
        let cam = |name: &str| -> Result<FisheyeCamera> {
            let key = |k: &str| format!("{name}.{k}");
            let k = [
                doc.require(&key("k1"))?,
                doc.require(&key("k2"))?,
                doc.require(&key("k3"))?,
                doc.require(&key("k4"))?,
            ];
            let pose = RigidTransform::from_row_major_3x4(&doc.require_list::<f64>(&key("cam_from_world"))?)?;
            FisheyeCamera::new(
                doc.require(&key("fx"))?,
                doc.require(&key("fy"))?,
                doc.require(&key("cx"))?,
                doc.require(&key("cy"))?,
                k,
                doc.require(&key("width"))?,
                doc.require(&key("height"))?,
                doc.get_or(&key("theta_max"), FisheyeCamera::DEFAULT_THETA_MAX)?,
                pose,
            )
        };
        Ok(Self {
            left: cam("left")?,
            right: cam("right")?,
        })
    }
}
