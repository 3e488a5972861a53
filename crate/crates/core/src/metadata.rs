//! The 28-D metadata side input and its min-max normalization.
//!
//! Layout (frozen, version 1):
//!
//! | index  | content                                   |
//! |--------|-------------------------------------------|
//! | 0      | distance of box centre from (cx, cy), px  |
//! | 1..5   | box corners x_min, y_min, x_max, y_max    |
//! | 5      | square crop side / crop size              |
//! | 6..15  | optical-axis-to-box-centre rotation       |
//! | 15..24 | crop intrinsics                           |
//! | 24..28 | k1..k4                                    |

use thiserror::Error;

use crate::geometry::{self, BoundingBox, FisheyeCamera, GeometryError};
use crate::kv::{KvDoc, KvError, KvWriter};

pub const META_DIM: usize = 28;
pub const META_LAYOUT_VERSION: u32 = 1;

pub const IDX_D_CENTER: usize = 0;
pub const IDX_CORNERS: usize = 1;
pub const IDX_SCALE: usize = 5;
pub const IDX_ROTATION: usize = 6;
pub const IDX_INTRINSICS: usize = 15;
pub const IDX_DISTORTION: usize = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetadataError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("cannot fit normalization on an empty dataset")]
    EmptyDataset,
    #[error("normalization stats: {0}")]
    Stats(String),
}

impl From<KvError> for MetadataError {
    fn from(e: KvError) -> Self {
        MetadataError::Stats(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetadataVector(pub [f64; META_DIM]);

impl MetadataVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Builds the raw metadata of a detection box.
///
/// `bbox` is the detector box; the crop window and therefore the scale
/// ratio and crop intrinsics use its square expansion
/// ([`BoundingBox::crop_window`]).
pub fn compute_metadata(cam: &FisheyeCamera, bbox: &BoundingBox, crop_size: usize) -> Result<MetadataVector, MetadataError> {
    bbox.validate()?;
    let window = bbox.crop_window();
    let c = bbox.center();
    let mut v = [0.0; META_DIM];
    v[IDX_D_CENTER] = ((c.x - cam.cx()).powi(2) + (c.y - cam.cy()).powi(2)).sqrt();
    v[IDX_CORNERS..IDX_SCALE].copy_from_slice(&bbox.corners());
    v[IDX_SCALE] = window.width() / crop_size as f64;
    let rot = geometry::virtual_rotation(cam, bbox)?;
    v[IDX_ROTATION..IDX_INTRINSICS].copy_from_slice(&geometry::flatten_row_major(&rot));
    let k = geometry::crop_intrinsics(cam, &window, crop_size)?;
    v[IDX_INTRINSICS..IDX_DISTORTION].copy_from_slice(&k.flatten());
    v[IDX_DISTORTION..].copy_from_slice(&cam.distortion());
    Ok(MetadataVector(v))
}

/// Per-dimension training range.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats {
    pub min: [f64; META_DIM],
    pub max: [f64; META_DIM],
}

impl NormalizationStats {
    pub fn fit<'a>(data: impl IntoIterator<Item = &'a MetadataVector>) -> Result<Self, MetadataError> {
        let mut min = [f64::INFINITY; META_DIM];
        let mut max = [f64::NEG_INFINITY; META_DIM];
        let mut n = 0usize;
        for v in data {
            for i in 0..META_DIM {
                min[i] = min[i].min(v.0[i]);
                max[i] = max[i].max(v.0[i]);
            }
            n += 1;
        }
        if n == 0 {
            return Err(MetadataError::EmptyDataset);
        }
        Ok(Self { min, max })
    }

    pub fn is_constant(&self, i: usize) -> bool {
        self.min[i] == self.max[i]
    }

    pub fn constant_dims(&self) -> Vec<usize> {
        (0..META_DIM).filter(|&i| self.is_constant(i)).collect()
    }

    /// Maps into `[-1, 1]`, clamping values outside the training range.
    pub fn normalize(&self, v: &MetadataVector) -> [f64; META_DIM] {
        let mut out = [0.0; META_DIM];
        for i in 0..META_DIM {
            if !self.is_constant(i) {
                let t = 2.0 * (v.0[i] - self.min[i]) / (self.max[i] - self.min[i]) - 1.0;
                out[i] = t.clamp(-1.0, 1.0);
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new(None);
        w.entry("layout_version", META_LAYOUT_VERSION)
            .list("min", &self.min)
            .list("max", &self.max);
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self, MetadataError> {
        let doc = KvDoc::parse(text, None)?;
        let version: u32 = doc.require("layout_version")?;
        if version != META_LAYOUT_VERSION {
            return Err(MetadataError::Stats(format!("unsupported layout version {version}")));
        }
        let arr = |key: &str| -> Result<[f64; META_DIM], MetadataError> {
            let v: Vec<f64> = doc.require_list(key)?;
            v.try_into()
                .map_err(|v: Vec<f64>| MetadataError::Stats(format!("{key}: expected {META_DIM} values, got {}", v.len())))
        };
        let stats = Self {
            min: arr("min")?,
            max: arr("max")?,
        };
        if (0..META_DIM).any(|i| !(stats.min[i] <= stats.max[i])) {
            return Err(MetadataError::Stats("min exceeds max".into()));
        }
        Ok(stats)
    }
}
