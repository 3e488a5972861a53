//! Flat binary container of named arrays and text blocks.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        16 bytes  "direg3d-ckpt v1\n"
//! entry_count  u32
//! entry*       kind u8 (0 = f64 array, 1 = utf-8 text)
//!              name_len u32, name bytes
//!              array: ndim u32, dims u64 × ndim, values f64 × prod(dims)
//!              text:  byte_len u64, bytes
//! ```

use std::io::{Read, Write};

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 16] = b"direg3d-ckpt v1\n";

const KIND_ARRAY: u8 = 0;
const KIND_TEXT: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<(String, Tensor)>,
    pub texts: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_array(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.texts.push((name.into(), text.into()));
    }

    /// Stores every parameter under `prefix` + its name.
    pub fn push_params(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.push_array(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn text(&self, name: &str) -> Option<&str> {
        self.texts.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_str())
    }

    /// Overwrites every parameter of `store` with the array stored under
    /// `prefix` + its name. Missing or misshapen arrays are errors.
    pub fn load_params(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", store.name(id));
            let t = self
                .array(&key)
                .ok_or_else(|| AutodiffError::Format(format!("missing array {key}")))?;
            store.set(id, t.clone())?;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let count = u32::try_from(self.arrays.len() + self.texts.len())
            .map_err(|_| AutodiffError::Format("too many entries".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for (name, t) in &self.arrays {
            w.write_all(&[KIND_ARRAY])?;
            write_name(w, name)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for (name, text) in &self.texts {
            w.write_all(&[KIND_TEXT])?;
            write_name(w, name)?;
            w.write_all(&(text.len() as u64).to_le_bytes())?;
            w.write_all(text.as_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 16];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(AutodiffError::Format("bad magic".into()));
        }
        let count = read_u32(r)?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let mut kind = [0u8];
            r.read_exact(&mut kind)?;
            let name = read_name(r)?;
            match kind[0] {
                KIND_ARRAY => {
                    let ndim = read_u32(r)? as usize;
                    if ndim > crate::tensor::MAX_RANK {
                        return Err(AutodiffError::Format(format!("{name}: rank {ndim}")));
                    }
                    let mut shape = Vec::with_capacity(ndim);
                    for _ in 0..ndim {
                        shape.push(read_u64(r)? as usize);
                    }
                    let n: usize = shape.iter().product();
                    let mut bytes = vec![0u8; n * 8];
                    r.read_exact(&mut bytes)?;
                    let data = bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    ck.arrays.push((name, Tensor::new(&shape, data)?));
                }
                KIND_TEXT => {
                    let len = read_u64(r)? as usize;
                    let mut bytes = vec![0u8; len];
                    r.read_exact(&mut bytes)?;
                    let text = String::from_utf8(bytes)
                        .map_err(|_| AutodiffError::Format(format!("{name}: invalid utf-8")))?;
                    ck.texts.push((name, text));
                }
                other => return Err(AutodiffError::Format(format!("unknown entry kind {other}"))),
            }
        }
        Ok(ck)
    }
}

fn write_name<W: Write>(w: &mut W, name: &str) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_name<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|_| AutodiffError::Format("invalid entry name".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_entries() {
        let mut ck = Checkpoint::new();
        ck.push_array("a.w", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.0, 1e-300, f64::MAX, 0.0]).unwrap());
        ck.push_array("s", Tensor::scalar(0.125));
        ck.push_text("config", "crop_size = 32\n");
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..16], CHECKPOINT_MAGIC);
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut ck = Checkpoint::new();
        ck.push_array("x", Tensor::vector(&[1.0, 2.0]));
        let mut bytes = ck.to_bytes();
        assert!(Checkpoint::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
    }
}
