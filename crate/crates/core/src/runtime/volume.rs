//! `MVOL` volume files.
//!
//! ```text
//! "MVOL"  version:u32  dtype:u8  C:u64 H:u64 W:u64 D:u64  spacing:[f64; 3]
//! classes:u32                    (label files only, dtype u8)
//! data: little-endian voxels, C·H·W·D of them, D fastest
//! ```
//!
//! Spacing is physical voxel size along H, W, D.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"MVOL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Voxels {
    F32(Vec<f32>),
    F64(Vec<f64>),
    /// Class labels.
    U8(Vec<u8>),
}

impl Voxels {
    pub fn dtype(&self) -> DType {
        match self {
            Voxels::F32(_) => DType::F32,
            Voxels::F64(_) => DType::F64,
            Voxels::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Voxels::F32(v) => v.len(),
            Voxels::F64(v) => v.len(),
            Voxels::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFile {
    /// `[C, H, W, D]`.
    pub extents: [usize; 4],
    pub spacing: [f64; 3],
    /// Class count `C0`; present exactly for label volumes.
    pub classes: Option<u32>,
    pub voxels: Voxels,
}

impl VolumeFile {
    pub fn image<T: Element>(t: &Tensor<T>, spacing: [f64; 3]) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::Input(format!("image volume {s:?} must be [C, H, W, D]")));
        }
        let voxels = match T::DTYPE {
            DType::F64 => Voxels::F64(t.data().iter().map(|v| v.as_f64()).collect()),
            _ => Voxels::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
        };
        Ok(Self { extents: [s[0], s[1], s[2], s[3]], spacing, classes: None, voxels })
    }

    /// Label grid `[H, W, D]`, D fastest.
    pub fn labels(labels: Vec<u8>, dims: [usize; 3], spacing: [f64; 3], classes: u32) -> Result<Self> {
        let v = Self {
            extents: [1, dims[0], dims[1], dims[2]],
            spacing,
            classes: Some(classes),
            voxels: Voxels::U8(labels),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.extents[1], self.extents[2], self.extents[3]]
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.extents.iter().product();
        if n != self.voxels.len() {
            return Err(Error::Data(format!("{} voxels for extents {:?}", self.voxels.len(), self.extents)));
        }
        match (&self.voxels, self.classes) {
            (Voxels::U8(v), Some(c)) => {
                if let Some(bad) = v.iter().find(|&&l| l as u32 >= c) {
                    return Err(Error::Data(format!("label {bad} outside {c} classes")));
                }
            }
            (Voxels::U8(_), None) => return Err(Error::Data("label volume without class count".into())),
            (_, Some(_)) => return Err(Error::Data("class count on a non-label volume".into())),
            _ => {}
        }
        if self.spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Data(format!("spacing {:?} must be positive", self.spacing)));
        }
        Ok(())
    }

    /// Image voxels as a `[C, H, W, D]` tensor.
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match &self.voxels {
            Voxels::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            Voxels::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
            Voxels::U8(_) => return Err(Error::Data("label volume used as an image".into())),
        };
        Tensor::new(self.extents.to_vec(), data)
    }

    pub fn label_data(&self) -> Result<&[u8]> {
        match &self.voxels {
            Voxels::U8(v) => Ok(v),
            _ => Err(Error::Data("image volume used as labels".into())),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(72 + self.voxels.len() * self.voxels.dtype().size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.voxels.dtype() as u8);
        for &e in &self.extents {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &s in &self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        if let Some(c) = self.classes {
            out.extend_from_slice(&c.to_le_bytes());
        }
        match &self.voxels {
            Voxels::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Voxels::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Voxels::U8(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Data(format!("truncated header at byte {pos}")))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::Data("missing MVOL magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Data(format!("unsupported version {version}")));
        }
        let tag = take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Data(format!("unknown dtype tag {tag}")))?;
        let mut extents = [0usize; 4];
        for e in &mut extents {
            *e = usize::try_from(u64::from_le_bytes(take(8)?.try_into().unwrap()))
                .map_err(|_| Error::Data("extent overflows".into()))?;
        }
        let mut spacing = [0.0; 3];
        for s in &mut spacing {
            *s = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        let classes = if dtype == DType::U8 {
            Some(u32::from_le_bytes(take(4)?.try_into().unwrap()))
        } else {
            None
        };
        let n = extents
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::Data("payload size overflows".into()))?;
        let payload = take(n)?;
        drop(take);
        if pos != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let voxels = match dtype {
            DType::F32 => Voxels::F32(payload.chunks_exact(4).map(f32::read_le).collect()),
            DType::F64 => Voxels::F64(payload.chunks_exact(8).map(f64::read_le).collect()),
            DType::U8 => Voxels::U8(payload.to_vec()),
        };
        let v = Self { extents, spacing, classes, voxels };
        v.validate()?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}
