//! Binary checkpoint format.
//!
//! ```text
//! "MOSF"  version:u32
//! repeated until EOF:
//!   name_len:u32  name:[u8; name_len]  dtype:u8  rank:u32  extents:[u64; rank]
//!   data: little-endian elements, product(extents) of them
//! ```
//!
//! All integers are little-endian. Records appear in parameter-store order,
//! so save → load → save is byte-identical.

use std::collections::HashMap;
use std::path::Path;

use super::{DType, Element, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MOSF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Raw little-endian payload.
    pub data: Vec<u8>,
}

impl Record {
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let n: usize = self.shape.iter().product();
        let values: Vec<T> = match self.dtype {
            DType::F32 => self.data.chunks_exact(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
            DType::F64 => self.data.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
            DType::U8 => self.data.iter().map(|&b| T::of(b as f64)).collect(),
        };
        if values.len() != n {
            return Err(Error::Checkpoint(format!("{}: truncated payload", self.name)));
        }
        Tensor::new(self.shape.clone(), values)
    }
}

pub fn encode<T: Element>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE as u8);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "unexpected end of data at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype tag {tag}")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.take(n * dtype.size())?.to_vec();
        records.push(Record {
            name,
            dtype,
            shape,
            data,
        });
    }
    Ok(records)
}

/// Loads matching records into `store`. Every store entry must be present
/// with the same shape; values of another float width are converted.
pub fn apply<T: Element>(store: &mut ParamStore<T>, records: &[Record]) -> Result<()> {
    let by_name: HashMap<&str, &Record> = records.iter().map(|r| (r.name.as_str(), r)).collect();
    if by_name.len() != records.len() {
        return Err(Error::Checkpoint("duplicate record names".into()));
    }
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in &ids {
        let rec = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))?;
        let t = rec.to_tensor::<T>()?;
        store
            .set_value(*id, t)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if records.len() != ids.len() {
        let known: std::collections::HashSet<&str> = ids.iter().map(|(_, n)| n.as_str()).collect();
        let extra: Vec<&str> = records
            .iter()
            .map(|r| r.name.as_str())
            .filter(|n| !known.contains(n))
            .collect();
        return Err(Error::Checkpoint(format!("unexpected records: {extra:?}")));
    }
    Ok(())
}

pub fn save<T: Element>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

pub fn load<T: Element>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    apply(store, &decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("enc.target.w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0), ParamKind::Weight);
        s.insert("enc.target.bn.running_mean", Tensor::from_fn(&[3], |i| i as f32), ParamKind::Buffer);
        s
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&store());
        assert_eq!(&bytes[..4], b"MOSF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let name_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(&bytes[12..12 + name_len], b"enc.target.w");
        assert_eq!(bytes[12 + name_len], DType::F32 as u8);
        // rank 2, extents 2 and 3, then 6 f32 values
        let rest = &bytes[13 + name_len..];
        assert_eq!(u32::from_le_bytes(rest[..4].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(rest[4..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(rest[12..20].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(rest[20..24].try_into().unwrap()), -1.0);
    }

    #[test]
    fn save_load_save_identical() {
        let s = store();
        let bytes = encode(&s);
        let mut fresh = store();
        for (id, _) in s.iter() {
            let shape = fresh.value(id).shape().to_vec();
            fresh.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        apply(&mut fresh, &decode(&bytes).unwrap()).unwrap();
        assert_eq!(encode(&fresh), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode(&store());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn missing_and_misshapen_records() {
        let mut other = ParamStore::<f32>::new();
        other.insert("enc.target.w", Tensor::zeros(&[3, 2]), ParamKind::Weight);
        other.insert("enc.target.bn.running_mean", Tensor::zeros(&[3]), ParamKind::Buffer);
        let recs = decode(&encode(&store())).unwrap();
        assert!(apply(&mut other, &recs).is_err());
        let mut smaller = ParamStore::<f32>::new();
        smaller.insert("other", Tensor::zeros(&[1]), ParamKind::Weight);
        assert!(apply(&mut smaller, &recs).is_err());
    }

    #[test]
    fn widens_f32_records() {
        let recs = decode(&encode(&store())).unwrap();
        let mut wide = store().cast::<f64>();
        apply(&mut wide, &recs).unwrap();
        assert_eq!(wide.value(wide.id("enc.target.w").unwrap()).data()[0], -1.0);
    }
}
