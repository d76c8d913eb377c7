//! Binary parameter checkpoints.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! magic    4 bytes   "PDCK"
//! version  u8        1
//! count    u32       number of records
//! record × count:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims u64 × rank
//!   values   f64 × product(dims)
//! ```
//!
//! Parameter records keep their `ParamSet` order. Model configuration lives in
//! records whose names start with `meta:`; they are split out on load.

use std::collections::BTreeMap;
use std::path::Path;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PDCK";
pub const VERSION: u8 = 1;
const META_PREFIX: &str = "meta:";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub meta: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn new(params: ParamSet) -> Self {
        Self {
            params,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, values: Vec<f64>) -> Self {
        self.meta.insert(key.to_string(), values);
        self
    }

    pub fn meta_value(&self, key: &str) -> Result<&[f64]> {
        self.meta
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta record {key}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let count = self.params.len() + self.meta.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let meta = self
            .meta
            .iter()
            .map(|(k, v)| (format!("{META_PREFIX}{k}"), vec![v.len()], v.as_slice()));
        let params = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data()));
        for (name, shape, values) in meta.chain(params) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in &shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut params = ParamSet::new();
        let mut meta = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Checkpoint(format!("record name: {e}")))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            match name.strip_prefix(META_PREFIX) {
                Some(key) => {
                    meta.insert(key.to_string(), values);
                }
                None => {
                    params.add(name, Tensor::new(shape, values)?)?;
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { params, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ps = ParamSet::new();
        ps.add(
            "a.weight",
            Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, 0.1]).unwrap(),
        )
        .unwrap();
        ps.add("a.bias", Tensor::vector(vec![f64::MIN_POSITIVE, 7.0]))
            .unwrap();
        Checkpoint::new(ps).with_meta("config", vec![3.0, 128.0])
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params.name(0), "a.weight");
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"PDCK");
        assert_eq!(bytes[4], 1);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 3);
    }

    #[test]
    fn corrupt_input_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
