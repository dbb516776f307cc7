//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes   "MFTCNCKP"
//! version      u32 LE    currently 1
//! global_step  u64 LE
//! digest_len   u32 LE, then digest_len bytes of UTF-8 (config digest, hex)
//! count        u32 LE
//! count x record:
//!   name_len u32 LE, name bytes (UTF-8)
//!   ndim     u32 LE, ndim x u64 LE extents
//!   payload  product(extents) x f32 LE
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{NumericError, ParamStore, Result, Tensor};

pub const MAGIC: &[u8; 8] = b"MFTCNCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub global_step: u64,
    pub config_digest: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new(global_step: u64, config_digest: impl Into<String>) -> Self {
        Self {
            global_step,
            config_digest: config_digest.into(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.records.push(Record {
            name: name.into(),
            tensor,
        });
    }

    /// Adds every parameter of `store`, optionally under a name prefix.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (_, p) in store.iter() {
            self.push(format!("{prefix}{}", p.name), p.value.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.records.iter().find(|r| r.name == name).map(|r| &r.tensor)
    }

    /// Copies records named `prefix + param.name` into `store`.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            let key = format!("{prefix}{}", p.name);
            let t = self.get(&key).ok_or(NumericError::MissingParameter(key))?;
            if t.shape() != p.value.shape() {
                return Err(NumericError::ShapeMismatch {
                    op: "load_store",
                    left: p.value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.global_step.to_le_bytes());
        out.extend_from_slice(&(self.config_digest.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_digest.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.tensor.ndim() as u32).to_le_bytes());
            for &d in r.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in r.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(NumericError::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(NumericError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let global_step = cur.u64()?;
        let config_digest = cur.string()?;
        let count = cur.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = cur.string()?;
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = cur.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| NumericError::Checkpoint("overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push(Record {
                name,
                tensor: Tensor::new(shape, data)?,
            });
        }
        if cur.pos != bytes.len() {
            return Err(NumericError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            global_step,
            config_digest,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.encode())?;
        f.sync_all()?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NumericError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| NumericError::Checkpoint("invalid utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            step in any::<u64>(),
            vals in proptest::collection::vec(any::<u32>(), 0..40),
        ) {
            let mut ck = Checkpoint::new(step, "abc123");
            let data: Vec<f32> = vals.iter().map(|&b| f32::from_bits(b)).collect();
            let n = data.len();
            ck.push("layer.weight", Tensor::new(vec![n], data).unwrap());
            ck.push("scalar", Tensor::scalar(1.5));
            let back = Checkpoint::decode(&ck.encode()).unwrap();
            prop_assert_eq!(back.encode(), ck.encode());
            let got = back.get("layer.weight").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(got, vals);
        }
    }

    #[test]
    fn rejects_truncation_and_version() {
        let mut ck = Checkpoint::new(3, "d");
        ck.push("w", Tensor::zeros(vec![2, 2]));
        let bytes = ck.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::decode(&bad).unwrap_err().to_string().contains("version"));
    }
}
