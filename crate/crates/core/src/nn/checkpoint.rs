//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "AWMOECKP"
//! version    u32      = 1
//! n_meta     u32
//!   key      u32 length + UTF-8 bytes
//!   value    u32 length + UTF-8 bytes
//! n_tensors  u32
//!   name     u32 length + UTF-8 bytes
//!   rank     u32
//!   dims     rank x u64
//!   data     prod(dims) x f32
//! ```
//!
//! Entries are written in lexicographic key order, so equal contents always
//! produce equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::param::{hex, Param, Parameterized};
use super::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AWMOECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated input: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
    }

    pub(crate) fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Copy every parameter value of `module` under `prefix`.
    pub fn insert_module(&mut self, prefix: &str, module: &dyn Parameterized) {
        module.visit_params(prefix, &mut |name, p| {
            self.tensors.insert(name.to_string(), p.value.clone());
        });
    }

    /// Overwrite the parameters of `module` from entries under `prefix`.
    pub fn load_module(&self, prefix: &str, module: &mut dyn Parameterized) -> Result<()> {
        let mut err = None;
        module.visit_params_mut(prefix, &mut |name, p: &mut Param| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                None => err = Some(Error::MissingComponent(name.to_string())),
                Some(t) if t.shape() != p.value.shape() => {
                    err = Some(Error::shape("Checkpoint::load_module", p.value.shape_string(), t.shape_string()))
                }
                Some(t) => {
                    *p = Param::new(t.clone());
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let dotted = format!("{prefix}.");
        self.tensors.keys().any(|k| k.starts_with(&dotted))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_string(&mut out, k);
            put_string(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_string(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Format(format!("tensor {name} too large")))?;
            let data = r.f32_vec(n)?;
            ck.tensors.insert(name, Tensor::from_vec(&dims, data)?);
        }
        r.finish()?;
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, Rng};
    use proptest::prelude::*;

    #[test]
    fn module_round_trip() {
        let mut rng = Rng::new(1);
        let conv = Conv2d::new(2, 3, 3, 1, 1, &mut rng).unwrap();
        let mut ck = Checkpoint::new();
        ck.insert_module("stem", &conv);
        ck.meta.insert("kind".into(), "test".into());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let mut other = Conv2d::new(2, 3, 3, 1, 1, &mut Rng::new(2)).unwrap();
        back.load_module("stem", &mut other).unwrap();
        assert_eq!(other.weight.value, conv.weight.value);
    }

    #[test]
    fn missing_entry_named() {
        let ck = Checkpoint::new();
        let mut conv = Conv2d::new(1, 1, 1, 1, 0, &mut Rng::new(0)).unwrap();
        let err = ck.load_module("expert_3", &mut conv).unwrap_err();
        assert!(err.to_string().contains("expert_3.weight"));
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bytes = Checkpoint::new().to_bytes();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(vals in proptest::collection::vec(any::<u32>(), 1..40), name in "[a-z_.0-9]{1,12}") {
            // arbitrary bit patterns including NaN payloads survive unchanged
            let data: Vec<f32> = vals.iter().map(|&b| f32::from_bits(b)).collect();
            let mut ck = Checkpoint::new();
            ck.tensors.insert(name.clone(), Tensor::from_vec(&[data.len()], data).unwrap());
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            let got: Vec<u32> = back.tensors[&name].data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, vals);
        }
    }
}
