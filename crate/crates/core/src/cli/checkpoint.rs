//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TADF"  u32 version  u32 count
//! count × { u32 name_len  name (UTF-8)  u32 rank  rank × u64 extent  f32 data }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TADF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Every parameter of `store`, in store order.
    pub fn from_store(store: &ParamStore<f32>) -> Self {
        Self { tensors: store.iter().map(|(_, p)| (p.name.clone(), p.tensor.clone())).collect() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            if !t.is_finite() {
                return Err(Error::Numerical(format!("checkpoint: tensor `{name}` holds non-finite values")));
            }
            out.extend_from_slice(&len_u32(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len_u32(t.rank(), "rank")?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Corrupt { offset: 0, reason: "bad magic, not a checkpoint".into() });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version { found: version, supported: VERSION });
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Corrupt { offset: at as u64, reason: "name is not UTF-8".into() })?
                .to_owned();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                let at = r.pos;
                let d = usize::try_from(r.u64("extent")?)
                    .map_err(|_| Error::Corrupt { offset: at as u64, reason: "extent overflows".into() })?;
                shape.push(d);
            }
            let at = r.pos;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| Error::Corrupt { offset: at as u64, reason: format!("`{name}` is too large") })?;
            let raw = r.take(numel * 4, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt {
                offset: r.pos as u64,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies every tensor into `store`, which must have the same names and
    /// shapes in the same order.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for (i, &id) in ids.iter().enumerate() {
            let p = store.get(id);
            let Some((name, t)) = self.tensors.get(i) else {
                return Err(Error::Mismatch { name: p.name.clone(), reason: "missing from checkpoint".into() });
            };
            if *name != p.name {
                return Err(Error::Mismatch {
                    name: p.name.clone(),
                    reason: format!("checkpoint has `{name}` at position {i}"),
                });
            }
            if t.shape() != p.tensor.shape() {
                return Err(Error::Mismatch {
                    name: name.clone(),
                    reason: format!("shape {:?} in checkpoint, {:?} in model", t.shape(), p.tensor.shape()),
                });
            }
        }
        if let Some((name, _)) = self.tensors.get(ids.len()) {
            return Err(Error::Mismatch { name: name.clone(), reason: "not a parameter of this model".into() });
        }
        for (&id, (_, t)) in ids.iter().zip(&self.tensors) {
            *store.tensor_mut(id) = t.clone();
        }
        Ok(())
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Data(format!("checkpoint: {what} {n} does not fit in 32 bits")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(Error::Corrupt {
                offset: self.pos as u64,
                reason: format!("truncated {what}: need {n} bytes, {left} left"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
