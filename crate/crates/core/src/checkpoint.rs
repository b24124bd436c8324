//! Little-endian checkpoint files: `"SPKL"`, u32 version, u32 tensor count,
//! then per tensor a u32-prefixed UTF-8 name, u32 rank, u64 dims and f32
//! row-major data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{build_model, Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPKL";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"SPKL\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at + 4, "tensor name is not UTF-8"))?
            .to_string();
        let rank_at = r.pos as u64;
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(rank_at, format!("tensor {name}: unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64("dims")?;
            shape.push(usize::try_from(d).map_err(|_| Error::format(r.pos as u64 - 8, "dimension too large"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| Error::format(rank_at, format!("tensor {name}: size overflows")))?;
        let data_at = r.pos as u64;
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::format(data_at, format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(out)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(&model.state_dict()))?;
    Ok(())
}

/// Builds a model for `spec` and fills it from the checkpoint at `path`.
pub fn load_checkpoint(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<Model> {
    let state = decode_checkpoint(&fs::read(path)?)?;
    let mut model = build_model(spec, 0)?;
    model.load_state_dict(&state)?;
    Ok(model)
}
