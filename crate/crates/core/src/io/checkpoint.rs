//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic "PSFCKPT\0" | u32 version
//! u64 len | config text (UTF-8)
//! u64 epoch | u64 step
//! f64 lr | f64 beta1 | f64 beta2 | f64 eps
//! u32 tensor count, then per tensor:
//!   u32 name len | name | u32 rank | u64 dims.. | f64 values | f64 m.. | f64 v..
//! ```

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::{OptimState, Trainer};

use super::write_atomic;

pub const MAGIC: &[u8; 8] = b"PSFCKPT\0";
pub const VERSION: u32 = 1;

pub fn checkpoint_bytes(trainer: &Trainer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = trainer.model.cfg.to_text();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let o = &trainer.optim;
    out.extend_from_slice(&(trainer.epoch as u64).to_le_bytes());
    out.extend_from_slice(&o.step.to_le_bytes());
    for v in [o.lr, o.beta1, o.beta2, o.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let params = &trainer.model.params;
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (i, (name, t)) in params.iter().enumerate() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for slice in [t.data(), &o.m[i], &o.v[i]] {
            for v in slice {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint_bytes(trainer))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, &path.display().to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.name.to_string(),
            location: format!("byte {}", self.pos),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, n: u64, unit: usize) -> Result<usize> {
        let n = usize::try_from(n).map_err(|_| self.err("length overflows"))?;
        if n.checked_mul(unit).is_none_or(|b| b > self.bytes.len() - self.pos) {
            return Err(self.err("length runs past the end of file"));
        }
        Ok(n)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn parse_checkpoint(bytes: &[u8], name: &str) -> Result<Trainer> {
    let mut r = Reader { bytes, pos: 0, name };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        r.pos = 0;
        return Err(r.err("not a psformer checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u64()?;
    let n = r.len(n, 1)?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| r.err("config text is not UTF-8"))?;
    let cfg = ModelConfig::parse(text)?;
    let epoch = r.u64()? as usize;
    let step = r.u64()?;
    let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);

    let mut model = Model::new(cfg)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(r.err(format!("checkpoint has {count} tensors, the configured model {}", model.params.len())));
    }
    let names: Vec<String> = model.params.names().to_vec();
    let mut optim = OptimState {
        lr,
        beta1,
        beta2,
        eps,
        step,
        m: Vec::with_capacity(count),
        v: Vec::with_capacity(count),
    };
    for (i, expected) in names.iter().enumerate() {
        let n = r.u32()? as u64;
        let n = r.len(n, 1)?;
        let got = r.take(n)?;
        if got != expected.as_bytes() {
            return Err(r.err(format!("expected tensor `{expected}`, found `{}`", String::from_utf8_lossy(got))));
        }
        let rank = r.u32()? as u64;
        let rank = r.len(rank, 8)?;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let want = model.params.tensors()[i].shape().to_vec();
        if shape != want {
            return Err(r.err(format!("tensor `{expected}` has shape {shape:?}, the model expects {want:?}")));
        }
        let numel: usize = shape.iter().product();
        let values = r.f64s(numel)?;
        optim.m.push(r.f64s(numel)?);
        optim.v.push(r.f64s(numel)?);
        model.params.tensors_mut()[i] = Tensor::new(shape, values)?;
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after the last tensor"));
    }
    Trainer::resume(model, optim, epoch)
}
