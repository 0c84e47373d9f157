//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BLD1"
//! u32 meta_len, meta_len bytes of JSON {encoder config, model dims}
//! u32 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u32 ndim, ndim × u64 dims, u64 byte offset
//! payload: f32 values, tensors back to back in manifest order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Blade, EncoderConfig, ModelDims};
use crate::error::{BladeError, Result};
use crate::tensor::{Mat, Param, ParamStore, Scalar};

pub const MAGIC: &[u8; 4] = b"BLD1";

#[derive(Serialize, Deserialize)]
struct Meta {
    encoder: EncoderConfig,
    dims: ModelDims,
}

pub fn to_bytes<T: Scalar>(model: &Blade<T>) -> Vec<u8> {
    let meta = serde_json::to_vec(&Meta {
        encoder: model.cfg.clone(),
        dims: model.dims,
    })
    .expect("config serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for p in &model.params.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(p.value.rows as u64).to_le_bytes());
        out.extend_from_slice(&(p.value.cols as u64).to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * p.value.len() as u64;
    }
    for p in &model.params.params {
        for v in &p.value.data {
            let f = v.to_f32().unwrap_or(f32::NAN);
            out.extend_from_slice(&f.to_le_bytes());
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| BladeError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes<T: Scalar>(buf: &[u8]) -> Result<Blade<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(BladeError::Checkpoint("bad magic".into()));
    }
    let meta_len = r.u32()? as usize;
    let meta: Meta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| BladeError::Checkpoint(format!("metadata: {e}")))?;
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let nl = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nl)?)
            .map_err(|_| BladeError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        if ndim != 2 {
            return Err(BladeError::Checkpoint(format!("{name}: expected 2 dims, found {ndim}")));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let offset = r.u64()? as usize;
        manifest.push((name, rows, cols, offset));
    }
    let payload = &buf[r.pos..];
    let mut params = ParamStore::new();
    for (name, rows, cols, offset) in manifest {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| BladeError::Checkpoint(format!("{name}: shape overflow")))?;
        let bytes = payload
            .get(offset..offset + 4 * n)
            .ok_or_else(|| BladeError::Checkpoint(format!("{name}: payload out of range")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
            .collect();
        params.params.push(Param {
            name,
            group: String::new(),
            value: Mat::from_vec(rows, cols, data),
        });
    }
    Blade::from_params(meta.encoder, meta.dims, params)
}

pub fn save<T: Scalar>(model: &Blade<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Blade<T>> {
    from_bytes(&fs::read(path)?)
}
