//! Versioned parameter container.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u32`-length-prefixed config text
//! (`key=value` lines), `u32` tensor count, then per tensor: `u32` name length, name bytes,
//! `u32` rank, `u32` extents, `f32` data.

use std::path::Path;

use crate::binio::{read_file, write_atomic, Reader, Writer};
use crate::error::Result;
use crate::substrate::{ParamSet, Scalar, Tensor};

use super::ModelConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EPIMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes parameters as 32-bit floats, replacing `path` atomically.
pub fn save_checkpoint<T: Scalar>(path: &Path, config: &ModelConfig, params: &ParamSet<T>) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.text(&config.to_text());
    w.u32(params.len() as u32);
    for e in params.entries() {
        w.text(&e.name);
        w.u32(e.value.rank() as u32);
        for &d in e.value.shape() {
            w.u32(d as u32);
        }
        let data: Vec<f32> = e.value.data().iter().map(|v| v.as_f64() as f32).collect();
        w.f32s(&data);
    }
    write_atomic(path, &w.buf)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamSet<f32>)> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, path);
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let config = ModelConfig::from_text(&r.text("config")?).map_err(|e| r.fail(format!("config: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = r.text("tensor name")?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("extent").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail("extent overflow"))?;
        let data = r.f32s(n, &name)?;
        let t = Tensor::new(&shape, data).map_err(|e| r.fail(format!("tensor `{name}`: {e}")))?;
        params.add(&name, t).map_err(|e| r.fail(e.to_string()))?;
    }
    r.finish()?;
    Ok((config, params))
}
