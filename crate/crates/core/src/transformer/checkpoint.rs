//! Binary model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DVPM" | version u32
//! kind u8 | layers | width | heads | ffn_mult | vocab | text_len | num_classes | visual_width   (u32 each)
//! adapter flag u8 | adapter width u32
//! tensor count u32
//! per tensor: name length u32 | name (utf-8) | rank u32 | dims u32 * rank | data f64 * numel
//! ```

use std::path::Path;

use super::model::Model;
use super::params::ParamStore;
use super::spec::{ModelKind, ModelSpec};
use crate::binio::{put_u32, Cursor};
use crate::error::Result;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"DVPM";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let s = &model.spec;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(s.kind.code());
    for v in [s.layers, s.width, s.heads, s.ffn_mult, s.vocab, s.text_len, s.num_classes, s.visual_width] {
        put_u32(&mut out, v)?;
    }
    out.push(u8::from(model.adapter_width.is_some()));
    put_u32(&mut out, model.adapter_width.unwrap_or(0))?;
    put_u32(&mut out, model.params.len())?;
    for (name, t) in model.params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor::new(bytes, "checkpoint");
    if c.take(4)? != MAGIC {
        return Err(Cursor::new(bytes, "checkpoint").error("bad magic, expected DVPM"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(c.error(format!("unsupported version {version}")));
    }
    let kind_code = c.u8()?;
    let kind = ModelKind::from_code(kind_code).ok_or_else(|| c.error(format!("unknown model kind {kind_code}")))?;
    let mut f = [0usize; 8];
    for v in f.iter_mut() {
        *v = c.u32()? as usize;
    }
    let spec = ModelSpec {
        kind,
        layers: f[0],
        width: f[1],
        heads: f[2],
        ffn_mult: f[3],
        vocab: f[4],
        text_len: f[5],
        num_classes: f[6],
        visual_width: f[7],
    };
    spec.validate().map_err(|e| c.error(e.to_string()))?;
    let has_adapters = c.u8()? != 0;
    let width = c.u32()? as usize;
    let adapter_width = has_adapters.then_some(width);
    let count = c.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| c.error("tensor name is not utf-8"))?
            .to_string();
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let numel = shape.iter().product();
        let data = c.f64s(numel)?;
        let t = Tensor::new(shape, data).map_err(|e| c.error(e.to_string()))?;
        params.insert(name, t).map_err(|e| c.error(e.to_string()))?;
    }
    if c.remaining() != 0 {
        return Err(c.error(format!("{} trailing bytes", c.remaining())));
    }
    Ok(Model { spec, params, adapter_width })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&std::fs::read(path)?)
}
