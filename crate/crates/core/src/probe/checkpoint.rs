//! Binary probe checkpoint, little-endian:
//!
//! ```text
//! "EPPM" | u32 version | u8 target | u8 head kind | u16 reserved
//! u32 layer | u32 input dim | f64 target mean | f64 target std
//! tensor block (head)
//! u8 has_adapters [ u32 json length | json | tensor block ]
//!
//! tensor block: u32 count, then per tensor:
//!   u16 name length | name | u8 rank | u32 dims[rank] | f32 data
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Head, HeadKind, ProbeModel, Standardizer};
use crate::adapters::{AdapterConfig, AdapterSet, AdapterTriplet};
use crate::dimension::Target;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::numerics::{ParamStore, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"EPPM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    config: AdapterConfig,
    triplets: Vec<AdapterTriplet>,
}

fn put_tensors(out: &mut Vec<u8>, store: &ParamStore) -> Result<()> {
    out.extend((store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Contract(format!("tensor name `{name}` too long")))?;
        out.extend(name_len.to_le_bytes());
        out.extend(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(())
}

/// Serializes a trained model.
pub fn write_model(model: &ProbeModel) -> Result<Vec<u8>> {
    let s = model
        .standardizer
        .ok_or_else(|| Error::Contract("cannot save an untrained model".into()))?;
    let mut out = Vec::new();
    out.extend(MODEL_MAGIC);
    out.extend(MODEL_VERSION.to_le_bytes());
    out.push(model.target.code());
    out.push(model.head.kind().code());
    out.extend(0u16.to_le_bytes());
    out.extend((model.layer as u32).to_le_bytes());
    out.extend((model.input_dim() as u32).to_le_bytes());
    out.extend(s.mean.to_le_bytes());
    out.extend(s.std.to_le_bytes());
    put_tensors(&mut out, model.head.params())?;
    match &model.adapters {
        None => out.push(0),
        Some(set) => {
            out.push(1);
            let meta = serde_json::to_vec(&AdapterMeta {
                config: set.config.clone(),
                triplets: set.triplets().cloned().collect(),
            })?;
            out.extend((meta.len() as u32).to_le_bytes());
            out.extend(meta);
            put_tensors(&mut out, &set.params)?;
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated model file: need {n} bytes for {what}, {} remain",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensors(&mut self, trainable: bool) -> Result<ParamStore> {
        let count = self.u32("tensor count")?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let at = self.pos as u64;
            let len = self.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(self.take(len, "tensor name")?)
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = self.u8("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32("tensor dimension")? as usize);
            }
            let numel: usize = shape.iter().product();
            let bytes = self.take(numel * 4, "tensor data")?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.contains(&name) {
                return Err(Error::format(at, format!("duplicate tensor `{name}`")));
            }
            store.insert(name, Tensor::new(shape, data)?, trainable);
        }
        Ok(store)
    }
}

pub fn read_model(bytes: &[u8]) -> Result<ProbeModel> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::format(0, format!("bad model magic {magic:?}")));
    }
    let version = c.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::format(4, format!("unsupported model version {version}")));
    }
    let target = Target::from_code(c.u8("target")?)
        .ok_or_else(|| Error::format(8, "unknown target code"))?;
    let kind = HeadKind::from_code(c.u8("head kind")?)
        .ok_or_else(|| Error::format(9, "unknown head kind"))?;
    c.u16("reserved")?;
    let layer = c.u32("layer")? as usize;
    let input = c.u32("input dim")? as usize;
    let mean = c.f64("target mean")?;
    let std = c.f64("target std")?;
    let head = Head::from_params(kind, input, c.tensors(true)?)?;
    let adapters = match c.u8("adapter flag")? {
        0 => None,
        1 => {
            let len = c.u32("adapter metadata length")? as usize;
            let at = c.pos as u64;
            let meta: AdapterMeta = serde_json::from_slice(c.take(len, "adapter metadata")?)
                .map_err(|e| Error::format(at, format!("adapter metadata: {e}")))?;
            let params = c.tensors(true)?;
            Some(AdapterSet::from_parts(meta.config, meta.triplets, params)?)
        }
        other => {
            return Err(Error::format(c.pos as u64 - 1, format!("bad adapter flag {other}")));
        }
    };
    if c.pos != bytes.len() {
        return Err(Error::format(
            c.pos as u64,
            format!("{} trailing bytes after model", bytes.len() - c.pos),
        ));
    }
    if layer == 0 {
        return Err(Error::format(12, "layer index must be 1-based"));
    }
    Ok(ProbeModel {
        target,
        layer,
        head,
        standardizer: Some(Standardizer { mean, std }),
        adapters,
    })
}

pub fn write_model_file(path: &Path, model: &ProbeModel) -> Result<()> {
    atomic_write(path, &write_model(model)?)
}

pub fn read_model_file(path: &Path) -> Result<ProbeModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes)
}
