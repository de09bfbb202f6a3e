//! `EPHS` hidden-state dump.
//!
//! ```text
//! offset 0   "EPHS"
//! offset 4   u8  version (0x01)
//! offset 5   u32 n_samples, u32 n_layers, u32 dim, u32 flags   (LE)
//! offset 21  per sample: u64 id hash, then per layer: dim f32 h_s, dim f32 h_e
//! ```

use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::numerics::Tensor;

pub const DUMP_MAGIC: &[u8; 4] = b"EPHS";
pub const DUMP_VERSION: u8 = 0x01;
pub const DUMP_HEADER_LEN: u64 = 21;

/// Features were produced by the synthetic generator.
pub const FLAG_SYNTHETIC: u32 = 1;
/// Features were produced by the toy backbone.
pub const FLAG_TOY_BACKBONE: u32 = 1 << 1;

/// Exact byte length of a dump with the given header.
pub fn expected_len(n_samples: u64, n_layers: u64, dim: u64) -> u64 {
    DUMP_HEADER_LEN + n_samples * (8 + n_layers * 2 * dim * 4)
}

/// Per-layer final-visual hidden states of a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenDump {
    num_layers: usize,
    dim: usize,
    pub flags: u32,
    hashes: Vec<u64>,
    /// Per sample: `num_layers * 2 * dim` values.
    data: Vec<f32>,
}

impl HiddenDump {
    pub fn new(num_layers: usize, dim: usize, flags: u32) -> Result<Self> {
        if num_layers == 0 || dim == 0 {
            return Err(Error::Data(format!(
                "dump needs at least one layer and dimension, got L={num_layers}, d={dim}"
            )));
        }
        Ok(Self {
            num_layers,
            dim,
            flags,
            hashes: Vec::new(),
            data: Vec::new(),
        })
    }

    fn stride(&self) -> usize {
        self.num_layers * 2 * self.dim
    }

    /// Appends one sample; `layers[l] = (h_s, h_e)` for layers 1..=L.
    pub fn push(&mut self, id_hash: u64, layers: &[(Vec<f32>, Vec<f32>)]) -> Result<()> {
        if layers.len() != self.num_layers {
            return Err(Error::Data(format!(
                "sample has {} layers, dump has {}",
                layers.len(),
                self.num_layers
            )));
        }
        for (hs, he) in layers {
            if hs.len() != self.dim || he.len() != self.dim {
                return Err(Error::Data(format!(
                    "hidden state widths {} / {} differ from dump width {}",
                    hs.len(),
                    he.len(),
                    self.dim
                )));
            }
        }
        self.hashes.push(id_hash);
        for (hs, he) in layers {
            self.data.extend_from_slice(hs);
            self.data.extend_from_slice(he);
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.hashes.len()
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hashes(&self) -> &[u64] {
        &self.hashes
    }

    fn slot(&self, sample: usize, layer: usize, edited: bool) -> &[f32] {
        let off = sample * self.stride() + (layer - 1) * 2 * self.dim + if edited { self.dim } else { 0 };
        &self.data[off..off + self.dim]
    }

    /// `h_s` of `sample` at 1-based `layer`.
    pub fn h_source(&self, sample: usize, layer: usize) -> &[f32] {
        self.slot(sample, layer, false)
    }

    pub fn h_edited(&self, sample: usize, layer: usize) -> &[f32] {
        self.slot(sample, layer, true)
    }

    /// `(h_s + h_e) / 2` for the given rows at `layer` (`rows x dim`).
    pub fn pooled(&self, layer: usize, rows: &[usize]) -> Result<Tensor> {
        if layer == 0 || layer > self.num_layers {
            return Err(Error::Config(format!(
                "layer {layer} outside 1..={}",
                self.num_layers
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend(crate::probe::build_feature(self.h_source(r, layer), self.h_edited(r, layer))?);
        }
        Tensor::new(vec![rows.len(), self.dim], data)
    }

    pub fn pooled_all(&self, layer: usize) -> Result<Tensor> {
        self.pooled(layer, &(0..self.num_samples()).collect::<Vec<_>>())
    }

    /// Serializes, rejecting duplicate id hashes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::with_capacity(self.hashes.len());
        for (i, h) in self.hashes.iter().enumerate() {
            if !seen.insert(h) {
                return Err(Error::Data(format!(
                    "duplicate id hash {h:016x} at sample {i}"
                )));
            }
        }
        let n = self.num_samples() as u64;
        let mut out = Vec::with_capacity(expected_len(n, self.num_layers as u64, self.dim as u64) as usize);
        out.extend(DUMP_MAGIC);
        out.push(DUMP_VERSION);
        for v in [n as u32, self.num_layers as u32, self.dim as u32, self.flags] {
            out.extend(v.to_le_bytes());
        }
        let stride = self.stride();
        for (i, h) in self.hashes.iter().enumerate() {
            out.extend(h.to_le_bytes());
            for v in &self.data[i * stride..(i + 1) * stride] {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = DumpHeader::parse(bytes)?;
        let mut dump = HiddenDump::new(header.n_layers as usize, header.dim as usize, header.flags)?;
        let stride = dump.stride();
        let mut pos = DUMP_HEADER_LEN as usize;
        dump.hashes.reserve(header.n_samples as usize);
        dump.data.reserve(header.n_samples as usize * stride);
        let mut seen = HashSet::with_capacity(header.n_samples as usize);
        for _ in 0..header.n_samples {
            let h = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
            if !seen.insert(h) {
                return Err(Error::format(pos as u64, format!("duplicate id hash {h:016x}")));
            }
            dump.hashes.push(h);
            pos += 8;
            dump.data.extend(
                bytes[pos..pos + stride * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
            );
            pos += stride * 4;
        }
        Ok(dump)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Validated header fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DumpHeader {
    pub version: u8,
    pub n_samples: u32,
    pub n_layers: u32,
    pub dim: u32,
    pub flags: u32,
    pub byte_len: u64,
}

impl DumpHeader {
    /// Checks magic, version, header sanity and the exact total length.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < DUMP_HEADER_LEN as usize {
            return Err(Error::format(
                bytes.len() as u64,
                format!(
                    "file is {} bytes, shorter than the {DUMP_HEADER_LEN}-byte header",
                    bytes.len()
                ),
            ));
        }
        if &bytes[..4] != DUMP_MAGIC {
            return Err(Error::format(0, format!("bad magic {:?}, expected \"EPHS\"", &bytes[..4])));
        }
        if bytes[4] != DUMP_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported version 0x{:02x}, expected 0x{DUMP_VERSION:02x}", bytes[4]),
            ));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap());
        let (n_samples, n_layers, dim, flags) = (field(0), field(1), field(2), field(3));
        if n_layers == 0 {
            return Err(Error::format(9, "layer count is zero"));
        }
        if dim == 0 {
            return Err(Error::format(13, "dimension is zero"));
        }
        let expected = expected_len(n_samples as u64, n_layers as u64, dim as u64);
        if bytes.len() as u64 != expected {
            return Err(Error::format(
                bytes.len().min(expected as usize) as u64,
                format!(
                    "length mismatch: header (n={n_samples}, L={n_layers}, d={dim}) implies {expected} bytes, file has {}",
                    bytes.len()
                ),
            ));
        }
        Ok(Self {
            version: bytes[4],
            n_samples,
            n_layers,
            dim,
            flags,
            byte_len: expected,
        })
    }
}
