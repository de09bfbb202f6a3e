//! JSON manifest that accompanies a hidden-state dump.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dump::HiddenDump;
use super::repro::Reproducibility;
use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_json};
use crate::ids::id_hash;
pub use crate::mos::MosLabels;
use crate::probe::SplitLabel;

pub const MANIFEST_FORMAT: &str = "editprobe-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub mos: Option<MosLabels>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitLabel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProvenanceKind {
    /// Planted features from the synthetic generator.
    Synthetic,
    /// Hidden states of the built-in toy backbone.
    Toy,
    /// Hidden states exported from an external model.
    Exported,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: ProvenanceKind,
    pub backbone: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub num_layers: usize,
    pub dim: usize,
    pub provenance: Provenance,
    pub samples: Vec<ManifestSample>,
    /// Echo of whatever configuration produced the dump.
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reproducibility: Option<Reproducibility>,
}

impl Manifest {
    pub fn new(num_layers: usize, dim: usize, provenance: Provenance, samples: Vec<ManifestSample>) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            num_layers,
            dim,
            provenance,
            samples,
            config: serde_json::Value::Null,
            reproducibility: None,
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// Structural checks independent of the dump.
    pub fn validate(&self) -> Result<()> {
        if self.format != MANIFEST_FORMAT {
            return Err(Error::Data(format!(
                "manifest format is `{}`, expected `{MANIFEST_FORMAT}`",
                self.format
            )));
        }
        if self.version != MANIFEST_VERSION {
            return Err(Error::Data(format!("unsupported manifest version {}", self.version)));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if s.id.is_empty() {
                return Err(Error::Data("manifest contains an empty sample id".into()));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id `{}` in manifest", s.id)));
            }
        }
        let labelled = self.samples.iter().filter(|s| s.split.is_some()).count();
        if labelled != 0 && labelled != self.samples.len() {
            return Err(Error::Data(format!(
                "split labels present on {labelled} of {} samples; label all or none",
                self.samples.len()
            )));
        }
        Ok(())
    }

    /// Split labels when every sample carries one.
    pub fn split_labels(&self) -> Option<Vec<SplitLabel>> {
        self.samples.iter().map(|s| s.split).collect()
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let m: Manifest = read_json(path)?;
        m.validate()?;
        Ok(m)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Checks that the manifest describes the dump row for row: same shape and
/// the hash of the i-th id equals the i-th dump record.
pub fn check_alignment(manifest: &Manifest, dump: &HiddenDump) -> Result<()> {
    if manifest.num_layers != dump.num_layers() || manifest.dim != dump.dim() {
        return Err(Error::Data(format!(
            "manifest declares L={}, d={} but dump has L={}, d={}",
            manifest.num_layers,
            manifest.dim,
            dump.num_layers(),
            dump.dim()
        )));
    }
    let mut diffs = Vec::new();
    let n = manifest.samples.len().max(dump.num_samples());
    for i in 0..n {
        let id = manifest.samples.get(i).map(|s| s.id.as_str());
        let hash = dump.hashes().get(i).copied();
        match (id, hash) {
            (Some(id), Some(h)) if id_hash(id) == h => {}
            (Some(id), Some(h)) => diffs.push(format!("  row {i}: manifest `{id}` (hash {:016x}) vs dump {h:016x}", id_hash(id))),
            (Some(id), None) => diffs.push(format!("  row {i}: manifest `{id}` has no dump record")),
            (None, Some(h)) => diffs.push(format!("  row {i}: dump {h:016x} has no manifest entry")),
            (None, None) => unreachable!(),
        }
    }
    if diffs.is_empty() {
        return Ok(());
    }
    const SHOWN: usize = 10;
    let more = diffs.len().saturating_sub(SHOWN);
    diffs.truncate(SHOWN);
    let mut msg = format!(
        "manifest ids do not match dump ({} manifest rows, {} dump rows):\n{}",
        manifest.samples.len(),
        dump.num_samples(),
        diffs.join("\n")
    );
    if more > 0 {
        msg.push_str(&format!("\n  ... and {more} more"));
    }
    Err(Error::Data(msg))
}
