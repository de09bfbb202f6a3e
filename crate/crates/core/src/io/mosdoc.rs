//! JSON document written by the `mos` command.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::MosLabels;
use super::repro::Reproducibility;
use crate::error::Result;
use crate::fsutil::{read_json, write_json};
use crate::mos::{MosOutcome, ScreeningReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionCounts {
    pub quality: usize,
    pub alignment: usize,
    pub preservation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosEntry {
    pub id: String,
    #[serde(flatten)]
    pub labels: MosLabels,
    pub counts: DimensionCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosDocument {
    pub samples: Vec<MosEntry>,
    pub screening: ScreeningReport,
    pub reproducibility: Reproducibility,
}

impl MosDocument {
    pub fn from_outcome(outcome: &MosOutcome, reproducibility: Reproducibility) -> Self {
        let samples = outcome
            .table
            .samples
            .iter()
            .map(|(id, m)| MosEntry {
                id: id.clone(),
                labels: MosLabels::from(m),
                counts: DimensionCounts {
                    quality: m.quality.count,
                    alignment: m.alignment.count,
                    preservation: m.preservation.count,
                },
            })
            .collect();
        Self {
            samples,
            screening: outcome.report.clone(),
            reproducibility,
        }
    }

    pub fn labels(&self) -> BTreeMap<String, MosLabels> {
        self.samples.iter().map(|e| (e.id.clone(), e.labels)).collect()
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}
