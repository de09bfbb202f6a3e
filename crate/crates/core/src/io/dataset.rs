//! A dump joined with its manifest, MOS labels and split.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;

use super::dump::HiddenDump;
use super::manifest::{check_alignment, Manifest};
use super::mosdoc::MosDocument;
use crate::dimension::Target;
use crate::error::{Error, Result};
use crate::layers::LayerFeatureSet;
use crate::mos::MosLabels;
use crate::probe::{FeatureSet, Split};

#[derive(Clone, Debug)]
pub struct LabeledDump {
    pub dump: HiddenDump,
    pub manifest: Manifest,
    /// Dump rows that carry MOS labels, in dump order.
    pub rows: Vec<usize>,
    pub labels: Vec<MosLabels>,
    /// Partition of positions in `rows`.
    pub split: Split,
}

impl LabeledDump {
    /// Labels come from `mos` when given, otherwise from the manifest.
    /// Manifest split labels win over the seeded hash split.
    pub fn new(
        dump: HiddenDump,
        manifest: Manifest,
        mos: Option<&BTreeMap<String, MosLabels>>,
        split_seed: u64,
    ) -> Result<Self> {
        manifest.validate()?;
        check_alignment(&manifest, &dump)?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut unlabeled = 0usize;
        for (i, s) in manifest.samples.iter().enumerate() {
            let label = match mos {
                Some(m) => m.get(&s.id).copied(),
                None => s.mos,
            };
            match label {
                Some(l) => {
                    rows.push(i);
                    labels.push(l);
                }
                None => unlabeled += 1,
            }
        }
        if unlabeled > 0 {
            warn!("{unlabeled} sample(s) without MOS labels are ignored");
        }
        if rows.is_empty() {
            return Err(Error::Data("no sample in the manifest has MOS labels".into()));
        }
        let split = match manifest.split_labels() {
            Some(all) => Split::from_labels(&rows.iter().map(|&r| all[r]).collect::<Vec<_>>()),
            None => {
                let ids: Vec<String> = rows.iter().map(|&r| manifest.samples[r].id.clone()).collect();
                Split::by_id_hash(&ids, split_seed)
            }
        };
        Ok(Self {
            dump,
            manifest,
            rows,
            labels,
            split,
        })
    }

    pub fn load(dump: &Path, manifest: &Path, mos: Option<&Path>, split_seed: u64) -> Result<Self> {
        let dump = HiddenDump::read_file(dump)?;
        let manifest = Manifest::read_file(manifest)?;
        let mos = mos.map(MosDocument::read_file).transpose()?.map(|d| d.labels());
        Self::new(dump, manifest, mos.as_ref(), split_seed)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.dump.num_layers()
    }

    pub fn id(&self, pos: usize) -> &str {
        &self.manifest.samples[self.rows[pos]].id
    }

    pub fn targets(&self, target: Target, positions: &[usize]) -> Vec<f64> {
        positions.iter().map(|&p| self.labels[p].target(target)).collect()
    }

    /// Pooled features at `layer` for the given positions.
    pub fn feature_set(&self, layer: usize, target: Target, positions: &[usize]) -> Result<FeatureSet> {
        let dump_rows: Vec<usize> = positions.iter().map(|&p| self.rows[p]).collect();
        FeatureSet::new(
            positions.iter().map(|&p| self.id(p).to_string()).collect(),
            self.dump.pooled(layer, &dump_rows)?,
            self.targets(target, positions),
        )
    }

    /// Pooled features of every layer for the given positions.
    pub fn layer_feature_set(&self, target: Target, positions: &[usize]) -> Result<LayerFeatureSet> {
        let dump_rows: Vec<usize> = positions.iter().map(|&p| self.rows[p]).collect();
        let layers = (1..=self.num_layers())
            .map(|l| self.dump.pooled(l, &dump_rows))
            .collect::<Result<Vec<_>>>()?;
        LayerFeatureSet::new(layers, self.targets(target, positions))
    }
}
