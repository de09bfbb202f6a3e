//! Stage 1 + Stage 2 on a labeled dump: pick a layer, train probes,
//! score them.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, EditSample};
use crate::corr::{CorrelationCell, CorrelationReport};
use crate::dimension::Target;
use crate::error::{Error, Result};
use crate::ids::id_hash;
use crate::io::dataset::LabeledDump;
use crate::io::dump::{HiddenDump, FLAG_TOY_BACKBONE};
use crate::layers::{analyze, LayerStats, SaliencyConfig};
use crate::probe::{train, ProbeModel, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerChoice {
    Auto,
    Fixed(usize),
}

impl FromStr for LayerChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(LayerChoice::Auto);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(LayerChoice::Fixed(k)),
            _ => Err(Error::Config(format!(
                "layer must be `auto` or a 1-based index, got `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Val,
    Test,
    All,
}

impl EvalSplit {
    pub fn positions(self, ds: &LabeledDump) -> Vec<usize> {
        match self {
            EvalSplit::Train => ds.split.train.clone(),
            EvalSplit::Val => ds.split.val.clone(),
            EvalSplit::Test => ds.split.test.clone(),
            EvalSplit::All => (0..ds.len()).collect(),
        }
    }
}

/// Layer statistics on the training split against `target`.
pub fn select_layer(ds: &LabeledDump, target: Target, config: &SaliencyConfig) -> Result<LayerStats> {
    let set = ds.layer_feature_set(target, &ds.split.train)?;
    analyze(&set, config)
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeRun {
    #[serde(skip)]
    pub model: ProbeModel,
    pub target: Target,
    pub layer: usize,
    pub layer_stats: Option<LayerStats>,
    pub report: TrainReport,
}

pub fn train_probe(
    ds: &LabeledDump,
    target: Target,
    layer: LayerChoice,
    train_config: &TrainConfig,
    saliency: &SaliencyConfig,
) -> Result<ProbeRun> {
    let (layer, layer_stats) = match layer {
        LayerChoice::Auto => {
            let stats = select_layer(ds, target, saliency)?;
            (stats.selected, Some(stats))
        }
        LayerChoice::Fixed(k) => {
            if k > ds.num_layers() {
                return Err(Error::Config(format!(
                    "layer {k} outside 1..={}",
                    ds.num_layers()
                )));
            }
            (k, None)
        }
    };
    let train_set = ds.feature_set(layer, target, &ds.split.train)?;
    let val = if ds.split.val.is_empty() {
        None
    } else {
        Some(ds.feature_set(layer, target, &ds.split.val)?)
    };
    let (model, report) = train(&train_set, val.as_ref(), target, layer, train_config)?;
    Ok(ProbeRun {
        model,
        target,
        layer,
        layer_stats,
        report,
    })
}

/// Predictions of `model` on the given positions.
pub fn predict(model: &ProbeModel, ds: &LabeledDump, positions: &[usize]) -> Result<Vec<f64>> {
    if model.layer > ds.num_layers() {
        return Err(Error::Data(format!(
            "model reads layer {} but the dump has {} layers",
            model.layer,
            ds.num_layers()
        )));
    }
    if model.input_dim() != ds.dump.dim() {
        return Err(Error::Data(format!(
            "model expects {}-dimensional features, dump has {}",
            model.input_dim(),
            ds.dump.dim()
        )));
    }
    let set = ds.feature_set(model.layer, model.target, positions)?;
    model.predict_batch(&set.features)
}

/// One correlation cell per model; two models with the same target are
/// rejected.
pub fn evaluate(
    models: &[ProbeModel],
    ds: &LabeledDump,
    split: EvalSplit,
    logistic_fit: bool,
) -> Result<CorrelationReport> {
    let positions = split.positions(ds);
    if positions.is_empty() {
        return Err(Error::Data(format!("{split:?} split is empty")));
    }
    let mut report = CorrelationReport::default();
    for m in models {
        if report.get(m.target).is_some() {
            return Err(Error::Config(format!(
                "two models predict {}",
                m.target.as_str()
            )));
        }
        let pred = predict(m, ds, &positions)?;
        let y = ds.targets(m.target, &positions);
        report.insert(m.target, CorrelationCell::compute(&pred, &y, logistic_fit));
    }
    Ok(report)
}

/// Runs the frozen backbone over every sample and records `(h_s, h_e)` at
/// each layer.
pub fn backbone_dump(backbone: &Backbone, samples: &[(String, EditSample)]) -> Result<HiddenDump> {
    let states = samples
        .par_iter()
        .map(|(_, s)| {
            let h = backbone.forward_all_layers(s, None)?;
            Ok((1..=h.num_layers())
                .map(|l| (h.h_source(l).to_vec(), h.h_edited(l).to_vec()))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = backbone.config();
    let mut dump = HiddenDump::new(cfg.depth, cfg.d_model, FLAG_TOY_BACKBONE)?;
    for ((id, _), layers) in samples.iter().zip(states) {
        dump.push(id_hash(id), &layers)?;
    }
    Ok(dump)
}
