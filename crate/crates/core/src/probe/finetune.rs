use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{check_targets, run_training, FeatureSet, Head, ProbeModel, Standardizer, TrainConfig, TrainReport, INIT_STREAM, MIN_TRAIN_SAMPLES};
use crate::adapters::{AdapterConfig, AdapterSet, BudgetSchedule};
use crate::backbone::{Backbone, EditSample, ForwardOptions};
use crate::corr::srcc;
use crate::dimension::Target;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// A raw sample with its regression target.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub id: String,
    pub sample: EditSample,
    pub target: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    /// `None` trains the head alone on frozen features.
    pub adapters: Option<AdapterConfig>,
    /// Average rank reached by pruning; `None` keeps full rank. Ignored
    /// when the adapter config already carries a budget.
    pub prune_to: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            adapters: Some(AdapterConfig::default()),
            prune_to: Some(8),
        }
    }
}

/// Records `z` for one sample at 1-based `layer`, running only the blocks
/// up to that layer.
fn feature_on_tape(
    backbone: &Backbone,
    tape: &mut Tape,
    sample: &EditSample,
    layer: usize,
    adapters: Option<&AdapterSet>,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let mut opts = ForwardOptions {
        adapters,
        dropout_rng,
        up_to_layer: Some(layer),
    };
    let trace = backbone.forward_on_tape(tape, sample, &mut opts)?;
    let h = trace.layers[layer - 1];
    let hs = tape.slice_rows(h, trace.layout.last_source, trace.layout.last_source + 1)?;
    let he = tape.slice_rows(h, trace.layout.last_edited, trace.layout.last_edited + 1)?;
    let sum = tape.add(hs, he)?;
    Ok(tape.scale(sum, 0.5))
}

/// Evaluation-mode features (`n x d`) at `layer`, computed in parallel.
pub fn extract_features(
    backbone: &Backbone,
    samples: &[&EditSample],
    layer: usize,
    adapters: Option<&AdapterSet>,
) -> Result<Tensor> {
    let rows = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let z = feature_on_tape(backbone, &mut tape, s, layer, adapters, None)?;
            Ok(tape.value(z).data().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let d = backbone.config().d_model;
    Tensor::new(vec![rows.len(), d], rows.concat())
}

/// Trains adapters (if configured) and a fresh head through the backbone,
/// reading features from `layer` only. Backbone weights never change.
pub fn finetune_end_to_end(
    backbone: &Backbone,
    train_set: &[LabeledSample],
    val: &[LabeledSample],
    layer: usize,
    target: Target,
    config: &FinetuneConfig,
) -> Result<(ProbeModel, TrainReport)> {
    config.train.validate()?;
    if layer == 0 || layer > backbone.config().depth {
        return Err(Error::Config(format!(
            "layer {layer} outside 1..={}",
            backbone.config().depth
        )));
    }
    check_targets(train_set.len(), MIN_TRAIN_SAMPLES)?;
    let targets: Vec<f64> = train_set.iter().map(|s| s.target).collect();
    let standardizer = Standardizer::fit(&targets)?;
    let y: Vec<f64> = targets.iter().map(|&t| standardizer.apply(t)).collect();

    let tc = &config.train;
    let steps = train_set.len().div_ceil(tc.batch) * tc.epochs;
    let mut adapters = match &config.adapters {
        Some(ac) => {
            let mut ac = ac.clone();
            if ac.budget.is_none() {
                if let Some(rank) = config.prune_to {
                    ac.budget = Some(BudgetSchedule::for_run(steps, rank)?);
                }
            }
            Some(AdapterSet::attach(&backbone.adaptable_projections(), ac)?)
        }
        None => None,
    };
    let mut head = Head::new(tc.head, backbone.config().d_model, &mut tc.rng(INIT_STREAM));

    let mut batch = |tape: &mut Tape,
                     rows: &[usize],
                     set: Option<&AdapterSet>,
                     mut rng: Option<&mut ChaCha8Rng>|
     -> Result<Var> {
        let mut zs = Vec::with_capacity(rows.len());
        for &r in rows {
            zs.push(feature_on_tape(
                backbone,
                tape,
                &train_set[r].sample,
                layer,
                set,
                rng.as_deref_mut(),
            )?);
        }
        tape.concat_rows(&zs)
    };
    let val_samples: Vec<&EditSample> = val.iter().map(|s| &s.sample).collect();
    let val_targets: Vec<f64> = val.iter().map(|s| s.target).collect();
    let mut validate = |h: &Head, set: Option<&AdapterSet>| -> Result<Option<f64>> {
        if val_samples.is_empty() {
            return Ok(None);
        }
        let feats = extract_features(backbone, &val_samples, layer, set)?;
        Ok(srcc(&h.predict_standardized(&feats)?, &val_targets).ok())
    };
    let mut report = run_training(tc, &y, &mut head, adapters.as_mut(), &mut batch, &mut validate)?;
    report.n_val = val.len();
    Ok((
        ProbeModel {
            target,
            layer,
            head,
            standardizer: Some(standardizer),
            adapters,
        },
        report,
    ))
}

/// Frozen features of labeled samples, ready for [`super::train`].
pub fn labeled_features(backbone: &Backbone, samples: &[LabeledSample], layer: usize) -> Result<FeatureSet> {
    let refs: Vec<&EditSample> = samples.iter().map(|s| &s.sample).collect();
    FeatureSet::new(
        samples.iter().map(|s| s.id.clone()).collect(),
        extract_features(backbone, &refs, layer, None)?,
        samples.iter().map(|s| s.target).collect(),
    )
}
