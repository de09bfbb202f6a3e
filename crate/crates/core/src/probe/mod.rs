//! Regression probe on pooled hidden states: `z = (h_s + h_e) / 2` from the
//! selected layer, fed to a small MLP trained with MSE on standardized MOS.

mod checkpoint;
mod finetune;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::corr::srcc;
use crate::dimension::Target;
use crate::error::{Error, Result};
use crate::ids::seeded_id_hash;
use crate::numerics::{adamw_step, AdamWConfig, LrSchedule, OptimizerState, ParamStore, Tape, Tensor, Var};

pub use checkpoint::{read_model, read_model_file, write_model, write_model_file, MODEL_MAGIC, MODEL_VERSION};
pub use finetune::{extract_features, finetune_end_to_end, labeled_features, FinetuneConfig, LabeledSample};

/// Hidden widths of the MLP head.
pub const MLP_HIDDEN: [usize; 2] = [256, 64];

/// Minimum number of training samples accepted by [`train`].
pub const MIN_TRAIN_SAMPLES: usize = 30;

/// Elementwise mean of the two final-visual hidden states.
pub fn build_feature(h_s: &[f32], h_e: &[f32]) -> Result<Vec<f32>> {
    if h_s.len() != h_e.len() {
        return Err(Error::Shape {
            op: "build_feature",
            lhs: vec![h_s.len()],
            rhs: vec![h_e.len()],
        });
    }
    let z: Vec<f32> = h_s
        .iter()
        .zip(h_e)
        .map(|(&a, &b)| ((a as f64 + b as f64) * 0.5) as f32)
        .collect();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("feature contains a non-finite value".into()));
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// `d -> 256 -> 64 -> 1` with ReLU.
    Mlp,
    /// `d -> 1`.
    Linear,
}

impl HeadKind {
    pub fn code(self) -> u8 {
        match self {
            HeadKind::Mlp => 0,
            HeadKind::Linear => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(HeadKind::Mlp),
            1 => Some(HeadKind::Linear),
            _ => None,
        }
    }

    /// (name, fan_in, fan_out) of each dense layer.
    fn layers(self, input: usize) -> Vec<(&'static str, usize, usize)> {
        match self {
            HeadKind::Mlp => vec![
                ("head.fc1", input, MLP_HIDDEN[0]),
                ("head.fc2", MLP_HIDDEN[0], MLP_HIDDEN[1]),
                ("head.out", MLP_HIDDEN[1], 1),
            ],
            HeadKind::Linear => vec![("head.out", input, 1)],
        }
    }
}

/// Regression head parameters.
#[derive(Clone, Debug)]
pub struct Head {
    kind: HeadKind,
    input: usize,
    params: ParamStore,
}

impl Head {
    /// He-initialized hidden layers; the output layer starts at zero so the
    /// initial prediction is the training-target mean.
    pub fn new(kind: HeadKind, input: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        for (name, fan_in, fan_out) in kind.layers(input) {
            let w = if name == "head.out" {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                Tensor::randn(&[fan_in, fan_out], (2.0 / fan_in as f32).sqrt(), rng)
            };
            params.insert(format!("{name}.w"), w, true);
            params.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]), true);
        }
        Self { kind, input, params }
    }

    /// Wraps loaded parameters after checking names and shapes.
    pub fn from_params(kind: HeadKind, input: usize, params: ParamStore) -> Result<Self> {
        let expected = kind.layers(input);
        if params.len() != expected.len() * 2 {
            return Err(Error::Data(format!(
                "{kind:?} head needs {} tensors, got {}",
                expected.len() * 2,
                params.len()
            )));
        }
        for (name, fan_in, fan_out) in expected {
            for (suffix, shape) in [("w", [fan_in, fan_out]), ("b", [1, fan_out])] {
                let key = format!("{name}.{suffix}");
                let t = params.get(&key).map_err(|_| Error::Data(format!("head lacks `{key}`")))?;
                if t.shape() != shape {
                    return Err(Error::Data(format!(
                        "head tensor `{key}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
            }
        }
        Ok(Self { kind, input, params })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `x` is `batch x input`; returns `batch x 1` in standardized units.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let layers = self.kind.layers(self.input);
        let last = layers.len() - 1;
        let mut h = x;
        for (i, (name, ..)) in layers.into_iter().enumerate() {
            let w = tape.param(&self.params, &format!("{name}.w"))?;
            let b = tape.param(&self.params, &format!("{name}.b"))?;
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Standardized outputs for every row of `features`.
    pub fn predict_standardized(&self, features: &Tensor) -> Result<Vec<f64>> {
        if features.cols() != self.input {
            return Err(Error::Shape {
                op: "head input",
                lhs: features.shape().to_vec(),
                rhs: vec![features.rows(), self.input],
            });
        }
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).data().iter().map(|&v| v as f64).collect())
    }
}

/// Zero-mean, unit-variance target scaling fitted on the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Population mean and standard deviation.
    pub fn fit(targets: &[f64]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Data("no training targets".into()));
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::Data("training targets have zero variance".into()));
        }
        Ok(Self {
            mean,
            std: var.sqrt(),
        })
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// A trained (or untrained) probe for one target dimension.
#[derive(Clone, Debug)]
pub struct ProbeModel {
    pub target: Target,
    /// 1-based layer the features come from.
    pub layer: usize,
    pub head: Head,
    pub standardizer: Option<Standardizer>,
    /// Present for end-to-end fine-tuned models.
    pub adapters: Option<AdapterSet>,
}

impl ProbeModel {
    pub fn input_dim(&self) -> usize {
        self.head.input_dim()
    }

    fn standardizer(&self) -> Result<Standardizer> {
        self.standardizer
            .ok_or_else(|| Error::Contract("model is untrained (no target standardization)".into()))
    }

    /// Prediction on the MOS scale.
    pub fn predict(&self, z: &[f32]) -> Result<f64> {
        let x = Tensor::new(vec![1, z.len()], z.to_vec())?;
        Ok(self.predict_batch(&x)?[0])
    }

    pub fn predict_batch(&self, features: &Tensor) -> Result<Vec<f64>> {
        let s = self.standardizer()?;
        Ok(self
            .head
            .predict_standardized(features)?
            .into_iter()
            .map(|v| s.invert(v))
            .collect())
    }
}

/// Features (rows) with one target per row.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub ids: Vec<String>,
    pub features: Tensor,
    pub targets: Vec<f64>,
}

impl FeatureSet {
    pub fn new(ids: Vec<String>, features: Tensor, targets: Vec<f64>) -> Result<Self> {
        if features.rank() != 2 || features.rows() != ids.len() || targets.len() != ids.len() {
            return Err(Error::Data(format!(
                "feature set mismatch: {} ids, features {:?}, {} targets",
                ids.len(),
                features.shape(),
                targets.len()
            )));
        }
        if !features.is_finite() || targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::Data("feature set contains non-finite values".into()));
        }
        Ok(Self {
            ids,
            features,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, rows: &[usize]) -> FeatureSet {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.features.row(r));
        }
        FeatureSet {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            features: Tensor::new(vec![rows.len(), d], data).expect("subset shape"),
            targets: rows.iter().map(|&r| self.targets[r]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Val,
    Test,
}

/// Disjoint row indices of the three partitions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Orders ids by a seeded hash and cuts at 70% and 85%.
    pub fn by_id_hash(ids: &[String], seed: u64) -> Self {
        let n = ids.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (seeded_id_hash(seed, &ids[i]), ids[i].clone()));
        let n_train = (n as f64 * 0.70).round() as usize;
        let n_val = (n as f64 * 0.15).round() as usize;
        let mut split = Split {
            train: order[..n_train].to_vec(),
            val: order[n_train..(n_train + n_val).min(n)].to_vec(),
            test: order[(n_train + n_val).min(n)..].to_vec(),
        };
        split.train.sort_unstable();
        split.val.sort_unstable();
        split.test.sort_unstable();
        split
    }

    pub fn from_labels(labels: &[SplitLabel]) -> Self {
        let mut s = Split::default();
        for (i, l) in labels.iter().enumerate() {
            match l {
                SplitLabel::Train => s.train.push(i),
                SplitLabel::Val => s.val.push(i),
                SplitLabel::Test => s.test.push(i),
            }
        }
        s
    }

    pub fn labels(&self, n: usize) -> Vec<SplitLabel> {
        let mut out = vec![SplitLabel::Train; n];
        for &i in &self.val {
            out[i] = SplitLabel::Val;
        }
        for &i in &self.test {
            out[i] = SplitLabel::Test;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub head: HeadKind,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch: 8,
            lr: 1e-3,
            seed: 42,
            head: HeadKind::Mlp,
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-batch MSE in standardized units.
    pub train_loss: f64,
    pub val_srcc: Option<f64>,
    /// Average active adapter rank at the end of the epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_rank: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of the first batch before any update.
    pub init_loss: f64,
    /// Per-step batch MSE.
    pub loss_trace: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub steps: usize,
    pub n_train: usize,
    pub n_val: usize,
}

/// Batch features on a tape for the given training rows.
type BatchFn<'a> = dyn FnMut(&mut Tape, &[usize], Option<&AdapterSet>, Option<&mut ChaCha8Rng>) -> Result<Var> + 'a;
/// Validation SRCC for the current weights.
type ValFn<'a> = dyn FnMut(&Head, Option<&AdapterSet>) -> Result<Option<f64>> + 'a;

/// Mini-batch AdamW with warmup-cosine, per-epoch validation and
/// best-epoch selection. Shared by frozen-feature and end-to-end training.
fn run_training(
    config: &TrainConfig,
    targets: &[f64],
    head: &mut Head,
    mut adapters: Option<&mut AdapterSet>,
    batch_features: &mut BatchFn,
    validate: &mut ValFn,
) -> Result<TrainReport> {
    let n = targets.len();
    let steps_per_epoch = n.div_ceil(config.batch);
    let total = steps_per_epoch * config.epochs;
    let schedule = LrSchedule::with_default_warmup(config.lr, total)?;
    let mut shuffle = config.rng(SHUFFLE_STREAM);
    let mut dropout = config.rng(DROPOUT_STREAM);
    let mut head_opt = OptimizerState::new(config.adamw);
    let mut adapter_opt = OptimizerState::new(config.adamw);

    let mut report = TrainReport {
        init_loss: f64::NAN,
        loss_trace: Vec::with_capacity(total),
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: config.epochs,
        steps: 0,
        n_train: n,
        n_val: 0,
    };
    let mut best: Option<(f64, Head, Option<AdapterSet>)> = None;
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for rows in order.chunks(config.batch) {
            let mut tape = Tape::new();
            let set = adapters.as_deref();
            let x = batch_features(&mut tape, rows, set, set.map(|_| &mut dropout))?;
            let pred = head.forward(&mut tape, x)?;
            let y = Tensor::new(
                vec![rows.len(), 1],
                rows.iter().map(|&r| targets[r] as f32).collect(),
            )?;
            let y = tape.constant(y);
            let mse = tape.mse(pred, y)?;
            let loss_value = tape.value(mse).item() as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let loss = match set.map(|s| s.orthogonality_penalty(&mut tape)).transpose()?.flatten() {
                Some(pen) => tape.add(mse, pen)?,
                None => mse,
            };
            if step == 0 {
                report.init_loss = loss_value;
            }
            report.loss_trace.push(loss_value);
            epoch_loss += loss_value;

            let grads = tape.gradients(loss)?;
            tape.store_gradients(&grads, head.params_mut())?;
            let lr = schedule.lr_at(step + 1);
            if let Some(set) = adapters.as_deref_mut() {
                tape.store_gradients(&grads, &mut set.params)?;
                set.update_importance_and_prune(step + 1, &mut adapter_opt)?;
                adamw_step(&mut set.params, &mut adapter_opt, lr)?;
                set.enforce_masks()?;
            }
            adamw_step(head.params_mut(), &mut head_opt, lr)?;
            step += 1;
        }
        let val_srcc = validate(head, adapters.as_deref())?;
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_srcc,
            active_rank: adapters.as_deref().map(AdapterSet::average_active_rank),
        });
        if let Some(v) = val_srcc {
            if best.as_ref().is_none_or(|(b, ..)| v > *b) {
                best = Some((v, head.clone(), adapters.as_deref().cloned()));
                report.best_epoch = epoch;
            }
        }
    }
    report.steps = step;
    if let Some((_, h, a)) = best {
        *head = h;
        if let (Some(dst), Some(src)) = (adapters, a) {
            *dst = src;
        }
    }
    Ok(report)
}

fn check_targets(n: usize, min: usize) -> Result<()> {
    if n < min {
        return Err(Error::Data(format!(
            "need at least {min} training samples, got {n}"
        )));
    }
    Ok(())
}

/// Trains a probe on precomputed features. `val` drives best-epoch
/// selection; without it the last epoch is kept.
pub fn train(
    train_set: &FeatureSet,
    val: Option<&FeatureSet>,
    target: Target,
    layer: usize,
    config: &TrainConfig,
) -> Result<(ProbeModel, TrainReport)> {
    config.validate()?;
    check_targets(train_set.len(), MIN_TRAIN_SAMPLES)?;
    let standardizer = Standardizer::fit(&train_set.targets)?;
    let y: Vec<f64> = train_set.targets.iter().map(|&t| standardizer.apply(t)).collect();
    let mut head = Head::new(config.head, train_set.dim(), &mut config.rng(INIT_STREAM));

    let d = train_set.dim();
    let mut batch = |tape: &mut Tape, rows: &[usize], _: Option<&AdapterSet>, _: Option<&mut ChaCha8Rng>| {
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(train_set.features.row(r));
        }
        Ok(tape.constant(Tensor::new(vec![rows.len(), d], data)?))
    };
    let mut validate = |h: &Head, _: Option<&AdapterSet>| -> Result<Option<f64>> {
        let Some(v) = val else { return Ok(None) };
        let pred = h.predict_standardized(&v.features)?;
        Ok(srcc(&pred, &v.targets).ok())
    };
    let mut report = run_training(config, &y, &mut head, None, &mut batch, &mut validate)?;
    report.n_val = val.map_or(0, FeatureSet::len);
    Ok((
        ProbeModel {
            target,
            layer,
            head,
            standardizer: Some(standardizer),
            adapters: None,
        },
        report,
    ))
}
