//! Per-layer separability statistics and saliency-based layer selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Equal-width MOS bins for the discriminability ratio.
    pub quality_bins: usize,
    /// Histogram bins per feature dimension for the entropy.
    pub hist_bins: usize,
    /// Fraction of samples at each MOS extreme used for the KL groups.
    pub quantile: f64,
    /// Floor applied to fitted variances in the KL.
    pub var_floor: f64,
    /// Added to the within-class scatter in the discriminability ratio.
    pub eps: f64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            gamma: 1.0 / 3.0,
            quality_bins: 5,
            hist_bins: 64,
            quantile: 0.25,
            var_floor: 1e-6,
            eps: 1e-8,
        }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!(
                "saliency weights must be nonnegative with a positive sum, got {w:?}"
            )));
        }
        if self.quality_bins < 2 {
            return Err(Error::Config("quality bin count must be at least 2".into()));
        }
        if self.hist_bins < 2 {
            return Err(Error::Config("histogram bin count must be at least 2".into()));
        }
        if !(self.quantile > 0.0 && self.quantile <= 0.5) {
            return Err(Error::Config(format!(
                "KL quantile must lie in (0, 0.5], got {}",
                self.quantile
            )));
        }
        if !(self.var_floor > 0.0 && self.eps > 0.0) {
            return Err(Error::Config("variance floor and epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Pooled features for every layer (rows = samples) plus one MOS per sample.
#[derive(Clone, Debug)]
pub struct LayerFeatureSet {
    layers: Vec<Tensor>,
    mos: Vec<f64>,
}

impl LayerFeatureSet {
    pub fn new(layers: Vec<Tensor>, mos: Vec<f64>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Data("no layers".into()));
        };
        let (n, d) = (first.rows(), first.cols());
        for t in &layers {
            if t.rank() != 2 || t.rows() != n || t.cols() != d {
                return Err(Error::Shape {
                    op: "layer feature set",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        if mos.len() != n {
            return Err(Error::Data(format!("{} MOS labels for {n} samples", mos.len())));
        }
        if let Some(i) = mos.iter().position(|m| !m.is_finite()) {
            return Err(Error::Data(format!("MOS label {i} is not finite")));
        }
        Ok(Self { layers, mos })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_samples(&self) -> usize {
        self.mos.len()
    }

    /// Features of 1-based layer `l`.
    pub fn layer(&self, l: usize) -> &Tensor {
        &self.layers[l - 1]
    }

    pub fn mos(&self) -> &[f64] {
        &self.mos
    }
}

/// Linear-interpolation quantile of an unsorted slice.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn column_moments(features: &Tensor, rows: &[usize], d: usize, var_floor: f64) -> Vec<(f64, f64)> {
    let n = rows.len() as f64;
    (0..d)
        .map(|j| {
            let mean = rows.iter().map(|&i| features.at(i, j) as f64).sum::<f64>() / n;
            let var = rows
                .iter()
                .map(|&i| (features.at(i, j) as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            (mean, var.max(var_floor))
        })
        .collect()
}

/// Symmetrized KL, `(KL(P||Q) + KL(Q||P)) / 2`, between two univariate Gaussians.
pub fn symmetric_gaussian_kl(mu_p: f64, var_p: f64, mu_q: f64, var_q: f64) -> f64 {
    let d2 = (mu_p - mu_q).powi(2);
    0.5 * ((var_p + d2) / (2.0 * var_q) + (var_q + d2) / (2.0 * var_p) - 1.0)
}

/// Mean per-dimension symmetric KL between Gaussians fitted to the bottom-q
/// and top-q MOS groups. Group membership is by threshold, so ties at the
/// cut are all included.
pub fn kl_separability(features: &Tensor, mos: &[f64], config: &SaliencyConfig) -> Result<f64> {
    let lo = quantile(mos, config.quantile);
    let hi = quantile(mos, 1.0 - config.quantile);
    let bottom: Vec<usize> = (0..mos.len()).filter(|&i| mos[i] <= lo).collect();
    let top: Vec<usize> = (0..mos.len()).filter(|&i| mos[i] >= hi).collect();
    for (name, g) in [("bottom", &bottom), ("top", &top)] {
        if g.len() < 2 {
            return Err(Error::Data(format!(
                "{name} {} MOS quantile group has {} sample(s); need at least 2",
                config.quantile,
                g.len()
            )));
        }
    }
    let d = features.cols();
    let p = column_moments(features, &bottom, d, config.var_floor);
    let q = column_moments(features, &top, d, config.var_floor);
    let total: f64 = p
        .iter()
        .zip(&q)
        .map(|(&(mp, vp), &(mq, vq))| symmetric_gaussian_kl(mp, vp, mq, vq))
        .sum();
    Ok(total / d as f64)
}

fn equal_width_bin(x: f64, min: f64, max: f64, bins: usize) -> usize {
    let idx = ((x - min) / (max - min) * bins as f64).floor();
    (idx.max(0.0) as usize).min(bins - 1)
}

/// Trace ratio of between- to within-class scatter over equal-width MOS
/// bins (empty bins dropped), both weighted by class size.
pub fn ldr(features: &Tensor, mos: &[f64], config: &SaliencyConfig) -> Result<f64> {
    let (min, max) = mos
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &m| (a.min(m), b.max(m)));
    if !(max > min) {
        return Err(Error::Data(
            "all MOS labels are equal; need at least 2 non-empty quality bins".into(),
        ));
    }
    let k = config.quality_bins;
    let mut classes: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &m) in mos.iter().enumerate() {
        classes[equal_width_bin(m, min, max, k)].push(i);
    }
    classes.retain(|c| !c.is_empty());
    if classes.len() < 2 {
        return Err(Error::Data(format!(
            "only {} non-empty quality bin(s); need at least 2",
            classes.len()
        )));
    }
    let n = mos.len() as f64;
    let d = features.cols();
    let mut between = 0.0;
    let mut within = 0.0;
    for j in 0..d {
        let global = (0..mos.len()).map(|i| features.at(i, j) as f64).sum::<f64>() / n;
        for c in &classes {
            let nc = c.len() as f64;
            let mean = c.iter().map(|&i| features.at(i, j) as f64).sum::<f64>() / nc;
            between += nc / n * (mean - global).powi(2);
            within += c
                .iter()
                .map(|&i| (features.at(i, j) as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
        }
    }
    Ok(between / (within + config.eps))
}

/// Mean per-dimension histogram entropy in nats. Constant dimensions add 0.
pub fn entropy(features: &Tensor, config: &SaliencyConfig) -> Result<f64> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::Data(format!("entropy needs at least 2 samples, got {n}")));
    }
    let d = features.cols();
    let bins = config.hist_bins;
    let mut counts = vec![0usize; bins];
    let mut total = 0.0;
    for j in 0..d {
        let col = (0..n).map(|i| features.at(i, j) as f64);
        let (min, max) = col
            .clone()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        if !(max > min) {
            continue;
        }
        counts.iter_mut().for_each(|c| *c = 0);
        for x in col {
            counts[equal_width_bin(x, min, max, bins)] += 1;
        }
        total -= counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n as f64;
                p * p.ln()
            })
            .sum::<f64>();
    }
    Ok(total / d as f64)
}

/// Raw statistics of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawLayerStats {
    pub kl: f64,
    pub ldr: f64,
    pub entropy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    /// 1-based layer index.
    pub layer: usize,
    pub kl: f64,
    pub ldr: f64,
    pub entropy: f64,
    pub kl_norm: f64,
    pub ldr_norm: f64,
    pub entropy_norm: f64,
    pub saliency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layers: Vec<LayerRow>,
    /// 1-based index of the selected layer.
    pub selected: usize,
    pub config: SaliencyConfig,
}

impl LayerStats {
    pub fn saliency(&self) -> Vec<f64> {
        self.layers.iter().map(|r| r.saliency).collect()
    }
}

/// Min-max scaling to [0, 1]; a constant series maps to 0.5 everywhere.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(max > min) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

/// Normalizes each statistic across layers, combines them with the config
/// weights and picks the argmax (lowest index on ties).
pub fn saliency_and_select(raw: &[RawLayerStats], config: &SaliencyConfig) -> Result<LayerStats> {
    config.validate()?;
    if raw.is_empty() {
        return Err(Error::Data("no layers to select from".into()));
    }
    let kl = min_max_normalize(&raw.iter().map(|r| r.kl).collect::<Vec<_>>());
    let ld = min_max_normalize(&raw.iter().map(|r| r.ldr).collect::<Vec<_>>());
    let en = min_max_normalize(&raw.iter().map(|r| r.entropy).collect::<Vec<_>>());
    let mut layers = Vec::with_capacity(raw.len());
    let mut selected = 1;
    let mut best = f64::NEG_INFINITY;
    for (i, r) in raw.iter().enumerate() {
        let s = config.alpha * kl[i] + config.beta * ld[i] + config.gamma * en[i];
        if s > best {
            best = s;
            selected = i + 1;
        }
        layers.push(LayerRow {
            layer: i + 1,
            kl: r.kl,
            ldr: r.ldr,
            entropy: r.entropy,
            kl_norm: kl[i],
            ldr_norm: ld[i],
            entropy_norm: en[i],
            saliency: s,
        });
    }
    Ok(LayerStats {
        layers,
        selected,
        config: *config,
    })
}

pub fn layer_raw_stats(features: &Tensor, mos: &[f64], config: &SaliencyConfig) -> Result<RawLayerStats> {
    Ok(RawLayerStats {
        kl: kl_separability(features, mos, config)?,
        ldr: ldr(features, mos, config)?,
        entropy: entropy(features, config)?,
    })
}

/// Computes every layer's statistics (in parallel) and selects a layer.
pub fn analyze(set: &LayerFeatureSet, config: &SaliencyConfig) -> Result<LayerStats> {
    config.validate()?;
    let raw = (1..=set.num_layers())
        .into_par_iter()
        .map(|l| layer_raw_stats(set.layer(l), set.mos(), config))
        .collect::<Result<Vec<_>>>()?;
    saliency_and_select(&raw, config)
}
