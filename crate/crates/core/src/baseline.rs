//! Full-reference pixel baselines (MSE, PSNR, SSIM) and their correlation
//! with MOS.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corr::{krcc, plcc, srcc, CorrelationCell, CorrelationReport};
use crate::dimension::Target;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mos::MosLabels;

/// PSNR substituted for identical pairs when computing PLCC.
pub const PSNR_IDENTICAL_CAP_DB: f64 = 100.0;

fn check_same_size(a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Shape {
            op: "image comparison",
            lhs: vec![a.height(), a.width(), 3],
            rhs: vec![b.height(), b.width(), 3],
        });
    }
    Ok(())
}

/// Mean squared difference over all pixels and channels.
pub fn mse_image(a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    let ss: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(ss / a.data().len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Db(f64),
    /// Zero MSE. Ranks above every finite value.
    Identical,
}

impl Psnr {
    /// `None` for identical pairs.
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Identical => None,
        }
    }

    /// Value used for rank statistics: identical maps to +inf.
    pub fn rank_value(self) -> f64 {
        self.db().unwrap_or(f64::INFINITY)
    }
}

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.db().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.map_or(Psnr::Identical, Psnr::Db))
    }
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Identical
    } else {
        Psnr::Db(10.0 * (peak * peak / mse).log10())
    }
}

pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<Psnr> {
    Ok(psnr_from_mse(mse_image(a, b)?, peak))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable valid-mode filtering of a row-major `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            horiz[y * ow + x] = taps.iter().zip(&row[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * horiz[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity on BT.601 luma over every valid window
/// position.
pub fn ssim(a: &Image, b: &Image, config: &SsimConfig) -> Result<f64> {
    check_same_size(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < config.window || h < config.window {
        return Err(Error::Data(format!(
            "image {w}x{h} is smaller than the {0}x{0} SSIM window",
            config.window
        )));
    }
    let taps = gaussian_taps(config.window, config.sigma);
    let (la, lb) = (a.luma(), b.luma());
    let aa: Vec<f64> = la.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = lb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x * y).collect();
    let (mu_a, ow, oh) = filter_valid(&la, w, h, &taps);
    let (mu_b, ..) = filter_valid(&lb, w, h, &taps);
    let (e_aa, ..) = filter_valid(&aa, w, h, &taps);
    let (e_bb, ..) = filter_valid(&bb, w, h, &taps);
    let (e_ab, ..) = filter_valid(&ab, w, h, &taps);
    let c1 = (config.k1 * config.peak).powi(2);
    let c2 = (config.k2 * config.peak).powi(2);
    let total: f64 = (0..ow * oh)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / (ow * oh) as f64)
}

/// Metric values for one source/edited pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub id: String,
    pub mse: f64,
    pub psnr: Psnr,
    pub ssim: f64,
}

pub fn score_pair(id: &str, source: &Image, edited: &Image, config: &SsimConfig) -> Result<PairScores> {
    let mse = mse_image(source, edited)?;
    Ok(PairScores {
        id: id.to_string(),
        mse,
        psnr: psnr_from_mse(mse, config.peak),
        ssim: ssim(source, edited, config)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    /// Metric name -> correlations per target.
    pub metrics: BTreeMap<String, CorrelationReport>,
    pub pairs: Vec<PairScores>,
    /// Pairs without a MOS entry.
    pub skipped: Vec<String>,
}

fn cell_with_plcc_values(rank_values: &[f64], plcc_values: &[f64], mos: &[f64]) -> CorrelationCell {
    CorrelationCell {
        n: mos.len(),
        srcc: srcc(rank_values, mos).ok(),
        plcc: plcc(plcc_values, mos).ok(),
        krcc: krcc(rank_values, mos).ok(),
    }
}

/// Scores every pair and correlates each metric with each MOS target.
/// Identical pairs rank highest for PSNR and count as
/// [`PSNR_IDENTICAL_CAP_DB`] in its PLCC.
pub fn baseline_report(
    pairs: &[(String, Image, Image)],
    mos: &BTreeMap<String, MosLabels>,
    config: &SsimConfig,
) -> Result<BaselineReport> {
    let mut scored = Vec::new();
    let mut skipped = Vec::new();
    for (id, src, edt) in pairs {
        if mos.contains_key(id) {
            scored.push(score_pair(id, src, edt, config)?);
        } else {
            skipped.push(id.clone());
        }
    }
    let mse: Vec<f64> = scored.iter().map(|p| p.mse).collect();
    let ssim_v: Vec<f64> = scored.iter().map(|p| p.ssim).collect();
    let psnr_rank: Vec<f64> = scored.iter().map(|p| p.psnr.rank_value()).collect();
    let psnr_lin: Vec<f64> = scored
        .iter()
        .map(|p| p.psnr.db().unwrap_or(PSNR_IDENTICAL_CAP_DB).min(PSNR_IDENTICAL_CAP_DB))
        .collect();

    let mut metrics: BTreeMap<String, CorrelationReport> = BTreeMap::new();
    for target in Target::ALL {
        let y: Vec<f64> = scored.iter().map(|p| mos[&p.id].target(target)).collect();
        metrics
            .entry("mse".into())
            .or_default()
            .insert(target, cell_with_plcc_values(&mse, &mse, &y));
        metrics
            .entry("psnr".into())
            .or_default()
            .insert(target, cell_with_plcc_values(&psnr_rank, &psnr_lin, &y));
        metrics
            .entry("ssim".into())
            .or_default()
            .insert(target, cell_with_plcc_values(&ssim_v, &ssim_v, &y));
    }
    Ok(BaselineReport {
        metrics,
        pairs: scored,
        skipped,
    })
}
