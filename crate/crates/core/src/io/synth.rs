//! Synthetic benchmark with planted structure.
//!
//! Each sample has a latent `q in [0,1]^3` (quality, alignment,
//! preservation). Subjects rate it through a noisy affine map onto 1..5;
//! hidden states carry a projection of `q` whose strength follows a
//! Gaussian envelope over layers centred on the planted layer.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dump::{HiddenDump, FLAG_SYNTHETIC};
use super::manifest::{Manifest, ManifestSample, MosLabels, Provenance, ProvenanceKind};
use super::repro::Reproducibility;
use super::samples::write_samples_dir;
use crate::backbone::EditSample;
use crate::dimension::RatingDimension;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::ids::id_hash;
use crate::image::Image;
use crate::mos::{self, MosConfig, MosOutcome, RatingRecord};
use crate::probe::Split;

/// Subject count from which one erratic rater is included.
pub const ERRATIC_MIN_SUBJECTS: usize = 15;

const LATENT_STREAM: u64 = 11;
const RATER_STREAM: u64 = 12;
const PROJECTION_STREAM: u64 = 13;
const FEATURE_NOISE_STREAM: u64 = 14;
const IMAGE_STREAM: u64 = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_subjects: usize,
    pub num_layers: usize,
    pub dim: usize,
    /// 1-based layer with the strongest signal; `None` picks the middle.
    pub planted_layer: Option<usize>,
    /// Signal amplitude at the planted layer.
    pub signal: f64,
    /// Width of the Gaussian layer envelope, in layers.
    pub envelope_width: f64,
    /// Std of the isotropic noise added to every hidden state.
    pub feature_noise: f64,
    /// Std of per-rating noise, in rating points.
    pub rating_noise: f64,
    /// Per-subject bias drawn from U(-b, b).
    pub bias_range: f64,
    /// Per-subject gain drawn from U(1-g, 1+g).
    pub gain_range: f64,
    /// Replace one subject by a uniformly random rater (needs
    /// at least [`ERRATIC_MIN_SUBJECTS`] subjects).
    pub erratic_rater: bool,
    /// Encode each latent through an angle so no linear map recovers it.
    pub nonlinear: bool,
    /// Side of the square images written with `--images`.
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 512,
            n_subjects: 20,
            num_layers: 8,
            dim: 128,
            planted_layer: None,
            signal: 1.0,
            envelope_width: 1.5,
            feature_noise: 1.0,
            rating_noise: 0.5,
            bias_range: 0.3,
            gain_range: 0.1,
            erratic_rater: true,
            nonlinear: false,
            image_size: 32,
            seed: 42,
        }
    }
}

impl SynthConfig {
    /// No rating noise, no feature noise, no erratic rater. Subject biases
    /// span a full rounding step so that, without noise to dither the
    /// 5-point rounding, MOS still resolves the latent finely.
    pub fn noiseless() -> Self {
        Self {
            feature_noise: 0.0,
            rating_noise: 0.0,
            bias_range: 0.5,
            erratic_rater: false,
            ..Self::default()
        }
    }

    pub fn nonlinear() -> Self {
        Self {
            nonlinear: true,
            ..Self::default()
        }
    }

    pub fn planted_layer(&self) -> usize {
        self.planted_layer.unwrap_or(self.num_layers.div_ceil(2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_subjects == 0 || self.num_layers == 0 || self.dim == 0 {
            return Err(Error::Config(
                "samples, subjects, layers and dim must all be positive".into(),
            ));
        }
        let k = self.planted_layer();
        if k == 0 || k > self.num_layers {
            return Err(Error::Config(format!(
                "planted layer {k} outside 1..={}",
                self.num_layers
            )));
        }
        for (name, v) in [
            ("signal", self.signal),
            ("feature_noise", self.feature_noise),
            ("rating_noise", self.rating_noise),
            ("bias_range", self.bias_range),
            ("gain_range", self.gain_range),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.envelope_width > 0.0) {
            return Err(Error::Config("envelope_width must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        Ok(())
    }

    /// Whether the erratic rater is actually present.
    pub fn has_erratic_rater(&self) -> bool {
        self.erratic_rater && self.n_subjects >= ERRATIC_MIN_SUBJECTS
    }

    /// Signal multiplier `u_l` at 1-based layer `l`.
    pub fn envelope(&self, l: usize) -> f64 {
        let d = l as f64 - self.planted_layer() as f64;
        (-d * d / (2.0 * self.envelope_width * self.envelope_width)).exp()
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:05}")
}

pub fn subject_id(j: usize) -> String {
    format!("subj{j:03}")
}

/// Generated benchmark before any MOS processing.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub config: SynthConfig,
    pub ids: Vec<String>,
    /// `[quality, alignment, preservation]` per sample.
    pub latent: Vec<[f64; 3]>,
    pub ratings: Vec<RatingRecord>,
    pub dump: HiddenDump,
    /// Subject id of the erratic rater, if any.
    pub erratic_subject: Option<String>,
}

/// Generates ratings and hidden states.
pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let n = config.n_samples;
    let ids: Vec<String> = (0..n).map(sample_id).collect();

    let mut latent_rng = config.rng(LATENT_STREAM);
    let latent: Vec<[f64; 3]> = (0..n)
        .map(|_| [latent_rng.random(), latent_rng.random(), latent_rng.random()])
        .collect();

    let (ratings, erratic_subject) = generate_ratings(config, &ids, &latent)?;
    let dump = generate_features(config, &latent)?;
    Ok(SynthData {
        config: config.clone(),
        ids,
        latent,
        ratings,
        dump,
        erratic_subject,
    })
}

fn generate_ratings(
    config: &SynthConfig,
    ids: &[String],
    latent: &[[f64; 3]],
) -> Result<(Vec<RatingRecord>, Option<String>)> {
    let mut rng = config.rng(RATER_STREAM);
    let erratic = config.has_erratic_rater().then(|| config.n_subjects - 1);
    let noise = Normal::new(0.0, config.rating_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(config.n_subjects * ids.len() * 3);
    for j in 0..config.n_subjects {
        let gain = 1.0 + config.gain_range * (2.0 * rng.random::<f64>() - 1.0);
        let bias = config.bias_range * (2.0 * rng.random::<f64>() - 1.0);
        for (id, q) in ids.iter().zip(latent) {
            for dim in RatingDimension::ALL {
                let score = if Some(j) == erratic {
                    rng.random_range(1..=5u8)
                } else {
                    let eps = if config.rating_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    let raw = gain * (4.0 * q[dim.index()] - 2.0) + 3.0 + bias + eps;
                    raw.round().clamp(1.0, 5.0) as u8
                };
                out.push(RatingRecord {
                    subject_id: subject_id(j),
                    sample_id: id.clone(),
                    dimension: dim,
                    score,
                });
            }
        }
    }
    Ok((out, erratic.map(subject_id)))
}

/// Signal code of one latent vector: `2q-1` per dimension, or
/// `(cos t, sin t)` with `t = 1.75 pi q` in the nonlinear variant.
fn latent_code(q: &[f64; 3], nonlinear: bool) -> Vec<f64> {
    if nonlinear {
        q.iter()
            .flat_map(|&v| {
                let t = 1.75 * std::f64::consts::PI * v;
                [t.cos(), t.sin()]
            })
            .collect()
    } else {
        q.iter().map(|&v| 2.0 * v - 1.0).collect()
    }
}

fn generate_features(config: &SynthConfig, latent: &[[f64; 3]]) -> Result<HiddenDump> {
    let d = config.dim;
    let code_len = if config.nonlinear { 6 } else { 3 };
    let mut proj_rng = config.rng(PROJECTION_STREAM);
    // d x code_len, entries N(0, 1)
    let w: Vec<f64> = (0..d * code_len).map(|_| StandardNormal.sample(&mut proj_rng)).collect();
    let mut noise_rng = config.rng(FEATURE_NOISE_STREAM);
    let envelope: Vec<f64> = (1..=config.num_layers).map(|l| config.envelope(l)).collect();

    let mut dump = HiddenDump::new(config.num_layers, d, FLAG_SYNTHETIC)?;
    for (i, q) in latent.iter().enumerate() {
        let code = latent_code(q, config.nonlinear);
        let v: Vec<f64> = (0..d)
            .map(|r| (0..code_len).map(|c| w[r * code_len + c] * code[c]).sum())
            .collect();
        let mut layers = Vec::with_capacity(config.num_layers);
        for u in &envelope {
            let mut state = || -> Vec<f32> {
                v.iter()
                    .map(|&s| {
                        let e: f64 = StandardNormal.sample(&mut noise_rng);
                        (config.signal * u * s + config.feature_noise * e) as f32
                    })
                    .collect()
            };
            let hs = state();
            let he = state();
            layers.push((hs, he));
        }
        dump.push(id_hash(&sample_id(i)), &layers)?;
    }
    Ok(dump)
}

const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.9, 0.85, 0.1]),
    ("purple", [0.6, 0.1, 0.7]),
    ("orange", [0.95, 0.55, 0.05]),
];

/// Colour that replaces content as preservation drops.
const WASH: [f32; 3] = [0.1, 0.1, 0.5];

/// Per-pixel standard deviation of the source texture.
const TEXTURE_CONTRAST: f32 = 0.05;

const TEMPLATES: [&str; 4] = [
    "make the scene more {}",
    "turn the background {}",
    "add a {} tint to the image",
    "paint the main object {}",
];

/// Source/edited image pairs whose edit reflects the latent: a fixed
/// colour wash replaces more of the content as preservation drops, the
/// tint towards the requested colour grows with alignment, and a
/// checkerboard blocking artefact grows as quality drops.
///
/// The source texture is low-contrast and every effect moves pixels along
/// a direction that does not depend on the texture, so the effects stay
/// visible after the toy backbone's per-token normalization.
pub fn generate_images(config: &SynthConfig, latent: &[[f64; 3]]) -> Result<Vec<(String, EditSample)>> {
    config.validate()?;
    let s = config.image_size;
    let mut rng = config.rng(IMAGE_STREAM);
    let mut out = Vec::with_capacity(latent.len());
    for (i, q) in latent.iter().enumerate() {
        let waves: Vec<[f32; 4]> = (0..9)
            .map(|_| {
                [
                    rng.random_range(0.5..3.0f32),
                    rng.random_range(0.5..3.0f32),
                    rng.random_range(0.0..std::f32::consts::TAU),
                    rng.random_range(0.5..1.0f32),
                ]
            })
            .collect();
        let (color_name, color) = COLORS[rng.random_range(0..COLORS.len())];
        let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
        let instruction = template.replace("{}", color_name);

        let wash = 0.8 * (1.0 - q[2]) as f32;
        let tint = 0.2 * q[1] as f32;
        let blocking = 0.08 * (1.0 - q[0]) as f32;
        let mut base = Vec::with_capacity(s * s * 3);
        for y in 0..s {
            for x in 0..s {
                let (fx, fy) = (x as f32 / s as f32, y as f32 / s as f32);
                for c in 0..3 {
                    base.push(
                        waves[c * 3..c * 3 + 3]
                            .iter()
                            .map(|wv| wv[3] * (std::f32::consts::TAU * (wv[0] * fx + wv[1] * fy) + wv[2]).sin())
                            .sum::<f32>(),
                    );
                }
            }
        }
        // Fixed contrast so the wash costs nearly the same MSE on every image.
        let mean = base.iter().sum::<f32>() / base.len() as f32;
        let std = (base.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / base.len() as f32).sqrt();
        let mut src = Vec::with_capacity(base.len());
        let mut edt = Vec::with_capacity(base.len());
        for (k, v) in base.iter().enumerate() {
            let (x, y) = ((k / 3) % s, (k / 3) / s);
            let b = (0.5 + TEXTURE_CONTRAST * (v - mean) / std.max(1e-6)).clamp(0.05, 0.95);
            let mut e = (1.0 - wash) * b + wash * WASH[k % 3];
            e += tint * (color[k % 3] - e);
            e += if (x + y) % 2 == 0 { blocking } else { -blocking };
            src.push(b);
            edt.push(e.clamp(0.0, 1.0));
        }
        out.push((
            sample_id(i),
            EditSample {
                source: Image::new(s, s, src)?,
                edited: Image::new(s, s, edt)?,
                instruction,
            },
        ));
    }
    Ok(out)
}

/// Generated data carried through MOS processing and splitting.
#[derive(Clone, Debug)]
pub struct SynthBenchmark {
    pub data: SynthData,
    pub mos: MosOutcome,
    pub split: Split,
    pub manifest: Manifest,
}

pub fn build_benchmark(config: &SynthConfig) -> Result<SynthBenchmark> {
    let data = generate(config)?;
    let mos = mos::process(&data.ratings, &MosConfig::default())?;
    let split = Split::by_id_hash(&data.ids, config.seed);
    let labels = split.labels(data.ids.len());
    let samples = data
        .ids
        .iter()
        .zip(labels)
        .map(|(id, split)| ManifestSample {
            id: id.clone(),
            mos: mos.table.samples.get(id).map(MosLabels::from),
            split: Some(split),
        })
        .collect();
    let mut manifest = Manifest::new(
        config.num_layers,
        config.dim,
        Provenance {
            kind: ProvenanceKind::Synthetic,
            backbone: "synthetic".into(),
        },
        samples,
    );
    manifest.config = serde_json::to_value(config)?;
    manifest.reproducibility = Some(Reproducibility::new("synth", config.seed, config)?);
    Ok(SynthBenchmark {
        data,
        mos,
        split,
        manifest,
    })
}

pub const RATINGS_FILE: &str = "ratings.csv";
pub const DUMP_FILE: &str = "hidden.ephs";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LATENT_FILE: &str = "latent.csv";
pub const SAMPLES_DIR: &str = "samples";

impl SynthBenchmark {
    /// Writes ratings, dump, manifest and latent values into `dir`, plus a
    /// samples directory when `images` is set.
    pub fn write(&self, dir: &Path, images: bool) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut csv = Vec::new();
        mos::write_ratings(&mut csv, &self.data.ratings)?;
        atomic_write(&dir.join(RATINGS_FILE), &csv)?;
        self.data.dump.write_file(&dir.join(DUMP_FILE))?;
        self.manifest.write_file(&dir.join(MANIFEST_FILE))?;

        let mut latent = String::from("sample_id,quality,alignment,preservation\n");
        for (id, q) in self.data.ids.iter().zip(&self.data.latent) {
            latent.push_str(&format!("{id},{},{},{}\n", q[0], q[1], q[2]));
        }
        atomic_write(&dir.join(LATENT_FILE), latent.as_bytes())?;

        if images {
            let pairs = generate_images(&self.data.config, &self.data.latent)?;
            write_samples_dir(&dir.join(SAMPLES_DIR), &pairs)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corr::srcc;

    fn small() -> SynthConfig {
        SynthConfig {
            n_samples: 60,
            n_subjects: 16,
            num_layers: 4,
            dim: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn shapes_and_erratic_rater() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.ratings.len(), 16 * 60 * 3);
        assert_eq!(d.dump.num_samples(), 60);
        assert_eq!(d.erratic_subject.as_deref(), Some("subj015"));
        let few = SynthConfig { n_subjects: 10, ..small() };
        assert!(generate(&few).unwrap().erratic_subject.is_none());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.ratings, b.ratings);
        assert_eq!(a.dump.to_bytes().unwrap(), b.dump.to_bytes().unwrap());
        let c = generate(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.latent, c.latent);
    }

    #[test]
    fn noiseless_unit_raters_are_affine_in_rounded_latent() {
        let cfg = SynthConfig {
            gain_range: 0.0,
            bias_range: 0.0,
            ..SynthConfig { n_subjects: 5, ..SynthConfig::noiseless() }
        };
        let d = generate(&SynthConfig { n_samples: 80, num_layers: 2, dim: 4, ..cfg }).unwrap();
        for r in &d.ratings {
            let i: usize = r.sample_id[1..].parse().unwrap();
            let expect = (4.0 * d.latent[i][r.dimension.index()] + 1.0).round().clamp(1.0, 5.0) as u8;
            assert_eq!(r.score, expect);
        }
    }

    #[test]
    fn envelope_peaks_at_planted_layer() {
        let c = SynthConfig::default();
        assert_eq!(c.planted_layer(), 4);
        assert_eq!(c.envelope(4), 1.0);
        assert!(c.envelope(3) < 1.0 && c.envelope(5) < 1.0);
        assert!((c.envelope(3) - c.envelope(5)).abs() < 1e-15);
    }

    #[test]
    fn image_distortion_tracks_preservation() {
        let cfg = small();
        let d = generate(&cfg).unwrap();
        let pairs = generate_images(&cfg, &d.latent).unwrap();
        let mse: Vec<f64> = pairs
            .iter()
            .map(|(_, s)| crate::baseline::mse_image(&s.source, &s.edited).unwrap())
            .collect();
        let p: Vec<f64> = d.latent.iter().map(|q| q[2]).collect();
        assert!(srcc(&mse, &p).unwrap() < -0.9);
    }
}
