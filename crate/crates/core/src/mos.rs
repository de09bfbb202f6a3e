//! Subjective ratings to mean opinion scores.
//!
//! The pipeline runs in a fixed order: kurtosis-based outlier screening per
//! (sample, dimension) group, rejection of subjects whose flagged fraction
//! exceeds the threshold, per-subject z-normalization on the surviving
//! ratings, rescaling to 0-100, and averaging per sample and dimension.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dimension::RatingDimension;
use crate::error::{Error, Result};

pub const DEFAULT_REJECTION_THRESHOLD: f64 = 0.05;

/// One 5-point rating of one sample on one dimension by one subject.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub subject_id: String,
    pub sample_id: String,
    pub dimension: RatingDimension,
    pub score: u8,
}

/// Reads and validates a ratings CSV (`subject_id,sample_id,dimension,score`).
pub fn read_ratings<R: Read>(reader: R) -> Result<Vec<RatingRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["subject_id", "sample_id", "dimension", "score"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Data(format!(
            "ratings header must be `{}`, got `{}`",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or_default();
        let score: u8 = field(3).parse().map_err(|_| {
            Error::Data(format!("row {}: score `{}` is not an integer", line + 2, field(3)))
        })?;
        let dimension = field(2)
            .parse()
            .map_err(|e: Error| Error::Data(format!("row {}: {e}", line + 2)))?;
        out.push(RatingRecord {
            subject_id: field(0).to_string(),
            sample_id: field(1).to_string(),
            dimension,
            score,
        });
    }
    validate_records(&out)?;
    Ok(out)
}

pub fn read_ratings_file(path: &Path) -> Result<Vec<RatingRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_ratings(file)
}

pub fn write_ratings<W: Write>(writer: W, records: &[RatingRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subject_id", "sample_id", "dimension", "score"])?;
    for r in records {
        w.write_record([
            r.subject_id.as_str(),
            r.sample_id.as_str(),
            r.dimension.as_str(),
            &r.score.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<ratings>", e))?;
    Ok(())
}

/// Scores in 1..=5 and unique (subject, sample, dimension) triples.
pub fn validate_records(records: &[RatingRecord]) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !(1..=5).contains(&r.score) {
            return Err(Error::Data(format!(
                "score {} out of range 1..=5 (subject `{}`, sample `{}`, {})",
                r.score, r.subject_id, r.sample_id, r.dimension
            )));
        }
        if r.subject_id.is_empty() || r.sample_id.is_empty() {
            return Err(Error::Data("empty subject or sample id".into()));
        }
        if !seen.insert((r.subject_id.as_str(), r.sample_id.as_str(), r.dimension)) {
            return Err(Error::Data(format!(
                "duplicate rating for subject `{}`, sample `{}`, {}",
                r.subject_id, r.sample_id, r.dimension
            )));
        }
    }
    Ok(())
}

/// Pearson kurtosis `m4 / m2^2` with population moments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kurtosis {
    Value(f64),
    /// Zero variance; treated as non-Gaussian.
    Degenerate,
}

impl Kurtosis {
    pub fn is_gaussian(self) -> bool {
        matches!(self, Kurtosis::Value(k) if (2.0..=4.0).contains(&k))
    }
}

pub fn kurtosis(values: &[f64]) -> Result<Kurtosis> {
    if values.len() < 2 {
        return Err(Error::Contract(format!(
            "kurtosis needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &v in values {
        let d2 = (v - mean).powi(2);
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    if m2 == 0.0 {
        return Ok(Kurtosis::Degenerate);
    }
    Ok(Kurtosis::Value(m4 / (m2 * m2)))
}

fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Outcome of screening one (sample, dimension) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScreen {
    pub sample_id: String,
    pub dimension: RatingDimension,
    pub size: usize,
    pub gaussian: bool,
    pub flagged: usize,
}

/// Per-record outlier flags (parallel to the input slice).
#[derive(Clone, Debug, Default)]
pub struct Screening {
    pub flags: Vec<bool>,
    pub groups: Vec<GroupScreen>,
    /// Groups with fewer than two ratings, which cannot be screened.
    pub skipped: Vec<(String, RatingDimension)>,
}

impl Screening {
    pub fn flagged_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Flags ratings that deviate from their (sample, dimension) group mean by
/// more than 2 sample standard deviations (kurtosis in [2, 4]) or sqrt(20)
/// standard deviations (otherwise). The comparison is strict.
pub fn screen_outliers(records: &[RatingRecord]) -> Screening {
    let mut groups: BTreeMap<(&str, RatingDimension), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups
            .entry((r.sample_id.as_str(), r.dimension))
            .or_default()
            .push(i);
    }
    let mut out = Screening {
        flags: vec![false; records.len()],
        ..Screening::default()
    };
    for ((sample, dim), members) in groups {
        if members.len() < 2 {
            warn!("skipping screening of `{sample}` / {dim}: only {} rating", members.len());
            out.skipped.push((sample.to_string(), dim));
            continue;
        }
        let values: Vec<f64> = members.iter().map(|&i| records[i].score as f64).collect();
        let k = kurtosis(&values).expect("group size checked");
        let (mean, std) = mean_and_sample_std(&values);
        let gaussian = k.is_gaussian();
        let limit = if gaussian { 2.0 * std } else { 20f64.sqrt() * std };
        let mut flagged = 0;
        for (&i, &v) in members.iter().zip(&values) {
            if (v - mean).abs() > limit {
                out.flags[i] = true;
                flagged += 1;
            }
        }
        out.groups.push(GroupScreen {
            sample_id: sample.to_string(),
            dimension: dim,
            size: members.len(),
            gaussian,
            flagged,
        });
    }
    out
}

/// Per-subject summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectStats {
    pub subject_id: String,
    pub n_ratings: usize,
    pub flagged: usize,
    pub flagged_fraction: f64,
    /// Mean of the subject's surviving ratings (0 when none survive).
    pub mean: f64,
    /// Sample standard deviation of the surviving ratings.
    pub std: f64,
    pub rejected: bool,
}

/// Returns the retained subjects and per-subject flag statistics. A subject
/// is rejected iff its flagged fraction exceeds `threshold`.
pub fn reject_subjects(
    records: &[RatingRecord],
    flags: &[bool],
    threshold: f64,
) -> Result<(BTreeSet<String>, Vec<SubjectStats>)> {
    if flags.len() != records.len() {
        return Err(Error::Contract(format!(
            "{} flags for {} ratings",
            flags.len(),
            records.len()
        )));
    }
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (r, &f) in records.iter().zip(flags) {
        let e = counts.entry(r.subject_id.as_str()).or_default();
        e.0 += 1;
        e.1 += f as usize;
    }
    let mut retained = BTreeSet::new();
    let mut stats = Vec::with_capacity(counts.len());
    for (subject, (n, flagged)) in counts {
        let fraction = flagged as f64 / n as f64;
        let rejected = fraction > threshold;
        if !rejected {
            retained.insert(subject.to_string());
        }
        stats.push(SubjectStats {
            subject_id: subject.to_string(),
            n_ratings: n,
            flagged,
            flagged_fraction: fraction,
            mean: 0.0,
            std: 0.0,
            rejected,
        });
    }
    if retained.is_empty() {
        return Err(Error::Data(format!(
            "all {} subjects rejected at threshold {threshold}; no ratings survive",
            stats.len()
        )));
    }
    Ok((retained, stats))
}

/// MOS of one sample on one dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionMos {
    /// Mean of rescaled z-scores, nominally on 0-100.
    pub mos: f64,
    /// Number of ratings averaged.
    pub count: usize,
    /// Sample standard deviation of the rescaled z-scores (0 for one rating).
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMos {
    pub quality: DimensionMos,
    pub alignment: DimensionMos,
    pub preservation: DimensionMos,
    /// Mean of the three dimension MOS values.
    pub overall: f64,
}

impl SampleMos {
    pub fn dimension(&self, d: RatingDimension) -> &DimensionMos {
        match d {
            RatingDimension::Quality => &self.quality,
            RatingDimension::Alignment => &self.alignment,
            RatingDimension::Preservation => &self.preservation,
        }
    }

    pub fn target(&self, t: crate::dimension::Target) -> f64 {
        use crate::dimension::Target;
        match t {
            Target::Quality => self.quality.mos,
            Target::Alignment => self.alignment.mos,
            Target::Preservation => self.preservation.mos,
            Target::Overall => self.overall,
        }
    }
}

/// MOS labels of one sample on the 0-100 scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosLabels {
    pub mos_q: f64,
    pub mos_e: f64,
    pub mos_p: f64,
    pub mos_o: f64,
}

impl MosLabels {
    pub fn target(&self, t: crate::dimension::Target) -> f64 {
        use crate::dimension::Target;
        match t {
            Target::Quality => self.mos_q,
            Target::Alignment => self.mos_e,
            Target::Preservation => self.mos_p,
            Target::Overall => self.mos_o,
        }
    }
}

impl From<&SampleMos> for MosLabels {
    fn from(m: &SampleMos) -> Self {
        Self {
            mos_q: m.quality.mos,
            mos_e: m.alignment.mos,
            mos_p: m.preservation.mos,
            mos_o: m.overall,
        }
    }
}

/// Per-sample MOS with the samples that had to be dropped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MosTable {
    pub samples: BTreeMap<String, SampleMos>,
    /// Samples lacking surviving ratings in at least one dimension.
    pub excluded: Vec<String>,
    /// (sample, dimension) cells whose MOS fell outside [0, 100].
    pub out_of_range: Vec<(String, RatingDimension)>,
}

/// `100 (z + 3) / 6` with `z = (score - mean) / std`, or `z = 0` when
/// `std = 0`. Not clamped.
pub fn rescaled_z(score: f64, mean: f64, std: f64) -> f64 {
    let z = if std > 0.0 { (score - mean) / std } else { 0.0 };
    100.0 * (z + 3.0) / 6.0
}

/// z-normalizes each subject's ratings (`(m - mu_i) / sigma_i`, sample
/// standard deviation, `z = 0` when `sigma_i = 0`), maps
/// `z' = 100 (z + 3) / 6`, and averages per sample and dimension.
///
/// Returns the table and the per-subject (mean, std) actually used.
pub fn compute_mos(surviving: &[RatingRecord]) -> (MosTable, BTreeMap<String, (f64, f64)>) {
    let mut by_subject: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in surviving {
        by_subject
            .entry(r.subject_id.as_str())
            .or_default()
            .push(r.score as f64);
    }
    let subject_stats: BTreeMap<String, (f64, f64)> = by_subject
        .iter()
        .map(|(s, v)| (s.to_string(), mean_and_sample_std(v)))
        .collect();

    let mut cells: BTreeMap<&str, [Vec<f64>; 3]> = BTreeMap::new();
    let mut all_samples: BTreeSet<&str> = BTreeSet::new();
    for r in surviving {
        let (mu, sigma) = subject_stats[r.subject_id.as_str()];
        let zp = rescaled_z(r.score as f64, mu, sigma);
        all_samples.insert(r.sample_id.as_str());
        cells.entry(r.sample_id.as_str()).or_default()[r.dimension.index()].push(zp);
    }

    let mut table = MosTable::default();
    for sample in all_samples {
        let dims = &cells[sample];
        if dims.iter().any(Vec::is_empty) {
            table.excluded.push(sample.to_string());
            continue;
        }
        let summarize = |v: &Vec<f64>| {
            let (mean, std) = mean_and_sample_std(v);
            DimensionMos {
                mos: mean,
                count: v.len(),
                std,
            }
        };
        let [q, e, p] = [summarize(&dims[0]), summarize(&dims[1]), summarize(&dims[2])];
        for (d, m) in RatingDimension::ALL.iter().zip([q, e, p]) {
            if !(0.0..=100.0).contains(&m.mos) {
                table.out_of_range.push((sample.to_string(), *d));
            }
        }
        table.samples.insert(
            sample.to_string(),
            SampleMos {
                quality: q,
                alignment: e,
                preservation: p,
                overall: (q.mos + e.mos + p.mos) / 3.0,
            },
        );
    }
    (table, subject_stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosConfig {
    pub rejection_threshold: f64,
}

impl Default for MosConfig {
    fn default() -> Self {
        Self {
            rejection_threshold: DEFAULT_REJECTION_THRESHOLD,
        }
    }
}

/// Summary of screening and rejection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub rejected_subjects: Vec<String>,
    /// Flagged ratings over all input ratings.
    pub outlier_fraction: f64,
    pub n_ratings: usize,
    pub n_flagged: usize,
    pub n_surviving: usize,
    pub gaussian_groups: usize,
    pub non_gaussian_groups: usize,
    pub skipped_groups: Vec<(String, RatingDimension)>,
    pub excluded_samples: Vec<String>,
    pub out_of_range: Vec<(String, RatingDimension)>,
    pub subjects: Vec<SubjectStats>,
}

#[derive(Clone, Debug)]
pub struct MosOutcome {
    pub table: MosTable,
    pub report: ScreeningReport,
}

/// Full pipeline: screen, reject subjects, drop flagged ratings, normalize
/// on the survivors, aggregate.
pub fn process(records: &[RatingRecord], config: &MosConfig) -> Result<MosOutcome> {
    validate_records(records)?;
    if records.is_empty() {
        return Err(Error::Data("no ratings".into()));
    }
    let screening = screen_outliers(records);
    let (retained, mut subjects) =
        reject_subjects(records, &screening.flags, config.rejection_threshold)?;

    let surviving: Vec<RatingRecord> = records
        .iter()
        .zip(&screening.flags)
        .filter(|(r, &f)| !f && retained.contains(&r.subject_id))
        .map(|(r, _)| r.clone())
        .collect();
    let (table, used) = compute_mos(&surviving);
    for s in &mut subjects {
        if let Some(&(mean, std)) = used.get(&s.subject_id) {
            s.mean = mean;
            s.std = std;
        }
    }
    if !table.excluded.is_empty() {
        warn!(
            "{} sample(s) excluded for lack of surviving ratings",
            table.excluded.len()
        );
    }

    let gaussian_groups = screening.groups.iter().filter(|g| g.gaussian).count();
    let report = ScreeningReport {
        rejected_subjects: subjects
            .iter()
            .filter(|s| s.rejected)
            .map(|s| s.subject_id.clone())
            .collect(),
        outlier_fraction: screening.flagged_count() as f64 / records.len() as f64,
        n_ratings: records.len(),
        n_flagged: screening.flagged_count(),
        n_surviving: surviving.len(),
        gaussian_groups,
        non_gaussian_groups: screening.groups.len() - gaussian_groups,
        skipped_groups: screening.skipped.clone(),
        excluded_samples: table.excluded.clone(),
        out_of_range: table.out_of_range.clone(),
        subjects,
    };
    Ok(MosOutcome { table, report })
}
