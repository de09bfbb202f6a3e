//! Brute-force MOS pipeline.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use editprobe::dimension::RatingDimension;
use editprobe::mos::RatingRecord;

fn dim_index(d: RatingDimension) -> usize {
    match d {
        RatingDimension::Quality => 0,
        RatingDimension::Alignment => 1,
        RatingDimension::Preservation => 2,
    }
}

pub struct Reference {
    /// `[mos_q, mos_e, mos_p, mos_o]` per retained sample.
    pub mos: BTreeMap<String, [f64; 4]>,
    pub rejected: BTreeSet<String>,
    pub flagged: usize,
}

/// Screens per (sample, dimension) group, rejects subjects above
/// `threshold` flagged, z-scores survivors per subject and averages.
pub fn reference(records: &[RatingRecord], threshold: f64) -> Reference {
    let mut groups: HashMap<(String, usize), Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        groups
            .entry((r.sample_id.clone(), dim_index(r.dimension)))
            .or_default()
            .push(i);
    }
    let mut flag = vec![false; records.len()];
    for idx in groups.values() {
        if idx.len() < 2 {
            continue;
        }
        let n = idx.len() as f64;
        let v: Vec<f64> = idx.iter().map(|&i| records[i].score as f64).collect();
        let mean = v.iter().sum::<f64>() / n;
        let m2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let m4 = v.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        let gaussian = m2 > 0.0 && {
            let k = m4 / (m2 * m2);
            (2.0..=4.0).contains(&k)
        };
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let mult = if gaussian { 2.0 } else { 20f64.sqrt() };
        for (&i, x) in idx.iter().zip(&v) {
            flag[i] = (x - mean).abs() > mult * sd;
        }
    }

    let mut per_subject: HashMap<&str, (usize, usize)> = HashMap::new();
    for (r, &f) in records.iter().zip(&flag) {
        let e = per_subject.entry(&r.subject_id).or_insert((0, 0));
        e.0 += 1;
        e.1 += f as usize;
    }
    let rejected: BTreeSet<String> = per_subject
        .iter()
        .filter(|(_, &(n, f))| f as f64 / n as f64 > threshold)
        .map(|(s, _)| s.to_string())
        .collect();

    let keep: Vec<&RatingRecord> = records
        .iter()
        .zip(&flag)
        .filter(|(r, &f)| !f && !rejected.contains(&r.subject_id))
        .map(|(r, _)| r)
        .collect();
    let mut scores: HashMap<&str, Vec<f64>> = HashMap::new();
    for r in &keep {
        scores.entry(&r.subject_id).or_default().push(r.score as f64);
    }
    let moments: HashMap<&str, (f64, f64)> = scores
        .iter()
        .map(|(s, v)| {
            let n = v.len() as f64;
            let mu = v.iter().sum::<f64>() / n;
            let sd = if v.len() > 1 {
                (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (*s, (mu, sd))
        })
        .collect();

    let mut cells: BTreeMap<String, [Vec<f64>; 3]> = BTreeMap::new();
    for r in &keep {
        let (mu, sd) = moments[r.subject_id.as_str()];
        let z = if sd == 0.0 { 0.0 } else { (r.score as f64 - mu) / sd };
        cells.entry(r.sample_id.clone()).or_default()[dim_index(r.dimension)]
            .push(100.0 * (z + 3.0) / 6.0);
    }
    let mut mos = BTreeMap::new();
    for (sample, dims) in cells {
        if dims.iter().any(|d| d.is_empty()) {
            continue;
        }
        let m: Vec<f64> = dims.iter().map(|d| d.iter().sum::<f64>() / d.len() as f64).collect();
        mos.insert(sample, [m[0], m[1], m[2], (m[0] + m[1] + m[2]) / 3.0]);
    }
    Reference {
        mos,
        rejected,
        flagged: flag.iter().filter(|&&f| f).count(),
    }
}
