//! SRCC, PLCC and KRCC between predictions and mean opinion scores.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dimension::Target;

/// Why a coefficient could not be computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum Undefined {
    #[error("inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 pairs, got {0}")]
    TooFew(usize),
    #[error("an input has zero variance")]
    ZeroVariance,
    #[error("an input contains a non-finite value")]
    NonFinite,
    #[error("logistic fit did not converge")]
    FitFailed,
}

fn check_pair(x: &[f64], y: &[f64], allow_infinite: bool) -> Result<(), Undefined> {
    if x.len() != y.len() {
        return Err(Undefined::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(Undefined::TooFew(x.len()));
    }
    let bad = |v: &f64| if allow_infinite { v.is_nan() } else { !v.is_finite() };
    if x.iter().chain(y).any(bad) {
        return Err(Undefined::NonFinite);
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(Undefined::ZeroVariance);
    }
    Ok(())
}

/// Pearson product-moment correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64, Undefined> {
    check_pair(x, y, false)?;
    Ok(pearson_unchecked(x, y))
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Average (fractional) ranks starting at 1; ties share the mean position.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) -> ranks i+1..=j
        let rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation: Pearson on average ranks.
///
/// Infinite values are allowed and rank at the extremes.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64, Undefined> {
    check_pair(x, y, true)?;
    Ok(pearson_unchecked(&average_ranks(x), &average_ranks(y)))
}

/// Kendall tau-b in O(n log n) (Knight's merge-sort algorithm).
pub fn krcc(x: &[f64], y: &[f64]) -> Result<f64, Undefined> {
    check_pair(x, y, true)?;
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));

    let pairs = |t: u64| t * (t.saturating_sub(1)) / 2;
    let n0 = pairs(n as u64);

    // Ties in x, and joint ties in (x, y).
    let (mut tied_x, mut tied_xy) = (0u64, 0u64);
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for w in 1..n {
        let (a, b) = (idx[w - 1], idx[w]);
        if x[a] == x[b] {
            run_x += 1;
            if y[a] == y[b] {
                run_xy += 1;
            } else {
                tied_xy += pairs(run_xy);
                run_xy = 1;
            }
        } else {
            tied_x += pairs(run_x);
            tied_xy += pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    tied_x += pairs(run_x);
    tied_xy += pairs(run_xy);

    // Sort by y, counting the swaps (discordant pairs).
    let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let mut buf = ys.clone();
    let mut work = ys;
    let swaps = merge_count(&mut work, &mut buf);

    let mut tied_y = 0u64;
    let mut run_y = 1u64;
    for w in 1..n {
        if work[w - 1] == work[w] {
            run_y += 1;
        } else {
            tied_y += pairs(run_y);
            run_y = 1;
        }
    }
    tied_y += pairs(run_y);

    if n0 == tied_x || n0 == tied_y {
        return Err(Undefined::ZeroVariance);
    }
    let numer = n0 as f64 - tied_x as f64 - tied_y as f64 + tied_xy as f64 - 2.0 * swaps as f64;
    let denom = ((n0 - tied_x) as f64 * (n0 - tied_y) as f64).sqrt();
    Ok((numer / denom).clamp(-1.0, 1.0))
}

/// Stable merge sort of `v` that returns the number of inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (left, right) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(left, bl) + merge_count(right, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j].total_cmp(&v[i]) == Ordering::Less {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + (mid - i)].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + (n - j)].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// PLCC after mapping `pred` onto `mos` with a four-parameter logistic
/// `b2 + (b1 - b2) / (1 + exp(-(x - b3) / |b4|))`, fitted by
/// Levenberg-Marquardt.
pub fn plcc_logistic(pred: &[f64], mos: &[f64]) -> Result<f64, Undefined> {
    check_pair(pred, mos, false)?;
    let fitted = fit_logistic(pred, mos).ok_or(Undefined::FitFailed)?;
    let mapped: Vec<f64> = pred.iter().map(|&x| logistic(&fitted, x)).collect();
    if mapped.iter().all(|&v| v == mapped[0]) {
        return Err(Undefined::ZeroVariance);
    }
    Ok(pearson_unchecked(&mapped, mos))
}

fn logistic(b: &[f64; 4], x: f64) -> f64 {
    b[1] + (b[0] - b[1]) / (1.0 + (-(x - b[2]) / b[3].abs()).exp())
}

fn fit_logistic(x: &[f64], y: &[f64]) -> Option<[f64; 4]> {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let sd_x = (x.iter().map(|v| (v - mean_x).powi(2)).sum::<f64>() / n).sqrt();
    let ymax = y.iter().cloned().fold(f64::MIN, f64::max);
    let ymin = y.iter().cloned().fold(f64::MAX, f64::min);
    let increasing = pearson_unchecked(x, y) >= 0.0;
    let mut b = if increasing {
        [ymax, ymin, mean_x, sd_x.max(1e-12)]
    } else {
        [ymin, ymax, mean_x, sd_x.max(1e-12)]
    };
    let sse = |b: &[f64; 4]| -> f64 {
        x.iter()
            .zip(y)
            .map(|(&xi, &yi)| (logistic(b, xi) - yi).powi(2))
            .sum()
    };
    let mut cost = sse(&b);
    let mut damping = 1e-3;
    for _ in 0..500 {
        // Normal equations J^T J and J^T r.
        let mut jtj = [[0.0f64; 4]; 4];
        let mut jtr = [0.0f64; 4];
        for (&xi, &yi) in x.iter().zip(y) {
            let s = b[3].abs();
            let e = (-(xi - b[2]) / s).exp();
            let d = 1.0 + e;
            let sig = 1.0 / d;
            let span = b[0] - b[1];
            let dsig_dz = e / (d * d);
            let z_b2 = -1.0 / s;
            let z_b3 = -(xi - b[2]) / (s * s) * b[3].signum();
            let jac = [sig, 1.0 - sig, span * dsig_dz * z_b2, span * dsig_dz * z_b3];
            let r = logistic(&b, xi) - yi;
            for a in 0..4 {
                jtr[a] += jac[a] * r;
                for c in 0..4 {
                    jtj[a][c] += jac[a] * jac[c];
                }
            }
        }
        let mut improved = false;
        while damping < 1e12 {
            let mut m = jtj;
            for (a, row) in m.iter_mut().enumerate() {
                row[a] += damping * (1.0 + jtj[a][a]);
            }
            let Some(step) = solve4(m, jtr) else {
                damping *= 10.0;
                continue;
            };
            let cand = [b[0] - step[0], b[1] - step[1], b[2] - step[2], b[3] - step[3]];
            let c = sse(&cand);
            if c.is_finite() && c < cost && cand[3].abs() > 1e-12 {
                let rel = (cost - c) / cost.max(1e-300);
                b = cand;
                cost = c;
                damping = (damping / 10.0).max(1e-12);
                improved = true;
                if rel < 1e-12 {
                    return Some(b);
                }
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    b.iter().all(|v| v.is_finite()).then_some(b)
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut out = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| a[row][k] * out[k]).sum();
        out[row] = (b[row] - s) / a[row][row];
    }
    Some(out)
}

/// The three coefficients for one prediction/MOS pairing. `None` marks an
/// undefined coefficient (serialized as `null`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub n: usize,
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub krcc: Option<f64>,
}

impl CorrelationCell {
    pub fn compute(pred: &[f64], mos: &[f64], logistic_fit: bool) -> Self {
        let plcc = if logistic_fit {
            plcc_logistic(pred, mos)
        } else {
            plcc(pred, mos)
        };
        CorrelationCell {
            n: pred.len().min(mos.len()),
            srcc: srcc(pred, mos).ok(),
            plcc: plcc.ok(),
            krcc: krcc(pred, mos).ok(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.srcc.is_some() && self.plcc.is_some() && self.krcc.is_some()
    }
}

/// Correlations broken down by target dimension.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub dimensions: BTreeMap<Target, CorrelationCell>,
}

impl CorrelationReport {
    pub fn insert(&mut self, target: Target, cell: CorrelationCell) {
        self.dimensions.insert(target, cell);
    }

    pub fn get(&self, target: Target) -> Option<&CorrelationCell> {
        self.dimensions.get(&target)
    }

    /// Number of populated coefficients across all dimensions.
    pub fn populated_cells(&self) -> usize {
        self.dimensions
            .values()
            .map(|c| [c.srcc, c.plcc, c.krcc].iter().filter(|v| v.is_some()).count())
            .sum()
    }
}
