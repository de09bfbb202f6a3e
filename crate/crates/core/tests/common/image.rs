//! Brute-force windowed SSIM.

use editprobe::image::Image;

fn luma(img: &Image) -> Vec<f64> {
    let mut out = Vec::with_capacity(img.width() * img.height());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let [r, g, b] = img.pixel(x, y);
            out.push(0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64);
        }
    }
    out
}

/// Mean SSIM over every full `window x window` position, using explicit
/// 2-D Gaussian weights and centered second moments.
pub fn ssim(a: &Image, b: &Image, window: usize, sigma: f64) -> f64 {
    let (w, h) = (a.width(), a.height());
    let (la, lb) = (luma(a), luma(b));
    let c = (window as f64 - 1.0) / 2.0;
    let mut weights = vec![0.0; window * window];
    for i in 0..window {
        for j in 0..window {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            weights[i * window + j] = (-r2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));

    let mut acc = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - window {
        for x0 in 0..=w - window {
            let px = |p: &[f64], i: usize, j: usize| p[(y0 + i) * w + x0 + j];
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..window {
                for j in 0..window {
                    ma += weights[i * window + j] * px(&la, i, j);
                    mb += weights[i * window + j] * px(&lb, i, j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..window {
                for j in 0..window {
                    let k = weights[i * window + j];
                    let (da, db) = (px(&la, i, j) - ma, px(&lb, i, j) - mb);
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}
