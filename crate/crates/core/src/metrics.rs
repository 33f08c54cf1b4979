//! Image quality metrics.

use crate::edge::to_luminance;
use crate::error::{CabmError, Result};
use crate::tensor::{Real, Tensor};

/// Reported PSNR when the images are identical.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.require_same_shape(b, "mse")?;
    if a.numel() == 0 {
        return Err(CabmError::invalid("mse of empty tensors"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(CabmError::invalid(format!("peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable weighted sum over every valid `k x k` window of a plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    // Images smaller than the window use the largest odd window that fits.
    let mut k = SSIM_WINDOW.min(h).min(w);
    if k % 2 == 0 {
        k -= 1;
    }
    let g = gaussian_window(k);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&prod(a, a), h, w, &g);
    let bb = filter_valid(&prod(b, b), h, w, &g);
    let ab = filter_valid(&prod(a, b), h, w, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean SSIM over valid Gaussian windows. Three-channel inputs are
/// converted to luminance first; other channel counts are averaged per
/// channel.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    a.require_same_shape(b, "ssim")?;
    if !(peak > 0.0) {
        return Err(CabmError::invalid(format!("peak must be positive, got {peak}")));
    }
    let (a, b) = if a.shape()[1] == 3 {
        (to_luminance(a)?, to_luminance(b)?)
    } else {
        (a.clone(), b.clone())
    };
    let [n, c, h, w] = a.shape();
    if h == 0 || w == 0 {
        return Err(CabmError::invalid("ssim of empty images"));
    }
    let plane = |t: &Tensor<T>, i: usize| -> Vec<f64> {
        t.data()[i * h * w..(i + 1) * h * w]
            .iter()
            .map(|v| v.as_f64())
            .collect()
    };
    let planes = n * c;
    let sum: f64 = (0..planes)
        .map(|i| ssim_plane(&plane(&a, i), &plane(&b, i), h, w, peak))
        .sum();
    Ok(sum / planes as f64)
}
