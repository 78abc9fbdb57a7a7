//! Image quality metrics.

use crate::error::{Error, Result};
use crate::scene_io::image::ImageBuffer;

/// Reported in place of an infinite PSNR; all PSNR values are capped here.
pub const PSNR_SENTINEL_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_shape(b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_SENTINEL_DB;
    }
    (-10.0 * (mse / (peak * peak)).log10()).min(PSNR_SENTINEL_DB)
}

/// `−10·log10(MSE/peak²)` in dB.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(plane: &[f64], width: usize, height: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            let src = &plane[y * width + x..y * width + x + SSIM_WINDOW];
            rows[y * ow + x] = src.iter().zip(k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW)
                .map(|i| rows[(y + i) * ow + x] * k[i])
                .sum();
        }
    }
    out
}

/// Single-scale structural similarity on the channel-mean luminance with an
/// 11×11 Gaussian window (σ = 1.5), averaged over all fully covered windows.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let (w, h) = (a.width, a.height);
    let ga = a.to_gray();
    let gb = b.to_gray();
    let k = gaussian_kernel();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();

    let mu_a = filter_valid(&ga, w, h, &k);
    let mu_b = filter_valid(&gb, w, h, &k);
    let aa = filter_valid(&prod(&ga, &ga), w, h, &k);
    let bb = filter_valid(&prod(&gb, &gb), w, h, &k);
    let ab = filter_valid(&prod(&ga, &gb), w, h, &k);

    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Least-squares per-channel gain `s_c` minimizing `‖s_c·pred_c − target_c‖²`.
pub fn channel_gains(pred: &ImageBuffer, target: &ImageBuffer) -> Result<Vec<f64>> {
    pred.check_same_shape(target)?;
    let c = pred.channels;
    let mut num = vec![0.0; c];
    let mut den = vec![0.0; c];
    for (p, t) in pred.data.chunks_exact(c).zip(target.data.chunks_exact(c)) {
        for ch in 0..c {
            num[ch] += p[ch] * t[ch];
            den[ch] += p[ch] * p[ch];
        }
    }
    Ok(num
        .iter()
        .zip(&den)
        .map(|(n, d)| if *d > 0.0 { n / d } else { 1.0 })
        .collect())
}

/// MSE after rescaling each channel of `pred` by its least-squares gain.
pub fn standardized_mse(pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    let gains = channel_gains(pred, target)?;
    let c = pred.channels;
    let scaled = ImageBuffer {
        data: pred
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * gains[i % c])
            .collect(),
        ..pred.clone()
    };
    mse(&scaled, target)
}
