//! Reconstruction-quality and rate metrics: PSNR, SSIM and the Bjontegaard
//! delta rate.

use crate::error::{Result, VoxvidError};
use crate::image::Image;

/// Peak signal-to-noise ratio in dB for images in [0, 1]. Identical images
/// report the +infinity sentinel.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(VoxvidError::Config("psnr: image dimensions differ".into()));
    }
    let mut se = 0.0;
    for (x, y) in a.pixels.iter().zip(b.pixels.iter()) {
        for c in 0..3 {
            let d = x[c] - y[c];
            se += d * d;
        }
    }
    let mse = se / (a.pixels.len() * 3) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Structural similarity with the standard 11x11 Gaussian window over the
/// valid (fully covered) region, averaged over the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(VoxvidError::Config("ssim: image dimensions differ".into()));
    }
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(VoxvidError::Config(format!(
            "ssim: image must be at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut total = 0.0;
    for ch in 0..3 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for row in 0..=(h - SSIM_WINDOW) {
            for col in 0..=(w - SSIM_WINDOW) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let g = win[i * SSIM_WINDOW + j];
                        let x = a.pixels[(row + i) * w + col + j][ch];
                        let y = b.pixels[(row + i) * w + col + j][ch];
                        mu_a += g * x;
                        mu_b += g * y;
                        aa += g * x * x;
                        bb += g * y * y;
                        ab += g * x * y;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                acc += s;
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / 3.0)
}

/// Bjontegaard delta rate in percent between two RD curves given as
/// `(rate, psnr)` points: a cubic fit of log10(rate) against quality,
/// integrated over the overlapping quality interval. Negative values mean
/// `a` needs fewer bits than `b` at equal quality.
pub fn bd_rate(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64> {
    let pa = fit_log_rate(a)?;
    let pb = fit_log_rate(b)?;
    let lo = min_quality(a).max(min_quality(b));
    let hi = max_quality(a).min(max_quality(b));
    if !(hi > lo) {
        return Err(VoxvidError::Config("bd_rate: quality ranges do not overlap".into()));
    }
    let int_a = integrate_cubic(&pa, lo, hi);
    let int_b = integrate_cubic(&pb, lo, hi);
    let avg_diff = (int_a - int_b) / (hi - lo);
    Ok((10f64.powf(avg_diff) - 1.0) * 100.0)
}

fn min_quality(c: &[(f64, f64)]) -> f64 {
    c.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)
}

fn max_quality(c: &[(f64, f64)]) -> f64 {
    c.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max)
}

/// Least-squares cubic coefficients of log10(rate) as a function of quality.
fn fit_log_rate(curve: &[(f64, f64)]) -> Result<[f64; 4]> {
    if curve.len() < 4 {
        return Err(VoxvidError::Config("bd_rate: curves need at least 4 points".into()));
    }
    if curve.iter().any(|&(r, q)| !(r > 0.0) || !r.is_finite() || !q.is_finite()) {
        return Err(VoxvidError::Config("bd_rate: rates must be positive and finite".into()));
    }
    // Normal equations for the Vandermonde system in the quality variable.
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    for &(rate, q) in curve {
        let y = rate.log10();
        let powers = [1.0, q, q * q, q * q * q];
        for i in 0..4 {
            atb[i] += powers[i] * y;
            for j in 0..4 {
                ata[i][j] += powers[i] * powers[j];
            }
        }
    }
    solve4(ata, atb)
        .ok_or_else(|| VoxvidError::Config("bd_rate: degenerate fit (repeated qualities?)".into()))
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let mut piv = col;
        for row in col + 1..4 {
            if a[row][col].abs() > a[piv][col].abs() {
                piv = row;
            }
        }
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for col in (0..4).rev() {
        let mut acc = b[col];
        for k in col + 1..4 {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

fn integrate_cubic(p: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let anti = |x: f64| {
        p[0] * x + p[1] * x * x / 2.0 + p[2] * x.powi(3) / 3.0 + p[3] * x.powi(4) / 4.0
    };
    anti(hi) - anti(lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use voxvid_core::math::{hash2, unit_f64};

    fn noisy(seed: u64, w: u32, h: u32) -> Image {
        let mut img = Image::new(w, h);
        for (i, px) in img.pixels.iter_mut().enumerate() {
            for c in 0..3 {
                px[c] = unit_f64(hash2(seed, (i * 3 + c) as u64));
            }
        }
        img
    }

    #[test]
    fn identical_images_hit_the_sentinels() {
        let img = noisy(1, 16, 16);
        assert!(psnr(&img, &img).unwrap().is_infinite());
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_gives_twenty_db() {
        let mut a = Image::new(12, 12);
        let mut b = Image::new(12, 12);
        for (x, y) in a.pixels.iter_mut().zip(b.pixels.iter_mut()) {
            *x = [0.4; 3];
            *y = [0.5; 3];
        }
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-12);
        // PSNR is symmetric.
        assert_eq!(p, psnr(&b, &a).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = noisy(1, 16, 16);
        let b = noisy(1, 16, 12);
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn ssim_is_bounded_and_penalizes_noise() {
        let a = noisy(1, 20, 20);
        let b = noisy(2, 20, 20);
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert!(s < 0.9);
    }

    #[test]
    fn bd_rate_of_a_curve_against_itself_is_zero() {
        let curve = [(100.0, 30.0), (150.0, 32.0), (230.0, 34.0), (400.0, 36.0)];
        let d = bd_rate(&curve, &curve).unwrap();
        assert!(d.abs() < 1e-9);
    }

    #[test]
    fn bd_rate_sign_and_antisymmetry() {
        let a = [(80.0, 30.0), (120.0, 32.0), (190.0, 34.0), (320.0, 36.0)];
        // b needs ~25% more rate at the same quality.
        let b: Vec<(f64, f64)> = a.iter().map(|&(r, q)| (r * 1.25, q)).collect();
        let d_ab = bd_rate(&a, &b).unwrap();
        assert!((d_ab - (1.0 / 1.25 - 1.0) * 100.0).abs() < 1e-6, "{d_ab}");
        let d_ba = bd_rate(&b, &a).unwrap();
        assert!((d_ab + d_ba).abs() < 7.0, "{d_ab} vs {d_ba}");
        assert!(d_ab < 0.0 && d_ba > 0.0);
    }

    #[test]
    fn bd_rate_requires_enough_points() {
        let short = [(100.0, 30.0), (200.0, 33.0), (300.0, 35.0)];
        assert!(bd_rate(&short, &short).is_err());
    }
}
