//! Image similarity metrics on [0, 1] RGB images.

use serde::Serialize;

use crate::error::{arg_err, Result};
use crate::imaging::FloatImage;

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn check(a: &FloatImage, b: &FloatImage) -> Result<()> {
    if !a.same_shape(b) {
        return arg_err(format!(
            "metric operands differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ));
    }
    Ok(())
}

pub fn rmse(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    check(a, b)?;
    let n = a.data().len() as f64;
    let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    Ok((sq / n).sqrt())
}

pub fn psnr_from_rmse(rmse: f64) -> f64 {
    if rmse < 1e-5 {
        PSNR_CAP_DB
    } else {
        20.0 * (1.0 / rmse).log10()
    }
}

/// (PSNR in dB, RMSE).
pub fn metric_psnr_rmse(a: &FloatImage, b: &FloatImage) -> Result<(f64, f64)> {
    let r = rmse(a, b)?;
    Ok((psnr_from_rmse(r), r))
}

/// BT.601 luma.
pub fn grayscale(img: &FloatImage) -> Vec<f64> {
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    (0..r.len()).map(|i| 0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * b[i] as f64).collect()
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully contained Gaussian windows of the luma
/// channel; the window shrinks to the image for images under 11 pixels.
pub fn metric_ssim(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    check(a, b)?;
    let (h, w) = (a.height(), a.width());
    let win = SSIM_WINDOW.min(h).min(w);
    let g = gaussian_window(win);
    let (x, y) = (grayscale(a), grayscale(b));
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - win {
        for ox in 0..=w - win {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..win {
                for dx in 0..win {
                    let wgt = g[dy] * g[dx];
                    let p = (oy + dy) * w + ox + dx;
                    mx += wgt * x[p];
                    my += wgt * y[p];
                    sxx += wgt * x[p] * x[p];
                    syy += wgt * y[p] * y[p];
                    sxy += wgt * x[p] * y[p];
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct PairMetrics {
    pub name: String,
    pub ssim: f64,
    pub psnr: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub pairs: Vec<PairMetrics>,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
    pub mean_rmse: f64,
    /// Not computed in-repo: it needs a specific pretrained network.
    pub fid: Option<f64>,
}

impl MetricsReport {
    pub fn from_pairs(pairs: Vec<PairMetrics>) -> Result<Self> {
        if pairs.is_empty() {
            return arg_err("no image pairs to evaluate");
        }
        let n = pairs.len() as f64;
        let mean = |f: fn(&PairMetrics) -> f64| pairs.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            mean_ssim: mean(|p| p.ssim),
            mean_psnr: mean(|p| p.psnr),
            mean_rmse: mean(|p| p.rmse),
            pairs,
            fid: None,
        })
    }
}

pub fn evaluate_pair(name: &str, a: &FloatImage, b: &FloatImage) -> Result<PairMetrics> {
    let (psnr, rmse) = metric_psnr_rmse(a, b)?;
    Ok(PairMetrics { name: name.to_string(), ssim: metric_ssim(a, b)?, psnr, rmse })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(h: usize, w: usize) -> FloatImage {
        let mut img = FloatImage::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let v = if (x / 2 + y / 3) % 2 == 0 { 0.9 } else { 0.1 };
                img.set_pixel(y, x, [v, v * 0.5, 1.0 - v]);
            }
        }
        img
    }

    #[test]
    fn identities() {
        let a = pattern(16, 20);
        assert!((metric_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(metric_psnr_rmse(&a, &a).unwrap(), (PSNR_CAP_DB, 0.0));
        assert!(metric_ssim(&a, &pattern(16, 16)).is_err());
    }

    #[test]
    fn uniform_offset_psnr() {
        let a = FloatImage::filled(8, 8, [0.5; 3]);
        let b = FloatImage::filled(8, 8, [0.5 + 10.0 / 255.0; 3]);
        let (p, r) = metric_psnr_rmse(&a, &b).unwrap();
        assert!((p - 20.0 * (25.5f64).log10()).abs() < 1e-4);
        assert!((p - 28.13).abs() < 0.01);
        assert!((r - rmse(&b, &a).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn negative_structure_and_symmetry() {
        let a = pattern(12, 12);
        let mut neg = a.clone();
        for v in neg.data_mut() {
            *v = 1.0 - *v;
        }
        let s = metric_ssim(&a, &neg).unwrap();
        assert!(s < 0.0, "{s}");
        assert_eq!(s, metric_ssim(&neg, &a).unwrap());
    }
}
