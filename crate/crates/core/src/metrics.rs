//! Full-reference image metrics and the evaluation report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hccm::{image_histogram, BINS};
use crate::imaging::{GrayImage, RgbImage, LUMA_WEIGHTS};

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` over all channels, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn luma(img: &RgbImage) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| (0..3).map(|c| LUMA_WEIGHTS[c] as f64 * p[c] as f64).sum())
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of a `w×h` plane.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..n).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..n).map(|i| k[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM of the BT.601 luma planes with an 11×11 Gaussian
/// window (σ = 1.5) over the valid region.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_shape(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let (x, y) = (luma(a), luma(b));
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, w, h, &k);
    let my = filter_valid(&y, w, h, &k);
    let mxx = filter_valid(&prod(&x, &x), w, h, &k);
    let myy = filter_valid(&prod(&y, &y), w, h, &k);
    let mxy = filter_valid(&prod(&x, &y), w, h, &k);
    let n = mx.len() as f64;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2))
        })
        .sum();
    Ok(total / n)
}

/// Per-pixel channel-mean absolute difference.
pub fn error_map(out: &RgbImage, gt: &RgbImage) -> Result<GrayImage> {
    same_shape(out, gt)?;
    let data = out
        .data()
        .chunks_exact(3)
        .zip(gt.data().chunks_exact(3))
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).abs()).sum::<f32>() / 3.0)
        .collect();
    GrayImage::new(out.width(), out.height(), data)
}

/// RMS difference of the two images' soft histograms.
pub fn histogram_l2(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let ha = image_histogram(a)?.flatten_all()?.to_vec1::<f64>()?;
    let hb = image_histogram(b)?.flatten_all()?.to_vec1::<f64>()?;
    let ss: f64 = ha.iter().zip(&hb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((ss / (3 * BINS) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub histogram_l2: Option<f64>,
    /// Set when this image failed; its metrics are then absent.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Means over the rows that completed.
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_histogram_l2: f64,
    pub config_fingerprint: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, config_fingerprint: String, seed: u64) -> Self {
        let mean = |f: fn(&EvalRow) -> Option<f64>| {
            let v: Vec<f64> = rows.iter().filter_map(f).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        Self {
            mean_psnr_db: mean(|r| r.psnr_db),
            mean_ssim: mean(|r| r.ssim),
            mean_histogram_l2: mean(|r| r.histogram_l2),
            rows,
            config_fingerprint,
            seed,
        }
    }

    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.error.is_none())
    }

    /// JSON document; non-finite means are written as `null`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::new(w, h, (0..w * h * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = random(8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let g = RgbImage::filled(4, 4, [0.5; 3]);
        let g2 = RgbImage::filled(4, 4, [0.6; 3]);
        // Shifting by 0.1 everywhere gives MSE 0.01.
        assert!((psnr(&g, &g2).unwrap() - 20.0).abs() < 1e-5);
        let b = random(8, 8, 2);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &random(4, 8, 2)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = random(16, 16, 1);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let g = RgbImage::filled(12, 12, [0.5; 3]);
        let g2 = RgbImage::filled(12, 12, [0.6; 3]);
        let expect = (2.0 * 0.5 * 0.6 + C1) / (0.25 + 0.36 + C1);
        assert!((ssim(&g, &g2).unwrap() - expect).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bits: Vec<f32> = (0..16 * 16)
            .flat_map(|_| [if rng.random::<bool>() { 1.0 } else { 0.0 }; 3])
            .collect();
        let inv: Vec<f32> = bits.iter().map(|v| 1.0 - v).collect();
        let p = RgbImage::new(16, 16, bits).unwrap();
        let q = RgbImage::new(16, 16, inv).unwrap();
        assert!(ssim(&p, &q).unwrap() < 0.0);
        assert!(ssim(&random(10, 16, 1), &random(10, 16, 2)).is_err());
    }

    #[test]
    fn error_map_examples() {
        let a = random(5, 4, 1);
        assert!(error_map(&a, &a).unwrap().data().iter().all(|v| *v == 0.0));
        let mut data = a.data().to_vec();
        data[3 * 7] = if data[3 * 7] > 0.5 { 0.0 } else { 1.0 };
        let full = (a.data()[3 * 7] - data[3 * 7]).abs();
        let b = RgbImage::new(5, 4, data).unwrap();
        let m = error_map(&a, &b).unwrap();
        assert!((m.data()[7] - full / 3.0).abs() < 1e-7);
        assert_eq!(m, error_map(&b, &a).unwrap());
        let black = RgbImage::filled(1, 1, [0.0; 3]);
        let red = RgbImage::filled(1, 1, [1.0, 0.0, 0.0]);
        assert!((error_map(&black, &red).unwrap().data()[0] - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn report_means_match_rows() {
        let rows = vec![
            EvalRow {
                id: "a".into(),
                psnr_db: Some(20.0),
                ssim: Some(0.5),
                histogram_l2: Some(0.1),
                error: None,
            },
            EvalRow {
                id: "b".into(),
                psnr_db: Some(30.0),
                ssim: Some(0.7),
                histogram_l2: Some(0.3),
                error: None,
            },
        ];
        let r = EvalReport::from_rows(rows, "f".into(), 0);
        assert!((r.mean_psnr_db - 25.0).abs() < 1e-9);
        assert!((r.mean_ssim - 0.6).abs() < 1e-9);
        assert!(r.all_ok());
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
