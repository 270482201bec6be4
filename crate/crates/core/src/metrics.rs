//! Image quality metrics and relative error-reduction arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::IntensityImage;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    /// `None` when the image is smaller than the SSIM window.
    pub ssim: Option<f64>,
    pub rmse_reduction: Option<f64>,
    pub dssim_reduction: Option<f64>,
}

impl MetricReport {
    pub fn compare(pred: &IntensityImage, gt: &IntensityImage) -> Result<Self> {
        let psnr = psnr(pred, gt)?;
        let ssim = if pred.width().min(pred.height()) >= SSIM_WINDOW {
            Some(ssim(pred, gt)?)
        } else {
            None
        };
        Ok(MetricReport {
            psnr,
            ssim,
            rmse_reduction: None,
            dssim_reduction: None,
        })
    }

    /// Fills in the reductions relative to a baseline method's scores.
    pub fn with_baseline(mut self, baseline_psnr: Option<f64>, baseline_ssim: Option<f64>) -> Result<Self> {
        self.rmse_reduction = baseline_psnr.map(|b| rmse_reduction(self.psnr, b));
        self.dssim_reduction = match (self.ssim, baseline_ssim) {
            (Some(s), Some(b)) => Some(dssim_reduction(s, b)?),
            _ => None,
        };
        Ok(self)
    }
}

fn same_dims(a: &IntensityImage, b: &IntensityImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dims(format!("images are {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse(a: &IntensityImage, b: &IntensityImage) -> Result<f64> {
    same_dims(a, b)?;
    let sum: f64 = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(sum / a.pixels().len() as f64)
}

/// Peak signal-to-noise ratio in dB for peak 1.0; [`PSNR_CAP`] for identical
/// images.
pub fn psnr(a: &IntensityImage, b: &IntensityImage) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM over all fully-contained 11x11 Gaussian windows (no padding),
/// dynamic range 1.0.
pub fn ssim(a: &IntensityImage, b: &IntensityImage) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::param(format!(
            "{w}x{h} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (pa, pb) = (a.pixels(), b.pixels());
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (ky, gy) in g.iter().enumerate() {
                let row = (oy + ky) * w + ox;
                for (kx, gx) in g.iter().enumerate() {
                    let wt = gy * gx;
                    let (x, y) = (pa[row + kx], pb[row + kx]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
    }
    Ok(total / (ow * oh) as f64)
}

/// Percentage by which the better method's RMSE undercuts the other's, from
/// PSNR values: `100 (1 - 10^(-(best - other) / 20))`.
pub fn rmse_reduction(psnr_best: f64, psnr_other: f64) -> f64 {
    100.0 * (1.0 - 10f64.powf(-(psnr_best - psnr_other) / 20.0))
}

/// Percentage by which the better method's DSSIM `(1 - SSIM) / 2` undercuts
/// the other's.
pub fn dssim_reduction(ssim_best: f64, ssim_other: f64) -> Result<f64> {
    if ssim_best > 1.0 || ssim_other > 1.0 {
        return Err(Error::param(format!(
            "SSIM values must be <= 1, got {ssim_best} and {ssim_other}"
        )));
    }
    if ssim_other == 1.0 {
        return Err(Error::param(
            "comparison method has SSIM 1; DSSIM reduction is undefined",
        ));
    }
    Ok(100.0 * (1.0 - (1.0 - ssim_best) / (1.0 - ssim_other)))
}
