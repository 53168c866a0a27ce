//! Quality and rate metrics.

mod bd;
mod msssim;

pub use bd::{bd_psnr, bd_rate, fit_cubic, RdCurve};
pub use msssim::{ms_ssim, ms_ssim_per_channel, ms_ssim_tape, MsSsimConfig, MSSSIM_WEIGHTS};

use crate::error::{shape_err, Result};

/// Reported PSNR for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

/// One operating point of a rate-distortion curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return shape_err(format!(
            "cannot compare {} and {} samples",
            a.len(),
            b.len()
        ));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

/// Full-range BT.601 conversion of one `[0,1]` RGB triple.
pub fn rgb_to_yuv_pixel([r, g, b]: [f64; 3]) -> [f64; 3] {
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168_736 * r - 0.331_264 * g + 0.5 * b + 0.5,
        0.5 * r - 0.418_688 * g - 0.081_312 * b + 0.5,
    ]
}

/// Convert a planar `3 × h × w` RGB image to planar YUV.
pub fn rgb_to_yuv(rgb: &[f64]) -> Result<Vec<f64>> {
    if !rgb.len().is_multiple_of(3) || rgb.is_empty() {
        return shape_err("planar RGB data must hold three equal planes");
    }
    let plane = rgb.len() / 3;
    let mut out = vec![0.0; rgb.len()];
    for i in 0..plane {
        let yuv = rgb_to_yuv_pixel([rgb[i], rgb[plane + i], rgb[2 * plane + i]]);
        for (c, v) in yuv.into_iter().enumerate() {
            out[c * plane + i] = v;
        }
    }
    Ok(out)
}

/// `(6·PSNR_Y + PSNR_U + PSNR_V) / 8` on planar `[0,1]` RGB images.
pub fn psnr_yuv(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return shape_err("images differ in size");
    }
    let (ya, yb) = (rgb_to_yuv(a)?, rgb_to_yuv(b)?);
    let plane = a.len() / 3;
    let p = |c: usize| {
        psnr(
            &ya[c * plane..(c + 1) * plane],
            &yb[c * plane..(c + 1) * plane],
            1.0,
        )
    };
    Ok((6.0 * p(0)? + p(1)? + p(2)?) / 8.0)
}
