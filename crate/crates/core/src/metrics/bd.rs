//! Bjontegaard delta metrics.

use nalgebra::{DMatrix, DVector};

use super::RdPoint;
use crate::error::{config_err, Error, Result};

/// Rate/quality samples of one codec, rates strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub rate: Vec<f64>,
    pub quality: Vec<f64>,
}

impl RdCurve {
    pub fn new(rate: Vec<f64>, quality: Vec<f64>) -> Result<Self> {
        if rate.len() != quality.len() {
            return config_err("rate and quality lists differ in length");
        }
        if rate.len() < 4 {
            return config_err(format!(
                "BD metrics need at least 4 points, got {}",
                rate.len()
            ));
        }
        if rate.iter().chain(&quality).any(|v| !v.is_finite()) || rate.iter().any(|&r| r <= 0.0) {
            return config_err("rates must be positive and all values finite");
        }
        if rate.windows(2).any(|w| w[1] <= w[0]) {
            return config_err("rates must be strictly increasing");
        }
        Ok(Self { rate, quality })
    }

    /// PSNR-vs-bpp curve from R-D points.
    pub fn psnr(points: &[RdPoint]) -> Result<Self> {
        Self::new(
            points.iter().map(|p| p.bpp).collect(),
            points.iter().map(|p| p.psnr).collect(),
        )
    }

    fn log_rate(&self) -> Vec<f64> {
        self.rate.iter().map(|r| r.ln()).collect()
    }
}

/// Least-squares cubic `c0 + c1 x + c2 x² + c3 x³`.
pub fn fit_cubic(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    if x.len() != y.len() || x.len() < 4 {
        return config_err("a cubic fit needs at least 4 paired samples");
    }
    let a = DMatrix::from_fn(x.len(), 4, |i, j| x[i].powi(j as i32));
    let b = DVector::from_column_slice(y);
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::Domain(format!("cubic fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

/// Cubic fitted in the standardized variable `t = (x − shift) / scale`.
struct Cubic {
    c: [f64; 4],
    shift: f64,
    scale: f64,
}

impl Cubic {
    fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len() as f64;
        let shift = x.iter().sum::<f64>() / n;
        let scale = (x.iter().map(|v| (v - shift).powi(2)).sum::<f64>() / n).sqrt();
        if scale.is_nan() || scale <= 0.0 {
            return Err(Error::Domain("cubic fit over a single abscissa".into()));
        }
        let t: Vec<f64> = x.iter().map(|v| (v - shift) / scale).collect();
        Ok(Self {
            c: fit_cubic(&t, y)?,
            shift,
            scale,
        })
    }

    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let c = &self.c;
        let anti = |x: f64| {
            let t = (x - self.shift) / self.scale;
            t * (c[0] + t * (c[1] / 2.0 + t * (c[2] / 3.0 + t * c[3] / 4.0)))
        };
        (anti(hi) - anti(lo)) * self.scale
    }
}

fn overlap(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = min(a).max(min(b));
    let hi = max(a).min(max(b));
    if hi <= lo {
        return Err(Error::Domain(format!(
            "curves do not overlap ([{}, {}] vs [{}, {}])",
            min(a),
            max(a),
            min(b),
            max(b)
        )));
    }
    Ok((lo, hi))
}

/// Average rate difference of `test` against `anchor` in percent at equal
/// quality; negative means `test` needs fewer bits.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let (la, lt) = (anchor.log_rate(), test.log_rate());
    let pa = Cubic::fit(&anchor.quality, &la)?;
    let pt = Cubic::fit(&test.quality, &lt)?;
    let (lo, hi) = overlap(&anchor.quality, &test.quality)?;
    let diff = (pt.integral(lo, hi) - pa.integral(lo, hi)) / (hi - lo);
    Ok((diff.exp() - 1.0) * 100.0)
}

/// Average quality difference of `test` against `anchor` at equal rate.
pub fn bd_psnr(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let (la, lt) = (anchor.log_rate(), test.log_rate());
    let pa = Cubic::fit(&la, &anchor.quality)?;
    let pt = Cubic::fit(&lt, &test.quality)?;
    let (lo, hi) = overlap(&la, &lt)?;
    Ok((pt.integral(lo, hi) - pa.integral(lo, hi)) / (hi - lo))
}
