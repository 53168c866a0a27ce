//! Multi-scale structural similarity on `n × c × h × w` images.
//!
//! Per scale `j`, with Gaussian-window local moments:
//!
//! ```text
//! l  = (2 μx μy + C1) / (μx² + μy² + C1)
//! cs = (2 σxy + C2) / (σx² + σy² + C2)
//! ```
//!
//! `cs` is the product of the contrast and structure terms, which collapses
//! to the form above when `C3 = C2 / 2`. Scales `1..M−1` contribute
//! `mean(cs)`, the coarsest scale `mean(l · cs)`; each is clamped at zero and
//! raised to its weight. Values are per (image, channel) and averaged.

use crate::error::{config_err, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Debug, PartialEq)]
pub struct MsSsimConfig {
    pub scales: usize,
    pub weights: Vec<f64>,
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl MsSsimConfig {
    /// `scales` levels. Five scales use the standard weights as published
    /// (they sum to 1.0001); fewer scales truncate and renormalize them.
    pub fn standard(scales: usize) -> Result<Self> {
        if !(1..=MSSSIM_WEIGHTS.len()).contains(&scales) {
            return config_err(format!("MS-SSIM supports 1 to 5 scales, got {scales}"));
        }
        let head = &MSSSIM_WEIGHTS[..scales];
        let total: f64 = head.iter().sum();
        let weights = if scales == MSSSIM_WEIGHTS.len() {
            head.to_vec()
        } else {
            head.iter().map(|w| w / total).collect()
        };
        Ok(Self {
            scales,
            weights,
            window: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        })
    }

    pub fn c3(&self) -> f64 {
        self.c2 / 2.0
    }

    /// Smallest spatial extent accepted.
    pub fn min_size(&self) -> usize {
        self.window << (self.scales - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.weights.len() != self.scales {
            return config_err("MS-SSIM needs one weight per scale");
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-3 || self.weights.iter().any(|&w| w < 0.0) {
            return config_err("MS-SSIM weights must be non-negative and sum to 1");
        }
        if self.window == 0 || self.window.is_multiple_of(2) || self.sigma <= 0.0 {
            return config_err("MS-SSIM window must be odd with positive sigma");
        }
        if self.c1 <= 0.0 || self.c2 <= 0.0 {
            return config_err("MS-SSIM stability constants must be positive");
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self::standard(5).expect("five scales are supported")
    }
}

/// Differentiable MS-SSIM averaged over images and channels; returns a
/// scalar.
pub fn ms_ssim_tape<T: Real>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    cfg: &MsSsimConfig,
) -> Result<Var> {
    let per = ms_ssim_per_channel(tape, a, b, cfg)?;
    Ok(tape.mean(per))
}

/// Differentiable MS-SSIM per (image, channel): shape `[n, c]`.
pub fn ms_ssim_per_channel<T: Real>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    cfg: &MsSsimConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (_, _, h, w) = tape.value(a).dims4()?;
    if tape.shape(a) != tape.shape(b) {
        return Err(crate::Error::Shape("MS-SSIM inputs differ in shape".into()));
    }
    let min = cfg.min_size();
    if h < min || w < min {
        return config_err(format!(
            "MS-SSIM with {} scales needs images of at least {min}x{min}, got {h}x{w}",
            cfg.scales
        ));
    }
    let taps = cfg.taps();
    let (mut x, mut y) = (a, b);
    let mut acc: Option<Var> = None;
    for (j, &weight) in cfg.weights.iter().enumerate() {
        if j > 0 {
            x = tape.avg_pool2(x)?;
            y = tape.avg_pool2(y)?;
        }
        let mx = tape.blur(x, &taps)?;
        let my = tape.blur(y, &taps)?;
        let x2 = tape.square(x);
        let y2 = tape.square(y);
        let xy = tape.mul(x, y)?;
        let exx = tape.blur(x2, &taps)?;
        let eyy = tape.blur(y2, &taps)?;
        let exy = tape.blur(xy, &taps)?;
        let mx2 = tape.square(mx);
        let my2 = tape.square(my);
        let mxy = tape.mul(mx, my)?;
        let sx = tape.sub(exx, mx2)?;
        let sy = tape.sub(eyy, my2)?;
        let sxy = tape.sub(exy, mxy)?;
        let num = tape.scale(sxy, 2.0);
        let num = tape.add_scalar(num, cfg.c2);
        let den = tape.add(sx, sy)?;
        let den = tape.add_scalar(den, cfg.c2);
        let mut cs = tape.div(num, den)?;
        if j + 1 == cfg.scales {
            let ln = tape.scale(mxy, 2.0);
            let ln = tape.add_scalar(ln, cfg.c1);
            let ld = tape.add(mx2, my2)?;
            let ld = tape.add_scalar(ld, cfg.c1);
            let l = tape.div(ln, ld)?;
            cs = tape.mul(l, cs)?;
        }
        let m = tape.mean_hw(cs)?;
        let term = tape.pow(m, weight);
        acc = Some(match acc {
            None => term,
            Some(p) => tape.mul(p, term)?,
        });
    }
    Ok(acc.expect("at least one scale"))
}

/// Value-level MS-SSIM in 64-bit precision.
pub fn ms_ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, cfg: &MsSsimConfig) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(a.cast());
    let y = tape.constant(b.cast());
    let v = ms_ssim_tape(&mut tape, x, y, cfg)?;
    Ok(tape.value(v).data()[0])
}
