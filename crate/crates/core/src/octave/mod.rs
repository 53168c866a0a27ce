//! Octave layers: divisive normalization, generalized octave (transposed)
//! convolutions and the octave residual blocks.

mod gdn;
mod layers;

pub use gdn::{gdn, igdn, GdnParams, BETA_FLOOR};
pub use layers::{
    goconv, goconv_first, gores, gotconv, gotconv_last, gotres, BranchNorm, ConvUnit, GoConvParams,
    LayerKind, NormKind, ResParams,
};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Real, Tape, Var};

/// The `{high, low}` feature-map pair flowing through every octave layer.
/// The low-resolution member has exactly half the spatial extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OctavePair<X> {
    pub high: X,
    pub low: X,
}

impl<X> OctavePair<X> {
    pub fn new(high: X, low: X) -> Self {
        Self { high, low }
    }

    pub fn map<Y>(self, mut f: impl FnMut(X) -> Y) -> OctavePair<Y> {
        OctavePair {
            high: f(self.high),
            low: f(self.low),
        }
    }

    pub fn as_ref(&self) -> OctavePair<&X> {
        OctavePair {
            high: &self.high,
            low: &self.low,
        }
    }
}

impl OctavePair<Var> {
    /// Check the half-resolution invariant and return
    /// `(batch, c_high, c_low, h, w)` with `h × w` the high-branch extent.
    pub fn dims<T: Real>(&self, tape: &Tape<T>) -> Result<(usize, usize, usize, usize, usize)> {
        self.dims_padded(tape, 0)
    }

    /// As [`dims`](Self::dims) for a pair whose members were both
    /// reflection-padded by a total of `pad` pixels per axis; the returned
    /// extent excludes the padding.
    pub fn dims_padded<T: Real>(
        &self,
        tape: &Tape<T>,
        pad: usize,
    ) -> Result<(usize, usize, usize, usize, usize)> {
        let (n, ch, h, w) = tape.value(self.high).dims4()?;
        let (nl, cl, hl, wl) = tape.value(self.low).dims4()?;
        if h < pad || w < pad || hl < pad || wl < pad {
            return shape_err(format!("octave pair smaller than its padding {pad}"));
        }
        let (h, w, hl, wl) = (h - pad, w - pad, hl - pad, wl - pad);
        if n != nl {
            return shape_err(format!("octave pair batch mismatch {n} vs {nl}"));
        }
        if h % 2 != 0 || w % 2 != 0 || hl * 2 != h || wl * 2 != w {
            return shape_err(format!(
                "low branch {hl}x{wl} is not half of high branch {h}x{w}"
            ));
        }
        Ok((n, ch, cl, h, w))
    }
}

/// Channel split of a layer of total width `n`: `low = round(α·n)`,
/// `high = n − low`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelSplit {
    pub high: usize,
    pub low: usize,
}

impl ChannelSplit {
    pub fn new(width: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return config_err(format!("low-resolution ratio {alpha} must lie in (0, 1)"));
        }
        let low = (alpha * width as f64).round() as usize;
        if low == 0 || low >= width {
            return config_err(format!(
                "ratio {alpha} leaves an empty branch for width {width}"
            ));
        }
        Ok(Self {
            high: width - low,
            low,
        })
    }

    pub fn total(&self) -> usize {
        self.high + self.low
    }
}
