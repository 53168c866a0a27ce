//! B-bit stochastic-rounding uniform scalar quantizer with a zero point.
//!
//! For one channel `y` with range `[min, max]`:
//!
//! ```text
//! Δ = (max − min) / (2^B − 1)
//! z = clamp(Round(−min / Δ), 0, 2^B − 1)
//! q = clamp(Round(y / Δ + ε) + z, 0, 2^B − 1),   ε ~ U[−½, ½)
//! ŷ = (q − z) · Δ
//! ```
//!
//! `Round` is half away from zero. The dither `ε` is measured in quantizer
//! steps, so `E[ŷ] = y` for every in-range `y`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, contract_err, shape_err, Result};
use crate::octave::OctavePair;
use crate::tensor::{Real, Tape, Tensor, Var};

pub const MIN_BITS: u8 = 1;
pub const MAX_BITS: u8 = 8;

pub fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return config_err(format!("bit depth {bits} outside [{MIN_BITS}, {MAX_BITS}]"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum QuantMode {
    #[default]
    Stochastic,
    /// `ε ≡ 0`.
    Deterministic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantizerConfig {
    pub bits: u8,
    pub mode: QuantMode,
    pub seed: u64,
}

impl QuantizerConfig {
    pub fn new(bits: u8, mode: QuantMode, seed: u64) -> Result<Self> {
        check_bits(bits)?;
        Ok(Self { bits, mode, seed })
    }

    pub fn deterministic(bits: u8) -> Result<Self> {
        Self::new(bits, QuantMode::Deterministic, 0)
    }
}

/// One quantized code-map channel.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedPlane {
    pub width: usize,
    pub height: usize,
    pub bits: u8,
    pub min_val: f32,
    pub max_val: f32,
    pub zero_point: u8,
    /// Row-major, each in `[0, 2^bits − 1]`.
    pub values: Vec<u8>,
}

fn levels(bits: u8) -> f64 {
    ((1u32 << bits) - 1) as f64
}

fn step_of(min: f32, max: f32, bits: u8) -> f64 {
    if max > min {
        (max as f64 - min as f64) / levels(bits)
    } else {
        0.0
    }
}

impl QuantizedPlane {
    /// Quantization step; zero for a constant plane.
    pub fn step(&self) -> f64 {
        step_of(self.min_val, self.max_val, self.bits)
    }

    pub fn max_code(&self) -> u8 {
        levels(self.bits) as u8
    }

    /// Check the structural invariants; used on decoded data.
    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.values.len() != self.width * self.height {
            return shape_err(format!(
                "plane {}x{} carries {} values",
                self.width,
                self.height,
                self.values.len()
            ));
        }
        let top = self.max_code();
        if self.zero_point > top || self.values.iter().any(|&v| v > top) {
            return contract_err(format!("plane value exceeds {top} for {} bits", self.bits));
        }
        if !(self.min_val.is_finite() && self.max_val.is_finite()) || self.min_val > self.max_val {
            return contract_err("plane range is not a finite ordered pair");
        }
        Ok(())
    }

    pub fn dequantize(&self) -> Vec<f64> {
        dequantize_channel(self)
    }
}

/// Stateful quantizer owning the dither stream.
#[derive(Clone, Debug)]
pub struct Quantizer {
    cfg: QuantizerConfig,
    rng: ChaCha8Rng,
}

impl Quantizer {
    pub fn new(cfg: QuantizerConfig) -> Result<Self> {
        check_bits(cfg.bits)?;
        Ok(Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn config(&self) -> QuantizerConfig {
        self.cfg
    }

    pub fn set_bits(&mut self, bits: u8) -> Result<()> {
        check_bits(bits)?;
        self.cfg.bits = bits;
        Ok(())
    }

    fn dither(&mut self) -> f64 {
        match self.cfg.mode {
            QuantMode::Stochastic => self.rng.gen::<f64>() - 0.5,
            QuantMode::Deterministic => 0.0,
        }
    }

    /// Quantize one scalar against a given grid; exposed for statistical tests.
    pub fn quantize_value(&mut self, y: f64, step: f64, zero_point: u8) -> u8 {
        let top = levels(self.cfg.bits);
        if step == 0.0 {
            return 0;
        }
        let eps = self.dither();
        ((y / step + eps).round() + zero_point as f64).clamp(0.0, top) as u8
    }

    /// Quantize a `width × height` plane.
    pub fn quantize_channel<T: Real>(
        &mut self,
        y: &[T],
        width: usize,
        height: usize,
    ) -> Result<QuantizedPlane> {
        if y.len() != width * height || y.is_empty() {
            return shape_err(format!("plane {width}x{height} given {} values", y.len()));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in y {
            let v = v.as_f64();
            if !v.is_finite() {
                return contract_err("cannot quantize a non-finite value");
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let bits = self.cfg.bits;
        let (min_val, max_val) = (lo as f32, hi as f32);
        let step = step_of(min_val, max_val, bits);
        let zero_point = if step > 0.0 {
            (-(min_val as f64) / step).round().clamp(0.0, levels(bits)) as u8
        } else {
            0
        };
        let values = y
            .iter()
            .map(|v| self.quantize_value(v.as_f64(), step, zero_point))
            .collect();
        Ok(QuantizedPlane {
            width,
            height,
            bits,
            min_val,
            max_val,
            zero_point,
            values,
        })
    }
}

/// `ŷ = (q − z)·Δ`; a constant plane dequantizes to its minimum.
pub fn dequantize_channel(qp: &QuantizedPlane) -> Vec<f64> {
    let step = qp.step();
    if step == 0.0 {
        return vec![qp.min_val as f64; qp.values.len()];
    }
    let z = qp.zero_point as f64;
    qp.values.iter().map(|&q| (q as f64 - z) * step).collect()
}

/// Quantize every channel of a batched code-map pair. Planes are ordered per
/// sample: all high-resolution channels, then all low-resolution channels.
pub fn quantize_pair<T: Real>(
    q: &mut Quantizer,
    pair: OctavePair<&Tensor<T>>,
) -> Result<Vec<QuantizedPlane>> {
    let (n, ch, hh, wh) = pair.high.dims4()?;
    let (nl, cl, hl, wl) = pair.low.dims4()?;
    if n != nl || hl * 2 != hh || wl * 2 != wh {
        return shape_err("code-map pair violates the half-resolution invariant");
    }
    let mut planes = Vec::with_capacity(n * (ch + cl));
    for s in 0..n {
        for (t, c, h, w) in [(pair.high, ch, hh, wh), (pair.low, cl, hl, wl)] {
            let area = h * w;
            for k in 0..c {
                let off = (s * c + k) * area;
                planes.push(q.quantize_channel(&t.data()[off..off + area], w, h)?);
            }
        }
    }
    Ok(planes)
}

/// Inverse of [`quantize_pair`]: rebuild the real-valued pair for a batch of
/// `n` samples with `channels` (high, low) channels.
pub fn dequantize_pair<T: Real>(
    planes: &[QuantizedPlane],
    n: usize,
    channels: (usize, usize),
) -> Result<OctavePair<Tensor<T>>> {
    let (ch, cl) = channels;
    if planes.len() != n * (ch + cl) || planes.is_empty() {
        return shape_err(format!(
            "expected {} planes, got {}",
            n * (ch + cl),
            planes.len()
        ));
    }
    let (wh, hh) = (planes[0].width, planes[0].height);
    let (wl, hl) = (wh / 2, hh / 2);
    let mut high = Vec::with_capacity(n * ch * wh * hh);
    let mut low = Vec::with_capacity(n * cl * wl * hl);
    for s in 0..n {
        let base = s * (ch + cl);
        for (i, p) in planes[base..base + ch + cl].iter().enumerate() {
            let (w, h, dst) = if i < ch {
                (wh, hh, &mut high)
            } else {
                (wl, hl, &mut low)
            };
            if p.width != w || p.height != h {
                return shape_err(format!(
                    "plane {i} of sample {s} is {}x{}, expected {w}x{h}",
                    p.width, p.height
                ));
            }
            dst.extend(dequantize_channel(p).into_iter().map(T::lit));
        }
    }
    Ok(OctavePair::new(
        Tensor::new(&[n, ch, hh, wh], high)?,
        Tensor::new(&[n, cl, hl, wl], low)?,
    ))
}

/// Quantize then dequantize a pair on the tape. The forward value is the
/// dequantized code map; the backward pass treats the quantizer as identity.
pub fn ste_quantize<T: Real>(
    tape: &mut Tape<T>,
    q: &mut Quantizer,
    pair: OctavePair<Var>,
) -> Result<OctavePair<Var>> {
    let (n, ch, cl, _, _) = pair.dims(tape)?;
    let planes = quantize_pair(
        q,
        OctavePair::new(tape.value(pair.high), tape.value(pair.low)),
    )?;
    let deq = dequantize_pair::<T>(&planes, n, (ch, cl))?;
    let high = tape.straight_through(pair.high, deq.high)?;
    let low = tape.straight_through(pair.low, deq.low)?;
    Ok(OctavePair::new(high, low))
}
