//! The five-stage octave encoder and decoder, the variable-rate losses and
//! the trainer.

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use loss::{loss_l2, loss_msssim, total_loss, LossParts};
pub use train::{train, EpochReport, StepRecord, TrainConfig, TrainLog};

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, shape_err, Result};
use crate::octave::{
    goconv, goconv_first, gores, gotconv, gotconv_last, gotres, ChannelSplit, GoConvParams,
    NormKind, OctavePair, ResParams,
};
use crate::quant::{check_bits, ste_quantize, Quantizer};
use crate::tensor::{ParamStore, ParamVars, Real, Tape, Tensor, Var};

/// Spatial granularity of model inputs.
pub const SIZE_MULTIPLE: usize = 16;
/// Smallest input extent: the low-resolution code map must exceed the
/// reflection padding of the 7×7 stages.
pub const MIN_INPUT: usize = 64;
const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Low-resolution ratio `alpha_num / alpha_den`.
    pub alpha_num: u8,
    pub alpha_den: u8,
    /// Stage widths; the last is the code-map channel count.
    pub widths: [usize; 5],
    pub outer_kernel: usize,
    pub inner_kernel: usize,
    pub use_gdn: bool,
    pub use_res: bool,
}

impl ModelConfig {
    /// Widths 64/128/256/512/8 with α = 1/2.
    pub fn full() -> Self {
        Self {
            widths: [64, 128, 256, 512, 8],
            ..Self::desk()
        }
    }

    /// Widths 16/32/64/128/8 with α = 1/2.
    pub fn desk() -> Self {
        Self {
            alpha_num: 1,
            alpha_den: 2,
            widths: [16, 32, 64, 128, 8],
            outer_kernel: 7,
            inner_kernel: 3,
            use_gdn: true,
            use_res: true,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha_num as f64 / self.alpha_den as f64
    }

    pub fn map_channels(&self) -> usize {
        self.widths[4]
    }

    pub fn split(&self, width: usize) -> Result<ChannelSplit> {
        ChannelSplit::new(width, self.alpha())
    }

    /// `(high, low)` code-map channel counts.
    pub fn map_split(&self) -> Result<ChannelSplit> {
        self.split(self.map_channels())
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_den == 0 || self.alpha_num == 0 || self.alpha_num >= self.alpha_den {
            return config_err(format!(
                "α = {}/{} must lie strictly between 0 and 1",
                self.alpha_num, self.alpha_den
            ));
        }
        let c = self.map_channels();
        if !(c * self.alpha_num as usize).is_multiple_of(self.alpha_den as usize) {
            return config_err(format!("α·c must be integral for c = {c}"));
        }
        for &w in &self.widths {
            self.split(w)?;
        }
        for k in [self.outer_kernel, self.inner_kernel] {
            if k % 2 == 0 || k > 15 {
                return config_err(format!("kernel size {k} must be odd and at most 15"));
            }
        }
        Ok(())
    }

    fn norm(&self) -> NormKind {
        if self.use_gdn {
            NormKind::Divisive
        } else {
            NormKind::Relu
        }
    }

    fn final_norm(&self) -> NormKind {
        if self.use_gdn {
            NormKind::Divisive
        } else {
            NormKind::Identity
        }
    }

    fn pad(&self) -> usize {
        self.outer_kernel / 2
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Ordered, distinct bit depths used by one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RateSet(Vec<u8>);

impl RateSet {
    pub fn new(mut bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return config_err("rate set is empty");
        }
        for &b in &bits {
            check_bits(b)?;
        }
        bits.sort_unstable();
        bits.dedup();
        Ok(Self(bits))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceOp {
    ReflectPad,
    GoConvFirst,
    GoConv,
    GoRes,
    GoTConv,
    GoTRes,
    GoTConvLast,
}

/// One executed layer with its output geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub stage: usize,
    pub op: TraceOp,
    pub kernel: usize,
    pub stride: usize,
    pub high: Vec<usize>,
    /// `None` for plain-tensor outputs.
    pub low: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    conv: GoConvParams,
    res: Option<ResParams>,
}

#[derive(Clone, Debug, PartialEq)]
struct Encoder {
    first: GoConvParams,
    stages: Vec<Stage>,
    last: GoConvParams,
}

#[derive(Clone, Debug, PartialEq)]
struct Decoder {
    stages: Vec<Stage>,
    down: GoConvParams,
    last: GoConvParams,
}

/// Encoder parameters Φ and decoder parameters Ψ in one ordered store.
#[derive(Debug)]
pub struct CodecModel<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoder: Encoder,
    decoder: Decoder,
    encoder_calls: AtomicUsize,
}

impl<T: Real> Clone for CodecModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            encoder_calls: AtomicUsize::new(self.encoder_calls()),
        }
    }
}

impl<T: Real> CodecModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (ko, ki) = (config.outer_kernel, config.inner_kernel);
        let w = config.widths;
        let norm = config.norm();
        let split = |i: usize| config.split(w[i]);

        let first = GoConvParams::first(
            &mut store,
            &mut rng,
            "enc.0",
            IMAGE_CHANNELS,
            split(0)?,
            ko,
            true,
            norm,
        )?;
        let mut enc_stages = Vec::new();
        for i in 1..4 {
            let conv = GoConvParams::standard(
                &mut store,
                &mut rng,
                &format!("enc.{i}"),
                split(i - 1)?,
                split(i)?,
                ki,
                2,
                false,
                false,
                norm,
            )?;
            let res = if config.use_res {
                Some(ResParams::init(
                    &mut store,
                    &mut rng,
                    &format!("enc.{i}.res"),
                    split(i)?,
                    ki,
                    false,
                    norm,
                )?)
            } else {
                None
            };
            enc_stages.push(Stage { conv, res });
        }
        let enc_last = GoConvParams::standard(
            &mut store,
            &mut rng,
            "enc.4",
            split(3)?,
            split(4)?,
            ko,
            1,
            true,
            false,
            config.final_norm(),
        )?;

        let mut dec_stages = Vec::new();
        for (i, (from, to, k, stride, pre)) in [
            (4, 3, ko, 1, true),
            (3, 2, ki, 2, false),
            (2, 1, ki, 2, false),
        ]
        .into_iter()
        .enumerate()
        {
            let conv = GoConvParams::standard(
                &mut store,
                &mut rng,
                &format!("dec.{i}"),
                split(from)?,
                split(to)?,
                k,
                stride,
                pre,
                true,
                norm,
            )?;
            let res = if config.use_res {
                Some(ResParams::init(
                    &mut store,
                    &mut rng,
                    &format!("dec.{i}.res"),
                    split(to)?,
                    ki,
                    true,
                    norm,
                )?)
            } else {
                None
            };
            dec_stages.push(Stage { conv, res });
        }
        let down = GoConvParams::standard(
            &mut store,
            &mut rng,
            "dec.3",
            split(1)?,
            split(0)?,
            ki,
            2,
            false,
            true,
            norm,
        )?;
        let dec_last = GoConvParams::last(
            &mut store,
            &mut rng,
            "dec.4",
            split(0)?,
            IMAGE_CHANNELS,
            ko,
            true,
            config.final_norm(),
        )?;

        Ok(Self {
            config,
            store,
            encoder: Encoder {
                first,
                stages: enc_stages,
                last: enc_last,
            },
            decoder: Decoder {
                stages: dec_stages,
                down,
                last: dec_last,
            },
            encoder_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Number of encoder invocations since construction.
    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    /// Number of normalization parameter tensors (β and γ surrogates).
    pub fn gdn_param_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.name.contains(".norm_"))
            .count()
    }

    /// Same architecture and values at another precision.
    pub fn cast<U: Real>(&self) -> CodecModel<U> {
        CodecModel {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            encoder_calls: AtomicUsize::new(0),
        }
    }

    /// Check an image batch against the encoder input contract.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return shape_err(format!("expected an n×3×h×w batch, got {shape:?}"));
        };
        if *c != IMAGE_CHANNELS {
            return shape_err(format!("expected 3 image channels, got {c}"));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 || *h < MIN_INPUT || *w < MIN_INPUT {
            return shape_err(format!(
                "image {h}x{w} must be a multiple of {SIZE_MULTIPLE} and at least {MIN_INPUT}"
            ));
        }
        Ok(())
    }

    /// Expected code-map shapes `(high, low)` for an `n × 3 × h × w` input.
    pub fn map_shapes(&self, n: usize, h: usize, w: usize) -> Result<([usize; 4], [usize; 4])> {
        let s = self.config.map_split()?;
        Ok(([n, s.high, h / 8, w / 8], [n, s.low, h / 16, w / 16]))
    }

    pub fn encode(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<OctavePair<Var>> {
        self.encode_traced(tape, pv, x, &mut Vec::new())
    }

    pub fn encode_traced(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        x: Var,
        trace: &mut Vec<TraceEntry>,
    ) -> Result<OctavePair<Var>> {
        self.check_input(tape.shape(x))?;
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        let pad = self.config.pad();
        let e = &self.encoder;
        let x = tape.reflect_pad(x, pad)?;
        push_plain(trace, tape, 1, TraceOp::ReflectPad, 0, 0, x);
        let mut y = goconv_first(tape, pv, x, &e.first)?;
        push_pair(trace, tape, 1, TraceOp::GoConvFirst, &e.first, y);
        for (i, st) in e.stages.iter().enumerate() {
            y = goconv(tape, pv, &y, &st.conv)?;
            push_pair(trace, tape, i + 2, TraceOp::GoConv, &st.conv, y);
            if let Some(r) = &st.res {
                y = gores(tape, pv, &y, r)?;
                push_pair(trace, tape, i + 2, TraceOp::GoRes, &r.first, y);
            }
        }
        let y = pad_pair(tape, y, pad)?;
        push_pair_raw(trace, tape, 5, TraceOp::ReflectPad, 0, 0, y);
        let y = goconv(tape, pv, &y, &e.last)?;
        push_pair(trace, tape, 5, TraceOp::GoConv, &e.last, y);
        Ok(y)
    }

    pub fn decode(&self, tape: &mut Tape<T>, pv: &ParamVars, y: OctavePair<Var>) -> Result<Var> {
        self.decode_traced(tape, pv, y, &mut Vec::new())
    }

    pub fn decode_traced(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        y: OctavePair<Var>,
        trace: &mut Vec<TraceEntry>,
    ) -> Result<Var> {
        let (n, ch, cl, h, w) = y.dims(tape)?;
        let s = self.config.map_split()?;
        if ch != s.high || cl != s.low {
            return Err(crate::Error::Contract(format!(
                "decoder expects {}+{} map channels, got {ch}+{cl}",
                s.high, s.low
            )));
        }
        self.check_input(&[n, IMAGE_CHANNELS, h * 8, w * 8])
            .map_err(|e| {
                crate::Error::Contract(format!("code maps do not match an encoder output: {e}"))
            })?;
        let pad = self.config.pad();
        let d = &self.decoder;
        let mut y = pad_pair(tape, y, pad)?;
        push_pair_raw(trace, tape, 1, TraceOp::ReflectPad, 0, 0, y);
        for (i, st) in d.stages.iter().enumerate() {
            y = gotconv(tape, pv, &y, &st.conv)?;
            push_pair(trace, tape, i + 1, TraceOp::GoTConv, &st.conv, y);
            if let Some(r) = &st.res {
                y = gotres(tape, pv, &y, r)?;
                push_pair(trace, tape, i + 1, TraceOp::GoTRes, &r.first, y);
            }
        }
        y = gotconv(tape, pv, &y, &d.down)?;
        push_pair(trace, tape, 4, TraceOp::GoTConv, &d.down, y);
        let y = pad_pair(tape, y, pad)?;
        push_pair_raw(trace, tape, 5, TraceOp::ReflectPad, 0, 0, y);
        let out = gotconv_last(tape, pv, &y, &d.last)?;
        push_plain(
            trace,
            tape,
            5,
            TraceOp::GoTConvLast,
            d.last.kernel,
            d.last.stride,
            out,
        );
        Ok(out)
    }

    /// Code maps of an image batch with values in `[0, 1]`.
    pub fn encode_features(&self, x: &Tensor<T>) -> Result<OctavePair<Tensor<T>>> {
        let mut tape = Tape::new();
        let pv = tape.bind_params(&self.store);
        let xv = tape.constant(x.clone());
        let y = self.encode(&mut tape, &pv, xv)?;
        Ok(OctavePair::new(
            tape.value(y.high).clone(),
            tape.value(y.low).clone(),
        ))
    }

    /// Reconstruction from (dequantized) code maps.
    pub fn decode_features(&self, y: OctavePair<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pv = tape.bind_params(&self.store);
        let h = tape.constant(y.high.clone());
        let l = tape.constant(y.low.clone());
        let out = self.decode(&mut tape, &pv, OctavePair::new(h, l))?;
        Ok(tape.value(out).clone())
    }

    /// Encoder and decoder traces for an `n × 3 × h × w` input of zeros.
    pub fn trace(
        &self,
        n: usize,
        h: usize,
        w: usize,
    ) -> Result<(Vec<TraceEntry>, Vec<TraceEntry>)> {
        let mut tape = Tape::new();
        let pv = tape.bind_params(&self.store);
        let x = tape.constant(Tensor::zeros(&[n, IMAGE_CHANNELS, h, w]));
        let (mut enc, mut dec) = (Vec::new(), Vec::new());
        let y = self.encode_traced(&mut tape, &pv, x, &mut enc)?;
        self.decode_traced(&mut tape, &pv, y, &mut dec)?;
        Ok((enc, dec))
    }

    /// Encode once, then quantize at every rate in `rates`, dequantize and
    /// decode. Gradients pass the quantizers straight through.
    pub fn variable_rate_forward(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        x: Var,
        rates: &RateSet,
        q: &mut Quantizer,
    ) -> Result<Vec<(u8, Var)>> {
        let y = self.encode(tape, pv, x)?;
        let mut out = Vec::with_capacity(rates.len());
        for &b in rates.bits() {
            q.set_bits(b)?;
            let yq = ste_quantize(tape, q, y)?;
            out.push((b, self.decode(tape, pv, yq)?));
        }
        Ok(out)
    }
}

fn pad_pair<T: Real>(
    tape: &mut Tape<T>,
    y: OctavePair<Var>,
    pad: usize,
) -> Result<OctavePair<Var>> {
    let high = tape.reflect_pad(y.high, pad)?;
    let low = tape.reflect_pad(y.low, pad)?;
    Ok(OctavePair::new(high, low))
}

fn push_plain<T: Real>(
    trace: &mut Vec<TraceEntry>,
    tape: &Tape<T>,
    stage: usize,
    op: TraceOp,
    kernel: usize,
    stride: usize,
    v: Var,
) {
    trace.push(TraceEntry {
        stage,
        op,
        kernel,
        stride,
        high: tape.shape(v).to_vec(),
        low: None,
    });
}

fn push_pair_raw<T: Real>(
    trace: &mut Vec<TraceEntry>,
    tape: &Tape<T>,
    stage: usize,
    op: TraceOp,
    kernel: usize,
    stride: usize,
    y: OctavePair<Var>,
) {
    trace.push(TraceEntry {
        stage,
        op,
        kernel,
        stride,
        high: tape.shape(y.high).to_vec(),
        low: Some(tape.shape(y.low).to_vec()),
    });
}

fn push_pair<T: Real>(
    trace: &mut Vec<TraceEntry>,
    tape: &Tape<T>,
    stage: usize,
    op: TraceOp,
    layer: &GoConvParams,
    y: OctavePair<Var>,
) {
    push_pair_raw(trace, tape, stage, op, layer.kernel, layer.stride, y);
}
