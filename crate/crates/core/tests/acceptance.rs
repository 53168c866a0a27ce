//! Acceptance suite. Run with `cargo test -p octacodec --test acceptance`;
//! pass criterion ids (`c1` .. `c8`) as extra arguments to run a subset.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use octacodec::bitstream::{
    decode_image, encode_image, entropy_encode_plane, raw_len, BackendId, Container,
    DecodeOptions, EncodeOptions, Header, ResidualConfig, ResidualRecord, FLAG_DETERMINISTIC,
};
use octacodec::imageio::Image;
use octacodec::metrics::{bd_rate, ms_ssim, psnr, MsSsimConfig, RdCurve};
use octacodec::model::{
    total_loss, train, CodecModel, ModelConfig, RateSet, TraceEntry, TraceOp, TrainConfig,
    TrainLog,
};
use octacodec::octave::{
    gdn, goconv, goconv_first, gores, gotconv, gotconv_last, gotres, igdn, ChannelSplit,
    GdnParams, GoConvParams, NormKind, OctavePair, ResParams,
};
use octacodec::quant::{QuantMode, QuantizedPlane, Quantizer, QuantizerConfig};
use octacodec::tensor::{AdamConfig, ConvSpec, ParamStore, ParamVars, Tape, Tensor, Var};
use octacodec::{Error, Result};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use common::{evaluation_set, grad_check, jitter, random_tensor, rng, training_set};

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<V>(r: Result<V>) -> std::result::Result<V, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- gradients

const GRAD_TOL: f64 = 1e-4;
const GRAD_H: f64 = 1e-5;
const INSTANCES: usize = 20;
const COORDS: usize = 24;

/// Deterministic weights so an octave pair reduces to one scalar.
fn fixed_weights(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.754_877_666).fract() * 2.0 - 1.0)
}

fn pair_scalar(tape: &mut Tape<f64>, y: OctavePair<Var>) -> Result<Var> {
    let mut acc = None;
    for v in [y.high, y.low] {
        let w = tape.constant(fixed_weights(tape.shape(v)));
        let p = tape.mul(v, w)?;
        let s = tape.sum(p);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(acc.expect("two branches"))
}

fn split(r: &mut ChaCha8Rng) -> ChannelSplit {
    let width = r.gen_range(2..=4);
    ChannelSplit::new(width, 0.5).unwrap()
}

fn octave_inputs(r: &mut ChaCha8Rng, s: ChannelSplit, m: usize) -> Vec<Tensor<f64>> {
    vec![
        random_tensor(r, &[1, s.high, 2 * m, 2 * m], -1.0, 1.0),
        random_tensor(r, &[1, s.low, m, m], -1.0, 1.0),
    ]
}

struct GradCase {
    name: &'static str,
    run: fn(&mut ChaCha8Rng) -> Result<f64>,
}

fn case_conv2d(r: &mut ChaCha8Rng) -> Result<f64> {
    let (ci, co) = (r.gen_range(1..=3), r.gen_range(1..=3));
    let k = [1, 3, 5][r.gen_range(0..3)];
    let spec = ConvSpec {
        stride: r.gen_range(1..=2),
        pad: r.gen_range(0..=k / 2),
        out_pad: 0,
    };
    let hw = r.gen_range(k..k + 5);
    let inputs = vec![
        random_tensor(r, &[1, ci, hw, hw + 1], -1.0, 1.0),
        random_tensor(r, &[co, ci, k, k], -1.0, 1.0),
        random_tensor(r, &[co], -0.5, 0.5),
    ];
    grad_check(&inputs, &ParamStore::new(), r, COORDS, GRAD_H, move |t, x, _| {
        t.conv2d(x[0], x[1], Some(x[2]), spec)
    })
}

fn case_tconv2d(r: &mut ChaCha8Rng) -> Result<f64> {
    let (ci, co) = (r.gen_range(1..=3), r.gen_range(1..=3));
    let k = [1, 3, 5][r.gen_range(0..3)];
    let stride = r.gen_range(1..=2);
    let spec = ConvSpec {
        stride,
        pad: r.gen_range(0..=k / 2),
        out_pad: r.gen_range(0..stride),
    };
    let hw = r.gen_range(2..6);
    let inputs = vec![
        random_tensor(r, &[1, ci, hw, hw + 1], -1.0, 1.0),
        random_tensor(r, &[ci, co, k, k], -1.0, 1.0),
        random_tensor(r, &[co], -0.5, 0.5),
    ];
    grad_check(&inputs, &ParamStore::new(), r, COORDS, GRAD_H, move |t, x, _| {
        t.tconv2d(x[0], x[1], Some(x[2]), spec)
    })
}

fn case_reflect_pad(r: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w) = (r.gen_range(3..9), r.gen_range(3..9));
    let size = r.gen_range(1..h.min(w));
    let c = r.gen_range(1..=3);
    let inputs = vec![random_tensor(r, &[2, c, h, w], -1.0, 1.0)];
    grad_check(&inputs, &ParamStore::new(), r, COORDS, GRAD_H, move |t, x, _| {
        t.reflect_pad(x[0], size)
    })
}

fn gdn_case(r: &mut ChaCha8Rng, inverse: bool) -> Result<f64> {
    let c = r.gen_range(1..=4);
    let mut store = ParamStore::new();
    let p = GdnParams::init(&mut store, r, "n", c);
    jitter(&mut store, r, 0.2);
    let inputs = vec![random_tensor(r, &[1, c, 5, 6], -1.5, 1.5)];
    grad_check(&inputs, &store, r, COORDS, GRAD_H, move |t, x, pv| {
        if inverse {
            igdn(t, pv, x[0], &p)
        } else {
            gdn(t, pv, x[0], &p)
        }
    })
}

fn case_gdn(r: &mut ChaCha8Rng) -> Result<f64> {
    gdn_case(r, false)
}

fn case_igdn(r: &mut ChaCha8Rng) -> Result<f64> {
    gdn_case(r, true)
}

fn octave_conv_case(r: &mut ChaCha8Rng, transposed: bool) -> Result<f64> {
    let (si, so) = (split(r), split(r));
    let stride = r.gen_range(1..=2);
    let mut store = ParamStore::new();
    let p = GoConvParams::standard(&mut store, r, "g", si, so, 3, stride, false, transposed, NormKind::Divisive)?;
    jitter(&mut store, r, 0.05);
    let inputs = octave_inputs(r, si, 4);
    grad_check(&inputs, &store, r, COORDS, GRAD_H, move |t, x, pv| {
        let pair = OctavePair::new(x[0], x[1]);
        let y = if transposed {
            gotconv(t, pv, &pair, &p)?
        } else {
            goconv(t, pv, &pair, &p)?
        };
        pair_scalar(t, y)
    })
}

fn case_goconv(r: &mut ChaCha8Rng) -> Result<f64> {
    octave_conv_case(r, false)
}

fn case_gotconv(r: &mut ChaCha8Rng) -> Result<f64> {
    octave_conv_case(r, true)
}

fn case_goconv_first(r: &mut ChaCha8Rng) -> Result<f64> {
    let so = split(r);
    let mut store = ParamStore::new();
    let p = GoConvParams::first(&mut store, r, "f", 3, so, 3, false, NormKind::Divisive)?;
    jitter(&mut store, r, 0.05);
    let inputs = vec![random_tensor(r, &[1, 3, 8, 8], 0.0, 1.0)];
    grad_check(&inputs, &store, r, COORDS, GRAD_H, move |t, x, pv| {
        let y = goconv_first(t, pv, x[0], &p)?;
        pair_scalar(t, y)
    })
}

fn case_gotconv_last(r: &mut ChaCha8Rng) -> Result<f64> {
    let si = split(r);
    let mut store = ParamStore::new();
    let p = GoConvParams::last(&mut store, r, "l", si, 3, 3, false, NormKind::Divisive)?;
    jitter(&mut store, r, 0.05);
    let inputs = octave_inputs(r, si, 3);
    grad_check(&inputs, &store, r, COORDS, GRAD_H, move |t, x, pv| {
        gotconv_last(t, pv, &OctavePair::new(x[0], x[1]), &p)
    })
}

fn res_case(r: &mut ChaCha8Rng, transposed: bool) -> Result<f64> {
    let s = split(r);
    let mut store = ParamStore::new();
    let p = ResParams::init(&mut store, r, "r", s, 3, transposed, NormKind::Divisive)?;
    jitter(&mut store, r, 0.05);
    let inputs = octave_inputs(r, s, 3);
    grad_check(&inputs, &store, r, COORDS, GRAD_H, move |t, x, pv| {
        let pair = OctavePair::new(x[0], x[1]);
        let y = if transposed {
            gotres(t, pv, &pair, &p)?
        } else {
            gores(t, pv, &pair, &p)?
        };
        pair_scalar(t, y)
    })
}

fn case_gores(r: &mut ChaCha8Rng) -> Result<f64> {
    res_case(r, false)
}

fn case_gotres(r: &mut ChaCha8Rng) -> Result<f64> {
    res_case(r, true)
}

fn case_ms_ssim(r: &mut ChaCha8Rng) -> Result<f64> {
    let c = r.gen_range(1..=2);
    let x = random_tensor(r, &[1, c, 24, 26], 0.0, 1.0);
    let noise = r.gen_range(0.02..0.3);
    let y = x.zip_map(&random_tensor(r, &[1, c, 24, 26], -noise, noise), |a, b| a + b)?;
    let cfg = MsSsimConfig::standard(2)?;
    grad_check(&[x, y], &ParamStore::new(), r, COORDS, GRAD_H, move |t, v, _| {
        octacodec::metrics::ms_ssim_tape(t, v[0], v[1], &cfg)
    })
}

fn tiny_model(seed: u64) -> CodecModel<f64> {
    let cfg = ModelConfig {
        widths: [4, 4, 4, 4, 4],
        outer_kernel: 3,
        inner_kernel: 3,
        ..ModelConfig::desk()
    };
    CodecModel::new(cfg, seed).unwrap()
}

fn case_full_loss(r: &mut ChaCha8Rng) -> Result<f64> {
    let mut model = tiny_model(r.next_u64());
    jitter(model.store_mut(), r, 0.03);
    let x = random_tensor(r, &[1, 3, 64, 64], 0.0, 1.0);
    let cfg = MsSsimConfig::standard(3)?;
    let model = &model;
    grad_check(&[x], model.store(), r, COORDS, GRAD_H, move |t, v, pv: &ParamVars| {
        let y = model.encode(t, pv, v[0])?;
        let half = OctavePair::new(t.scale(y.high, 0.5), t.scale(y.low, 0.5));
        let a = model.decode(t, pv, y)?;
        let b = model.decode(t, pv, half)?;
        Ok(total_loss(t, v[0], &[a, b], &cfg)?.total)
    })
}

fn c1_gradients() -> Outcome {
    let cases = [
        GradCase { name: "conv2d", run: case_conv2d },
        GradCase { name: "tconv2d", run: case_tconv2d },
        GradCase { name: "reflect_pad", run: case_reflect_pad },
        GradCase { name: "gdn", run: case_gdn },
        GradCase { name: "igdn", run: case_igdn },
        GradCase { name: "goconv", run: case_goconv },
        GradCase { name: "goconv_first", run: case_goconv_first },
        GradCase { name: "gotconv", run: case_gotconv },
        GradCase { name: "gotconv_last", run: case_gotconv_last },
        GradCase { name: "gores", run: case_gores },
        GradCase { name: "gotres", run: case_gotres },
        GradCase { name: "ms_ssim", run: case_ms_ssim },
        GradCase { name: "full loss", run: case_full_loss },
    ];
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = Vec::new();
    for c in &cases {
        let mut max = 0.0f64;
        for i in 0..INSTANCES {
            let e = ok((c.run)(&mut r))?;
            ensure!(e < GRAD_TOL, "{} instance {i}: relative error {e:.3e}", c.name);
            max = max.max(e);
        }
        worst.push(format!("{} {max:.1e}", c.name));
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(300), "suite took {t:.1?}");
    Ok(format!("{} ops x {INSTANCES}, worst: {}; {t:.1?}", cases.len(), worst.join(", ")))
}

// ---------------------------------------------------------------- quantizer

fn c2_quantizer() -> Outcome {
    // (min, max, bits, Δ, z)
    let cases: [(f32, f32, u8, f64, u8); 10] = [
        (-1.0, 1.0, 8, 2.0 / 255.0, 128),
        (0.0, 1.0, 8, 1.0 / 255.0, 0),
        (-0.5, 1.5, 2, 2.0 / 3.0, 1),
        (-3.0, 1.0, 4, 4.0 / 15.0, 11),
        (-1.0, 0.0, 1, 1.0, 1),
        (-2.0, 6.0, 3, 8.0 / 7.0, 2),
        (0.5, 2.5, 8, 2.0 / 255.0, 0),
        (-10.0, -2.0, 5, 8.0 / 31.0, 31),
        (-1.0, 3.0, 2, 4.0 / 3.0, 1),
        (-0.25, 0.75, 6, 1.0 / 63.0, 16),
    ];
    for (i, &(lo, hi, bits, step, z)) in cases.iter().enumerate() {
        let mut q = ok(Quantizer::new(ok(QuantizerConfig::deterministic(bits))?))?;
        let p = ok(q.quantize_channel(&[lo, hi, 0.5 * (lo + hi)], 3, 1))?;
        ensure!((p.step() - step).abs() < 1e-12, "case {i}: step {} vs {step}", p.step());
        ensure!(p.zero_point == z, "case {i}: zero point {} vs {z}", p.zero_point);
    }

    let mut r = rng(2);
    let draws = 100_000;
    let mut worst_sigma = 0.0f64;
    let mut chi2 = 0.0;
    let mut outside = Vec::new();
    for i in 0..100 {
        let bits = r.gen_range(1..=8u8);
        let top = ((1u32 << bits) - 1) as f64;
        let step = r.gen_range(0.01..2.0);
        let z = r.gen_range(0..=top as u32) as u8;
        let y = r.gen_range(-(z as f64) * step..=(top - z as f64) * step);
        let mut q = ok(Quantizer::new(ok(QuantizerConfig::new(bits, QuantMode::Stochastic, i))?))?;
        let mean = (0..draws)
            .map(|_| (q.quantize_value(y, step, z) as f64 - z as f64) * step)
            .sum::<f64>()
            / draws as f64;
        let f = (y / step).rem_euclid(1.0);
        let sigma = step * (f * (1.0 - f) / draws as f64).sqrt();
        let dev = (mean - y).abs();
        if dev > 3.0 * sigma + 1e-12 * (y.abs() + step) {
            outside.push(format!("case {i} at {:.2} sigma", dev / sigma));
        }
        if sigma > 0.0 {
            worst_sigma = worst_sigma.max(dev / sigma);
            chi2 += (dev / sigma).powi(2);
        }
    }
    // 100 independent 3-sigma checks on an unbiased quantizer all pass with
    // probability 0.9973^100 ≈ 0.76; chi2 over 100 cases should sit near 100.
    let dither = format!("100 dither means, worst {worst_sigma:.2} sigma, chi2 {chi2:.1}");

    let mut planes = 0;
    for bits in 1..=8u8 {
        let mut q = ok(Quantizer::new(ok(QuantizerConfig::deterministic(bits))?))?;
        for _ in 0..10_000 {
            let (w, h) = (r.gen_range(1..=12), r.gen_range(1..=12));
            let lo = -r.gen_range(0.001..4.0);
            let hi = r.gen_range(0.001..4.0);
            // every plane spans zero, so its zero point is never clamped
            let mut v: Vec<f64> = (0..w * h).map(|_| r.gen_range(lo..=hi)).collect();
            let zero_at = r.gen_range(0..w * h);
            v[zero_at] = 0.0;
            if w * h > 2 {
                v[(zero_at + 1) % (w * h)] = lo;
                v[(zero_at + 2) % (w * h)] = hi;
            }
            let p = ok(q.quantize_channel(&v, w, h))?;
            let step = p.step();
            let back = p.dequantize();
            for (a, b) in v.iter().zip(&back) {
                ensure!(
                    (a - b).abs() <= step + 1e-9,
                    "B={bits}: |{a} - {b}| exceeds step {step}"
                );
            }
            ensure!(back[zero_at] == 0.0, "B={bits}: zero came back as {}", back[zero_at]);
            planes += 1;
        }
    }
    ensure!(
        outside.is_empty(),
        "{dither}; outside 3 sigma: {}; fixed cases and {planes} round-trip planes pass",
        outside.join(", ")
    );
    Ok(format!("10 fixed cases; {dither}; {planes} planes within one step, zeros exact"))
}

// ------------------------------------------------------------- architecture

fn c3_architecture() -> Outcome {
    let model = ok(CodecModel::<f32>::new(ModelConfig::full(), 3))?;
    let x = Tensor::from_fn(&[1, 3, 256, 256], |i| ((i * 7919) % 256) as f32 / 255.0);
    let y = ok(model.encode_features(&x))?;
    ensure!(y.high.shape() == [1, 4, 32, 32], "HR map {:?}", y.high.shape());
    ensure!(y.low.shape() == [1, 4, 16, 16], "LR map {:?}", y.low.shape());
    let out = ok(model.decode_features(y.as_ref()))?;
    ensure!(out.shape() == [1, 3, 256, 256], "reconstruction {:?}", out.shape());

    use TraceOp::*;
    // (op, kernel, stride, channels, high-resolution extent)
    let enc: [(TraceOp, usize, usize, usize, usize); 10] = [
        (ReflectPad, 0, 0, 3, 262),
        (GoConvFirst, 7, 1, 64, 256),
        (GoConv, 3, 2, 128, 128),
        (GoRes, 3, 1, 128, 128),
        (GoConv, 3, 2, 256, 64),
        (GoRes, 3, 1, 256, 64),
        (GoConv, 3, 2, 512, 32),
        (GoRes, 3, 1, 512, 32),
        (ReflectPad, 0, 0, 512, 38),
        (GoConv, 7, 1, 8, 32),
    ];
    let dec: [(TraceOp, usize, usize, usize, usize); 10] = [
        (ReflectPad, 0, 0, 8, 38),
        (GoTConv, 7, 1, 512, 32),
        (GoTRes, 3, 1, 512, 32),
        (GoTConv, 3, 2, 256, 64),
        (GoTRes, 3, 1, 256, 64),
        (GoTConv, 3, 2, 128, 128),
        (GoTRes, 3, 1, 128, 128),
        (GoTConv, 3, 2, 64, 256),
        (ReflectPad, 0, 0, 64, 262),
        (GoTConvLast, 7, 1, 3, 256),
    ];
    let (te, td) = ok(model.trace(1, 256, 256))?;
    check_trace("encoder", &te, &enc)?;
    check_trace("decoder", &td, &dec)?;
    Ok("maps 4x32x32 + 4x16x16; 10+10 layer trace matches".into())
}

fn check_trace(
    which: &str,
    got: &[TraceEntry],
    want: &[(TraceOp, usize, usize, usize, usize)],
) -> std::result::Result<(), String> {
    ensure!(got.len() == want.len(), "{which}: {} layers, expected {}", got.len(), want.len());
    for (i, (g, &(op, k, s, ch, ext))) in got.iter().zip(want).enumerate() {
        let at = format!("{which} layer {i}");
        ensure!(g.op == op, "{at}: {:?}, expected {op:?}", g.op);
        ensure!(g.kernel == k && g.stride == s, "{at}: kernel {} stride {}", g.kernel, g.stride);
        let high = &g.high;
        ensure!(high[2] == ext && high[3] == ext, "{at}: high extent {:?}", high);
        match &g.low {
            None => {
                ensure!(high[1] == ch, "{at}: {} channels, expected {ch}", high[1]);
            }
            Some(low) => {
                ensure!(high[1] + low[1] == ch, "{at}: {}+{} channels", high[1], low[1]);
                ensure!(high[1] == low[1], "{at}: uneven split at alpha 1/2");
                let lext = (ext - 6 * usize::from(op == TraceOp::ReflectPad)) / 2
                    + 6 * usize::from(op == TraceOp::ReflectPad);
                ensure!(low[2] == lext && low[3] == lext, "{at}: low extent {:?}", low);
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- bitstream

fn random_plane(r: &mut ChaCha8Rng, bits: u8) -> QuantizedPlane {
    let (w, h) = (r.gen_range(1..=24), r.gen_range(1..=24));
    let top = (1u16 << bits) - 1;
    let structured = r.gen_bool(0.5);
    let values = (0..w * h)
        .map(|i| {
            if structured {
                (((i % w) + (i / w)) as u16 / 3).min(top) as u8
            } else {
                r.gen_range(0..=top) as u8
            }
        })
        .collect();
    let lo = r.gen_range(-5.0f32..0.0);
    QuantizedPlane {
        width: w,
        height: h,
        bits,
        min_val: lo,
        max_val: lo + r.gen_range(0.0f32..10.0),
        zero_point: r.gen_range(0..=top) as u8,
        values,
    }
}

fn random_container(r: &mut ChaCha8Rng) -> Container {
    let bits = r.gen_range(1..=8);
    let channels = r.gen_range(0..=6);
    let backend = [BackendId::None, BackendId::Builtin, BackendId::External][r.gen_range(0..3)];
    let payload = match backend {
        BackendId::None => Vec::new(),
        _ => (0..r.gen_range(0..200)).map(|_| r.gen()).collect(),
    };
    let den = r.gen_range(1..=8u8);
    Container {
        header: Header {
            width: r.gen_range(1..5000),
            height: r.gen_range(1..5000),
            channels,
            alpha_num: r.gen_range(0..=den),
            alpha_den: den,
            bits,
            flags: if r.gen_bool(0.5) { FLAG_DETERMINISTIC } else { 0 },
        },
        planes: (0..channels).map(|_| random_plane(r, bits)).collect(),
        residual: ResidualRecord {
            backend,
            r_min: r.gen_range(-1.0..0.0),
            r_max: r.gen_range(0.0..1.0),
            payload,
        },
    }
}

fn parse_safely(data: &[u8]) -> std::result::Result<Result<Container>, String> {
    catch_unwind(|| Container::from_bytes(data)).map_err(|_| "parser panicked".to_string())
}

fn c4_bitstream() -> Outcome {
    let mut r = rng(4);
    let mut truncations = 0;
    let mut corruptions = 0;
    for i in 0..1000 {
        let c = random_container(&mut r);
        let bytes = ok(c.to_bytes())?;
        let back = ok(Container::from_bytes(&bytes))?;
        ensure!(back == c, "container {i} did not round-trip");
        ensure!(ok(back.to_bytes())? == bytes, "container {i} re-serializes differently");

        let cuts: Vec<usize> = if i < 50 {
            (0..bytes.len()).collect()
        } else {
            (0..8).map(|_| r.gen_range(0..bytes.len())).collect()
        };
        for cut in cuts {
            match parse_safely(&bytes[..cut])? {
                Err(Error::Format { .. }) => truncations += 1,
                other => return Err(format!("container {i} cut at {cut}: {other:?}")),
            }
        }
        let mut bad = bytes.clone();
        bad[r.gen_range(0..4)] ^= 1 << r.gen_range(0..8);
        match parse_safely(&bad)? {
            Err(Error::Format { offset: 0, .. }) => {}
            other => return Err(format!("container {i} with bad magic: {other:?}")),
        }
        for _ in 0..4 {
            let mut bad = bytes.clone();
            let k = r.gen_range(0..bad.len());
            bad[k] = r.gen();
            match parse_safely(&bad)? {
                Ok(_) | Err(Error::Format { .. }) => corruptions += 1,
                Err(e) => return Err(format!("container {i} byte {k}: unexpected {e}")),
            }
        }
    }

    let mut worst = i64::MIN;
    for _ in 0..2000 {
        let bits = r.gen_range(1..=8);
        let p = random_plane(&mut r, bits);
        let coded = ok(entropy_encode_plane(&p.values, p.width, p.height, bits))?;
        let raw = raw_len(p.values.len(), bits);
        let over = coded.len() as i64 - raw as i64;
        ensure!(coded.len() <= raw + 64, "{}x{} B={bits}: {} bytes vs raw {raw}", p.width, p.height, coded.len());
        worst = worst.max(over);
    }
    Ok(format!(
        "1000 containers round-trip; {truncations} truncations and 1000 bad magics rejected; \
         {corruptions} corruptions handled; max expansion {worst:+} bytes"
    ))
}

// --------------------------------------------------------- MS-SSIM and BD

/// Direct MS-SSIM: explicit 11×11 Gaussian window sums, one pixel at a time.
fn reference_ms_ssim(a: &[f64], b: &[f64], h: usize, w: usize, weights: &[f64]) -> f64 {
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let gs: f64 = g.iter().sum();
    let win: Vec<f64> = (0..121).map(|k| g[k / 11] * g[k % 11] / (gs * gs)).collect();
    let (c1, c2) = (1e-4, 9e-4);
    let (mut x, mut y, mut h, mut w) = (a.to_vec(), b.to_vec(), h, w);
    let mut result = 1.0;
    for (j, &weight) in weights.iter().enumerate() {
        if j > 0 {
            let (nh, nw) = (h / 2, w / 2);
            let pool = |s: &[f64]| -> Vec<f64> {
                let mut o = vec![0.0; nh * nw];
                for i in 0..nh {
                    for k in 0..nw {
                        o[i * nw + k] = 0.25
                            * (s[2 * i * w + 2 * k]
                                + s[2 * i * w + 2 * k + 1]
                                + s[(2 * i + 1) * w + 2 * k]
                                + s[(2 * i + 1) * w + 2 * k + 1]);
                    }
                }
                o
            };
            x = pool(&x);
            y = pool(&y);
            h = nh;
            w = nw;
        }
        let last = j + 1 == weights.len();
        let (oh, ow) = (h - 10, w - 10);
        let mut total = 0.0;
        for i in 0..oh {
            for k in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for u in 0..11 {
                    for v in 0..11 {
                        let c = win[u * 11 + v];
                        let p = (i + u) * w + k + v;
                        mx += c * x[p];
                        my += c * y[p];
                        xx += c * x[p] * x[p];
                        yy += c * y[p] * y[p];
                        xy += c * x[p] * y[p];
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                let mut s = (2.0 * cov + c2) / (vx + vy + c2);
                if last {
                    s *= (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                }
                total += s;
            }
        }
        result *= (total / (oh * ow) as f64).max(0.0).powf(weight);
    }
    result
}

/// Cubic least squares by the normal equations.
fn cubic_fit(x: &[f64], y: &[f64]) -> [f64; 4] {
    let mut m = [[0.0; 5]; 4];
    for (&xi, &yi) in x.iter().zip(y) {
        let p = [1.0, xi, xi * xi, xi * xi * xi];
        for r in 0..4 {
            for c in 0..4 {
                m[r][c] += p[r] * p[c];
            }
            m[r][4] += p[r] * yi;
        }
    }
    for col in 0..4 {
        let piv = (col..4).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
        m.swap(col, piv);
        for r in 0..4 {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..5 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    [m[0][4] / m[0][0], m[1][4] / m[1][1], m[2][4] / m[2][2], m[3][4] / m[3][3]]
}

/// Cubic in a standardized abscissa `t = (x − shift) / scale`.
struct Cubic {
    c: [f64; 4],
    shift: f64,
    scale: f64,
}

impl Cubic {
    fn fit(x: &[f64], y: &[f64]) -> Self {
        let n = x.len() as f64;
        let shift = x.iter().sum::<f64>() / n;
        let scale = (x.iter().map(|v| (v - shift).powi(2)).sum::<f64>() / n).sqrt();
        let t: Vec<f64> = x.iter().map(|v| (v - shift) / scale).collect();
        Self { c: cubic_fit(&t, y), shift, scale }
    }

    fn at(&self, x: f64) -> f64 {
        let t = (x - self.shift) / self.scale;
        self.c[0] + t * (self.c[1] + t * (self.c[2] + t * self.c[3]))
    }
}

fn trapezoid(p: &Cubic, lo: f64, hi: f64) -> f64 {
    let n = 200_000;
    let dx = (hi - lo) / n as f64;
    (0..n).map(|i| 0.5 * dx * (p.at(lo + i as f64 * dx) + p.at(lo + (i + 1) as f64 * dx))).sum()
}

fn reference_bd_rate(a: &RdCurve, t: &RdCurve) -> f64 {
    let la: Vec<f64> = a.rate.iter().map(|v| v.ln()).collect();
    let lt: Vec<f64> = t.rate.iter().map(|v| v.ln()).collect();
    let (pa, pt) = (Cubic::fit(&a.quality, &la), Cubic::fit(&t.quality, &lt));
    let range = |q: &[f64]| q.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let ((al, ah), (tl, th)) = (range(&a.quality), range(&t.quality));
    let (lo, hi) = (al.max(tl), ah.min(th));
    let d = (trapezoid(&pt, lo, hi) - trapezoid(&pa, lo, hi)) / (hi - lo);
    (d.exp() - 1.0) * 100.0
}

fn random_curve(r: &mut ChaCha8Rng) -> RdCurve {
    let n = r.gen_range(4..=6);
    let (mut rate, mut q) = (r.gen_range(0.05..0.3), r.gen_range(24.0..30.0));
    let mut rates = Vec::new();
    let mut quality = Vec::new();
    for _ in 0..n {
        rates.push(rate);
        quality.push(q);
        rate *= r.gen_range(1.3..2.0);
        q += r.gen_range(1.0..3.0);
    }
    RdCurve::new(rates, quality).unwrap()
}

fn c5_msssim_bd() -> Outcome {
    let mut r = rng(5);
    let cfg = ok(MsSsimConfig::standard(5))?;
    let x = Tensor::from_fn(&[1, 3, 256, 256], |_| r.gen::<f64>());
    let same = ok(ms_ssim(&x, &x, &cfg))?;
    ensure!((same - 1.0).abs() <= 1e-9, "identical images give {same}");

    let mut worst = 0.0f64;
    let mut min_value = f64::MAX;
    for i in 0..50 {
        let img = common::synthetic(i, 256, 256);
        let noise = r.gen_range(0.005..0.25);
        let a: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| (v + r.gen_range(-noise..noise)).clamp(0.0, 1.0)).collect();
        let ta = ok(Tensor::new(&[1, 3, 256, 256], a.clone()))?;
        let tb = ok(Tensor::new(&[1, 3, 256, 256], b.clone()))?;
        let fast = ok(ms_ssim(&ta, &tb, &cfg))?;
        let plane = 256 * 256;
        let direct = (0..3)
            .map(|c| {
                let s = c * plane..(c + 1) * plane;
                reference_ms_ssim(&a[s.clone()], &b[s], 256, 256, &cfg.weights)
            })
            .sum::<f64>()
            / 3.0;
        let d = (fast - direct).abs();
        ensure!(d <= 1e-6, "pair {i}: {fast} vs direct {direct}");
        worst = worst.max(d);
        min_value = min_value.min(direct);
    }

    let mut bd_worst = 0.0f64;
    for i in 0..200 {
        let a = random_curve(&mut r);
        let t = if i % 2 == 0 {
            let scale = r.gen_range(0.7..1.2);
            RdCurve::new(
                a.rate.iter().map(|v| v * scale * r.gen_range(0.95..1.05)).collect(),
                a.quality.iter().map(|q| q + r.gen_range(-0.5..0.5)).collect(),
            )
            .unwrap()
        } else {
            random_curve(&mut r)
        };
        let (Ok(got), want) = (bd_rate(&a, &t), reference_bd_rate(&a, &t)) else {
            continue;
        };
        let err = (got - want).abs();
        ensure!(err <= 1e-3 * want.abs().max(1.0), "curve {i}: {got} vs trapezoid {want}");
        bd_worst = bd_worst.max(err);
    }
    let a = random_curve(&mut r);
    let scaled = RdCurve::new(a.rate.iter().map(|v| v * 0.9).collect(), a.quality.clone()).unwrap();
    let ten = ok(bd_rate(&a, &scaled))?;
    ensure!((ten + 10.0).abs() <= 1e-9, "scaled curve gives {ten}");
    Ok(format!(
        "identity {same:.12}; 50 pairs (min {min_value:.3}) within {worst:.1e}; \
         BD within {bd_worst:.1e}; scaled curve {ten:.10}%"
    ))
}

// ---------------------------------------------------------------- training

const TRAIN_STEPS: usize = 500;

fn train_config() -> TrainConfig {
    TrainConfig {
        steps: TRAIN_STEPS,
        batch: 4,
        lr: 5e-4,
        seed: 11,
        rates: RateSet::new(vec![2, 4, 8]).unwrap(),
        msssim_scales: 3,
        adam: AdamConfig::default(),
    }
}

type Trained = (CodecModel<f32>, TrainLog, Duration);

fn run_training() -> Result<Trained> {
    let data: Vec<Tensor<f32>> = training_set().iter().map(|im| im.to_tensor()).collect();
    let mut model = CodecModel::<f32>::new(ModelConfig::desk(), 11)?;
    let start = Instant::now();
    let log = train(&mut model, &data, &train_config(), |_, _| Ok(()))?;
    Ok((model, log, start.elapsed()))
}

fn trained() -> &'static std::result::Result<Trained, String> {
    static MODEL: OnceLock<std::result::Result<Trained, String>> = OnceLock::new();
    MODEL.get_or_init(|| run_training().map_err(|e| e.to_string()))
}

fn c6_training() -> Outcome {
    let (_, log, took) = trained().as_ref().map_err(Clone::clone)?;
    ensure!(log.steps.len() == TRAIN_STEPS, "{} steps logged", log.steps.len());
    let first = log.mean_total(0..20);
    let last = log.mean_total(TRAIN_STEPS - 20..TRAIN_STEPS);
    let drop = 1.0 - last / first;
    ensure!(drop >= 0.3, "loss {first:.3} -> {last:.3} is a {:.1}% drop", 100.0 * drop);
    ensure!(*took < Duration::from_secs(1800), "training took {took:.1?}");

    let (_, again, _) = ok(run_training())?;
    let bits = |l: &TrainLog| -> Vec<[u64; 4]> {
        l.steps
            .iter()
            .map(|s| [s.total.to_bits(), s.l2.to_bits(), s.msssim.to_bits(), s.lr.to_bits()])
            .collect()
    };
    ensure!(bits(log) == bits(&again), "rerun with the same seed produced a different log");
    Ok(format!(
        "loss {first:.3} -> {last:.3} ({:.1}% lower) in {took:.1?}; rerun bit-identical",
        100.0 * drop
    ))
}

// ------------------------------------------------------------ variable rate

fn c7_variable_rate() -> Outcome {
    let (model, _, _) = trained().as_ref().map_err(Clone::clone)?;
    let images = training_set();
    let cfg = ok(MsSsimConfig::standard(3))?;
    let mut rows = Vec::new();
    for bits in [2u8, 4, 6, 8] {
        let (mut ms, mut rate) = (0.0, 0.0);
        for img in &images {
            let e = ok(encode_image(img, model, &EncodeOptions::deterministic(bits)))?;
            ms += ok(ms_ssim(&img.to_tensor::<f64>(), &e.base.to_tensor::<f64>(), &cfg))?;
            rate += e.base_bpp();
        }
        let n = images.len() as f64;
        rows.push((bits, ms / n, rate / n));
    }
    let table: Vec<String> = rows.iter().map(|(b, m, r)| format!("B={b} {m:.4}/{r:.3}bpp")).collect();
    for w in rows.windows(2) {
        ensure!(w[1].1 >= w[0].1, "MS-SSIM falls from B={} to B={}: {}", w[0].0, w[1].0, table.join(", "));
        ensure!(w[1].2 >= w[0].2, "bpp falls from B={} to B={}: {}", w[0].0, w[1].0, table.join(", "));
    }
    Ok(table.join(", "))
}

// -------------------------------------------------------------- enhancement

fn image_psnr(a: &Image, b: &Image) -> Result<f64> {
    psnr(&a.to_f64(), &b.to_f64(), 1.0)
}

fn c8_enhancement() -> Outcome {
    let (model, _, _) = trained().as_ref().map_err(Clone::clone)?;
    let images = evaluation_set();
    let mut min_gain = f64::MAX;
    for (i, img) in images.iter().enumerate() {
        for bits in 3..=7u8 {
            let opts = EncodeOptions {
                residual: ok(ResidualConfig::builtin(4))?,
                ..EncodeOptions::deterministic(bits)
            };
            let e = ok(encode_image(img, model, &opts))?;
            let d = ok(decode_image(&e.bytes, model, &DecodeOptions::default()))?;
            let (base, full) = (ok(image_psnr(img, &d.base))?, ok(image_psnr(img, &d.image))?);
            ensure!(full >= base, "image {i} B={bits}: {full:.2} dB < base {base:.2} dB");
            min_gain = min_gain.min(full - base);
        }
    }

    let mut shares = Vec::new();
    for step in [32u8, 16, 12, 8, 4] {
        let opts = EncodeOptions {
            residual: ok(ResidualConfig::builtin(step))?,
            ..EncodeOptions::deterministic(4)
        };
        let mut share = 0.0;
        for img in &images {
            let e = ok(encode_image(img, model, &opts))?;
            share += e.sizes.enhancement as f64 / e.sizes.total() as f64;
        }
        shares.push((step, 100.0 * share / images.len() as f64));
    }
    let trend: Vec<String> = shares.iter().map(|(s, p)| format!("step {s}: {p:.1}%")).collect();
    for w in shares.windows(2) {
        ensure!(w[1].1 > w[0].1, "share does not grow: {}", trend.join(", "));
    }
    Ok(format!(
        "min PSNR gain {min_gain:.2} dB over {} images x 5 rates; shares {}",
        images.len(),
        trend.join(", ")
    ))
}

// ------------------------------------------------------------------- driver

fn main() {
    type Criterion = (&'static str, &'static str, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("c1", "gradient suite", c1_gradients),
        ("c2", "quantizer", c2_quantizer),
        ("c3", "architecture conformance", c3_architecture),
        ("c4", "bitstream", c4_bitstream),
        ("c5", "MS-SSIM and BD-rate", c5_msssim_bd),
        ("c6", "desk-scale training", c6_training),
        ("c7", "variable-rate behaviour", c7_variable_rate),
        ("c8", "enhancement layer", c8_enhancement),
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let t = start.elapsed();
        match outcome {
            Ok(detail) => println!("[PASS] {} {name} ({t:.1?}): {detail}", id.to_uppercase()),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {} {name} ({t:.1?}): {detail}", id.to_uppercase());
            }
        }
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
