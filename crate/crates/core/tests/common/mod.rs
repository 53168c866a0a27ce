#![allow(dead_code)]

use std::path::{Path, PathBuf};

use octacodec::imageio::{load_image, Image};
use octacodec::tensor::{ParamStore, ParamVars, Tape, Tensor, Var};
use octacodec::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

fn load_dir(dir: &Path) -> Vec<Image> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    files.sort();
    files.iter().map(|p| load_image(p).unwrap()).collect()
}

/// Procedural test image; `seed` picks the family and its parameters.
pub fn synthetic(seed: u64, width: usize, height: usize) -> Image {
    let mut r = rng(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x5eed);
    let base: [f32; 3] = [r.gen(), r.gen(), r.gen()];
    let tint: [f32; 3] = [r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5)];
    let (fx, fy) = (r.gen_range(0.02f32..0.3), r.gen_range(0.02f32..0.3));
    let phase: f32 = r.gen_range(0.0..std::f32::consts::TAU);
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..6)
        .map(|_| {
            (
                r.gen_range(0.0..width as f32),
                r.gen_range(0.0..height as f32),
                r.gen_range(4.0f32..20.0),
                [r.gen(), r.gen(), r.gen()],
            )
        })
        .collect();
    let cell = r.gen_range(4usize..16);
    let noise: Vec<f32> = (0..3 * width * height).map(|_| r.gen_range(-0.03..0.03)).collect();
    let family = seed % 4;
    Image::from_fn(width, height, |c, y, x| {
        let (xf, yf) = (x as f32, y as f32);
        let v = match family {
            0 => base[c] * 0.5 + tint[c] * (xf / width as f32) + 0.3 * (yf / height as f32),
            1 => 0.5 + 0.4 * (fx * xf + fy * yf + phase + c as f32).sin(),
            2 => {
                let mut acc = base[c] * 0.3;
                for (bx, by, s, col) in &blobs {
                    let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
                    acc += col[c] * (-d2 / (2.0 * s * s)).exp();
                }
                acc
            }
            _ => {
                let check = ((x / cell) + (y / cell)) % 2 == 0;
                if check {
                    base[c]
                } else {
                    0.5 * (1.0 - base[c]) + 0.2 * (fx * xf).sin()
                }
            }
        };
        (v + noise[(c * height + y) * width + x]).clamp(0.0, 1.0)
    })
}

/// 32 images of 64×64: 8 natural crops and 24 procedural images.
pub fn training_set() -> Vec<Image> {
    let mut v = load_dir(&data_dir().join("train"));
    v.extend((0..24).map(|k| synthetic(k, 64, 64)));
    v
}

/// 10 held-out images of assorted sizes: 6 natural and 4 procedural.
pub fn evaluation_set() -> Vec<Image> {
    let mut v = load_dir(&data_dir().join("eval"));
    v.extend([(64, 64), (80, 64), (96, 96), (70, 66)]
        .iter()
        .enumerate()
        .map(|(i, &(w, h))| synthetic(100 + i as u64, w, h)));
    v
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Perturb every parameter so no path is degenerate (zero-initialized
/// residual branches, symmetric inits).
pub fn jitter(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng, scale: f64) {
    for p in store.iter_mut() {
        let noise: Vec<f64> = (0..p.value.len()).map(|_| r.gen_range(-scale..scale)).collect();
        for (v, n) in p.value.data_mut().iter_mut().zip(noise) {
            *v += n;
        }
    }
}

/// Central finite differences against the tape gradient of
/// `Σ weights ⊙ f(inputs, params)`. Returns the relative error
/// `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)` over `coords` sampled
/// coordinates of the inputs and trainable parameters.
pub fn grad_check<F>(
    inputs: &[Tensor<f64>],
    store: &ParamStore<f64>,
    r: &mut ChaCha8Rng,
    coords: usize,
    h: f64,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var], &ParamVars) -> Result<Var>,
{
    let shape = {
        let mut tape = Tape::new();
        let xs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let pv = tape.bind_params(store);
        let out = f(&mut tape, &xs, &pv)?;
        tape.shape(out).to_vec()
    };
    let weights = random_tensor(r, &shape, -1.0, 1.0);
    let eval = |inputs: &[Tensor<f64>], store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let pv = tape.bind_params(store);
        let out = f(&mut tape, &xs, &pv)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut tape = Tape::new();
    let xs: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let pv = tape.bind_params(store);
    let out = f(&mut tape, &xs, &pv)?;
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    let grads = tape.backward(loss)?;

    // (source, index): source < inputs.len() is an input, otherwise a parameter
    let mut all = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        all.extend((0..t.len()).map(|k| (i, k)));
    }
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for (j, &id) in ids.iter().enumerate() {
        all.extend((0..store.value(id).len()).map(|k| (inputs.len() + j, k)));
    }
    let picked: Vec<_> = all.choose_multiple(r, coords.min(all.len())).copied().collect();

    let analytic = |src: usize, k: usize| -> f64 {
        let g = if src < inputs.len() {
            grads.get(xs[src])
        } else {
            grads.get(pv.get(ids[src - inputs.len()]))
        };
        g.map_or(0.0, |g| g.data()[k])
    };
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (src, k) in picked {
        let a = analytic(src, k);
        let fd = if src < inputs.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[src] = bump(&plus[src], k, h);
            minus[src] = bump(&minus[src], k, -h);
            (eval(&plus, store)? - eval(&minus, store)?) / (2.0 * h)
        } else {
            let id = ids[src - inputs.len()];
            let mut plus = store.clone();
            let mut minus = store.clone();
            plus.get_mut(id).value = bump(store.value(id), k, h);
            minus.get_mut(id).value = bump(store.value(id), k, -h);
            (eval(inputs, &plus)? - eval(inputs, &minus)?) / (2.0 * h)
        };
        diff += (a - fd) * (a - fd);
        na += a * a;
        nn += fd * fd;
    }
    let scale = na.sqrt().max(nn.sqrt());
    Ok(if scale < 1e-12 { 0.0 } else { diff.sqrt() / scale })
}

fn bump(t: &Tensor<f64>, k: usize, h: f64) -> Tensor<f64> {
    let mut d = t.data().to_vec();
    d[k] += h;
    Tensor::new(t.shape(), d).unwrap()
}
