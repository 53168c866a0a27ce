//! Convolution, transposed convolution and reflection padding kernels.
//!
//! Both convolutions lower to im2col + GEMM. The transposed convolution is
//! implemented as the exact adjoint of the forward convolution: its forward
//! pass is the convolution's input-gradient operator and vice versa.

use super::{Real, Tensor};
use crate::error::{config_err, shape_err, Result};

/// Stride and padding of a (transposed) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    /// Zero padding on every spatial border.
    pub pad: usize,
    /// Extra rows/columns appended to a transposed convolution's output so
    /// that stride-2 layers exactly double their input. Ignored by `conv2d`.
    pub out_pad: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad,
            out_pad: 0,
        }
    }

    pub fn with_out_pad(mut self, out_pad: usize) -> Self {
        self.out_pad = out_pad;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.stride < 1 {
            return config_err("convolution stride must be at least 1");
        }
        if self.out_pad >= self.stride && self.out_pad > 0 {
            return config_err("output padding must be smaller than the stride");
        }
        Ok(())
    }
}

/// Geometry of a sliding window over a `c × h × w` image producing
/// `oh × ow` window positions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output positions `[lo, hi)` for which input index `o*stride + off - pad`
    /// lands inside `[0, extent)`.
    fn valid_range(&self, off: usize, extent: usize, outs: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = off as isize - self.pad as isize;
        // smallest o with o*s + shift >= 0
        let lo = if shift >= 0 {
            0
        } else {
            ((-shift) + s - 1) / s
        };
        // largest o with o*s + shift <= extent-1
        let top = extent as isize - 1 - shift;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        let lo = (lo as usize).min(outs);
        let hi = (hi as usize).min(outs).max(lo);
        (lo, hi)
    }
}

fn im2col<T: Real>(img: &[T], g: &Geom, col: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            let (ylo, yhi) = g.valid_range(ki, g.h, g.oh);
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                let dst = &mut col[row..row + p];
                let (xlo, xhi) = g.valid_range(kj, g.w, g.ow);
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if oy < ylo || oy >= yhi {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &img[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    if g.stride == 1 {
                        let x0 = xlo + kj - g.pad;
                        line[xlo..xhi].copy_from_slice(&src[x0..x0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            line[ox] = src[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add window columns back onto the image.
fn col2im<T: Real>(col: &[T], g: &Geom, img: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            let (ylo, yhi) = g.valid_range(ki, g.h, g.oh);
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                let src = &col[row..row + p];
                let (xlo, xhi) = g.valid_range(kj, g.w, g.ow);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let dst = &mut img[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    for ox in xlo..xhi {
                        dst[ox * g.stride + kj - g.pad] += line[ox];
                    }
                }
            }
        }
    }
}

fn conv_out_extent(n: usize, k: usize, spec: &ConvSpec) -> Result<usize> {
    if n + 2 * spec.pad < k {
        return shape_err(format!(
            "spatial extent {n} with padding {} is smaller than kernel {k}",
            spec.pad
        ));
    }
    Ok((n + 2 * spec.pad - k) / spec.stride + 1)
}

fn tconv_out_extent(n: usize, k: usize, spec: &ConvSpec) -> Result<usize> {
    let full = (n - 1) * spec.stride + k + spec.out_pad;
    if full <= 2 * spec.pad {
        return shape_err(format!(
            "transposed convolution padding {} too large for extent {n}",
            spec.pad
        ));
    }
    Ok(full - 2 * spec.pad)
}

struct ConvShapes {
    n: usize,
    ci: usize,
    co: usize,
    geom: Geom,
}

fn conv_shapes<T: Real>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<ConvShapes> {
    spec.validate()?;
    let (n, ci, h, wd) = x.dims4()?;
    let (co, wci, k, k2) = w.dims4()?;
    if k != k2 {
        return shape_err(format!("kernel must be square, got {k}x{k2}"));
    }
    if wci != ci {
        return shape_err(format!(
            "kernel expects {wci} input channels, input has {ci}"
        ));
    }
    let oh = conv_out_extent(h, k, spec)?;
    let ow = conv_out_extent(wd, k, spec)?;
    Ok(ConvShapes {
        n,
        ci,
        co,
        geom: Geom {
            c: ci,
            h,
            w: wd,
            k,
            stride: spec.stride,
            pad: spec.pad,
            oh,
            ow,
        },
    })
}

fn check_bias<T: Real>(b: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [channels] {
            return shape_err(format!(
                "bias shape {:?} does not match {channels} output channels",
                b.shape()
            ));
        }
    }
    Ok(())
}

fn add_bias<T: Real>(out: &mut [T], b: &[T], plane: usize) {
    for (chunk, &bv) in out.chunks_mut(plane).zip(b.iter().cycle()) {
        for v in chunk {
            *v += bv;
        }
    }
}

fn bias_grad<T: Real>(gy: &[T], channels: usize, plane: usize) -> Tensor<T> {
    let mut gb = vec![T::zero(); channels];
    for (i, chunk) in gy.chunks(plane).enumerate() {
        gb[i % channels] += chunk.iter().copied().sum();
    }
    Tensor::from_fn(&[channels], |i| gb[i])
}

/// Cross-correlation of `x` (`n × ci × h × w`) with `w` (`co × ci × k × k`).
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let s = conv_shapes(x, w, &spec)?;
    check_bias(b, s.co)?;
    let g = s.geom;
    let (rows, p) = (g.rows(), g.cols());
    let in_plane = s.ci * g.h * g.w;
    let mut out = vec![T::zero(); s.n * s.co * p];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * p]
    };
    for i in 0..s.n {
        let img = &x.data()[i * in_plane..(i + 1) * in_plane];
        let colv: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, &g, &mut col);
            &col
        };
        T::gemm(
            s.co,
            rows,
            p,
            (w.data(), rows as isize, 1),
            (colv, p as isize, 1),
            T::zero(),
            (&mut out[i * s.co * p..(i + 1) * s.co * p], p as isize, 1),
        );
    }
    if let Some(b) = b {
        add_bias(&mut out, b.data(), p);
    }
    Tensor::new(&[s.n, s.co, g.oh, g.ow], out)
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
///
/// The input gradient is skipped (returned as zeros) when `need_x` is false.
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    spec: ConvSpec,
    need_x: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = conv_shapes(x, w, &spec)?;
    let g = s.geom;
    let (rows, p) = (g.rows(), g.cols());
    let in_plane = s.ci * g.h * g.w;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut col = vec![T::zero(); rows * p];
    let mut gcol = vec![T::zero(); rows * p];
    for i in 0..s.n {
        let img = &x.data()[i * in_plane..(i + 1) * in_plane];
        let gyi = &gy.data()[i * s.co * p..(i + 1) * s.co * p];
        let colv: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, &g, &mut col);
            &col
        };
        // gW += gY · colᵀ
        T::gemm(
            s.co,
            p,
            rows,
            (gyi, p as isize, 1),
            (colv, 1, p as isize),
            T::one(),
            (&mut gw, rows as isize, 1),
        );
        if !need_x {
            continue;
        }
        // gcol = Wᵀ · gY
        let gxi = &mut gx[i * in_plane..(i + 1) * in_plane];
        if g.is_pointwise() {
            T::gemm(
                rows,
                s.co,
                p,
                (w.data(), 1, rows as isize),
                (gyi, p as isize, 1),
                T::zero(),
                (gxi, p as isize, 1),
            );
        } else {
            T::gemm(
                rows,
                s.co,
                p,
                (w.data(), 1, rows as isize),
                (gyi, p as isize, 1),
                T::zero(),
                (&mut gcol, p as isize, 1),
            );
            col2im(&gcol, &g, gxi);
        }
    }
    let gb = bias_grad(gy.data(), s.co, p);
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(w.shape(), gw)?, gb))
}

struct TconvShapes {
    n: usize,
    ci: usize,
    co: usize,
    /// Geometry of the adjoint convolution: image = output, windows = input.
    geom: Geom,
}

fn tconv_shapes<T: Real>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<TconvShapes> {
    spec.validate()?;
    let (n, ci, h, wd) = x.dims4()?;
    let (wci, co, k, k2) = w.dims4()?;
    if k != k2 {
        return shape_err(format!("kernel must be square, got {k}x{k2}"));
    }
    if wci != ci {
        return shape_err(format!(
            "transposed kernel expects {wci} input channels, input has {ci}"
        ));
    }
    let oh = tconv_out_extent(h, k, spec)?;
    let ow = tconv_out_extent(wd, k, spec)?;
    Ok(TconvShapes {
        n,
        ci,
        co,
        geom: Geom {
            c: co,
            h: oh,
            w: ow,
            k,
            stride: spec.stride,
            pad: spec.pad,
            oh: h,
            ow: wd,
        },
    })
}

/// Transposed convolution of `x` (`n × ci × h × w`) with `w` (`ci × co × k × k`).
///
/// Output extent is `(in − 1)·stride − 2·pad + k + out_pad`.
pub fn tconv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let s = tconv_shapes(x, w, &spec)?;
    check_bias(b, s.co)?;
    let g = s.geom;
    let (rows, p) = (g.rows(), g.cols());
    let out_plane = s.co * g.h * g.w;
    let mut out = vec![T::zero(); s.n * out_plane];
    let mut col = vec![T::zero(); rows * p];
    for i in 0..s.n {
        let xi = &x.data()[i * s.ci * p..(i + 1) * s.ci * p];
        let outi = &mut out[i * out_plane..(i + 1) * out_plane];
        if g.is_pointwise() {
            T::gemm(
                rows,
                s.ci,
                p,
                (w.data(), 1, rows as isize),
                (xi, p as isize, 1),
                T::zero(),
                (outi, p as isize, 1),
            );
        } else {
            // col = Wᵀ · x
            T::gemm(
                rows,
                s.ci,
                p,
                (w.data(), 1, rows as isize),
                (xi, p as isize, 1),
                T::zero(),
                (&mut col, p as isize, 1),
            );
            col2im(&col, &g, outi);
        }
    }
    if let Some(b) = b {
        add_bias(&mut out, b.data(), g.h * g.w);
    }
    Tensor::new(&[s.n, s.co, g.h, g.w], out)
}

pub(crate) fn tconv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    spec: ConvSpec,
    need_x: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = tconv_shapes(x, w, &spec)?;
    let g = s.geom;
    let (rows, p) = (g.rows(), g.cols());
    let out_plane = s.co * g.h * g.w;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut col = vec![T::zero(); rows * p];
    for i in 0..s.n {
        let xi = &x.data()[i * s.ci * p..(i + 1) * s.ci * p];
        let gyi = &gy.data()[i * out_plane..(i + 1) * out_plane];
        let colv: &[T] = if g.is_pointwise() {
            gyi
        } else {
            im2col(gyi, &g, &mut col);
            &col
        };
        // gx = W · im2col(gY)
        if need_x {
            T::gemm(
                s.ci,
                rows,
                p,
                (w.data(), rows as isize, 1),
                (colv, p as isize, 1),
                T::zero(),
                (&mut gx[i * s.ci * p..(i + 1) * s.ci * p], p as isize, 1),
            );
        }
        // gW += x · im2col(gY)ᵀ
        T::gemm(
            s.ci,
            p,
            rows,
            (xi, p as isize, 1),
            (colv, 1, p as isize),
            T::one(),
            (&mut gw, rows as isize, 1),
        );
    }
    let gb = bias_grad(gy.data(), s.co, g.h * g.w);
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(w.shape(), gw)?, gb))
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn check_reflect(h: usize, w: usize, size: usize) -> Result<()> {
    if size >= h || size >= w {
        return config_err(format!(
            "reflection padding {size} needs spatial extents above {size}, got {h}x{w}"
        ));
    }
    Ok(())
}

/// Mirror-pad every spatial border by `size` without repeating the edge sample.
pub fn reflect_pad_forward<T: Real>(x: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    check_reflect(h, w, size)?;
    if size == 0 {
        return Ok(x.clone());
    }
    let (ph, pw) = (h + 2 * size, w + 2 * size);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..ph {
            let sy = reflect(y as isize - size as isize, h);
            let row = &src[base + sy * w..base + (sy + 1) * w];
            for xx in 0..pw {
                out.push(row[reflect(xx as isize - size as isize, w)]);
            }
        }
    }
    Tensor::new(&[n, c, ph, pw], out)
}

pub(crate) fn reflect_pad_backward<T: Real>(
    x_shape: &[usize],
    gy: &Tensor<T>,
    size: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (ph, pw) = (h + 2 * size, w + 2 * size);
    let g = gy.data();
    let mut gx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        for y in 0..ph {
            let sy = reflect(y as isize - size as isize, h);
            for xx in 0..pw {
                let sx = reflect(xx as isize - size as isize, w);
                gx[plane * h * w + sy * w + sx] += g[plane * ph * pw + y * pw + xx];
            }
        }
    }
    Tensor::new(x_shape, gx)
}
