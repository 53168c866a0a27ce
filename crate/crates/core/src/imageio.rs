//! Planar RGB images in `[0, 1]`, binary PPM I/O, PNG decoding and the
//! small geometric helpers used by ingestion and the codec.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{format_err, shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Planar `3 × height × width` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return shape_err(format!(
                "image {width}x{height} needs {} samples, got {}",
                3 * width * height,
                data.len()
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// From interleaved 8-bit RGB.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * width * height {
            return shape_err("interleaved buffer does not match the image size");
        }
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Self::new(width, height, data)
    }

    /// To interleaved 8-bit RGB, rounding and clamping.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push(to_u8(self.data[c * plane + i]));
            }
        }
        out
    }

    pub fn clamped(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// `1 × 3 × h × w` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, 3, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("image dimensions are consistent")
    }

    /// From a `1 × 3 × h × w` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || c != 3 {
            return shape_err(format!("expected a 1×3×h×w tensor, got {:?}", t.shape()));
        }
        Self::new(w, h, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    /// Extend to `width × height` by replicating the last row and column.
    pub fn pad_replicate(&self, width: usize, height: usize) -> Result<Self> {
        if width < self.width || height < self.height {
            return shape_err("replicate padding cannot shrink an image");
        }
        Ok(Self::from_fn(width, height, |c, y, x| {
            self.at(c, y.min(self.height - 1), x.min(self.width - 1))
        }))
    }

    /// Top-left `width × height` window.
    pub fn crop(&self, width: usize, height: usize) -> Result<Self> {
        if width > self.width || height > self.height || width == 0 || height == 0 {
            return shape_err(format!(
                "cannot crop {width}x{height} from {}x{}",
                self.width, self.height
            ));
        }
        Ok(Self::from_fn(width, height, |c, y, x| self.at(c, y, x)))
    }

    /// Window at `(x0, y0)` of size `width × height`.
    pub fn crop_at(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height || width == 0 || height == 0 {
            return shape_err("crop window exceeds the image");
        }
        Ok(Self::from_fn(width, height, |c, y, x| self.at(c, y0 + y, x0 + x)))
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return shape_err("cannot resize to an empty image");
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let coord = |o: usize, s: f64, n: usize| {
            let p = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, (p - i0 as f64) as f32)
        };
        Ok(Self::from_fn(width, height, |c, y, x| {
            let (y0, y1, fy) = coord(y, sy, self.height);
            let (x0, x1, fx) = coord(x, sx, self.width);
            let top = self.at(c, y0, x0) * (1.0 - fx) + self.at(c, y0, x1) * fx;
            let bot = self.at(c, y1, x0) * (1.0 - fx) + self.at(c, y1, x1) * fx;
            top * (1.0 - fy) + bot * fy
        }))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ppm_token(r: &mut impl BufRead, offset: &mut usize) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return format_err(*offset, "truncated PPM header");
            }
            return Ok(tok);
        }
        *offset += 1;
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            *offset += r.read_until(b'\n', &mut skip)?;
        } else if b.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(b as char);
        }
    }
}

/// Binary 8-bit PPM (P6).
pub fn read_ppm(input: impl Read) -> Result<Image> {
    let mut r = BufReader::new(input);
    let mut off = 0;
    if ppm_token(&mut r, &mut off)? != "P6" {
        return format_err(0, "not a binary PPM (P6)");
    }
    let mut num = |what: &str| -> Result<usize> {
        let at = off;
        let t = ppm_token(&mut r, &mut off)?;
        t.parse::<usize>()
            .map_err(|_| Error::Format {
                offset: at,
                msg: format!("bad PPM {what} {t:?}"),
            })
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return format_err(off, format!("only 8-bit PPM is supported, maxval {maxval}"));
    }
    if width == 0 || height == 0 || width > 1 << 15 || height > 1 << 15 {
        return format_err(off, format!("unsupported PPM size {width}x{height}"));
    }
    let mut rgb = vec![0u8; 3 * width * height];
    r.read_exact(&mut rgb).map_err(|_| Error::Format {
        offset: off,
        msg: "truncated PPM pixel data".into(),
    })?;
    Image::from_rgb8(width, height, &rgb)
}

pub fn write_ppm(img: &Image, mut out: impl Write) -> Result<()> {
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    out.write_all(&img.to_rgb8())?;
    Ok(())
}

/// Read a PPM or PNG file, chosen by extension.
pub fn load_image(path: &Path) -> Result<Image> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "ppm" => read_ppm(std::fs::File::open(path)?),
        "png" => {
            let img = image::open(path)
                .map_err(|e| Error::Format {
                    offset: 0,
                    msg: format!("{}: {e}", path.display()),
                })?
                .to_rgb8();
            Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
        }
        _ => Err(Error::Config(format!(
            "{}: unsupported image type (expected .ppm or .png)",
            path.display()
        ))),
    }
}

pub fn save_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ppm(img, &mut f)?;
    f.flush()?;
    Ok(())
}
