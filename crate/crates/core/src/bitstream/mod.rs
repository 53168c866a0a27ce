//! Wire format and the image-level codec built on it.
//!
//! The base layer carries the quantized code maps, one entropy-coded record
//! per channel. The enhancement layer carries the residual between the input
//! and the base reconstruction.

mod container;
mod plane;
mod rangecoder;
mod residual;

pub use container::{
    BackendId, Container, Header, LayerSizes, ResidualRecord, FLAG_DETERMINISTIC, HEADER_LEN,
    MAGIC, VERSION,
};
pub use plane::{entropy_decode_plane, entropy_encode_plane, raw_len};
pub use rangecoder::{Decoder as RangeDecoder, Encoder as RangeEncoder, Prob};
pub use residual::{
    check_step, decode_residual, encode_residual, rescale, unscale, ExternalBackend,
    ResidualBackend, ResidualConfig, MAX_STEP, MIN_STEP,
};

use crate::error::{config_err, format_err, Result};
use crate::imageio::Image;
use crate::model::{CodecModel, MIN_INPUT, SIZE_MULTIPLE};
use crate::quant::{dequantize_pair, quantize_pair, QuantMode, QuantizedPlane, Quantizer, QuantizerConfig};
use crate::tensor::Real;

/// Extents the network sees for an image of the given size.
pub fn padded_dims(width: usize, height: usize) -> (usize, usize) {
    let up = |v: usize| v.div_ceil(SIZE_MULTIPLE).max(1) * SIZE_MULTIPLE;
    (up(width).max(MIN_INPUT), up(height).max(MIN_INPUT))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodeOptions {
    pub bits: u8,
    pub mode: QuantMode,
    /// Dither seed for the stochastic mode.
    pub seed: u64,
    pub residual: ResidualConfig,
}

impl EncodeOptions {
    pub fn deterministic(bits: u8) -> Self {
        Self {
            bits,
            mode: QuantMode::Deterministic,
            seed: 0,
            residual: ResidualConfig::none(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Needed only for containers whose residual used the external backend.
    pub external: Option<ExternalBackend>,
}

#[derive(Clone, Debug)]
pub struct EncodedImage {
    pub bytes: Vec<u8>,
    pub sizes: LayerSizes,
    pub width: usize,
    pub height: usize,
    /// Base-layer reconstruction, cropped and clamped.
    pub base: Image,
}

impl EncodedImage {
    pub fn bpp(&self) -> f64 {
        bpp(self.sizes.total(), self.width, self.height)
    }

    pub fn base_bpp(&self) -> f64 {
        bpp(self.sizes.base, self.width, self.height)
    }

    pub fn enhancement_bpp(&self) -> f64 {
        bpp(self.sizes.enhancement, self.width, self.height)
    }
}

pub fn bpp(bytes: usize, width: usize, height: usize) -> f64 {
    8.0 * bytes as f64 / (width * height) as f64
}

#[derive(Clone, Debug)]
pub struct DecodedImage {
    /// Final reconstruction in `[0, 1]`.
    pub image: Image,
    /// Base-layer reconstruction, cropped and clamped.
    pub base: Image,
    pub header: Header,
    pub sizes: LayerSizes,
}

fn reconstruct<T: Real>(
    model: &CodecModel<T>,
    planes: &[QuantizedPlane],
    width: usize,
    height: usize,
) -> Result<Image> {
    let split = model.config().map_split()?;
    let maps = dequantize_pair::<T>(planes, 1, (split.high, split.low))?;
    let xbar = model.decode_features(maps.as_ref())?;
    Image::from_tensor(&xbar)?.crop(width, height)
}

fn residual_of(x: &Image, xbar: &Image) -> Image {
    Image {
        width: x.width,
        height: x.height,
        data: x.data.iter().zip(&xbar.data).map(|(a, b)| a - b).collect(),
    }
}

/// Encode an image of any size with values in `[0, 1]`.
pub fn encode_image<T: Real>(x: &Image, model: &CodecModel<T>, opts: &EncodeOptions) -> Result<EncodedImage> {
    let (pw, ph) = padded_dims(x.width, x.height);
    let (alpha_num, alpha_den) = (model.config().alpha_num, model.config().alpha_den);
    let channels = u8::try_from(model.config().map_channels())
        .or_else(|_| config_err("more than 255 code-map channels"))?;
    let (width, height) = match (u32::try_from(x.width), u32::try_from(x.height)) {
        (Ok(w), Ok(h)) => (w, h),
        _ => return config_err("image extent exceeds u32"),
    };

    let padded = x.pad_replicate(pw, ph)?;
    let maps = model.encode_features(&padded.to_tensor::<T>())?;
    let mut quant = Quantizer::new(QuantizerConfig::new(opts.bits, opts.mode, opts.seed)?)?;
    let planes = quantize_pair(&mut quant, maps.as_ref())?;

    let xbar = reconstruct(model, &planes, x.width, x.height)?;
    let residual = encode_residual(&residual_of(x, &xbar), &opts.residual)?;

    let container = Container {
        header: Header {
            width,
            height,
            channels,
            alpha_num,
            alpha_den,
            bits: opts.bits,
            flags: if opts.mode == QuantMode::Deterministic {
                FLAG_DETERMINISTIC
            } else {
                0
            },
        },
        planes,
        residual,
    };
    let (bytes, sizes) = container.to_bytes_sized()?;
    Ok(EncodedImage {
        bytes,
        sizes,
        width: x.width,
        height: x.height,
        base: xbar.clamped(),
    })
}

/// Decode a container with the model it was produced by.
pub fn decode_image<T: Real>(bytes: &[u8], model: &CodecModel<T>, opts: &DecodeOptions) -> Result<DecodedImage> {
    let (c, sizes) = Container::from_bytes_sized(bytes)?;
    let h = c.header;
    let (alpha_num, alpha_den) = (model.config().alpha_num, model.config().alpha_den);
    if h.channels as usize != model.config().map_channels()
        || (h.alpha_num, h.alpha_den) != (alpha_num, alpha_den)
    {
        return config_err(format!(
            "container was produced by a model with {} channels and alpha {}/{}, \
             the loaded model has {} and {alpha_num}/{alpha_den}",
            h.channels,
            h.alpha_num,
            h.alpha_den,
            model.config().map_channels()
        ));
    }
    let (width, height) = (h.width as usize, h.height as usize);
    let (pw, ph) = padded_dims(width, height);
    let (hs, ls) = model.map_shapes(1, ph, pw)?;
    let split = model.config().map_split()?;
    for (k, p) in c.planes.iter().enumerate() {
        let s = if k < split.high { hs } else { ls };
        if (p.height, p.width) != (s[2], s[3]) {
            return format_err(
                HEADER_LEN,
                format!(
                    "channel {k} is {}x{}, expected {}x{} for a {width}x{height} image",
                    p.width, p.height, s[3], s[2]
                ),
            );
        }
    }
    let xbar = reconstruct(model, &c.planes, width, height)?;
    let r = decode_residual(&c.residual, width, height, opts.external.as_ref())?;
    let image = Image::new(
        width,
        height,
        xbar.data.iter().zip(&r.data).map(|(a, b)| (a + b).clamp(0.0, 1.0)).collect(),
    )?;
    Ok(DecodedImage {
        image,
        base: xbar.clamped(),
        header: h,
        sizes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::Error;

    fn model() -> CodecModel<f32> {
        CodecModel::new(
            ModelConfig {
                widths: [4, 4, 4, 4, 4],
                ..ModelConfig::desk()
            },
            3,
        )
        .unwrap()
    }

    fn picture(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |c, y, x| {
            0.5 + 0.4 * (((x * (c + 1)) as f32 * 0.21).sin() * ((y as f32) * 0.13).cos())
        })
    }

    #[test]
    fn padding_rule() {
        assert_eq!(padded_dims(64, 64), (64, 64));
        assert_eq!(padded_dims(65, 20), (80, 64));
        assert_eq!(padded_dims(1, 200), (64, 208));
    }

    #[test]
    fn round_trip_odd_size_without_residual() {
        let m = model();
        let x = picture(70, 51);
        let enc = encode_image(&x, &m, &EncodeOptions::deterministic(4)).unwrap();
        assert_eq!(enc.sizes.enhancement, 13);
        assert_eq!(enc.bpp(), 8.0 * enc.bytes.len() as f64 / (70.0 * 51.0));
        let dec = decode_image(&enc.bytes, &m, &DecodeOptions::default()).unwrap();
        assert_eq!((dec.image.width, dec.image.height), (70, 51));
        assert_eq!(dec.image, enc.base);
        assert_eq!(dec.header.bits, 4);
        assert!(dec.header.deterministic());
        let again = encode_image(&x, &m, &EncodeOptions::deterministic(4)).unwrap();
        assert_eq!(again.bytes, enc.bytes);
    }

    #[test]
    fn residual_improves_reconstruction() {
        let m = model();
        let x = picture(64, 64);
        let mut opts = EncodeOptions::deterministic(3);
        opts.residual = ResidualConfig::builtin(1).unwrap();
        let enc = encode_image(&x, &m, &opts).unwrap();
        let dec = decode_image(&enc.bytes, &m, &DecodeOptions::default()).unwrap();
        let err = |a: &Image| {
            a.data
                .iter()
                .zip(&x.data)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0f32, f32::max)
        };
        assert!(err(&dec.image) < err(&dec.base));
        assert!(err(&dec.image) < 0.01);
    }

    #[test]
    fn wrong_model_is_rejected() {
        let x = picture(64, 64);
        let enc = encode_image(&x, &model(), &EncodeOptions::deterministic(2)).unwrap();
        let other = CodecModel::<f32>::new(
            ModelConfig {
                widths: [4, 4, 4, 4, 6],
                ..ModelConfig::desk()
            },
            3,
        )
        .unwrap();
        assert!(matches!(
            decode_image(&enc.bytes, &other, &DecodeOptions::default()),
            Err(Error::Config(_))
        ));
    }
}
