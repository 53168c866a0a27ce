//! The `OCBS` container: header, one record per code-map channel, and the
//! residual record. Multi-byte integers are little-endian.

use super::plane::{entropy_decode_plane, entropy_encode_plane, shift};
use crate::error::{format_err, Result};
use crate::quant::{check_bits, QuantizedPlane};

pub const MAGIC: &[u8; 4] = b"OCBS";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 1 + 1 + 1 + 1 + 1;

pub const FLAG_DETERMINISTIC: u8 = 1;
const KNOWN_FLAGS: u8 = FLAG_DETERMINISTIC;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub alpha_num: u8,
    pub alpha_den: u8,
    pub bits: u8,
    pub flags: u8,
}

impl Header {
    pub fn deterministic(&self) -> bool {
        self.flags & FLAG_DETERMINISTIC != 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[repr(u8)]
pub enum BackendId {
    #[default]
    None = 0,
    Builtin = 1,
    External = 2,
}

impl BackendId {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::None),
            1 => Some(Self::Builtin),
            2 => Some(Self::External),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ResidualRecord {
    pub backend: BackendId,
    pub r_min: f32,
    pub r_max: f32,
    pub payload: Vec<u8>,
}

impl ResidualRecord {
    pub fn none() -> Self {
        Self::default()
    }

    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        1 + 4 + 4 + 4 + self.payload.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Header,
    /// One per code-map channel; all carry `header.bits`.
    pub planes: Vec<QuantizedPlane>,
    pub residual: ResidualRecord,
}

/// Byte sizes of the two layers of a serialized container.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSizes {
    /// Header plus channel records.
    pub base: usize,
    pub enhancement: usize,
}

impl LayerSizes {
    pub fn total(&self) -> usize {
        self.base + self.enhancement
    }
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_bytes_sized()?.0)
    }

    pub fn to_bytes_sized(&self) -> Result<(Vec<u8>, LayerSizes)> {
        let h = &self.header;
        check_bits(h.bits)?;
        if self.planes.len() != h.channels as usize {
            return crate::error::contract_err(format!(
                "header declares {} channels but {} planes are present",
                h.channels,
                self.planes.len()
            ));
        }
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&h.width.to_le_bytes());
        out.extend_from_slice(&h.height.to_le_bytes());
        out.extend_from_slice(&[h.channels, h.alpha_num, h.alpha_den, h.bits, h.flags]);
        for p in &self.planes {
            if p.bits != h.bits {
                return crate::error::contract_err("plane bit depth differs from the header");
            }
            p.validate()?;
            let (w, ht) = match (u16::try_from(p.width), u16::try_from(p.height)) {
                (Ok(w), Ok(ht)) => (w, ht),
                _ => return crate::error::contract_err("plane extent exceeds 65535"),
            };
            let payload = entropy_encode_plane(&p.values, p.width, p.height, p.bits)?;
            out.extend_from_slice(&w.to_le_bytes());
            out.extend_from_slice(&ht.to_le_bytes());
            out.extend_from_slice(&p.min_val.to_le_bytes());
            out.extend_from_slice(&p.max_val.to_le_bytes());
            out.push(p.zero_point);
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        let base = out.len();
        let r = &self.residual;
        if !(r.r_min.is_finite() && r.r_max.is_finite()) || r.r_min > r.r_max {
            return crate::error::contract_err("residual range is not a finite ordered pair");
        }
        if r.backend == BackendId::None && !r.payload.is_empty() {
            return crate::error::contract_err("residual backend 0 carries a payload");
        }
        out.push(r.backend as u8);
        out.extend_from_slice(&r.r_min.to_le_bytes());
        out.extend_from_slice(&r.r_max.to_le_bytes());
        out.extend_from_slice(&(r.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&r.payload);
        let enhancement = out.len() - base;
        Ok((out, LayerSizes { base, enhancement }))
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        Ok(Self::from_bytes_sized(data)?.0)
    }

    pub fn from_bytes_sized(data: &[u8]) -> Result<(Self, LayerSizes)> {
        let mut r = Reader { data, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return format_err(0, "bad magic, not an OCBS container");
        }
        let at = r.pos;
        let version = r.u16("version")?;
        if version != VERSION {
            return format_err(at, format!("unsupported container version {version}"));
        }
        let width = r.u32("width")?;
        let height = r.u32("height")?;
        if width == 0 || height == 0 {
            return format_err(6, "image extent is zero");
        }
        let channels = r.u8("channel count")?;
        let alpha_num = r.u8("alpha numerator")?;
        let alpha_den = r.u8("alpha denominator")?;
        if alpha_den == 0 || alpha_num > alpha_den {
            return format_err(r.pos - 1, format!("invalid alpha {alpha_num}/{alpha_den}"));
        }
        let at = r.pos;
        let bits = r.u8("bits")?;
        if check_bits(bits).is_err() {
            return format_err(at, format!("bit depth {bits} outside [1, 8]"));
        }
        let at = r.pos;
        let flags = r.u8("flags")?;
        if flags & !KNOWN_FLAGS != 0 {
            return format_err(at, format!("unknown flag bits {flags:#04x}"));
        }
        let header = Header {
            width,
            height,
            channels,
            alpha_num,
            alpha_den,
            bits,
            flags,
        };

        let mut planes = Vec::with_capacity(channels as usize);
        for k in 0..channels {
            let start = r.pos;
            let pw = r.u16("plane width")? as usize;
            let ph = r.u16("plane height")? as usize;
            let min_val = r.f32("plane minimum")?;
            let max_val = r.f32("plane maximum")?;
            if !(min_val.is_finite() && max_val.is_finite()) || min_val > max_val {
                return format_err(start + 4, format!("channel {k} has an invalid range"));
            }
            let at = r.pos;
            let zero_point = r.u8("zero point")?;
            if zero_point as u32 >> bits != 0 {
                return format_err(at, format!("zero point {zero_point} exceeds {bits} bits"));
            }
            if pw == 0 || ph == 0 {
                return format_err(start, format!("channel {k} has an empty plane"));
            }
            let len = r.u32("payload length")? as usize;
            let body_at = r.pos;
            let body = r.take(len, "plane payload")?;
            let values = entropy_decode_plane(body, pw, ph, bits).map_err(|e| shift(e, body_at))?;
            planes.push(QuantizedPlane {
                width: pw,
                height: ph,
                bits,
                min_val,
                max_val,
                zero_point,
                values,
            });
        }
        let base = r.pos;

        let at = r.pos;
        let id = r.u8("residual backend")?;
        let Some(backend) = BackendId::from_u8(id) else {
            return format_err(at, format!("unknown residual backend {id}"));
        };
        let at = r.pos;
        let r_min = r.f32("residual minimum")?;
        let r_max = r.f32("residual maximum")?;
        if !(r_min.is_finite() && r_max.is_finite()) || r_min > r_max {
            return format_err(at, "residual range is not a finite ordered pair");
        }
        let at = r.pos;
        let len = r.u32("residual length")? as usize;
        if backend == BackendId::None && len != 0 {
            return format_err(at, "residual backend 0 must carry no payload");
        }
        let payload = r.take(len, "residual payload")?.to_vec();
        if r.pos != data.len() {
            return format_err(r.pos, format!("{} trailing bytes", data.len() - r.pos));
        }
        let sizes = LayerSizes {
            base,
            enhancement: data.len() - base,
        };
        Ok((
            Self {
                header,
                planes,
                residual: ResidualRecord {
                    backend,
                    r_min,
                    r_max,
                    payload,
                },
            },
            sizes,
        ))
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.data.len()) {
            Some(end) => {
                let s = &self.data[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => format_err(
                self.data.len(),
                format!("truncated container: {what} needs {n} bytes at {}", self.pos),
            ),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
