//! Checkpoint layout, little-endian throughout:
//!
//! ```text
//! "OCCM" | version u16
//! alpha_num u8 | alpha_den u8 | widths 5 × u32 | outer_kernel u8 | inner_kernel u8
//! flags u8 (bit 0 gdn, bit 1 residual blocks)
//! tensor count u32
//! per tensor: rank u8 | extents rank × u32 | values f32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{CodecModel, ModelConfig};
use crate::error::{format_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OCCM";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint<T: Real>(model: &CodecModel<T>, out: &mut impl Write) -> Result<()> {
    let c = model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(c.alpha_num);
    buf.push(c.alpha_den);
    for w in c.widths {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
    buf.push(c.outer_kernel as u8);
    buf.push(c.inner_kernel as u8);
    buf.push(c.use_gdn as u8 | (c.use_res as u8) << 1);
    buf.extend_from_slice(&(model.store().len() as u32).to_le_bytes());
    for (_, p) in model.store().iter() {
        let shape = p.value.shape();
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return format_err(
                self.pos,
                format!("truncated checkpoint while reading {what}"),
            );
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn read_checkpoint<T: Real>(input: &mut impl Read) -> Result<CodecModel<T>> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
    };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return format_err(0, "not a checkpoint (bad magic)");
    }
    let version = cur.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return format_err(4, format!("unsupported checkpoint version {version}"));
    }
    let alpha_num = cur.u8("alpha")?;
    let alpha_den = cur.u8("alpha")?;
    let mut widths = [0usize; 5];
    for w in &mut widths {
        *w = cur.u32("widths")? as usize;
    }
    let outer_kernel = cur.u8("kernel")? as usize;
    let inner_kernel = cur.u8("kernel")? as usize;
    let flags_at = cur.pos;
    let flags = cur.u8("flags")?;
    if flags & !3 != 0 {
        return format_err(flags_at, format!("unknown checkpoint flags {flags:#04x}"));
    }
    let config = ModelConfig {
        alpha_num,
        alpha_den,
        widths,
        outer_kernel,
        inner_kernel,
        use_gdn: flags & 1 != 0,
        use_res: flags & 2 != 0,
    };
    let mut model = CodecModel::<T>::new(config, 0).map_err(|e| Error::Format {
        offset: 6,
        msg: format!("invalid model configuration: {e}"),
    })?;
    let count_at = cur.pos;
    let count = cur.u32("tensor count")? as usize;
    if count != model.store().len() {
        return format_err(
            count_at,
            format!(
                "checkpoint holds {count} tensors, architecture needs {}",
                model.store().len()
            ),
        );
    }
    let ids: Vec<_> = model.store().iter().map(|(id, _)| id).collect();
    for id in ids {
        let at = cur.pos;
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("extent")? as usize);
        }
        let p = model.store_mut().get_mut(id);
        if shape != p.value.shape() {
            return format_err(
                at,
                format!(
                    "tensor {} has shape {shape:?}, expected {:?}",
                    p.name,
                    p.value.shape()
                ),
            );
        }
        let n = p.value.len();
        let raw = cur.take(4 * n, "tensor values")?;
        let values = raw
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        p.value = Tensor::new(&shape, values)?;
    }
    if cur.pos != data.len() {
        return format_err(cur.pos, "trailing bytes after checkpoint");
    }
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &CodecModel<T>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<CodecModel<T>> {
    read_checkpoint(&mut std::fs::File::open(path)?)
}
