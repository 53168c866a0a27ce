//! Lossless coding of one plane of `B`-bit integers.
//!
//! Each value is sent as a binary tree walk over its `B` bits, most
//! significant first, so every tree node (bit position plus prefix) owns an
//! adaptive probability. The tree is selected by a bucket of the causal
//! neighbour: the left pixel, or the pixel above in the first column.
//! A leading mode byte selects arithmetic coding (0) or raw bit packing (1);
//! raw is used whenever arithmetic coding would not be smaller.

use super::rangecoder::{Decoder, Encoder, Prob};
use crate::error::{contract_err, format_err, Result};
use crate::quant::check_bits;

const MODE_CODED: u8 = 0;
const MODE_RAW: u8 = 1;
const BUCKETS: usize = 8;

struct Model {
    bits: u8,
    shift: u8,
    probs: Vec<Prob>,
}

impl Model {
    fn new(bits: u8) -> Self {
        Self {
            bits,
            shift: bits.saturating_sub(3),
            probs: vec![Prob::default(); BUCKETS << bits],
        }
    }

    fn tree(&mut self, neighbour: u8) -> &mut [Prob] {
        let size = 1usize << self.bits;
        let b = (neighbour >> self.shift) as usize;
        &mut self.probs[b * size..(b + 1) * size]
    }
}

fn neighbour(values: &[u8], width: usize, i: usize) -> u8 {
    if !i.is_multiple_of(width) {
        values[i - 1]
    } else if i >= width {
        values[i - width]
    } else {
        0
    }
}

/// Bytes needed to store the plane packed at `bits` per value.
pub fn raw_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

fn pack(values: &[u8], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; raw_len(values.len(), bits)];
    let mut pos = 0usize;
    for &v in values {
        for k in (0..bits).rev() {
            if (v >> k) & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

fn unpack(data: &[u8], count: usize, bits: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut v = 0u8;
        for _ in 0..bits {
            v = (v << 1) | ((data[pos / 8] >> (7 - pos % 8)) & 1);
            pos += 1;
        }
        out.push(v);
    }
    out
}

fn code(values: &[u8], width: usize, bits: u8) -> Vec<u8> {
    let mut model = Model::new(bits);
    let mut enc = Encoder::new();
    for (i, &v) in values.iter().enumerate() {
        let tree = model.tree(neighbour(values, width, i));
        let mut node = 1usize;
        for k in (0..bits).rev() {
            let bit = (v >> k) & 1 == 1;
            enc.encode(&mut tree[node], bit);
            node = (node << 1) | bit as usize;
        }
    }
    enc.finish()
}

/// Encode a row-major `width × height` plane of values below `2^bits`.
pub fn entropy_encode_plane(values: &[u8], width: usize, height: usize, bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    if values.len() != width * height || width == 0 {
        return contract_err(format!(
            "plane of {} values does not match {width}x{height}",
            values.len()
        ));
    }
    if let Some(v) = values.iter().find(|&&v| (v as u32) >> bits != 0) {
        return contract_err(format!("symbol {v} does not fit in {bits} bits"));
    }
    let coded = code(values, width, bits);
    let mut out = Vec::with_capacity(coded.len() + 1);
    if coded.len() < raw_len(values.len(), bits) {
        out.push(MODE_CODED);
        out.extend_from_slice(&coded);
    } else {
        out.push(MODE_RAW);
        out.extend_from_slice(&pack(values, bits));
    }
    Ok(out)
}

/// Inverse of [`entropy_encode_plane`]. Offsets in errors are relative to
/// the start of `data`.
pub fn entropy_decode_plane(data: &[u8], width: usize, height: usize, bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let count = width * height;
    let Some((&mode, body)) = data.split_first() else {
        return format_err(0, "empty plane payload");
    };
    match mode {
        MODE_RAW => {
            let need = raw_len(count, bits);
            if body.len() != need {
                return format_err(1, format!("raw plane needs {need} bytes, found {}", body.len()));
            }
            Ok(unpack(body, count, bits))
        }
        MODE_CODED => {
            let mut model = Model::new(bits);
            let mut dec = Decoder::new(body).map_err(|e| shift(e, 1))?;
            let mut values = Vec::with_capacity(count);
            for i in 0..count {
                let tree = model.tree(neighbour(&values, width, i));
                let mut node = 1usize;
                for _ in 0..bits {
                    let bit = dec.decode(&mut tree[node]).map_err(|e| shift(e, 1))?;
                    node = (node << 1) | bit as usize;
                }
                values.push((node - (1 << bits)) as u8);
            }
            Ok(values)
        }
        m => format_err(0, format!("unknown plane mode {m}")),
    }
}

pub(crate) fn shift(e: crate::Error, by: usize) -> crate::Error {
    match e {
        crate::Error::Format { offset, msg } => crate::Error::Format {
            offset: offset + by,
            msg,
        },
        other => other,
    }
}
