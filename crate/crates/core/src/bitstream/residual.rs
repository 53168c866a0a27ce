//! Residual enhancement layer. The residual is mapped affinely from
//! `[r_min, r_max]` to `[0, 255]` and handed to a backend: the built-in one
//! requantizes by an integer step and entropy-codes each channel, the
//! external one runs a shell command on an 8-bit PPM.

use std::path::{Path, PathBuf};
use std::process::Command;

use super::container::{BackendId, ResidualRecord};
use super::plane::{entropy_decode_plane, entropy_encode_plane, shift};
use crate::error::{config_err, contract_err, format_err, Error, Result};
use crate::imageio::{read_ppm, write_ppm, Image};

pub const MIN_STEP: u8 = 1;
pub const MAX_STEP: u8 = 64;

/// Shell command templates. `{input}`, `{output}` and `{quality}` are
/// substituted before the command runs under `sh -c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExternalBackend {
    pub encode_cmd: String,
    pub decode_cmd: String,
    pub quality: u32,
    /// Directory for scratch files; the system temp dir when `None`.
    pub scratch: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum ResidualBackend {
    #[default]
    None,
    /// Requantization step in `[1, 64]`.
    Builtin { step: u8 },
    External(ExternalBackend),
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ResidualConfig {
    pub backend: ResidualBackend,
    /// Drop the residual instead of failing when the external command fails.
    pub fallback_to_none: bool,
}

impl ResidualConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn builtin(step: u8) -> Result<Self> {
        check_step(step)?;
        Ok(Self {
            backend: ResidualBackend::Builtin { step },
            fallback_to_none: false,
        })
    }
}

pub fn check_step(step: u8) -> Result<()> {
    if !(MIN_STEP..=MAX_STEP).contains(&step) {
        return config_err(format!(
            "residual quality step {step} outside [{MIN_STEP}, {MAX_STEP}]"
        ));
    }
    Ok(())
}

/// `[r_min, r_max] → [0, 255]`, rounding half away from zero.
pub fn rescale(r: f32, r_min: f32, r_max: f32) -> u8 {
    if r_max <= r_min {
        return 0;
    }
    let t = (r as f64 - r_min as f64) / (r_max as f64 - r_min as f64) * 255.0;
    t.round().clamp(0.0, 255.0) as u8
}

pub fn unscale(v: u8, r_min: f32, r_max: f32) -> f32 {
    (r_min as f64 + v as f64 / 255.0 * (r_max as f64 - r_min as f64)) as f32
}

fn bits_for(max: u32) -> u8 {
    (32 - max.leading_zeros()).max(1) as u8
}

fn builtin_encode(codes: &Image, step: u8) -> Result<Vec<u8>> {
    let top = (255.0 / step as f64).round() as u32;
    let bits = bits_for(top);
    let area = codes.width * codes.height;
    let mut out = vec![step, bits];
    for c in 0..3 {
        let idx: Vec<u8> = codes.data[c * area..(c + 1) * area]
            .iter()
            .map(|&v| (v as f64 / step as f64).round() as u8)
            .collect();
        let payload = entropy_encode_plane(&idx, codes.width, codes.height, bits)?;
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

fn builtin_decode(payload: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    if payload.len() < 2 {
        return format_err(0, "built-in residual payload is truncated");
    }
    let (step, bits) = (payload[0], payload[1]);
    if check_step(step).is_err() || bits != bits_for((255.0 / step as f64).round() as u32) {
        return format_err(0, format!("invalid residual step {step} / bits {bits}"));
    }
    let mut pos = 2;
    let mut out = Vec::with_capacity(3 * width * height);
    for _ in 0..3 {
        let Some(len) = payload.get(pos..pos + 4) else {
            return format_err(pos, "built-in residual payload is truncated");
        };
        let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
        pos += 4;
        let Some(body) = payload.get(pos..pos.saturating_add(len)) else {
            return format_err(pos, "built-in residual plane is truncated");
        };
        let idx = entropy_decode_plane(body, width, height, bits).map_err(|e| shift(e, pos))?;
        out.extend(idx.iter().map(|&i| (i as u32 * step as u32).min(255) as u8));
        pos += len;
    }
    if pos != payload.len() {
        return format_err(pos, "trailing bytes in built-in residual payload");
    }
    Ok(out)
}

fn scratch_dir(ext: &ExternalBackend) -> Result<tempfile::TempDir> {
    Ok(match &ext.scratch {
        Some(dir) => tempfile::tempdir_in(dir)?,
        None => tempfile::tempdir()?,
    })
}

fn quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

fn run(template: &str, input: &Path, output: &Path, quality: u32) -> Result<()> {
    let cmd = template
        .replace("{input}", &quote(input))
        .replace("{output}", &quote(output))
        .replace("{quality}", &quality.to_string());
    let out = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| Error::Backend(format!("cannot spawn `{cmd}`: {e}")))?;
    if !out.status.success() {
        return Err(Error::Backend(format!(
            "`{cmd}` exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(())
}

fn external_encode(codes: &Image, ext: &ExternalBackend) -> Result<Vec<u8>> {
    let dir = scratch_dir(ext)?;
    let input = dir.path().join("residual.ppm");
    let output = dir.path().join("residual.bin");
    write_ppm(codes, std::fs::File::create(&input)?)?;
    run(&ext.encode_cmd, &input, &output, ext.quality)?;
    std::fs::read(&output)
        .map_err(|e| Error::Backend(format!("backend produced no output file: {e}")))
}

fn external_decode(payload: &[u8], width: usize, height: usize, ext: &ExternalBackend) -> Result<Vec<u8>> {
    let dir = scratch_dir(ext)?;
    let input = dir.path().join("residual.bin");
    let output = dir.path().join("residual.ppm");
    std::fs::write(&input, payload)?;
    run(&ext.decode_cmd, &input, &output, ext.quality)?;
    let file = std::fs::File::open(&output)
        .map_err(|e| Error::Backend(format!("backend produced no output image: {e}")))?;
    let img = read_ppm(file).map_err(|e| Error::Backend(format!("backend output: {e}")))?;
    if img.width != width || img.height != height {
        return Err(Error::Backend(format!(
            "backend returned {}x{}, expected {width}x{height}",
            img.width, img.height
        )));
    }
    Ok(img.data.iter().map(|&v| (v * 255.0).round() as u8).collect())
}

/// Build the residual record for a 3-channel residual (values unrestricted).
pub fn encode_residual(r: &Image, cfg: &ResidualConfig) -> Result<ResidualRecord> {
    if cfg.backend == ResidualBackend::None {
        return Ok(ResidualRecord::none());
    }
    if r.data.iter().any(|v| !v.is_finite()) {
        return contract_err("residual contains non-finite values");
    }
    let r_min = r.data.iter().copied().fold(f32::INFINITY, f32::min);
    let r_max = r.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut codes = r.clone();
    for v in codes.data.iter_mut() {
        *v = rescale(*v, r_min, r_max) as f32;
    }
    let (backend, payload) = match &cfg.backend {
        ResidualBackend::None => unreachable!(),
        ResidualBackend::Builtin { step } => {
            check_step(*step)?;
            if r_min == r_max {
                (BackendId::Builtin, Vec::new())
            } else {
                (BackendId::Builtin, builtin_encode(&codes, *step)?)
            }
        }
        ResidualBackend::External(ext) => {
            // the PPM writer expects [0, 1]
            for v in codes.data.iter_mut() {
                *v /= 255.0;
            }
            match external_encode(&codes, ext) {
                Ok(p) => (BackendId::External, p),
                Err(Error::Backend(_)) if cfg.fallback_to_none => return Ok(ResidualRecord::none()),
                Err(e) => return Err(e),
            }
        }
    };
    Ok(ResidualRecord {
        backend,
        r_min,
        r_max,
        payload,
    })
}

/// Reconstruct the residual. `external` must be given for backend 2.
pub fn decode_residual(
    rec: &ResidualRecord,
    width: usize,
    height: usize,
    external: Option<&ExternalBackend>,
) -> Result<Image> {
    let codes = match rec.backend {
        BackendId::None => return Ok(Image::from_fn(width, height, |_, _, _| 0.0)),
        BackendId::Builtin if rec.payload.is_empty() && rec.r_min == rec.r_max => {
            vec![0; 3 * width * height]
        }
        BackendId::Builtin => builtin_decode(&rec.payload, width, height)?,
        BackendId::External => match external {
            Some(ext) => external_decode(&rec.payload, width, height, ext)?,
            None => {
                return config_err(
                    "container uses an external residual backend but no decode command is configured",
                )
            }
        },
    };
    Image::new(
        width,
        height,
        codes.iter().map(|&v| unscale(v, rec.r_min, rec.r_max)).collect(),
    )
}
