use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use octacodec::bitstream::{bpp, decode_image, encode_image, DecodeOptions, EncodeOptions};
use octacodec::imageio::{load_image, save_ppm, Image};
use octacodec::model::{load_checkpoint, save_checkpoint, train, CodecModel};
use octacodec::quant::{check_bits, QuantMode};
use octacodec::{Error, Result};

use crate::config::RunConfig;

pub fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn prepare_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    let echo = cfg.out.join("config.txt");
    std::fs::write(&echo, cfg.echo()).map_err(|e| io_err(&echo, e))
}

pub fn load_model(path: &Path) -> Result<CodecModel<f32>> {
    load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => io_err(path, io),
        other => other,
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// Image files of a directory in name order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| io_err(dir, e))?.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("ppm" | "png")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Load every usable training image, resized to `size × size`.
pub fn ingest(dir: &Path, size: usize) -> Result<Vec<Image>> {
    let mut out = Vec::new();
    for p in list_images(dir)? {
        match load_image(&p) {
            Ok(img) if img.width < size || img.height < size => eprintln!(
                "warning: skipping {} ({}x{} is smaller than {size}x{size})",
                p.display(),
                img.width,
                img.height
            ),
            Ok(img) => out.push(img.resize_bilinear(size, size)?),
            Err(e) => eprintln!("warning: skipping {}: {e}", p.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no usable images in {}", dir.display())));
    }
    Ok(out)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data_dir = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data in the config".into()))?;
    if !data_dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset directory {} does not exist", data_dir.display()),
        )));
    }
    prepare_out(cfg)?;
    let images = ingest(&data_dir, cfg.train_size)?;
    let data: Vec<_> = images.iter().map(Image::to_tensor::<f32>).collect();
    let mut tc = cfg.train_config()?;
    if tc.steps == 0 {
        tc.steps = cfg.epochs * data.len().div_ceil(cfg.batch);
    }
    eprintln!(
        "training on {} images for {} steps (batch {}, lr {})",
        data.len(),
        tc.steps,
        tc.batch,
        tc.lr
    );
    let mut model = CodecModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let ckpt = cfg.out.join("model.occm");
    let log = train(&mut model, &data, &tc, |r, m| {
        eprintln!(
            "epoch {:>4}  step {:>6}/{}  mean loss {:.5}",
            r.epoch, r.steps_done, tc.steps, r.mean_loss
        );
        save_checkpoint(m, &ckpt)
    })?;

    let mut csv = String::from("step,epoch,lr,total,l2,msssim\n");
    for s in &log.steps {
        let _ = writeln!(csv, "{},{},{},{},{},{}", s.step, s.epoch, s.lr, s.total, s.l2, s.msssim);
    }
    let path = cfg.out.join("loss.csv");
    std::fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
    println!("wrote {} and {}", ckpt.display(), path.display());
    Ok(())
}

pub fn encode_options(cfg: &RunConfig, bits: u8, quality: u32) -> Result<EncodeOptions> {
    check_bits(bits)?;
    Ok(EncodeOptions {
        bits,
        mode: if cfg.deterministic_quant {
            QuantMode::Deterministic
        } else {
            QuantMode::Stochastic
        },
        seed: cfg.seed,
        residual: cfg.residual_for(quality)?,
    })
}

pub fn cmd_encode(cfg: &RunConfig, checkpoint: &Path, image: &Path, bits: u8, quality: u32) -> Result<()> {
    let opts = encode_options(cfg, bits, quality)?;
    let model = load_model(checkpoint)?;
    let x = load_image(image).map_err(|e| match e {
        Error::Io(io) => io_err(image, io),
        other => other,
    })?;
    prepare_out(cfg)?;
    let enc = encode_image(&x, &model, &opts)?;
    let path = cfg.out.join(format!("{}.ocbs", stem(image)));
    std::fs::write(&path, &enc.bytes).map_err(|e| io_err(&path, e))?;
    let size = std::fs::metadata(&path).map_err(|e| io_err(&path, e))?.len() as usize;
    println!("wrote {} ({size} bytes, {}x{})", path.display(), x.width, x.height);
    println!(
        "bpp {:.6} = base {:.6} + enhancement {:.6}",
        bpp(size, x.width, x.height),
        enc.base_bpp(),
        enc.enhancement_bpp()
    );
    Ok(())
}

pub fn decode_options(cfg: &RunConfig) -> DecodeOptions {
    DecodeOptions {
        external: (!cfg.residual_decode_cmd.is_empty()).then(|| cfg.external(0)),
    }
}

pub fn cmd_decode(cfg: &RunConfig, checkpoint: &Path, input: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let bytes = std::fs::read(input).map_err(|e| io_err(input, e))?;
    prepare_out(cfg)?;
    let dec = decode_image(&bytes, &model, &decode_options(cfg))?;
    let path = cfg.out.join(format!("{}.ppm", stem(input)));
    save_ppm(&dec.image, &path)?;
    println!(
        "wrote {} ({}x{}, B = {})",
        path.display(),
        dec.image.width,
        dec.image.height,
        dec.header.bits
    );
    println!(
        "bpp {:.6} = base {:.6} + enhancement {:.6}",
        bpp(bytes.len(), dec.image.width, dec.image.height),
        bpp(dec.sizes.base, dec.image.width, dec.image.height),
        bpp(dec.sizes.enhancement, dec.image.width, dec.image.height)
    );
    Ok(())
}
