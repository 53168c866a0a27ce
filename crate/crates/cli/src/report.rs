//! Rate-distortion evaluation reports and Bjøntegaard comparison of two of
//! them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use octacodec::bitstream::{bpp, decode_image, encode_image};
use octacodec::imageio::{load_image, Image};
use octacodec::metrics::{bd_psnr, bd_rate, ms_ssim, psnr, psnr_yuv, MsSsimConfig, RdCurve};
use octacodec::{Error, Result};
use serde_json::json;

use crate::commands::{decode_options, encode_options, io_err, list_images, load_model, prepare_out};
use crate::config::RunConfig;

pub const CSV_HEADER: &str =
    "image,bits,quality,bpp,base_bpp,enhancement_bpp,psnr_rgb,psnr_yuv,msssim,base_psnr_rgb,msssim_scales";

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub image: String,
    pub bits: u8,
    pub quality: u32,
    pub bpp: f64,
    pub base_bpp: f64,
    pub enhancement_bpp: f64,
    pub psnr_rgb: f64,
    pub psnr_yuv: f64,
    pub msssim: f64,
    pub base_psnr_rgb: f64,
    pub msssim_scales: usize,
}

impl Row {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.image,
            self.bits,
            self.quality,
            self.bpp,
            self.base_bpp,
            self.enhancement_bpp,
            self.psnr_rgb,
            self.psnr_yuv,
            self.msssim,
            self.base_psnr_rgb,
            self.msssim_scales
        )
    }
}

/// 8-bit output levels, as a decoded file would hold them.
fn as_8bit(img: &Image) -> Vec<f64> {
    img.data.iter().map(|&v| octacodec::imageio::to_u8(v) as f64 / 255.0).collect()
}

/// Largest scale count that fits the image, capped at `max`.
fn fitting_scales(max: usize, w: usize, h: usize) -> Result<MsSsimConfig> {
    let side = w.min(h);
    let m = (1..=max).rev().find(|&m| 11usize << (m - 1) <= side).ok_or_else(|| {
        Error::Config(format!("image {w}x{h} is smaller than the 11x11 MS-SSIM window"))
    })?;
    MsSsimConfig::standard(m)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, dir: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no .ppm or .png images in {}", dir.display())));
    }
    prepare_out(cfg)?;
    let points = cfg.operating_points();
    let mut rows = Vec::new();
    let mut timing = vec![(0.0f64, 0.0f64); points.len()];
    for f in &files {
        let x = load_image(f)?;
        let name = f.file_name().unwrap().to_string_lossy().into_owned();
        let ms_cfg = fitting_scales(cfg.eval_msssim_scales, x.width, x.height)?;
        let reference = x.to_f64();
        for (k, &(bits, quality)) in points.iter().enumerate() {
            let opts = encode_options(cfg, bits, quality)?;
            let t0 = Instant::now();
            let enc = encode_image(&x, &model, &opts)?;
            let t1 = Instant::now();
            let dec = decode_image(&enc.bytes, &model, &decode_options(cfg))?;
            let t2 = Instant::now();
            timing[k].0 += (t1 - t0).as_secs_f64() * 1e3;
            timing[k].1 += (t2 - t1).as_secs_f64() * 1e3;
            let out = as_8bit(&dec.image);
            let out_img = Image::new(x.width, x.height, out.iter().map(|&v| v as f32).collect())?;
            rows.push(Row {
                image: name.clone(),
                bits,
                quality,
                bpp: enc.bpp(),
                base_bpp: bpp(enc.sizes.base, x.width, x.height),
                enhancement_bpp: bpp(enc.sizes.enhancement, x.width, x.height),
                psnr_rgb: psnr(&reference, &out, 1.0)?,
                psnr_yuv: psnr_yuv(&reference, &out)?,
                msssim: ms_ssim(&x.to_tensor::<f64>(), &out_img.to_tensor::<f64>(), &ms_cfg)?,
                base_psnr_rgb: psnr(&reference, &as_8bit(&dec.base), 1.0)?,
                msssim_scales: ms_cfg.scales,
            });
        }
        eprintln!("evaluated {name}");
    }

    let mut csv = format!("{CSV_HEADER}\n");
    for r in &rows {
        let _ = writeln!(csv, "{}", r.csv());
    }
    let csv_path = cfg.out.join("eval.csv");
    std::fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;

    let n = files.len() as f64;
    let mut summary = Vec::new();
    println!("bits quality      bpp   base_bpp  enh_share  psnr_rgb  psnr_yuv   ms-ssim");
    for (k, &(bits, quality)) in points.iter().enumerate() {
        let sel: Vec<&Row> = rows.iter().filter(|r| r.bits == bits && r.quality == quality).collect();
        let mean = |f: fn(&Row) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
        let (b, bb, eb) = (mean(|r| r.bpp), mean(|r| r.base_bpp), mean(|r| r.enhancement_bpp));
        let share = if b > 0.0 { eb / b } else { 0.0 };
        println!(
            "{bits:>4} {quality:>7} {b:>8.4} {bb:>10.4} {:>9.1}% {:>9.3} {:>9.3} {:>9.5}",
            share * 100.0,
            mean(|r| r.psnr_rgb),
            mean(|r| r.psnr_yuv),
            mean(|r| r.msssim)
        );
        summary.push(json!({
            "bits": bits,
            "quality": quality,
            "images": sel.len(),
            "bpp": b,
            "base_bpp": bb,
            "enhancement_bpp": eb,
            "enhancement_share": share,
            "psnr_rgb": mean(|r| r.psnr_rgb),
            "psnr_yuv": mean(|r| r.psnr_yuv),
            "msssim": mean(|r| r.msssim),
            "base_psnr_rgb": mean(|r| r.base_psnr_rgb),
            "encode_ms": timing[k].0 / n,
            "decode_ms": timing[k].1 / n,
        }));
    }
    let doc = json!({
        "checkpoint": checkpoint.display().to_string(),
        "images": rows.iter().map(|r| r.image.clone()).collect::<std::collections::BTreeSet<_>>(),
        "metadata": {
            "msssim": "mean over R, G and B of the per-channel MS-SSIM",
            "psnr_yuv": "(6·Y + U + V) / 8 on BT.601 full-range YUV",
            "residual_backend": format!("{:?}", cfg.residual_backend).to_lowercase(),
            "residual_quality": "built-in backend requantization step; the default list stands in for BPG QPs 50, 40, 35, 30, 25 and is not equivalent to them",
            "deterministic_quant": cfg.deterministic_quant,
        },
        "points": summary,
    });
    let json_path = cfg.out.join("eval.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&doc).expect("json"))
        .map_err(|e| io_err(&json_path, e))?;
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

/// Mean `(bpp, metric)` per operating point of an evaluation CSV, or one
/// point per row when the file has no `bits` column.
pub fn read_curve(path: &Path, metric: &str) -> Result<RdCurve> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::trim)
        .collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let rate = col("bpp").ok_or_else(|| Error::Config(format!("{} has no bpp column", path.display())))?;
    let qual = col(metric)
        .ok_or_else(|| Error::Config(format!("{} has no {metric} column", path.display())))?;
    let key: Vec<usize> = ["bits", "quality"].iter().filter_map(|k| col(k)).collect();

    let mut groups: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |c: usize| -> Result<f64> {
            cells
                .get(c)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config(format!("{} row {}: bad number", path.display(), i + 2)))
        };
        let id = if key.is_empty() {
            format!("{i:08}")
        } else {
            key.iter().map(|&c| cells.get(c).copied().unwrap_or("")).collect::<Vec<_>>().join("/")
        };
        let g = groups.entry(id).or_insert((0.0, 0.0, 0));
        g.0 += get(rate)?;
        g.1 += get(qual)?;
        g.2 += 1;
    }
    let mut pts: Vec<(f64, f64)> = groups
        .values()
        .map(|&(r, q, n)| (r / n as f64, q / n as f64))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    RdCurve::new(pts.iter().map(|p| p.0).collect(), pts.iter().map(|p| p.1).collect())
}

pub fn bd_table(anchor: &Path, test: &Path, metric: &str) -> Result<String> {
    let a = read_curve(anchor, metric)?;
    let t = read_curve(test, metric)?;
    let rate = bd_rate(&a, &t)?;
    let delta = bd_psnr(&a, &t)?;
    let unit = if metric == "msssim" { "BD-MS-SSIM" } else { "BD-PSNR (dB)" };
    Ok(format!(
        "{:<24} {:>12} {:>14}\n{:<24} {:>12.4} {:>14.4}\n",
        format!("anchor: {}", anchor.file_stem().unwrap_or_default().to_string_lossy()),
        "BD-Rate (%)",
        unit,
        test.file_stem().unwrap_or_default().to_string_lossy(),
        rate,
        delta
    ))
}

pub fn cmd_bd(anchor: &Path, test: &Path, metric: &str) -> Result<()> {
    if !matches!(metric, "psnr_rgb" | "psnr_yuv" | "msssim") {
        return Err(Error::Config(format!(
            "metric {metric:?} must be psnr_rgb, psnr_yuv or msssim"
        )));
    }
    print!("{}", bd_table(anchor, test, metric)?);
    Ok(())
}
