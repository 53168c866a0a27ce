mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use octacodec::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "octacodec", version, about = "Multi-resolution variable-rate learned image codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Default)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra config setting, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Default)]
struct CodecFlags {
    /// none, builtin or external
    #[arg(long)]
    residual_backend: Option<String>,
    /// Use the deterministic quantizer (default true)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    deterministic_quant: Option<bool>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a directory of PPM/PNG images
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compress one image into an .ocbs container
    Encode {
        checkpoint: PathBuf,
        image: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        codec: CodecFlags,
        /// Code-map bit depth in [1, 8]
        #[arg(long)]
        bits: u8,
        #[arg(long)]
        residual_quality: Option<u32>,
    },
    /// Reconstruct an image from an .ocbs container
    Decode {
        checkpoint: PathBuf,
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rate-distortion evaluation over a directory of images
    Eval {
        checkpoint: PathBuf,
        images: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        codec: CodecFlags,
        /// Comma-separated bit depths
        #[arg(long)]
        bits: Option<String>,
        /// Comma-separated residual qualities, one per bit depth or a single value
        #[arg(long)]
        residual_quality: Option<String>,
    },
    /// Bjøntegaard deltas of a test report against an anchor report
    Bd {
        anchor: PathBuf,
        test: PathBuf,
        /// psnr_rgb, psnr_yuv or msssim
        #[arg(long, default_value = "psnr_yuv")]
        metric: String,
    },
}

fn split_kv(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .ok_or_else(|| Error::Config(format!("--set {s:?}: expected KEY=VALUE")))
}

fn build(common: &Common, codec: Option<&CodecFlags>, extra: &[(&str, String)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &common.set {
        let (k, v) = split_kv(s)?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(c) = codec {
        if let Some(b) = &c.residual_backend {
            cfg.set("residual_backend", b)?;
        }
        if let Some(d) = c.deterministic_quant {
            cfg.deterministic_quant = d;
        }
    }
    for (k, v) in extra {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { common, data } => {
            let extra: Vec<_> = data.map(|d| ("data", d.display().to_string())).into_iter().collect();
            commands::cmd_train(&build(&common, None, &extra)?)
        }
        Cmd::Encode {
            checkpoint,
            image,
            common,
            codec,
            bits,
            residual_quality,
        } => {
            let cfg = build(&common, Some(&codec), &[])?;
            let quality = residual_quality.unwrap_or_else(|| {
                cfg.operating_points()
                    .iter()
                    .find(|p| p.0 == bits)
                    .map_or(cfg.residual_quality[0], |p| p.1)
            });
            commands::cmd_encode(&cfg, &checkpoint, &image, bits, quality)
        }
        Cmd::Decode {
            checkpoint,
            input,
            common,
        } => commands::cmd_decode(&build(&common, None, &[])?, &checkpoint, &input),
        Cmd::Eval {
            checkpoint,
            images,
            common,
            codec,
            bits,
            residual_quality,
        } => {
            let mut extra = Vec::new();
            if let Some(b) = bits {
                extra.push(("eval_bits", b));
            }
            if let Some(q) = residual_quality {
                extra.push(("residual_quality", q));
            }
            report::cmd_eval(&build(&common, Some(&codec), &extra)?, &checkpoint, &images)
        }
        Cmd::Bd {
            anchor,
            test,
            metric,
        } => report::cmd_bd(&anchor, &test, &metric),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) => 3,
        Error::Format { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
