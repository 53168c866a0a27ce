//! Flat `key = value` run configuration. Lines starting with `#` are
//! comments; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use octacodec::bitstream::{check_step, ExternalBackend, ResidualBackend, ResidualConfig};
use octacodec::model::{ModelConfig, RateSet, TrainConfig};
use octacodec::quant::check_bits;
use octacodec::tensor::AdamConfig;
use octacodec::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    None,
    Builtin,
    External,
}

impl BackendKind {
    fn parse(v: &str) -> Option<Self> {
        match v {
            "none" => Some(Self::None),
            "builtin" => Some(Self::Builtin),
            "external" => Some(Self::External),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Builtin => "builtin",
            Self::External => "external",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// Overrides `epochs` when nonzero.
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub train_size: usize,
    pub rates: Vec<u8>,
    pub msssim_scales: usize,
    pub eval_bits: Vec<u8>,
    pub eval_msssim_scales: usize,
    pub residual_backend: BackendKind,
    pub residual_quality: Vec<u32>,
    pub residual_encode_cmd: String,
    pub residual_decode_cmd: String,
    pub residual_fallback: bool,
    pub deterministic_quant: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            epochs: 200,
            steps: 0,
            batch: 16,
            lr: 2e-5,
            seed: 0,
            data: None,
            train_size: 64,
            rates: vec![2, 4, 8],
            msssim_scales: 3,
            eval_bits: vec![3, 4, 5, 6, 7],
            eval_msssim_scales: 5,
            residual_backend: BackendKind::Builtin,
            residual_quality: vec![32, 16, 12, 8, 4],
            residual_encode_cmd: String::new(),
            residual_decode_cmd: String::new(),
            residual_fallback: false,
            deterministic_quant: true,
            out: PathBuf::from("out"),
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: {why}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, "not a valid number"))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| num(key, s.trim()))
        .collect::<Result<Vec<T>>>()
        .and_then(|l| {
            if l.is_empty() {
                Err(bad(key, v, "empty list"))
            } else {
                Ok(l)
            }
        })
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, v, "expected true or false")),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "alpha" => {
                let (n, d) = v.split_once('/').ok_or_else(|| bad(key, v, "expected n/d"))?;
                self.model.alpha_num = num(key, n.trim())?;
                self.model.alpha_den = num(key, d.trim())?;
            }
            "widths" => {
                let w: Vec<usize> = list(key, v)?;
                self.model.widths = w
                    .try_into()
                    .map_err(|_| bad(key, v, "expected five stage widths"))?;
            }
            "outer_kernel" => self.model.outer_kernel = num(key, v)?,
            "inner_kernel" => self.model.inner_kernel = num(key, v)?,
            "use_gdn" => self.model.use_gdn = flag(key, v)?,
            "use_res" => self.model.use_res = flag(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train_size" => self.train_size = num(key, v)?,
            "rates" => self.rates = list(key, v)?,
            "msssim_scales" => self.msssim_scales = num(key, v)?,
            "eval_bits" => self.eval_bits = list(key, v)?,
            "eval_msssim_scales" => self.eval_msssim_scales = num(key, v)?,
            "residual_backend" => {
                self.residual_backend = BackendKind::parse(v)
                    .ok_or_else(|| bad(key, v, "expected none, builtin or external"))?
            }
            "residual_quality" => self.residual_quality = list(key, v)?,
            "residual_encode_cmd" => self.residual_encode_cmd = v.to_string(),
            "residual_decode_cmd" => self.residual_decode_cmd = v.to_string(),
            "residual_fallback" => self.residual_fallback = flag(key, v)?,
            "deterministic_quant" => self.deterministic_quant = flag(key, v)?,
            "out" => self.out = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::parse(&text)
    }

    /// Check every field before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let mut tc = self.train_config()?;
        if tc.steps == 0 {
            if self.epochs == 0 {
                return Err(Error::Config("set epochs or steps to a positive value".into()));
            }
            tc.steps = 1;
        }
        tc.validate()?;
        if self.train_size < 64 || !self.train_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "train_size {} must be a multiple of 16 and at least 64",
                self.train_size
            )));
        }
        let need = octacodec::metrics::MsSsimConfig::standard(self.msssim_scales)?.min_size();
        if need > self.train_size {
            return Err(Error::Config(format!(
                "msssim_scales = {} needs {need}x{need} training images, train_size is {}",
                self.msssim_scales, self.train_size
            )));
        }
        for &b in &self.eval_bits {
            check_bits(b)?;
        }
        if self.eval_msssim_scales == 0 {
            return Err(Error::Config("eval_msssim_scales must be positive".into()));
        }
        if self.residual_quality.len() != 1 && self.residual_quality.len() != self.eval_bits.len() {
            return Err(Error::Config(format!(
                "residual_quality needs one value or one per eval bit ({} given, {} bits)",
                self.residual_quality.len(),
                self.eval_bits.len()
            )));
        }
        for &q in &self.residual_quality {
            self.residual_for(q)?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            rates: RateSet::new(self.rates.clone())?,
            msssim_scales: self.msssim_scales,
            adam: AdamConfig::default(),
        })
    }

    /// Operating points `(B, residual quality)` for evaluation.
    pub fn operating_points(&self) -> Vec<(u8, u32)> {
        self.eval_bits
            .iter()
            .enumerate()
            .map(|(i, &b)| (b, self.residual_quality[i.min(self.residual_quality.len() - 1)]))
            .collect()
    }

    pub fn external(&self, quality: u32) -> ExternalBackend {
        ExternalBackend {
            encode_cmd: self.residual_encode_cmd.clone(),
            decode_cmd: self.residual_decode_cmd.clone(),
            quality,
            scratch: Some(self.out.clone()),
        }
    }

    pub fn residual_for(&self, quality: u32) -> Result<ResidualConfig> {
        let backend = match self.residual_backend {
            BackendKind::None => ResidualBackend::None,
            BackendKind::Builtin => {
                let step = u8::try_from(quality).map_err(|_| {
                    Error::Config(format!("residual quality step {quality} outside [1, 64]"))
                })?;
                check_step(step)?;
                ResidualBackend::Builtin { step }
            }
            BackendKind::External => {
                if self.residual_encode_cmd.is_empty() || self.residual_decode_cmd.is_empty() {
                    return Err(Error::Config(
                        "the external residual backend needs residual_encode_cmd and residual_decode_cmd"
                            .into(),
                    ));
                }
                ResidualBackend::External(self.external(quality))
            }
        };
        Ok(ResidualConfig {
            backend,
            fallback_to_none: self.residual_fallback,
        })
    }

    /// The effective configuration in the same format `parse` reads.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("alpha", format!("{}/{}", m.alpha_num, m.alpha_den));
        kv("widths", join(&m.widths));
        kv("outer_kernel", m.outer_kernel.to_string());
        kv("inner_kernel", m.inner_kernel.to_string());
        kv("use_gdn", m.use_gdn.to_string());
        kv("use_res", m.use_res.to_string());
        kv("epochs", self.epochs.to_string());
        kv("steps", self.steps.to_string());
        kv("batch", self.batch.to_string());
        kv("lr", self.lr.to_string());
        kv("seed", self.seed.to_string());
        kv(
            "data",
            self.data
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("train_size", self.train_size.to_string());
        kv("rates", join(&self.rates));
        kv("msssim_scales", self.msssim_scales.to_string());
        kv("eval_bits", join(&self.eval_bits));
        kv("eval_msssim_scales", self.eval_msssim_scales.to_string());
        kv("residual_backend", self.residual_backend.name().to_string());
        kv("residual_quality", join(&self.residual_quality));
        kv("residual_encode_cmd", self.residual_encode_cmd.clone());
        kv("residual_decode_cmd", self.residual_decode_cmd.clone());
        kv("residual_fallback", self.residual_fallback.to_string());
        kv("deterministic_quant", self.deterministic_quant.to_string());
        kv("out", self.out.display().to_string());
        s
    }
}
