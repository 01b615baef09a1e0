//! Flat `key = value` configuration shared by the library and the CLI.
//!
//! Precedence is applied by the caller: defaults, then a config file, then
//! individual overrides. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::SpectrogramParams;
use crate::error::{Error, Result};

/// Encoder widths, pyramid depth and initialization seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Shared channel width `D` of audio embedding and every pyramid stage.
    pub dim: usize,
    /// Number of pyramid stages `S`; stage `s` (1-based) has stride `2^(s+1)`.
    pub stages: usize,
    pub image_size: usize,
    /// Output widths of the four strided audio conv blocks.
    pub audio_channels: [usize; 4],
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            stages: 3,
            image_size: 64,
            audio_channels: [8, 16, 16, 32],
            seed: 0,
        }
    }
}

impl BackboneConfig {
    /// Spatial side of stage `s` (0-based index).
    pub fn stage_size(&self, s: usize) -> usize {
        self.image_size >> (s + 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(Error::Config(format!("model.D must be a positive multiple of 4, got {}", self.dim)));
        }
        if self.stages == 0 {
            return Err(Error::Config("model.S must be at least 1".into()));
        }
        let stride = 1usize << (self.stages + 1);
        if self.image_size == 0 || self.image_size % stride != 0 {
            return Err(Error::Config(format!(
                "model.image_size {} must be a positive multiple of {stride} for S={}",
                self.image_size, self.stages
            )));
        }
        if self.audio_channels.contains(&0) {
            return Err(Error::Config("model.audio_channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Row-softmax on the similarity matrix instead of plain `1/(HW)` scaling.
    pub softmax: bool,
    /// Start the output projection at zero so fusion begins as the identity.
    pub zero_init_mu: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            softmax: false,
            zero_init_mu: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub blocks: usize,
    pub heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { blocks: 2, heads: 4 }
    }
}

/// Everything that determines parameter layout and forward semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub audio: SpectrogramParams,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Small double-precision-friendly model used for gradient checks:
    /// D = 8, 16×16 images, two stages (4×4 and 2×2). A third stage would be
    /// 1×1, where token-to-pixel attention has a single key and its query
    /// and key projections get no gradient at all.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig {
                dim: 8,
                stages: 2,
                image_size: 16,
                audio_channels: [2, 4, 4, 4],
                seed: 0,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.audio.validate()?;
        if self.decoder.heads == 0 || self.backbone.dim % self.decoder.heads != 0 {
            return Err(Error::Config(format!(
                "decoder.heads {} must divide model.D {}",
                self.decoder.heads, self.backbone.dim
            )));
        }
        Ok(())
    }

    /// Canonical text form, stored in checkpoints.
    pub fn canonical(&self) -> String {
        let b = &self.backbone;
        let a = &self.audio;
        let mut s = String::new();
        let ch = b.audio_channels.map(|c| c.to_string()).join(",");
        for (k, v) in [
            ("audio.duration_s", a.duration_s.to_string()),
            ("audio.eps", a.eps.to_string()),
            ("audio.frames", a.frames.to_string()),
            ("audio.hop", a.hop.to_string()),
            ("audio.n_fft", a.n_fft.to_string()),
            ("audio.sr", a.sample_rate.to_string()),
            ("audio.win_length", a.win_length.to_string()),
            ("decoder.blocks", self.decoder.blocks.to_string()),
            ("decoder.heads", self.decoder.heads.to_string()),
            ("fusion.softmax", self.fusion.softmax.to_string()),
            ("fusion.zero_init_mu", self.fusion.zero_init_mu.to_string()),
            ("model.D", b.dim.to_string()),
            ("model.S", b.stages.to_string()),
            ("model.audio_channels", ch),
            ("model.image_size", b.image_size.to_string()),
            ("model.seed", b.seed.to_string()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Hash of the canonical text minus `model.seed`: the seed only picks the
    /// initial weights, so it does not make two checkpoints incompatible.
    pub fn hash(&self) -> u64 {
        let text: String = self
            .canonical()
            .lines()
            .filter(|l| !l.starts_with("model.seed="))
            .flat_map(|l| [l, "\n"])
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg.model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global-norm gradient clipping threshold; off when `None`.
    pub clip_grad: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_grad: None,
        }
    }
}

impl TrainConfig {
    /// The reported large-scale schedule: batch 128, 100 epochs.
    pub fn paper_scale() -> Self {
        Self {
            batch_size: 128,
            epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("train.eps must be positive".into()));
        }
        if let Some(c) = self.clip_grad {
            if !(c > 0.0) {
                return Err(Error::Config("train.clip_grad must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// All pixels of the evaluation set ranked together.
    Pooled,
    /// Mean of per-image AP over images with at least one positive pixel.
    PerImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub beta_sq: f64,
    /// Probability threshold for binarizing predictions.
    pub threshold: f64,
    pub ap_mode: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beta_sq: 0.3,
            threshold: 0.5,
            ap_mode: ApMode::Pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

pub const CONFIG_KEYS: &[&str] = &[
    "audio.duration_s",
    "audio.eps",
    "audio.frames",
    "audio.hop",
    "audio.n_fft",
    "audio.sr",
    "audio.win_length",
    "decoder.blocks",
    "decoder.heads",
    "eval.ap_mode",
    "eval.beta_sq",
    "eval.threshold",
    "fusion.softmax",
    "fusion.zero_init_mu",
    "model.D",
    "model.S",
    "model.audio_channels",
    "model.image_size",
    "model.seed",
    "train.batch_size",
    "train.beta1",
    "train.beta2",
    "train.clip_grad",
    "train.epochs",
    "train.eps",
    "train.lr",
    "train.seed",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "audio.duration_s" => m.audio.duration_s = parse(key, value)?,
            "audio.eps" => m.audio.eps = parse(key, value)?,
            "audio.frames" => m.audio.frames = parse(key, value)?,
            "audio.hop" => m.audio.hop = parse(key, value)?,
            "audio.n_fft" => m.audio.n_fft = parse(key, value)?,
            "audio.sr" => m.audio.sample_rate = parse(key, value)?,
            "audio.win_length" => m.audio.win_length = parse(key, value)?,
            "decoder.blocks" => m.decoder.blocks = parse(key, value)?,
            "decoder.heads" => m.decoder.heads = parse(key, value)?,
            "fusion.softmax" => m.fusion.softmax = parse(key, value)?,
            "fusion.zero_init_mu" => m.fusion.zero_init_mu = parse(key, value)?,
            "model.D" => m.backbone.dim = parse(key, value)?,
            "model.S" => m.backbone.stages = parse(key, value)?,
            "model.image_size" => m.backbone.image_size = parse(key, value)?,
            "model.seed" => m.backbone.seed = parse(key, value)?,
            "model.audio_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                m.backbone.audio_channels = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected 4 comma-separated widths")))?;
            }
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.beta1" => self.train.beta1 = parse(key, value)?,
            "train.beta2" => self.train.beta2 = parse(key, value)?,
            "train.clip_grad" => {
                self.train.clip_grad = match value {
                    "none" | "off" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.eps" => self.train.adam_eps = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "eval.beta_sq" => self.eval.beta_sq = parse(key, value)?,
            "eval.threshold" => self.eval.threshold = parse(key, value)?,
            "eval.ap_mode" => {
                self.eval.ap_mode = match value {
                    "pooled" => ApMode::Pooled,
                    "per_image" => ApMode::PerImage,
                    other => return Err(Error::Config(format!("{key}: unknown mode {other:?}"))),
                }
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    /// One seed for both initialization and data order.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.backbone.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.eval.beta_sq > 0.0) {
            return Err(Error::Config("eval.beta_sq must be positive".into()));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config("eval.threshold must be in (0, 1)".into()));
        }
        Ok(())
    }
}
