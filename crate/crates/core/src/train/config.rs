//! Run configuration: every training knob, a flat `key = value` text
//! format with cosmetic `[section]` headers, and the resolved-config echo.

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::memory::ModelConfig;
use crate::spmm::SpmmConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub warmup_ratio: f64,
    pub poly_power: f64,
    pub seed: u64,
    pub grad_clip: f64,
    // Ablation toggles.
    pub memory_mechanism: bool,
    pub spmm: bool,
    pub residual_connection: bool,
    // Freeze flags.
    pub freeze_backbone: bool,
    pub freeze_decoder: bool,
    pub freeze_memory_encoder: bool,
    pub freeze_memory_attention: bool,
    // Prototype and loss knobs.
    pub mu: f64,
    pub alpha: f64,
    pub ohem_threshold: f64,
    pub ohem_min_kept: f64,
    /// Reuse the decoder lateral conv as the prototype projection.
    pub reuse_projection: bool,
    // Data and loop control.
    pub train_manifest: String,
    /// Empty string means "validate on the training split".
    pub val_manifest: String,
    pub val_every: usize,
    /// Stop once validation mIoU reaches this; 0 disables.
    pub target_miou: f64,
    pub augment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 30,
            batch_size: 4,
            base_lr: 4.5e-4,
            weight_decay: 0.01,
            warmup_epochs: 3,
            warmup_ratio: 0.1,
            poly_power: 0.9,
            seed: 42,
            grad_clip: 1.0,
            memory_mechanism: true,
            spmm: true,
            residual_connection: true,
            freeze_backbone: false,
            freeze_decoder: false,
            freeze_memory_encoder: false,
            freeze_memory_attention: false,
            mu: 0.2,
            alpha: 1.0,
            ohem_threshold: 0.7,
            ohem_min_kept: 1.0 / 16.0,
            reuse_projection: false,
            train_manifest: String::new(),
            val_manifest: String::new(),
            val_every: 1,
            target_miou: 0.0,
            augment: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "warmup_ratio {} outside (0, 1]",
                self.warmup_ratio
            )));
        }
        if self.poly_power <= 0.0 {
            return Err(Error::Config(format!(
                "poly_power {} must be positive",
                self.poly_power
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config(format!("mu {} outside [0, 1]", self.mu)));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        self.loss_config().validate()
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            use_memory: self.memory_mechanism,
            use_residual: self.residual_connection,
            ..ModelConfig::new(num_classes)
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            ohem_threshold: self.ohem_threshold,
            ohem_min_kept: self.ohem_min_kept,
        }
    }

    pub fn spmm_config(&self) -> SpmmConfig {
        SpmmConfig {
            mu: self.mu,
            reuse_decoder_projection: self.reuse_projection,
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for key {key}")))
        }
        fn boolean(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "on" => Ok(true),
                "false" | "0" | "off" => Ok(false),
                _ => Err(Error::Config(format!("bad boolean {v:?} for key {key}"))),
            }
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "warmup_ratio" => self.warmup_ratio = num(key, value)?,
            "poly_power" => self.poly_power = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "memory_mechanism" => self.memory_mechanism = boolean(key, value)?,
            "spmm" => self.spmm = boolean(key, value)?,
            "residual_connection" => self.residual_connection = boolean(key, value)?,
            "freeze_backbone" => self.freeze_backbone = boolean(key, value)?,
            "freeze_decoder" => self.freeze_decoder = boolean(key, value)?,
            "freeze_memory_encoder" => self.freeze_memory_encoder = boolean(key, value)?,
            "freeze_memory_attention" => self.freeze_memory_attention = boolean(key, value)?,
            "mu" => self.mu = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "ohem_threshold" => self.ohem_threshold = num(key, value)?,
            "ohem_min_kept" => self.ohem_min_kept = num(key, value)?,
            "reuse_projection" => self.reuse_projection = boolean(key, value)?,
            "train_manifest" => self.train_manifest = value.to_string(),
            "val_manifest" => self.val_manifest = value.to_string(),
            "val_every" => self.val_every = num(key, value)?,
            "target_miou" => self.target_miou = num(key, value)?,
            "augment" => self.augment = boolean(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parse the flat text format; `[section]` lines and `#` comments are
    /// skipped, every other line must be `key = value`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with('[') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", ln + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply `key=value` override pairs (CLI `--set`).
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for pair in pairs {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                Error::Config(format!("override {pair:?} is not key=value"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Resolved-config echo; `parse` of this text reproduces `self`.
    pub fn to_text(&self) -> String {
        format!(
            "[schedule]\n\
             epochs = {}\nbatch_size = {}\nbase_lr = {}\nweight_decay = {}\n\
             warmup_epochs = {}\nwarmup_ratio = {}\npoly_power = {}\nseed = {}\ngrad_clip = {}\n\
             \n[ablation]\n\
             memory_mechanism = {}\nspmm = {}\nresidual_connection = {}\n\
             \n[freeze]\n\
             freeze_backbone = {}\nfreeze_decoder = {}\n\
             freeze_memory_encoder = {}\nfreeze_memory_attention = {}\n\
             \n[loss]\n\
             mu = {}\nalpha = {}\nohem_threshold = {}\nohem_min_kept = {}\nreuse_projection = {}\n\
             \n[data]\n\
             train_manifest = {}\nval_manifest = {}\nval_every = {}\ntarget_miou = {}\naugment = {}\n",
            self.epochs,
            self.batch_size,
            self.base_lr,
            self.weight_decay,
            self.warmup_epochs,
            self.warmup_ratio,
            self.poly_power,
            self.seed,
            self.grad_clip,
            self.memory_mechanism,
            self.spmm,
            self.residual_connection,
            self.freeze_backbone,
            self.freeze_decoder,
            self.freeze_memory_encoder,
            self.freeze_memory_attention,
            self.mu,
            self.alpha,
            self.ohem_threshold,
            self.ohem_min_kept,
            self.reuse_projection,
            self.train_manifest,
            self.val_manifest,
            self.val_every,
            self.target_miou,
            self.augment,
        )
    }

    /// FNV-1a hash of the resolved config text, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}
