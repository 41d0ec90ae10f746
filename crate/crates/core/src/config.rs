//! Flat TOML run configuration.
//!
//! Every key has a default; unknown keys are rejected. Environment
//! variables `CANVASINFILL_<KEY>` (key upper-cased) override file values and
//! are parsed as TOML values, falling back to plain strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::{ContrastiveConfig, EncoderConfig};
use crate::daf::DafConfig;
use crate::error::{config, Error, Result};
use crate::generator::{GeneratorConfig, SCALES};
use crate::losses::{ConvCritic, ExtractorChoice, LossWeights};
use crate::mask::{MaskMode, MaskSampler};

pub const ENV_PREFIX: &str = "CANVASINFILL_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Training image folder (CLI runs).
    pub data_dir: Option<PathBuf>,
    /// Where checkpoints, logs and snapshots go.
    pub out_dir: PathBuf,
    pub image_size: usize,
    pub val_fraction: f64,
    pub seed: u64,

    pub width_base: usize,
    pub repr_dim: usize,
    pub norm_groups: usize,
    pub daf_reduction: usize,
    pub daf_hidden: usize,
    pub use_daf: bool,
    pub use_contrastive_init: bool,
    pub critic_base: usize,

    pub pretrain_steps: u64,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub sgd_momentum: f64,
    pub tau: f64,
    pub momentum: f64,
    pub queue_capacity: usize,

    pub joint_steps: u64,
    pub joint_batch: usize,
    pub lr: f64,
    pub critic_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub flip: bool,
    pub mask_mode: MaskMode,

    pub lambda_rec: f64,
    pub lambda_per: f64,
    pub lambda_style: f64,
    pub lambda_tv: f64,
    pub lambda_adv: f64,
    pub lambda_gp: f64,
    pub structure_scales: Vec<usize>,
    pub texture_scales: Vec<usize>,
    pub extractor: ExtractorChoice,
    pub extractor_path: Option<PathBuf>,
    pub extractor_seed: u64,

    /// Steps between checkpoints (0: only at the end).
    pub checkpoint_every: u64,
    /// Steps between validation snapshots (0: never).
    pub validate_every: u64,
    /// Copy known pixels from the input at inference.
    pub composite: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let c = ContrastiveConfig::default();
        let w = LossWeights::default();
        TrainConfig {
            data_dir: None,
            out_dir: PathBuf::from("runs"),
            image_size: 64,
            val_fraction: 0.0,
            seed: 0,
            width_base: 32,
            repr_dim: c.repr_dim,
            norm_groups: 8,
            daf_reduction: DafConfig::default().reduction,
            daf_hidden: DafConfig::default().hidden,
            use_daf: true,
            use_contrastive_init: true,
            critic_base: 64,
            pretrain_steps: 1000,
            pretrain_batch: 16,
            pretrain_lr: c.lr,
            sgd_momentum: c.sgd_momentum,
            tau: c.tau,
            momentum: c.momentum,
            queue_capacity: c.queue_capacity,
            joint_steps: 2000,
            joint_batch: 8,
            lr: 1e-4,
            critic_lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            flip: true,
            mask_mode: MaskMode::Mixed,
            lambda_rec: w.rec,
            lambda_per: w.per,
            lambda_style: w.style,
            lambda_tv: w.tv,
            lambda_adv: w.adv,
            lambda_gp: w.gp,
            structure_scales: w.structure_scales,
            texture_scales: w.texture_scales,
            extractor: ExtractorChoice::Substitute,
            extractor_path: None,
            extractor_seed: 0,
            checkpoint_every: 0,
            validate_every: 0,
            composite: true,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_env(text, std::env::vars())
    }

    /// Parses `text`, then applies `CANVASINFILL_*` pairs from `env`.
    pub fn from_toml_with_env(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config(e.to_string()))?;
        for (k, v) in env {
            let Some(key) = k.strip_prefix(ENV_PREFIX) else { continue };
            let key = key.to_ascii_lowercase();
            let value = format!("v = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or(toml::Value::String(v));
            table.insert(key, value);
        }
        let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(config("image_size must be >= 1"));
        }
        self.generator().validate()?;
        self.generator().check_size(self.image_size, self.image_size)?;
        self.contrastive().validate()?;
        self.weights().validate(SCALES)?;
        let positive = [self.pretrain_lr, self.lr, self.critic_lr];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(config("learning rates must be > 0"));
        }
        if self.pretrain_steps == 0 || self.joint_steps == 0 {
            return Err(config("step budgets must be >= 1"));
        }
        if self.pretrain_batch == 0 || self.joint_batch == 0 || self.critic_base == 0 {
            return Err(config("batch sizes and critic_base must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(config("Adam betas must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config("val_fraction must lie in [0, 1)"));
        }
        if self.extractor == ExtractorChoice::Vgg16 && self.extractor_path.is_none() {
            return Err(config("extractor = \"vgg16\" needs extractor_path"));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig { norm_groups: self.norm_groups, ..EncoderConfig::with_base(self.width_base, self.repr_dim) }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            encoder: self.encoder(),
            daf: DafConfig { reduction: self.daf_reduction, hidden: self.daf_hidden, in_channels: 4 },
            use_daf: self.use_daf,
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.tau,
            momentum: self.momentum,
            queue_capacity: self.queue_capacity,
            repr_dim: self.repr_dim,
            lr: self.pretrain_lr,
            sgd_momentum: self.sgd_momentum,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            rec: self.lambda_rec,
            per: self.lambda_per,
            style: self.lambda_style,
            tv: self.lambda_tv,
            adv: self.lambda_adv,
            gp: self.lambda_gp,
            structure_scales: self.structure_scales.clone(),
            texture_scales: self.texture_scales.clone(),
        }
    }

    pub fn critic(&self) -> ConvCritic {
        ConvCritic::with_base(self.critic_base)
    }

    pub fn sampler(&self) -> MaskSampler {
        MaskSampler::for_size(self.mask_mode, self.image_size, self.image_size)
    }
}
