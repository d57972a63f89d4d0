//! Training configuration, stored as flat TOML keys named after the fields.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dft::{HallucinateOptions, StyleMode};
use crate::error::{Error, Result};
use crate::nets::{ArchConfig, PretrainConfig};
use crate::nn::OptimizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub sigma1: f64,
    pub sigma2: f64,
    pub alpha_max: f64,
    /// Content weight of uniform hallucination; 1 keeps the source features.
    pub uniform_w: f64,
    /// Relative magnitude of the additive noise used without the transformer.
    pub noise_scale: f64,
    pub embed_dim: usize,
    pub hard_predictions: bool,

    pub enable_stylization: bool,
    pub enable_orthogonal_noise: bool,
    pub enable_adversarial: bool,
    pub enable_alpha: bool,
    /// Also apply the segmentation loss to stylized images.
    pub seg_on_stylized: bool,
    /// Treat the source prediction as a fixed target in the consistency term.
    pub detach_source_probs: bool,

    pub iter_num: usize,
    /// Source-only iterations before the joint phase.
    pub warmup_iters: usize,
    pub lr_g: f64,
    pub lr_dft: f64,
    pub optimizer: OptimizerName,
    pub momentum: f64,
    pub batch_size: usize,
    pub seg_weight: f64,
    pub cont_weight: f64,
    pub seed: u64,
    pub eval_batch: usize,

    pub image_size: usize,
    pub num_classes: usize,
    pub stage_channels: Vec<usize>,
    pub seg_width: usize,
    pub seg_dilations: Vec<usize>,

    pub ae_epochs: usize,
    pub ae_batch: usize,
    pub ae_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        let ae = PretrainConfig::default();
        Self {
            sigma1: 0.4,
            sigma2: 0.4,
            alpha_max: 0.5,
            uniform_w: 0.8,
            noise_scale: 0.5,
            embed_dim: 64,
            hard_predictions: false,
            enable_stylization: true,
            enable_orthogonal_noise: true,
            enable_adversarial: true,
            enable_alpha: true,
            seg_on_stylized: false,
            detach_source_probs: false,
            iter_num: 2000,
            warmup_iters: 500,
            lr_g: 1e-2,
            lr_dft: 1e-3,
            optimizer: OptimizerName::Sgd,
            momentum: 0.9,
            batch_size: 8,
            seg_weight: 1.0,
            cont_weight: 1.0,
            seed: 0,
            eval_batch: 16,
            image_size: arch.image_size,
            num_classes: arch.num_classes,
            stage_channels: arch.stage_channels,
            seg_width: arch.seg_width,
            seg_dilations: arch.seg_dilations,
            ae_epochs: ae.epochs,
            ae_batch: ae.batch_size,
            ae_lr: ae.lr,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iter_num == 0 {
            return Err(Error::Config("iter_num must be at least 1".into()));
        }
        positive("lr_g", self.lr_g)?;
        positive("lr_dft", self.lr_dft)?;
        positive("alpha_max", self.alpha_max)?;
        positive("ae_lr", self.ae_lr)?;
        for (name, v) in [
            ("sigma1", self.sigma1),
            ("sigma2", self.sigma2),
            ("noise_scale", self.noise_scale),
            ("seg_weight", self.seg_weight),
            ("cont_weight", self.cont_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.uniform_w) {
            return Err(Error::Config(format!("uniform_w {} outside [0, 1]", self.uniform_w)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 || self.eval_batch == 0 || self.ae_batch == 0 || self.ae_epochs == 0 {
            return Err(Error::Config("batch sizes and epochs must be positive".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.enable_alpha && !self.enable_adversarial {
            return Err(Error::Config("enable_alpha requires enable_adversarial".into()));
        }
        if self.enable_adversarial && !self.enable_stylization {
            return Err(Error::Config("enable_adversarial requires enable_stylization".into()));
        }
        if self.enable_orthogonal_noise && !self.enable_stylization {
            return Err(Error::Config("enable_orthogonal_noise requires enable_stylization".into()));
        }
        self.arch().validate()
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            image_size: self.image_size,
            num_classes: self.num_classes,
            stage_channels: self.stage_channels.clone(),
            seg_width: self.seg_width,
            seg_dilations: self.seg_dilations.clone(),
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.ae_epochs,
            batch_size: self.ae_batch,
            lr: self.ae_lr,
            seed: self.seed,
        }
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerName::Sgd => OptimizerKind::Sgd {
                momentum: self.momentum,
            },
            OptimizerName::Adam => OptimizerKind::adam(),
        }
    }

    /// How style features are altered, or `None` when stylization is off.
    pub fn style_mode(&self) -> Option<StyleMode> {
        if !self.enable_stylization {
            None
        } else if self.enable_adversarial {
            Some(StyleMode::Transformer {
                orthogonal_noise: self.enable_orthogonal_noise,
                use_alpha: self.enable_alpha,
            })
        } else if self.enable_orthogonal_noise {
            Some(StyleMode::Noise {
                scale: self.noise_scale,
            })
        } else {
            Some(StyleMode::Plain)
        }
    }

    pub fn hallucinate_options(&self) -> Option<HallucinateOptions> {
        self.style_mode().map(|mode| HallucinateOptions {
            sigma1: self.sigma1,
            sigma2: self.sigma2,
            mode,
            hard_predictions: self.hard_predictions,
            keep_class: None,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}
