use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DomainSpec;
use crate::encoder::ModelConfig;
use crate::error::{PatError, Result};
use crate::objectives::AblationFlags;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CslConfig {
    pub tau: f64,
    pub k: usize,
    pub momentum: f64,
}

impl Default for CslConfig {
    fn default() -> Self {
        Self {
            tau: 0.02,
            k: 10,
            momentum: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsdConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub smoothing: f64,
}

impl Default for PsdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda: 0.5,
            smoothing: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity per batch.
    pub k_per_id: usize,
    pub seed: u64,
    pub flip_prob: f64,
    pub ablation: AblationFlags,
    /// Batch size for gradient-free passes (bank fill, embedding).
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            warmup_epochs: 10,
            peak_lr: 1e-3,
            weight_decay: 1e-4,
            sgd_momentum: 0.9,
            grad_clip: None,
            p: 16,
            k_per_id: 4,
            seed: 0,
            flip_prob: 0.5,
            ablation: AblationFlags::default(),
            eval_batch: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub source_ids: usize,
    pub target_ids: usize,
    pub images_per_id: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DomainSpec::source(),
            target: DomainSpec::target(),
            source_ids: 20,
            target_ids: 20,
            images_per_id: 8,
        }
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub csl: CslConfig,
    pub psd: PsdConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        Self {
            model: ModelConfig::toy(data.source_ids),
            csl: CslConfig::default(),
            psd: PsdConfig::default(),
            train: TrainConfig::default(),
            data,
        }
    }
}

impl RunConfig {
    /// Recipe for training the toy model from random init on the synthetic
    /// domains. The reference defaults assume a pretrained backbone and a
    /// 64-image batch; from scratch at this scale they give two steps per
    /// epoch and near-uniform initial attention, and the features collapse.
    pub fn from_scratch() -> Self {
        let mut cfg = Self::default();
        cfg.model.init_std = 0.1;
        cfg.train.epochs = 30;
        cfg.train.peak_lr = 2e-3;
        cfg.train.p = 2;
        cfg.train.k_per_id = 2;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| PatError::config(e.to_string()))?;
        cfg.model.num_classes = cfg.data.source_ids;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.source.validate()?;
        self.data.target.validate()?;
        if self.model.num_classes != self.data.source_ids {
            return Err(PatError::config(format!(
                "classifier has {} classes for {} source identities",
                self.model.num_classes, self.data.source_ids
            )));
        }
        if !(self.csl.tau > 0.0) {
            return Err(PatError::config("tau must be > 0"));
        }
        if !(self.csl.momentum > 0.0 && self.csl.momentum <= 1.0) {
            return Err(PatError::config("bank momentum must be in (0, 1]"));
        }
        let k_total = self.data.source_ids * self.data.images_per_id;
        if self.csl.k == 0 || self.csl.k >= k_total {
            return Err(PatError::config(format!(
                "k = {} must satisfy 0 < k < {k_total} source samples",
                self.csl.k
            )));
        }
        if !(0.0..1.0).contains(&self.psd.alpha) {
            return Err(PatError::config("alpha must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.psd.lambda) || !(0.0..1.0).contains(&self.psd.smoothing) {
            return Err(PatError::config("lambda must be in [0, 1], smoothing in [0, 1)"));
        }
        let t = &self.train;
        if t.epochs == 0 || t.p < 2 || t.k_per_id < 2 || t.eval_batch == 0 {
            return Err(PatError::config("epochs >= 1, P >= 2, K >= 2, eval_batch >= 1 required"));
        }
        if !(t.peak_lr > 0.0)
            || t.weight_decay < 0.0
            || !(0.0..1.0).contains(&t.sgd_momentum)
            || t.grad_clip.is_some_and(|c| !(c > 0.0))
        {
            return Err(PatError::config("invalid optimizer settings"));
        }
        if self.data.source_ids < t.p {
            return Err(PatError::config(format!(
                "P = {} exceeds {} source identities",
                t.p, self.data.source_ids
            )));
        }
        if self.data.images_per_id < t.k_per_id {
            return Err(PatError::config(format!(
                "K = {} exceeds {} images per identity",
                t.k_per_id, self.data.images_per_id
            )));
        }
        Ok(())
    }
}
