//! Configuration structs with their default values.
//!
//! Everything here (de)serializes from JSON; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shapes of the predictor bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Patch side length in cells.
    pub patch_size: usize,
    /// Channels of the raw pyramid.
    pub raw_channels: usize,
    /// Channels after compression.
    pub channels: usize,
    pub hidden: Vec<usize>,
    /// Anchors per patch for the P5/P6 predictors.
    pub k_fixed: usize,
    /// Anchors per patch for the shared probing predictor.
    pub k_adapt: usize,
    /// Use the P5 predictor on P6 instead of a separate parameter set.
    pub share_p6_with_p5: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 15,
            raw_channels: 16,
            channels: 8,
            hidden: vec![256, 256],
            k_fixed: 50,
            k_adapt: 20,
            share_p6_with_p5: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.channels == 0 || self.raw_channels == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.k_fixed == 0 || self.k_adapt == 0 {
            return Err(Error::Config("anchors per patch must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Thresholds and counts that govern anchor generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Lower edge of the probing confidence band.
    pub eta_l: f32,
    /// Upper edge of the probing confidence band.
    pub eta_h: f32,
    /// Final gather threshold.
    pub eta_f: f32,
    /// IoU threshold for probe-patch NMS.
    pub eta_iou: f32,
    pub count_min: usize,
    pub count_max: usize,
    /// Max probe patches per level.
    pub patch_cap: usize,
    /// Probing stops when fewer anchors than this are selected.
    pub early_stop_min: usize,
    pub patch_size: usize,
    /// Side of the resampled P5 map (normally `2 * patch_size`).
    pub interp_size: usize,
    /// Deepest level probed: 3 (full), 4, or 5 (probing disabled).
    pub lowest_level: u8,
    /// Ablation: rank all anchors by score and keep the top `count_max`.
    pub topk_mode: bool,
    /// Remove probed anchors once their region is re-predicted.
    pub replace_selected: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            eta_l: 0.1,
            eta_h: 0.7,
            eta_f: 0.1,
            eta_iou: 0.25,
            count_min: 5,
            count_max: 200,
            patch_cap: 15,
            early_stop_min: 3,
            patch_size: 15,
            interp_size: 30,
            lowest_level: 3,
            topk_mode: false,
            replace_selected: true,
        }
    }
}

impl GenConfig {
    /// The 300-query setting: count range [50, 500] and gather threshold 0.05.
    /// Pair with [`ModelConfig::preset_300`].
    pub fn preset_300() -> Self {
        Self {
            eta_f: 0.05,
            count_min: 50,
            count_max: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f32| (0.0..=1.0).contains(&v);
        if !(unit(self.eta_l) && unit(self.eta_h) && self.eta_l <= self.eta_h) {
            return Err(Error::Config(format!(
                "need 0 <= eta_l <= eta_h <= 1, got {} / {}",
                self.eta_l, self.eta_h
            )));
        }
        if !unit(self.eta_f) || !unit(self.eta_iou) {
            return Err(Error::Config("eta_f and eta_iou must lie in [0, 1]".into()));
        }
        if self.count_min > self.count_max || self.count_max == 0 {
            return Err(Error::Config(format!(
                "bad count range [{}, {}]",
                self.count_min, self.count_max
            )));
        }
        if !(3..=5).contains(&self.lowest_level) {
            return Err(Error::Config(format!(
                "lowest_level must be 3, 4 or 5, got {}",
                self.lowest_level
            )));
        }
        if self.patch_size == 0 || self.interp_size != 2 * self.patch_size {
            return Err(Error::Config(format!(
                "interp_size {} must be twice patch_size {}",
                self.interp_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        if self.patch_size != model.patch_size {
            return Err(Error::Config(format!(
                "patch_size {} does not match the bank ({})",
                self.patch_size, model.patch_size
            )));
        }
        Ok(())
    }
}

impl ModelConfig {
    pub fn preset_300() -> Self {
        Self {
            k_fixed: 150,
            k_adapt: 50,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PNegForm {
    /// `p_neg(t) = 1 - t`
    #[default]
    LinearComplement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    pub gamma1: f32,
    pub gamma2: f32,
    pub p_neg: PNegForm,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            gamma1: 0.4,
            gamma2: 0.6,
            p_neg: PNegForm::LinearComplement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_l1: f32,
    pub lambda_giou: f32,
    pub lambda_cls: f32,
    pub lambda_anchor: f32,
    pub focal_alpha: f32,
    pub focal_gamma: f32,
    pub weights: WeightConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            lambda_cls: 2.0,
            lambda_anchor: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            weights: WeightConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Steps per epoch; `None` means one pass over the dataset.
    pub steps_per_epoch: Option<usize>,
    pub lr: f32,
    pub lr_drop_factor: f32,
    /// Epochs at which the learning rate drops; `None` places them at 2/3 and 11/12 of training.
    pub lr_drop_epochs: Option<Vec<usize>>,
    pub seed: u64,
    /// Minimum training patches per level.
    pub n_tp: usize,
    pub clip_norm: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Scenes whose gradients are summed before one optimizer update.
    pub grad_accum: usize,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            steps_per_epoch: None,
            lr: 2e-4,
            lr_drop_factor: 0.1,
            lr_drop_epochs: None,
            seed: 0,
            n_tp: 4,
            clip_norm: 1.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_accum: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::Config("epochs and steps must be positive".into()));
        }
        if !(self.lr >= 0.0) || self.n_tp == 0 || self.grad_accum == 0 {
            return Err(Error::Config("need lr >= 0, n_tp >= 1, grad_accum >= 1".into()));
        }
        Ok(())
    }

    pub fn drop_epochs(&self) -> Vec<usize> {
        match &self.lr_drop_epochs {
            Some(v) => v.clone(),
            None => {
                let e = self.epochs as f64;
                vec![(e * 8.0 / 12.0).round() as usize, (e * 11.0 / 12.0).round() as usize]
            }
        }
    }

    /// Learning rate in effect during a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let drops = self.drop_epochs().iter().filter(|&&d| epoch >= d).count();
        self.lr * self.lr_drop_factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub scenes: usize,
    pub seed: u64,
    /// Mean of the Poisson object count.
    pub mean_objects: f64,
    pub max_objects: usize,
    /// Sampling mix of small / medium / large objects.
    pub size_mix: [f32; 3],
    pub noise: f32,
    pub raw_channels: usize,
    /// Side of the P3 map; P4 and P5 are 1/2 and 1/4 of it.
    pub p3_size: usize,
    /// Cap on pairwise IoU between objects of one scene.
    pub max_pair_iou: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 200,
            seed: 7,
            mean_objects: 5.0,
            max_objects: 30,
            size_mix: [0.4, 0.35, 0.25],
            noise: 0.05,
            raw_channels: 16,
            p3_size: 60,
            max_pair_iou: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.raw_channels < 4 {
            return Err(Error::Config("raw_channels must be at least 4".into()));
        }
        if self.p3_size < 4 || !self.p3_size.is_multiple_of(4) {
            return Err(Error::Config("p3_size must be a positive multiple of 4".into()));
        }
        if self.mean_objects < 0.0 || self.size_mix.iter().any(|&p| p < 0.0) {
            return Err(Error::Config("negative sampling parameters".into()));
        }
        Ok(())
    }
}

/// Top-level configuration file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub gen: GenConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub budget: usize,
    pub roi_out: usize,
    pub roi_sampling: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            budget: 200,
            roi_out: 7,
            roi_sampling: 2,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gen.validate()?;
        self.gen.check_model(&self.model)?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.synth.raw_channels != self.model.raw_channels {
            return Err(Error::Config(format!(
                "synth.raw_channels {} differs from model.raw_channels {}",
                self.synth.raw_channels, self.model.raw_channels
            )));
        }
        Ok(())
    }

    /// Apply a `dotted.key=value` override. The key must already exist; the
    /// value is parsed as JSON, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *node = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("override `{key}`: {e}")))?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}
