//! Run configuration shared by training, evaluation and the ablation harness.
//!
//! Defaults: `r = 4`, `σ = 0.88`,
//! `K = ⌊0.5·T⌋`, `θ_mil = 0.2`, `λ = 0.1`, 180 epochs at learning rate
//! `5e-5` with batches of 10. [`RunConfig::toy`] scales the optimizer
//! settings down for small synthetic datasets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::saliency::{DiffMetric, PairMark};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot parse config: {0}")]
    Parse(String),
}

/// How salient snippets are picked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencySource {
    L1,
    L2,
    Cosine,
    /// Uniformly random snippets at the same `K`.
    Random,
    /// Snippets ranked by the base branch's best class probability.
    Classification,
}

impl SaliencySource {
    pub fn metric(self) -> Option<DiffMetric> {
        match self {
            SaliencySource::L1 => Some(DiffMetric::L1),
            SaliencySource::L2 => Some(DiffMetric::L2),
            SaliencySource::Cosine => Some(DiffMetric::Cosine),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SaliencySource::L1 => "l1",
            SaliencySource::L2 => "l2",
            SaliencySource::Cosine => "cosine",
            SaliencySource::Random => "random",
            SaliencySource::Classification => "classification",
        }
    }
}

/// Which pseudo-label modules are stacked on the base branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modules {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "base+brm")]
    BaseBrm,
    #[serde(rename = "base+brm+dem")]
    BaseBrmDem,
}

impl Modules {
    pub fn has_brm(self) -> bool {
        !matches!(self, Modules::Base)
    }

    pub fn has_dem(self) -> bool {
        matches!(self, Modules::BaseBrmDem)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modules::Base => "base",
            Modules::BaseBrm => "base+brm",
            Modules::BaseBrmDem => "base+brm+dem",
        }
    }
}

/// How the salient and non-salient paths are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `σ·F̃ᵃ + (1-σ)·F̃ᵇ`
    WeightedSum,
    /// `F̃ᵃ + F̃ᵇ`
    Add,
    /// Salient path only.
    AOnly,
    /// Non-salient path only.
    BOnly,
    /// Temporal interaction of the features with themselves, no split.
    #[serde(rename = "self")]
    SelfAttention,
    /// Weighted sum without the channel-wise unit.
    TemporalOnly,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::WeightedSum => "weighted_sum",
            FusionMode::Add => "add",
            FusionMode::AOnly => "a_only",
            FusionMode::BOnly => "b_only",
            FusionMode::SelfAttention => "self",
            FusionMode::TemporalOnly => "temporal_only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    /// Top-N confident salient snippets, momentum update.
    Ours,
    /// Top-N confident salient snippets replace the slots.
    Direct,
    /// Momentum update with N salient snippets taken regardless of confidence.
    MomentumAll,
}

impl MemoryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MemoryMode::Ours => "ours",
            MemoryMode::Direct => "direct",
            MemoryMode::MomentumAll => "momentum_all",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcamSource {
    /// The base branch's TCAM (the trained localization network).
    Base,
    /// Pseudo-label TCAM from the refinement branches, memory frozen.
    Pseudo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouPreset {
    /// 0.1, 0.2, ..., 0.7
    Thumos,
    /// 0.5, 0.55, ..., 0.95
    Activitynet,
}

impl IouPreset {
    pub fn thresholds(self) -> Vec<f64> {
        match self {
            IouPreset::Thumos => (1..=7).map(|i| i as f64 / 10.0).collect(),
            IouPreset::Activitynet => (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // saliency inference
    pub diff: SaliencySource,
    pub salient_ratio: f64,
    pub pair_mark: PairMark,

    // boundary refinement
    pub sigma: f64,
    pub r: usize,
    pub fusion_mode: FusionMode,
    /// Divide temporal attention logits by `√D`.
    pub attention_scale: bool,

    // discrimination enhancement
    pub memory_slots: usize,
    pub eta0: f64,
    pub memory_mode: MemoryMode,

    // losses
    pub lambda_att: f64,
    pub theta_mil: f64,
    /// Also apply the video-level loss to the refined and enhanced features.
    pub refined_cls_loss: bool,
    /// Pseudo branches reuse the base classification head.
    pub shared_head: bool,
    /// Pooling size is `max(1, ⌈T / topk_divisor⌉)`.
    pub topk_divisor: usize,

    // training
    pub modules: Modules,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,

    // localization and evaluation
    pub class_threshold: f64,
    pub proposal_thresholds: Vec<f64>,
    pub nms_iou: f64,
    pub outer_fraction: f64,
    pub iou_preset: IouPreset,
    pub tcam_source: TcamSource,
    pub include_absent_classes: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            diff: SaliencySource::L1,
            salient_ratio: 0.5,
            pair_mark: PairMark::Later,
            sigma: 0.88,
            r: 4,
            fusion_mode: FusionMode::WeightedSum,
            attention_scale: false,
            memory_slots: 8,
            eta0: 0.1,
            memory_mode: MemoryMode::Ours,
            lambda_att: 0.1,
            theta_mil: 0.2,
            refined_cls_loss: true,
            shared_head: true,
            topk_divisor: 8,
            modules: Modules::BaseBrmDem,
            epochs: 180,
            lr: 5e-5,
            batch_size: 10,
            warmup_fraction: 0.1,
            class_threshold: 0.1,
            proposal_thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
            nms_iou: 0.5,
            outer_fraction: 0.25,
            iou_preset: IouPreset::Thumos,
            tcam_source: TcamSource::Base,
            include_absent_classes: false,
        }
    }
}

impl RunConfig {
    /// Settings for the small synthetic datasets used in tests and demos.
    pub fn toy() -> Self {
        RunConfig {
            epochs: 60,
            lr: 1e-3,
            batch_size: 10,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.salient_ratio > 0.0 && self.salient_ratio <= 1.0) {
            return bad(format!("salient_ratio {} outside (0, 1]", self.salient_ratio));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return bad(format!("sigma {} outside [0, 1]", self.sigma));
        }
        if self.r == 0 {
            return bad("r must be positive".into());
        }
        if self.memory_slots == 0 {
            return bad("memory_slots must be positive".into());
        }
        if !(self.eta0 > 0.0 && self.eta0 < 1.0) {
            return bad(format!("eta0 {} outside (0, 1)", self.eta0));
        }
        if !(self.lambda_att >= 0.0 && self.theta_mil >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if self.topk_divisor == 0 {
            return bad("topk_divisor must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction outside [0, 1]".into());
        }
        if self.proposal_thresholds.is_empty() || self.proposal_thresholds.iter().any(|t| !(0.0..1.0).contains(t)) {
            return bad("proposal_thresholds must be non-empty values in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || self.outer_fraction.is_nan() || self.outer_fraction < 0.0 {
            return bad("nms_iou must lie in [0, 1] and outer_fraction be >= 0".into());
        }
        Ok(())
    }

    /// Checks settings that depend on the feature width.
    pub fn validate_for_dim(&self, dim: usize) -> Result<(), ConfigError> {
        self.validate()?;
        if !dim.is_multiple_of(self.r) {
            return Err(ConfigError::Invalid(format!(
                "feature dim {dim} is not divisible by r = {}",
                self.r
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn warmup_epochs(&self) -> usize {
        if self.modules == Modules::Base {
            return self.epochs;
        }
        ((self.epochs as f64 * self.warmup_fraction).round() as usize).min(self.epochs)
    }

    pub fn pool_k(&self, num_snippets: usize) -> usize {
        num_snippets.div_ceil(self.topk_divisor).clamp(1, num_snippets)
    }

    pub fn att_k(&self, num_snippets: usize) -> usize {
        (num_snippets / self.topk_divisor).max(1)
    }
}
