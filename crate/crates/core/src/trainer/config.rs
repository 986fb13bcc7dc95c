use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::ModelConfig;
use crate::partition::{HintStrategy, NegativeWeights};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Uniform random masks throughout.
    Random,
    /// Random masks until the trigger, informed masks afterwards.
    #[default]
    SelfGuided,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetCluster {
    #[default]
    Object,
    Background,
    /// Object on even informed epochs, background on odd ones.
    Alternate,
}

/// Order in which ranked tokens are masked.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskOrder {
    /// Pure relevance-score order.
    #[default]
    Score,
    /// Target-cluster tokens first, each group by score.
    ClusterFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HintSchedule {
    Constant {
        ratio: f64,
    },
    /// Linear from `start` at the first informed epoch to `end` at the
    /// final epoch.
    Linear {
        start: f64,
        end: f64,
    },
}

impl Default for HintSchedule {
    fn default() -> Self {
        HintSchedule::Constant { ratio: 0.05 }
    }
}

impl HintSchedule {
    pub fn ratio(&self, epoch: usize, first_informed: usize, epochs: usize) -> f64 {
        match *self {
            HintSchedule::Constant { ratio } => ratio,
            HintSchedule::Linear { start, end } => {
                let span = epochs.saturating_sub(1).saturating_sub(first_informed);
                if span == 0 {
                    return start;
                }
                let t = (epoch.saturating_sub(first_informed) as f64 / span as f64).min(1.0);
                start + (end - start) * t
            }
        }
    }
}

/// Layer whose embeddings drive informed masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "part", content = "index", rename_all = "lowercase")]
pub enum LayerRef {
    Encoder(usize),
    Decoder(usize),
}

impl LayerRef {
    pub fn parse(s: &str) -> Result<Self> {
        let (part, idx) = s
            .split_once(':')
            .ok_or_else(|| invalid(format!("layer {s:?} must look like encoder:2 or decoder:0")))?;
        let idx: usize = idx.parse().map_err(|_| invalid(format!("bad layer index in {s:?}")))?;
        match part {
            "encoder" => Ok(LayerRef::Encoder(idx)),
            "decoder" => Ok(LayerRef::Decoder(idx)),
            _ => Err(invalid(format!("unknown layer part {part:?}"))),
        }
    }
}

impl std::fmt::Display for LayerRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerRef::Encoder(i) => write!(f, "encoder:{i}"),
            LayerRef::Decoder(i) => write!(f, "decoder:{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub mask_mode: MaskMode,
    pub hint_schedule: HintSchedule,
    pub hint_strategy: HintStrategy,
    /// `None` selects the second-last encoder layer.
    pub mask_layer: Option<LayerRef>,
    pub target_cluster: TargetCluster,
    pub mask_order: MaskOrder,
    pub negative_weights: NegativeWeights,
    /// Fixed first informed epoch instead of the detected trigger.
    pub trigger_epoch: Option<usize>,
    pub probe_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_epochs: 2,
            weight_decay: 0.05,
            mask_ratio: 0.75,
            mask_mode: MaskMode::SelfGuided,
            hint_schedule: HintSchedule::default(),
            hint_strategy: HintStrategy::Random,
            mask_layer: None,
            target_cluster: TargetCluster::Object,
            mask_order: MaskOrder::Score,
            negative_weights: NegativeWeights::Clip,
            trigger_epoch: None,
            probe_size: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(invalid(format!("mask_ratio {} not in (0, 1)", self.mask_ratio)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(invalid(format!(
                "learning rates lr={} min_lr={} invalid",
                self.lr, self.min_lr
            )));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(invalid(format!("weight_decay {} not in [0, 1)", self.weight_decay)));
        }
        let hints = match self.hint_schedule {
            HintSchedule::Constant { ratio } => vec![ratio],
            HintSchedule::Linear { start, end } => vec![start, end],
        };
        if hints.iter().any(|&h| !(0.0..self.mask_ratio).contains(&h)) {
            return Err(invalid(format!("hint ratios {hints:?} must be in [0, mask_ratio)")));
        }
        match self.mask_layer {
            Some(LayerRef::Encoder(i)) if i >= model.encoder_layers => {
                return Err(invalid(format!("mask layer encoder:{i} out of range")))
            }
            Some(LayerRef::Decoder(i)) if i >= model.decoder_layers => {
                return Err(invalid(format!("mask layer decoder:{i} out of range")))
            }
            _ => {}
        }
        if self.probe_size == 0 {
            return Err(invalid("probe_size must be at least 1"));
        }
        Ok(())
    }

    pub fn mask_layer(&self, model: &ModelConfig) -> LayerRef {
        self.mask_layer
            .unwrap_or(LayerRef::Encoder(model.encoder_layers.saturating_sub(2)))
    }
}
