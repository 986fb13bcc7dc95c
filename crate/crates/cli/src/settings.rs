//! Flat `section.key = value` settings shared by the config file and flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use selfmae::data::{GeneratorParams, TextureFamily};
use selfmae::model::ModelConfig;
use selfmae::partition::{HintStrategy, NegativeWeights};
use selfmae::trainer::{HintSchedule, LayerRef, MaskMode, MaskOrder, ProbeConfig, TargetCluster, TrainConfig};

use crate::CliError;

pub struct KeySpec {
    pub key: &'static str,
    pub help: &'static str,
    pub boolean: bool,
}

const fn key(key: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        key,
        help,
        boolean: false,
    }
}

const fn flag(key: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        key,
        help,
        boolean: true,
    }
}

pub const KEYS: &[KeySpec] = &[
    key("model.image_size", "Square image side in pixels"),
    key("model.patch_size", "Patch side in pixels"),
    key("model.channels", "Colour channels"),
    key("model.embed_dim", "Encoder width"),
    key("model.decoder_dim", "Decoder width"),
    key("model.encoder_layers", "Encoder blocks"),
    key("model.decoder_layers", "Decoder blocks"),
    key("model.heads", "Attention heads"),
    key("model.mlp_ratio", "MLP hidden width multiplier"),
    flag("model.norm_pix_loss", "Reconstruct per-patch normalized pixels"),
    key("model.model_seed", "Parameter initialization seed"),
    key("train.epochs", "Pre-training epochs"),
    key("train.batch_size", "Images per optimizer step"),
    key("train.lr", "Peak learning rate"),
    key("train.min_lr", "Final learning rate"),
    key("train.warmup_epochs", "Linear warm-up epochs"),
    key("train.weight_decay", "Decoupled weight decay"),
    key("train.mask_ratio", "Fraction of masked tokens"),
    key("train.mask_mode", "random | self-guided"),
    key("train.hint_schedule", "constant | linear"),
    key("train.hint_ratio", "Hint ratio for the constant schedule"),
    key("train.hint_start", "Hint ratio at the first informed epoch (linear)"),
    key("train.hint_end", "Hint ratio at the final epoch (linear)"),
    key("train.hint_strategy", "random | score | none"),
    key("train.mask_layer", "auto | encoder:N | decoder:N"),
    key("train.target_cluster", "object | background | alternate"),
    key("train.mask_order", "score | cluster-first"),
    key("train.negative_weights", "clip | rescale"),
    key("train.trigger_epoch", "none | first informed epoch"),
    key("train.probe_size", "Images used for the trigger check"),
    key("train.train_seed", "Mask and shuffling seed"),
    key(
        "train.checkpoint_every",
        "Periodic checkpoint interval in epochs (0 = off)",
    ),
    key("train.diagnostics_every", "Diagnostics interval in epochs (0 = off)"),
    key("data.data_dir", "Dataset directory"),
    key("data.families", "Comma-separated texture families"),
    key("data.min_foreground", "Smallest foreground fraction"),
    key("data.max_foreground", "Largest foreground fraction"),
    key("data.train_count", "Training images"),
    key("data.val_count", "Validation images"),
    key("data.data_seed", "Dataset seed"),
    key("analyze.checkpoint", "Checkpoint to analyze, mask or probe"),
    key("analyze.reference", "Reference checkpoint for the KL columns"),
    key(
        "analyze.analysis_images",
        "Validation images used by analyze and diagnostics",
    ),
    key("analyze.analysis_seed", "Seed of the random masks used by analyze"),
    flag("analyze.svg", "Also render SVG line plots"),
    key(
        "mask.images_dir",
        "Directory of PNG/PNM images (default: validation split)",
    ),
    key(
        "mask.mask_images",
        "Validation images to mask when no directory is given",
    ),
    key("mask.pgm_scale", "Pixels per token in PGM output"),
    key("probe.probe_iterations", "Maximum probe optimizer iterations"),
    key("probe.probe_lr", "Probe learning rate"),
    key("probe.probe_weight_decay", "Probe L2 penalty"),
    key("probe.probe_train", "Training images for the probe (0 = all)"),
    key("probe.compare", "Second checkpoint for a comparison table"),
    key("output.out_dir", "Directory for outputs and summaries"),
    key("output.resume", "Checkpoint to resume pre-training from"),
];

/// Command-line flag name of a key (`train.mask_mode` -> `mask-mode`).
pub fn flag_name(key: &str) -> String {
    key.rsplit('.').next().unwrap_or(key).replace('_', "-")
}

fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

fn defaults() -> BTreeMap<&'static str, String> {
    let m = ModelConfig::default();
    let t = TrainConfig::default();
    let g = GeneratorParams::default();
    let p = ProbeConfig::default();
    let families: Vec<&str> = g.families.iter().map(|f| f.name()).collect();
    let (hint_ratio, hint_start, hint_end) = match t.hint_schedule {
        HintSchedule::Constant { ratio } => (ratio, ratio, ratio),
        HintSchedule::Linear { start, end } => (start, start, end),
    };
    let pairs: Vec<(&'static str, String)> = vec![
        ("model.image_size", m.image_size.to_string()),
        ("model.patch_size", m.patch_size.to_string()),
        ("model.channels", m.channels.to_string()),
        ("model.embed_dim", m.embed_dim.to_string()),
        ("model.decoder_dim", m.decoder_dim.to_string()),
        ("model.encoder_layers", m.encoder_layers.to_string()),
        ("model.decoder_layers", m.decoder_layers.to_string()),
        ("model.heads", m.heads.to_string()),
        ("model.mlp_ratio", m.mlp_ratio.to_string()),
        ("model.norm_pix_loss", m.norm_pix_loss.to_string()),
        ("model.model_seed", m.seed.to_string()),
        ("train.epochs", t.epochs.to_string()),
        ("train.batch_size", t.batch_size.to_string()),
        ("train.lr", t.lr.to_string()),
        ("train.min_lr", t.min_lr.to_string()),
        ("train.warmup_epochs", t.warmup_epochs.to_string()),
        ("train.weight_decay", t.weight_decay.to_string()),
        ("train.mask_ratio", t.mask_ratio.to_string()),
        ("train.mask_mode", "self-guided".into()),
        ("train.hint_schedule", "constant".into()),
        ("train.hint_ratio", hint_ratio.to_string()),
        ("train.hint_start", hint_start.to_string()),
        ("train.hint_end", hint_end.to_string()),
        ("train.hint_strategy", "random".into()),
        ("train.mask_layer", "auto".into()),
        ("train.target_cluster", "object".into()),
        ("train.mask_order", "score".into()),
        ("train.negative_weights", "clip".into()),
        ("train.trigger_epoch", "none".into()),
        ("train.probe_size", t.probe_size.to_string()),
        ("train.train_seed", t.seed.to_string()),
        ("train.checkpoint_every", "10".into()),
        ("train.diagnostics_every", "0".into()),
        ("data.data_dir", "data".into()),
        ("data.families", families.join(",")),
        ("data.min_foreground", g.min_foreground.to_string()),
        ("data.max_foreground", g.max_foreground.to_string()),
        ("data.train_count", g.train.to_string()),
        ("data.val_count", g.val.to_string()),
        ("data.data_seed", "0".into()),
        ("analyze.checkpoint", String::new()),
        ("analyze.reference", String::new()),
        ("analyze.analysis_images", "128".into()),
        ("analyze.analysis_seed", "0".into()),
        ("analyze.svg", "false".into()),
        ("mask.images_dir", String::new()),
        ("mask.mask_images", "16".into()),
        ("mask.pgm_scale", "8".into()),
        ("probe.probe_iterations", p.max_iterations.to_string()),
        ("probe.probe_lr", p.lr.to_string()),
        ("probe.probe_weight_decay", p.weight_decay.to_string()),
        ("probe.probe_train", "0".into()),
        ("probe.compare", String::new()),
        ("output.out_dir", "runs".into()),
        ("output.resume", String::new()),
    ];
    pairs.into_iter().collect()
}

/// Fully resolved settings: defaults, then the config file, then flags.
#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<&'static str, String>,
}

impl Settings {
    pub fn new() -> Self {
        Self { values: defaults() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let spec = spec(key).ok_or_else(|| CliError::usage(format!("unknown config key `{key}`")))?;
        self.values.insert(spec.key, value.to_string());
        Ok(())
    }

    /// Applies a `section.key = value` file. Blank lines and `#` comments
    /// are ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("config line {}: expected `section.key = value`", no + 1)))?;
            let v = v.trim().trim_matches('"');
            self.set(k.trim(), v)
                .map_err(|e| CliError::usage(format!("config line {}: {}", no + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("registered key")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::usage(format!("invalid value {raw:?} for `{key}`: {e}")))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    pub fn required_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.path(key)
            .ok_or_else(|| CliError::usage(format!("`{key}` (--{}) is required", flag_name(key))))
    }

    fn choice<T>(&self, key: &str, options: &[(&str, T)]) -> Result<T, CliError>
    where
        T: Copy,
    {
        let raw = self.raw(key);
        options
            .iter()
            .find(|(name, _)| *name == raw)
            .map(|(_, v)| *v)
            .ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|o| o.0).collect();
                CliError::usage(format!(
                    "invalid value {raw:?} for `{key}`; expected one of {}",
                    names.join(", ")
                ))
            })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.values
                .iter()
                .map(|(k, v)| (k.to_string(), serde_json::Value::String(v.clone())))
                .collect(),
        )
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig {
            image_size: self.get("model.image_size")?,
            patch_size: self.get("model.patch_size")?,
            channels: self.get("model.channels")?,
            embed_dim: self.get("model.embed_dim")?,
            decoder_dim: self.get("model.decoder_dim")?,
            encoder_layers: self.get("model.encoder_layers")?,
            decoder_layers: self.get("model.decoder_layers")?,
            heads: self.get("model.heads")?,
            mlp_ratio: self.get("model.mlp_ratio")?,
            norm_pix_loss: self.get("model.norm_pix_loss")?,
            seed: self.get("model.model_seed")?,
        };
        cfg.validate()
            .map_err(|e| CliError::usage(format!("model settings: {e}")))?;
        if cfg.decoder_layers == 0 {
            return Err(CliError::usage("`model.decoder_layers` must be at least 1"));
        }
        Ok(cfg)
    }

    pub fn train_config(&self, model: &ModelConfig) -> Result<TrainConfig, CliError> {
        let hint_schedule = match self.choice("train.hint_schedule", &[("constant", false), ("linear", true)])? {
            false => HintSchedule::Constant {
                ratio: self.get("train.hint_ratio")?,
            },
            true => HintSchedule::Linear {
                start: self.get("train.hint_start")?,
                end: self.get("train.hint_end")?,
            },
        };
        let mask_layer = match self.raw("train.mask_layer") {
            "auto" => None,
            s => Some(LayerRef::parse(s).map_err(|e| CliError::usage(format!("`train.mask_layer`: {e}")))?),
        };
        let trigger_epoch = match self.raw("train.trigger_epoch") {
            "none" | "" => None,
            _ => Some(self.get("train.trigger_epoch")?),
        };
        let cfg = TrainConfig {
            epochs: self.get("train.epochs")?,
            batch_size: self.get("train.batch_size")?,
            lr: self.get("train.lr")?,
            min_lr: self.get("train.min_lr")?,
            warmup_epochs: self.get("train.warmup_epochs")?,
            weight_decay: self.get("train.weight_decay")?,
            mask_ratio: self.get("train.mask_ratio")?,
            mask_mode: self.choice(
                "train.mask_mode",
                &[("random", MaskMode::Random), ("self-guided", MaskMode::SelfGuided)],
            )?,
            hint_schedule,
            hint_strategy: self.choice(
                "train.hint_strategy",
                &[
                    ("random", HintStrategy::Random),
                    ("score", HintStrategy::Score),
                    ("none", HintStrategy::None),
                ],
            )?,
            mask_layer,
            target_cluster: self.choice(
                "train.target_cluster",
                &[
                    ("object", TargetCluster::Object),
                    ("background", TargetCluster::Background),
                    ("alternate", TargetCluster::Alternate),
                ],
            )?,
            mask_order: self.choice(
                "train.mask_order",
                &[("score", MaskOrder::Score), ("cluster-first", MaskOrder::ClusterFirst)],
            )?,
            negative_weights: self.negative_weights()?,
            trigger_epoch,
            probe_size: self.get("train.probe_size")?,
            seed: self.get("train.train_seed")?,
        };
        cfg.validate(model)
            .map_err(|e| CliError::usage(format!("train settings: {e}")))?;
        Ok(cfg)
    }

    pub fn negative_weights(&self) -> Result<NegativeWeights, CliError> {
        self.choice(
            "train.negative_weights",
            &[("clip", NegativeWeights::Clip), ("rescale", NegativeWeights::Rescale)],
        )
    }

    pub fn generator_params(&self) -> Result<GeneratorParams, CliError> {
        let families = self
            .raw("data.families")
            .split(',')
            .map(|s| {
                TextureFamily::parse(s.trim())
                    .map_err(|e| CliError::usage(format!("invalid value for `data.families`: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let params = GeneratorParams {
            image_size: self.get("model.image_size")?,
            patch_size: self.get("model.patch_size")?,
            families,
            min_foreground: self.get("data.min_foreground")?,
            max_foreground: self.get("data.max_foreground")?,
            train: self.get("data.train_count")?,
            val: self.get("data.val_count")?,
        };
        params
            .validate()
            .map_err(|e| CliError::usage(format!("`data.families` / data settings: {e}")))?;
        Ok(params)
    }

    pub fn probe_config(&self) -> Result<ProbeConfig, CliError> {
        Ok(ProbeConfig {
            max_iterations: self.get("probe.probe_iterations")?,
            lr: self.get("probe.probe_lr")?,
            weight_decay: self.get("probe.probe_weight_decay")?,
            ..ProbeConfig::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_names_are_unique() {
        let mut names: Vec<String> = KEYS.iter().map(|k| flag_name(k.key)).collect();
        names.sort();
        let before = names.len();
        names.dedup();
        assert_eq!(before, names.len());
        assert!(!names.contains(&"config".to_string()));
    }

    #[test]
    fn every_key_has_a_default() {
        let d = defaults();
        assert_eq!(d.len(), KEYS.len());
        for k in KEYS {
            assert!(d.contains_key(k.key), "{}", k.key);
        }
    }

    #[test]
    fn defaults_resolve() {
        let s = Settings::new();
        let m = s.model_config().unwrap();
        assert_eq!(m, ModelConfig::default());
        assert_eq!(s.train_config(&m).unwrap(), TrainConfig::default());
        assert_eq!(s.generator_params().unwrap(), GeneratorParams::default());
    }

    #[test]
    fn file_parsing() {
        let mut s = Settings::new();
        s.apply_text("# comment\n\ntrain.epochs = 3\ntrain.mask_mode = \"random\" # trailing\n")
            .unwrap();
        assert_eq!(s.raw("train.epochs"), "3");
        assert_eq!(s.raw("train.mask_mode"), "random");
        let err = s.apply_text("train.epoch = 3").unwrap_err();
        assert!(err.message().contains("train.epoch"));
        assert!(s.apply_text("no equals sign").is_err());
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut s = Settings::new();
        s.set("data.families", "stripes,plaid").unwrap();
        assert!(s.generator_params().unwrap_err().message().contains("data.families"));
        s.set("train.mask_mode", "sometimes").unwrap();
        let m = ModelConfig::default();
        assert!(s.train_config(&m).unwrap_err().message().contains("train.mask_mode"));
    }

    #[test]
    fn trigger_override_parses() {
        let mut s = Settings::new();
        s.set("train.trigger_epoch", "0").unwrap();
        let m = ModelConfig::default();
        assert_eq!(s.train_config(&m).unwrap().trigger_epoch, Some(0));
    }
}
