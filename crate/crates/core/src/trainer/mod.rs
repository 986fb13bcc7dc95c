//! Pre-training loop, phase switching, checkpoints and linear probing.

mod config;
mod probe;
mod run;

pub use config::{HintSchedule, LayerRef, MaskMode, MaskOrder, TargetCluster, TrainConfig};
pub use probe::{encoder_features, image_features, linear_probe, linear_probe_features, ProbeConfig, ProbeReport};
pub use run::{
    derive_seed, mask_seed, run_pretraining, DiagnosticsSnapshot, EpochMasks, EpochRecord, RunRecord, TargetSide,
    Trainer,
};

use crate::error::Result;
use crate::model::{patchify, Image};
use crate::numerics::Matrix;

/// Raw patch rows of each image.
pub fn patch_rows<'a>(images: impl IntoIterator<Item = &'a Image>, patch: usize) -> Result<Vec<Matrix<f32>>> {
    images
        .into_iter()
        .map(|img| patchify(img, patch).map(|p| p.rows))
        .collect()
}
