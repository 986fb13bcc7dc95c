//! Single-stage pre-training with the random-to-informed phase switch.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{LayerRef, MaskMode, MaskOrder, TargetCluster, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::exploitation::{trace_rates, TriggerHistory};
use crate::model::{
    AdamW, AdamWConfig, Checkpoint, CosineSchedule, Mae, MaskSpec, ModelConfig, OptimizerState, Phase, PhaseRecord,
};
use crate::numerics::{Matrix, Tape};
use crate::partition::{build_informed_mask, ncut_bipartition, random_mask, relevance_scores, SimilarityGraph};
use crate::relations::{similarity_matrix, DiagnosticsRecord};

const PURPOSE_SHUFFLE: u64 = 1;
const PURPOSE_MASK: u64 = 2;

/// Mixes `parts` into `seed` with splitmix64 rounds.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(z << 6)
            .wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Seed of the random mask of image `index` in `epoch`.
pub fn mask_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    derive_seed(seed, &[epoch as u64, PURPOSE_MASK, index as u64])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSide {
    Object,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
    pub step_losses: Vec<f64>,
    /// End-of-epoch `(R_{V->O}, R_{M->O})` on the probe subset.
    pub trigger_rates: Option<(f64, f64)>,
    pub hint_ratio: Option<f64>,
    pub target: Option<TargetSide>,
    /// Informed-phase images that fell back to a random mask.
    pub mask_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSnapshot {
    pub epoch: usize,
    pub record: DiagnosticsRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub history: TriggerHistory,
    /// Epoch at whose end the masked share first reached the visible share.
    pub detected_trigger: Option<usize>,
    pub first_informed_epoch: Option<usize>,
    pub diagnostics: Vec<DiagnosticsSnapshot>,
}

impl RunRecord {
    /// All per-step losses in order.
    pub fn loss_log(&self) -> Vec<f64> {
        self.epochs.iter().flat_map(|e| e.step_losses.iter().copied()).collect()
    }

    pub fn phases(&self) -> Vec<Phase> {
        self.epochs.iter().map(|e| e.phase).collect()
    }

    /// `epoch,loss,r_v_o,r_m_o,phase`; rates are empty when not evaluated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,r_v_o,r_m_o,phase\n");
        for e in &self.epochs {
            let (v, m) = e
                .trigger_rates
                .map(|(v, m)| (v.to_string(), m.to_string()))
                .unwrap_or_default();
            let phase = match e.phase {
                Phase::Random => "random",
                Phase::Informed => "informed",
            };
            out.push_str(&format!("{},{},{v},{m},{phase}\n", e.epoch, e.mean_loss));
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    config: TrainConfig,
    dataset_len: usize,
    record: RunRecord,
}

/// Training state for one run over a fixed dataset.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Mae<f32>,
    optimizer: AdamW<f32>,
    config: TrainConfig,
    schedule: CosineSchedule,
    dataset_len: usize,
    record: RunRecord,
}

fn schedule(config: &TrainConfig, dataset_len: usize) -> CosineSchedule {
    let spe = dataset_len.div_ceil(config.batch_size) as u64;
    CosineSchedule {
        base_lr: config.lr,
        min_lr: config.min_lr,
        warmup_steps: config.warmup_epochs as u64 * spe,
        total_steps: config.epochs as u64 * spe,
    }
}

impl Trainer {
    pub fn new(model: Mae<f32>, config: TrainConfig, dataset_len: usize) -> Result<Self> {
        config.validate(model.config())?;
        if dataset_len == 0 {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let optimizer = AdamW::new(
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            model.params(),
        );
        let mut record = RunRecord::default();
        if config.mask_mode == MaskMode::SelfGuided {
            record.first_informed_epoch = config.trigger_epoch;
        }
        Ok(Self {
            schedule: schedule(&config, dataset_len),
            model,
            optimizer,
            config,
            dataset_len,
            record,
        })
    }

    pub fn from_config(model: ModelConfig, config: TrainConfig, dataset_len: usize) -> Result<Self> {
        Self::new(Mae::new(model)?, config, dataset_len)
    }

    pub fn model(&self) -> &Mae<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn record_mut(&mut self) -> &mut RunRecord {
        &mut self.record
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.record.epochs.len()
    }

    pub fn is_finished(&self) -> bool {
        self.epoch() >= self.config.epochs
    }

    fn is_informed(&self, epoch: usize) -> bool {
        self.config.mask_mode == MaskMode::SelfGuided && self.record.first_informed_epoch.is_some_and(|k| epoch >= k)
    }

    pub fn phase_record(&self) -> PhaseRecord {
        PhaseRecord {
            phases: self.record.phases(),
            detected_trigger: self.record.detected_trigger,
            first_informed_epoch: self.record.first_informed_epoch,
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let state = TrainerState {
            config: self.config.clone(),
            dataset_len: self.dataset_len,
            record: self.record.clone(),
        };
        Ok(Checkpoint {
            config: self.model.config().clone(),
            params: self.model.params().clone(),
            optimizer: Some(OptimizerState::from_adam(&self.optimizer)),
            epoch: self.epoch(),
            step: self.optimizer.step,
            phase: self.phase_record(),
            trainer_state: serde_json::to_value(state)?,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let state: TrainerState = serde_json::from_value(ck.trainer_state.clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint has no trainer state: {e}")))?;
        let model = ck.model()?;
        let optimizer = ck
            .optimizer
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?
            .into_adam(model.params())?;
        if state.record.epochs.len() != ck.epoch || optimizer.step != ck.step {
            return Err(Error::Checkpoint(
                "epoch or step counters disagree with trainer state".into(),
            ));
        }
        state.config.validate(model.config())?;
        Ok(Self {
            schedule: schedule(&state.config, state.dataset_len),
            model,
            optimizer,
            config: state.config,
            dataset_len: state.dataset_len,
            record: state.record,
        })
    }

    /// Masks for every training image in `epoch`.
    pub fn epoch_masks(&self, data: &[Matrix<f32>], epoch: usize) -> Result<EpochMasks> {
        let n = self.model.config().num_tokens();
        if !self.is_informed(epoch) {
            let masks = (0..data.len())
                .map(|i| random_mask(n, self.config.mask_ratio, mask_seed(self.config.seed, epoch, i)))
                .collect::<Result<_>>()?;
            return Ok(EpochMasks {
                masks,
                informed: false,
                hint_ratio: None,
                target: None,
                fallbacks: 0,
            });
        }
        let first = self.record.first_informed_epoch.expect("informed phase has a start");
        let hint = self.config.hint_schedule.ratio(epoch, first, self.config.epochs);
        let target = match self.config.target_cluster {
            TargetCluster::Object => TargetSide::Object,
            TargetCluster::Background => TargetSide::Background,
            TargetCluster::Alternate if (epoch - first).is_multiple_of(2) => TargetSide::Object,
            TargetCluster::Alternate => TargetSide::Background,
        };
        let embeddings = self.mask_embeddings(data)?;
        let results: Vec<(MaskSpec, bool)> = embeddings
            .par_iter()
            .enumerate()
            .map(|(i, emb)| {
                let seed = mask_seed(self.config.seed, epoch, i);
                match self.informed_mask(emb, target, hint, seed) {
                    Ok(m) => Ok((m, false)),
                    Err(e) => {
                        warn!("epoch {epoch} image {i}: informed mask failed ({e}), using a random mask");
                        Ok((random_mask(n, self.config.mask_ratio, seed)?, true))
                    }
                }
            })
            .collect::<Result<_>>()?;
        let fallbacks = results.iter().filter(|r| r.1).count();
        Ok(EpochMasks {
            masks: results.into_iter().map(|r| r.0).collect(),
            informed: true,
            hint_ratio: Some(hint),
            target: Some(target),
            fallbacks,
        })
    }

    /// Intact-input embeddings of the configured mask layer.
    pub fn mask_embeddings(&self, data: &[Matrix<f32>]) -> Result<Vec<Matrix<f64>>> {
        let layer = self.config.mask_layer(self.model.config());
        let n = self.model.config().num_tokens();
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(64) {
            let refs: Vec<&Matrix<f32>> = chunk.iter().collect();
            match layer {
                LayerRef::Encoder(l) => {
                    for t in self.model.encode_intact(&refs, l + 1)? {
                        out.push(t.layers[l].output.clone());
                    }
                }
                LayerRef::Decoder(l) => {
                    let intact = MaskSpec::unmasked(n);
                    let masks: Vec<&MaskSpec> = chunk.iter().map(|_| &intact).collect();
                    for t in self.model.trace_batch(&refs, &masks)? {
                        out.push(t.decoder.expect("decoder trace").layers[l].output.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    fn informed_mask(&self, emb: &Matrix<f64>, target: TargetSide, hint: f64, seed: u64) -> Result<MaskSpec> {
        let m = similarity_matrix(emb)?;
        let g = SimilarityGraph::from_similarity(&m, self.config.negative_weights)?;
        let p = ncut_bipartition(&g)?;
        let cluster = match target {
            TargetSide::Object => p.object_tokens(),
            TargetSide::Background => p.background_tokens(),
        };
        let mut ranking = relevance_scores(emb, cluster)?;
        if self.config.mask_order == MaskOrder::ClusterFirst {
            ranking = ranking.cluster_first(cluster);
        }
        build_informed_mask(&ranking, self.config.mask_ratio, hint, self.config.hint_strategy, seed)
    }

    /// Mean final-layer `(R_{V->O}, R_{M->O})` over the probe subset.
    pub fn probe_rates(&self, data: &[Matrix<f32>], masks: &[MaskSpec]) -> Result<(f64, f64)> {
        let k = self.config.probe_size.min(data.len());
        let (mut v, mut m) = (0.0, 0.0);
        for (chunk_d, chunk_m) in data[..k].chunks(64).zip(masks[..k].chunks(64)) {
            let refs: Vec<&Matrix<f32>> = chunk_d.iter().collect();
            let mrefs: Vec<&MaskSpec> = chunk_m.iter().collect();
            for t in self.model.trace_batch(&refs, &mrefs)? {
                let (a, b) = trace_rates(t.decoder.as_ref().expect("decoder trace"), &t.mask)?;
                v += a;
                m += b;
            }
        }
        Ok((v / k as f64, m / k as f64))
    }

    /// Trains one epoch over `data` (raw patch rows, one matrix per image).
    pub fn run_epoch(&mut self, data: &[Matrix<f32>]) -> Result<&EpochRecord> {
        let epoch = self.epoch();
        if epoch >= self.config.epochs {
            return Err(invalid(format!("run already completed {epoch} epochs")));
        }
        if data.len() != self.dataset_len {
            return Err(Error::Dataset(format!(
                "expected {} images, got {}",
                self.dataset_len,
                data.len()
            )));
        }
        let last_good = self.checkpoint()?;
        let plan = self.epoch_masks(data, epoch)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            self.config.seed,
            &[epoch as u64, PURPOSE_SHUFFLE],
        )));
        let mut losses = Vec::with_capacity(order.len().div_ceil(self.config.batch_size));
        for batch in order.chunks(self.config.batch_size) {
            let x: Vec<&Matrix<f32>> = batch.iter().map(|&i| &data[i]).collect();
            let m: Vec<&MaskSpec> = batch.iter().map(|&i| &plan.masks[i]).collect();
            let loss = self.train_step(&x, &m).map_err(|e| match e {
                Error::Diverged { loss, .. } => Error::Diverged {
                    epoch,
                    step: self.optimizer.step as usize,
                    loss,
                    last_good: Box::new(last_good.clone()),
                },
                other => other,
            })?;
            losses.push(loss);
        }
        let trigger_rates = if self.record.detected_trigger.is_none() {
            let rates = self.probe_rates(data, &plan.masks)?;
            if let Some(t) = self.record.history.check(epoch, rates.0, rates.1)? {
                self.record.detected_trigger = Some(t);
                info!("trigger fired at epoch {t}");
                if self.config.mask_mode == MaskMode::SelfGuided && self.record.first_informed_epoch.is_none() {
                    self.record.first_informed_epoch = Some(t + 1);
                }
            }
            Some(rates)
        } else {
            None
        };
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        info!("epoch {epoch}: loss {mean_loss:.5}");
        self.record.epochs.push(EpochRecord {
            epoch,
            phase: if plan.informed { Phase::Informed } else { Phase::Random },
            mean_loss,
            step_losses: losses,
            trigger_rates,
            hint_ratio: plan.hint_ratio,
            target: plan.target,
            mask_fallbacks: plan.fallbacks,
        });
        Ok(self.record.epochs.last().expect("just pushed"))
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn train_step(&mut self, x: &[&Matrix<f32>], masks: &[&MaskSpec]) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _, _) = self.model.forward_loss(&mut tape, x, masks)?;
        let value = tape.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch(),
                step: self.optimizer.step as usize,
                loss: value,
                last_good: Box::new(self.checkpoint()?),
            });
        }
        let grads = tape.backward(loss, self.model.params())?;
        let lr = self.schedule.lr(self.optimizer.step);
        self.optimizer.update(self.model.params_mut(), &grads, lr)?;
        Ok(value)
    }

    /// Runs the remaining epochs, calling `hook` after each.
    pub fn run<F>(&mut self, data: &[Matrix<f32>], mut hook: F) -> Result<()>
    where
        F: FnMut(&mut Trainer) -> Result<()>,
    {
        while !self.is_finished() {
            self.run_epoch(data)?;
            hook(self)?;
        }
        Ok(())
    }
}

/// Masks chosen for one epoch.
#[derive(Debug, Clone)]
pub struct EpochMasks {
    pub masks: Vec<MaskSpec>,
    pub informed: bool,
    pub hint_ratio: Option<f64>,
    pub target: Option<TargetSide>,
    pub fallbacks: usize,
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn run_pretraining(
    model: ModelConfig,
    config: TrainConfig,
    data: &[Matrix<f32>],
) -> Result<(RunRecord, Checkpoint)> {
    let mut trainer = Trainer::from_config(model, config, data.len())?;
    trainer.run(data, |_| Ok(()))?;
    Ok((trainer.record.clone(), trainer.checkpoint()?))
}
