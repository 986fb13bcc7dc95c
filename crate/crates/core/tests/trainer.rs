//! Determinism, resume and phase bookkeeping of short training runs.

use selfmae::data::{gen_texture_dataset, GeneratorParams, Split};
use selfmae::model::{Checkpoint, ModelConfig, Phase};
use selfmae::numerics::Matrix;
use selfmae::trainer::{patch_rows, MaskMode, TrainConfig, Trainer};

fn model_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        channels: 3,
        embed_dim: 16,
        decoder_dim: 16,
        encoder_layers: 2,
        decoder_layers: 1,
        heads: 2,
        mlp_ratio: 2,
        norm_pix_loss: true,
        seed: 9,
    }
}

fn train_config(mode: MaskMode, trigger: Option<usize>) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        warmup_epochs: 1,
        mask_mode: mode,
        trigger_epoch: trigger,
        probe_size: 8,
        seed: 4,
        ..TrainConfig::default()
    }
}

fn data() -> Vec<Matrix<f32>> {
    let p = GeneratorParams {
        image_size: 16,
        patch_size: 4,
        train: 24,
        val: 0,
        ..GeneratorParams::default()
    };
    let ds = gen_texture_dataset(&p, 1).unwrap();
    patch_rows(ds.split(Split::Train).into_iter().map(|t| &t.image), 4).unwrap()
}

fn full_run(cfg: TrainConfig, data: &[Matrix<f32>]) -> Trainer {
    let mut t = Trainer::from_config(model_config(), cfg, data.len()).unwrap();
    t.run(data, |_| Ok(())).unwrap();
    t
}

#[test]
fn runs_are_bitwise_reproducible() {
    let data = data();
    for mode in [MaskMode::Random, MaskMode::SelfGuided] {
        let a = full_run(train_config(mode, Some(1)), &data);
        let b = full_run(train_config(mode, Some(1)), &data);
        let (la, lb) = (a.record().loss_log(), b.record().loss_log());
        assert_eq!(la.len(), 18);
        assert!(la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.model().params(), b.model().params());
    }
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let data = data();
    let cfg = train_config(MaskMode::SelfGuided, Some(1));
    let whole = full_run(cfg.clone(), &data);

    let mut first = Trainer::from_config(model_config(), cfg, data.len()).unwrap();
    first.run_epoch(&data).unwrap();
    let bytes = first.checkpoint().unwrap().to_bytes().unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.epoch(), 1);
    resumed.run(&data, |_| Ok(())).unwrap();

    let (a, b) = (whole.record().loss_log(), resumed.record().loss_log());
    assert_eq!(a.len(), b.len());
    for step in 6..16 {
        assert!(
            (a[step] - b[step]).abs() <= 1e-6,
            "step {step}: {} vs {}",
            a[step],
            b[step]
        );
    }
    assert_eq!(whole.record().phases(), resumed.record().phases());
}

#[test]
fn fixed_trigger_sets_phases() {
    let data = data();
    let t = full_run(train_config(MaskMode::SelfGuided, Some(1)), &data);
    assert_eq!(
        t.record().phases(),
        vec![Phase::Random, Phase::Informed, Phase::Informed]
    );
    assert_eq!(t.record().first_informed_epoch, Some(1));
    assert!(t.record().epochs[1].hint_ratio.is_some());

    let r = full_run(train_config(MaskMode::Random, None), &data);
    assert!(r.record().phases().iter().all(|&p| p == Phase::Random));
    assert!(r.record().first_informed_epoch.is_none());
    assert!(r.record().epochs.iter().all(|e| e.mean_loss.is_finite()));
}

#[test]
fn detected_trigger_switches_on_the_next_epoch() {
    let data = data();
    let t = full_run(train_config(MaskMode::SelfGuided, None), &data);
    let rec = t.record();
    match rec.detected_trigger {
        Some(k) => {
            assert_eq!(rec.first_informed_epoch, Some(k + 1));
            for e in &rec.epochs {
                assert_eq!(e.phase == Phase::Informed, e.epoch > k);
            }
        }
        None => assert!(rec.phases().iter().all(|&p| p == Phase::Random)),
    }
    assert_eq!(rec.history.to_csv().lines().count(), 1 + rec.history.entries.len());
}
