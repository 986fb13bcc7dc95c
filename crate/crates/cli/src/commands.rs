//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use selfmae::data::{gen_texture_dataset, load_dataset, load_images, patch_labels, save_dataset, Dataset, Split};
use selfmae::model::{Checkpoint, Image, Mae, MaskSpec};
use selfmae::numerics::Matrix;
use selfmae::partition::{
    build_informed_mask, levels_to_pgm, mask_to_json, mask_to_pgm, ncut_bipartition, random_mask, relevance_scores,
    HintStrategy, PartitionResult, SimilarityGraph,
};
use selfmae::relations::{
    compute_diagnostics, similarity_matrix, DiagnosticsOptions, DiagnosticsRecord, LayerDiagnostics, Part,
};
use selfmae::trainer::{
    derive_seed, linear_probe, patch_rows, DiagnosticsSnapshot, MaskOrder, ProbeReport, TargetCluster, Trainer,
};
use selfmae::Error;

use crate::plot::{line_plot, Series};
use crate::settings::Settings;
use crate::CliError;

/// Output directory that remembers the hash of everything written into it.
struct Outputs {
    root: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl Outputs {
    fn new(root: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            artifacts: BTreeMap::new(),
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> selfmae::Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn save_checkpoint(&mut self, rel: &str, ck: &Checkpoint) -> selfmae::Result<()> {
        self.write(rel, &ck.to_bytes()?)
    }

    /// Writes `<command>.json` with the resolved settings, results and
    /// artifact hashes, and echoes it to stdout.
    fn finish(self, command: &str, settings: &Settings, results: Value) -> Result<(), CliError> {
        let summary = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": settings.to_json(),
            "results": results,
            "artifacts": self.artifacts,
        });
        let text = serde_json::to_string_pretty(&summary)?;
        let path = self.root.join(format!("{command}.json"));
        fs::write(&path, format!("{text}\n"))?;
        println!("{text}");
        info!("summary written to {}", path.display());
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn out_dir(s: &Settings) -> Result<PathBuf, CliError> {
    s.required_path("output.out_dir")
}

fn open_dataset(s: &Settings) -> Result<Dataset, CliError> {
    let dir = s.required_path("data.data_dir")?;
    Ok(load_dataset(&dir)?)
}

fn load_model(path: &Path) -> Result<Mae<f32>, CliError> {
    Ok(Checkpoint::load(path)?.model()?)
}

fn random_masks(n: usize, ratio: f64, seed: u64, count: usize) -> selfmae::Result<Vec<MaskSpec>> {
    (0..count)
        .map(|i| random_mask(n, ratio, derive_seed(seed, &[i as u64])))
        .collect()
}

fn split_patches(
    ds: &Dataset,
    split: Split,
    limit: usize,
    patch: usize,
) -> selfmae::Result<(Vec<Matrix<f32>>, Vec<usize>)> {
    let items = ds.split(split);
    let take = if limit == 0 {
        items.len()
    } else {
        limit.min(items.len())
    };
    let items = &items[..take];
    let rows = patch_rows(items.iter().map(|t| &t.image), patch)?;
    Ok((rows, items.iter().map(|t| t.class).collect()))
}

pub fn gen_data(s: &Settings) -> Result<(), CliError> {
    let params = s.generator_params()?;
    let seed: u64 = s.get("data.data_seed")?;
    let data_dir = s.required_path("data.data_dir")?;
    let mut out = Outputs::new(out_dir(s)?)?;
    info!(
        "generating {} + {} images into {}",
        params.train,
        params.val,
        data_dir.display()
    );
    let ds = gen_texture_dataset(&params, seed)?;
    save_dataset(&ds, &data_dir)?;
    let manifest = fs::read(data_dir.join(selfmae::data::MANIFEST_FILE))?;
    out.artifacts.insert("manifest.json".into(), sha256_hex(&manifest));
    let results = json!({
        "data_dir": data_dir.display().to_string(),
        "images": ds.images.len(),
        "train": ds.split(Split::Train).len(),
        "val": ds.split(Split::Val).len(),
        "classes": ds.manifest.classes,
    });
    out.finish("gen-data", s, results)
}

fn epoch_file(prefix: &str, epoch: usize, ext: &str) -> String {
    format!("{prefix}/epoch_{epoch:03}.{ext}")
}

pub fn pretrain(s: &Settings) -> Result<(), CliError> {
    let model_cfg = s.model_config()?;
    let train_cfg = s.train_config(&model_cfg)?;
    let checkpoint_every: usize = s.get("train.checkpoint_every")?;
    let diagnostics_every: usize = s.get("train.diagnostics_every")?;
    let analysis_images: usize = s.get("analyze.analysis_images")?;
    let analysis_seed: u64 = s.get("analyze.analysis_seed")?;
    let options = DiagnosticsOptions {
        negative_weights: s.negative_weights()?,
    };
    let resume = s.path("output.resume");
    let ds = open_dataset(s)?;

    let mut trainer = match &resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let t = Trainer::from_checkpoint(&ck)?;
            if t.config() != &train_cfg || t.model().config() != &model_cfg {
                warn!("resuming with the configuration stored in {}", path.display());
            }
            info!("resuming {} at epoch {}", path.display(), t.epoch());
            t
        }
        None => {
            let n = ds.split(Split::Train).len();
            Trainer::from_config(model_cfg, train_cfg, n)?
        }
    };
    let cfg = trainer.model().config().clone();
    if ds.manifest.params.image_size != cfg.image_size {
        return Err(CliError::usage(format!(
            "dataset images are {}px but `model.image_size` is {}",
            ds.manifest.params.image_size, cfg.image_size
        )));
    }
    let (train, _) = split_patches(&ds, Split::Train, 0, cfg.patch_size)?;
    let (val, _) = if diagnostics_every > 0 {
        split_patches(&ds, Split::Val, analysis_images, cfg.patch_size)?
    } else {
        (Vec::new(), Vec::new())
    };
    let val_masks = random_masks(cfg.num_tokens(), trainer.config().mask_ratio, analysis_seed, val.len())?;

    let mut out = Outputs::new(out_dir(s)?)?;
    let outcome = trainer.run(&train, |t| {
        let e = t.record().epochs.last().expect("epoch just finished").clone();
        match e.trigger_rates {
            Some((v, m)) => info!(
                "epoch {} loss {:.5} R_VO {v:.4} R_MO {m:.4} {:?}",
                e.epoch, e.mean_loss, e.phase
            ),
            None => info!("epoch {} loss {:.5} {:?}", e.epoch, e.mean_loss, e.phase),
        }
        let done = e.epoch + 1;
        if checkpoint_every > 0 && done % checkpoint_every == 0 && !t.is_finished() {
            out.save_checkpoint(&epoch_file("checkpoints", e.epoch, "ckpt"), &t.checkpoint()?)?;
        }
        if diagnostics_every > 0 && !val.is_empty() && (done % diagnostics_every == 0 || t.is_finished()) {
            let record = compute_diagnostics(t.model(), &val, &val_masks, None, options)?;
            out.write(&epoch_file("diagnostics", e.epoch, "csv"), record.to_csv().as_bytes())?;
            t.record_mut()
                .diagnostics
                .push(DiagnosticsSnapshot { epoch: e.epoch, record });
        }
        Ok(())
    });
    if let Err(err) = outcome {
        if let Error::Diverged { last_good, .. } = &err {
            out.save_checkpoint("last_good.ckpt", last_good)?;
            warn!(
                "saved the last finite state to {}",
                out.path("last_good.ckpt").display()
            );
        }
        return Err(err.into());
    }

    let record = trainer.record().clone();
    out.save_checkpoint("final.ckpt", &trainer.checkpoint()?)?;
    out.write("epochs.csv", record.to_csv().as_bytes())?;
    out.write("trigger.csv", record.history.to_csv().as_bytes())?;
    let results = json!({
        "epochs": record.epochs.len(),
        "steps": trainer.step(),
        "final_loss": record.epochs.last().map(|e| e.mean_loss),
        "detected_trigger": record.detected_trigger,
        "first_informed_epoch": record.first_informed_epoch,
        "mask_fallbacks": record.epochs.iter().map(|e| e.mask_fallbacks).sum::<usize>(),
        "resumed_from": resume.map(|p| p.display().to_string()),
    });
    out.finish("pretrain", s, results)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn part_name(p: Part) -> &'static str {
    match p {
        Part::Encoder => "encoder",
        Part::Decoder => "decoder",
    }
}

fn layers_csv(rec: &DiagnosticsRecord) -> String {
    let mut out = String::from(
        "part,layer,sigma_f,sigma_s,nmi,attention_distance,kld_attention,kld_cosine,\
         mu_intra_attention,mu_inter_attention,mu_intra_cosine,mu_inter_cosine,mask_token_variance\n",
    );
    for l in &rec.layers {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            part_name(l.part),
            l.layer,
            l.sigma_f,
            l.sigma_s,
            l.nmi,
            l.attention_distance,
            opt(l.kld_attention),
            opt(l.kld_cosine),
            opt(l.mu_intra_attention),
            opt(l.mu_inter_attention),
            opt(l.mu_intra_cosine),
            opt(l.mu_inter_cosine),
            opt(l.mask_token_variance),
        ));
    }
    out
}

fn fourier_csv(rec: &DiagnosticsRecord) -> String {
    let mut out = String::from("part,layer,frequency,delta_log_amplitude\n");
    for l in &rec.layers {
        for (f, a) in l.fourier.frequency.iter().zip(&l.fourier.delta_log_amplitude) {
            out.push_str(&format!("{},{},{f},{a}\n", part_name(l.part), l.layer));
        }
    }
    out
}

fn exploitation_csv(rec: &DiagnosticsRecord) -> String {
    let mut out = String::from("layer,r_v_o,r_m_o\n");
    for l in rec.layers.iter().filter(|l| l.part == Part::Decoder) {
        if let Some((v, m)) = l.exploitation {
            out.push_str(&format!("{},{v},{m}\n", l.layer));
        }
    }
    out
}

/// One series per metric over the layer stack (encoder layers first).
fn layer_series(rec: &DiagnosticsRecord, label: &str, f: impl Fn(&LayerDiagnostics) -> Option<f64>) -> Series {
    Series {
        label: label.to_string(),
        points: rec
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| f(l).map(|v| (i as f64, v)))
            .collect(),
    }
}

fn render_plots(rec: &DiagnosticsRecord, out: &mut Outputs) -> selfmae::Result<()> {
    let x = "layer (encoder, then decoder)";
    let plots: Vec<(&str, Vec<Series>)> = vec![
        (
            "variance",
            vec![
                layer_series(rec, "sigma_F", |l| Some(l.sigma_f)),
                layer_series(rec, "sigma_S", |l| Some(l.sigma_s)),
            ],
        ),
        (
            "kld",
            vec![
                layer_series(rec, "attention", |l| l.kld_attention),
                layer_series(rec, "cosine", |l| l.kld_cosine),
            ],
        ),
        ("nmi", vec![layer_series(rec, "NMI", |l| Some(l.nmi))]),
        (
            "attention_distance",
            vec![layer_series(rec, "distance", |l| Some(l.attention_distance))],
        ),
        (
            "clustering",
            vec![
                layer_series(rec, "intra (attn)", |l| l.mu_intra_attention),
                layer_series(rec, "inter (attn)", |l| l.mu_inter_attention),
                layer_series(rec, "intra (cos)", |l| l.mu_intra_cosine),
                layer_series(rec, "inter (cos)", |l| l.mu_inter_cosine),
            ],
        ),
        (
            "mask_token_variance",
            vec![layer_series(rec, "variance", |l| l.mask_token_variance)],
        ),
        (
            "exploitation",
            vec![
                layer_series(rec, "R_V->O", |l| l.exploitation.map(|e| e.0)),
                layer_series(rec, "R_M->O", |l| l.exploitation.map(|e| e.1)),
            ],
        ),
    ];
    for (name, series) in plots {
        out.write(&format!("plots/{name}.svg"), line_plot(name, x, &series).as_bytes())?;
    }
    let fourier: Vec<Series> = rec
        .layers
        .iter()
        .map(|l| Series {
            label: format!("{}:{}", part_name(l.part), l.layer),
            points: l
                .fourier
                .frequency
                .iter()
                .copied()
                .zip(l.fourier.delta_log_amplitude.iter().copied())
                .collect(),
        })
        .collect();
    out.write(
        "plots/fourier.svg",
        line_plot("fourier", "frequency", &fourier).as_bytes(),
    )?;
    Ok(())
}

pub fn analyze(s: &Settings) -> Result<(), CliError> {
    let ck_path = s.required_path("analyze.checkpoint")?;
    let images: usize = s.get("analyze.analysis_images")?;
    let seed: u64 = s.get("analyze.analysis_seed")?;
    let svg: bool = s.get("analyze.svg")?;
    let ratio: f64 = s.get("train.mask_ratio")?;
    let options = DiagnosticsOptions {
        negative_weights: s.negative_weights()?,
    };
    let model = load_model(&ck_path)?;
    let mut notices = Vec::new();
    let reference = match s.path("analyze.reference") {
        Some(p) if p.exists() => Some(load_model(&p)?),
        Some(p) => {
            let msg = format!("reference checkpoint {} not found; KL columns skipped", p.display());
            warn!("{msg}");
            notices.push(msg);
            None
        }
        None => {
            notices.push("no reference checkpoint; KL columns skipped".to_string());
            None
        }
    };
    let ds = open_dataset(s)?;
    let cfg = model.config().clone();
    let (patches, _) = split_patches(&ds, Split::Val, images, cfg.patch_size)?;
    if patches.is_empty() {
        return Err(Error::Dataset("validation split is empty".into()).into());
    }
    let masks = random_masks(cfg.num_tokens(), ratio, seed, patches.len())?;
    info!("analyzing {} on {} images", ck_path.display(), patches.len());
    let rec = compute_diagnostics(&model, &patches, &masks, reference.as_ref(), options)?;

    let mut out = Outputs::new(out_dir(s)?)?;
    out.write("diagnostics.csv", rec.to_csv().as_bytes())?;
    out.write("diagnostics.json", rec.to_json()?.as_bytes())?;
    out.write("layers.csv", layers_csv(&rec).as_bytes())?;
    out.write("fourier.csv", fourier_csv(&rec).as_bytes())?;
    out.write("exploitation.csv", exploitation_csv(&rec).as_bytes())?;
    if svg {
        render_plots(&rec, &mut out)?;
    }
    let results = json!({
        "checkpoint": ck_path.display().to_string(),
        "images": rec.images,
        "partition_failures": rec.partition_failures,
        "layers": rec.layers.len(),
        "notices": notices,
    });
    out.finish("analyze", s, results)
}

struct MaskInput {
    name: String,
    image: Image,
    /// Ground-truth foreground per token, when known.
    foreground: Option<Vec<bool>>,
}

fn mask_inputs(s: &Settings, image_size: usize, patch: usize) -> Result<Vec<MaskInput>, CliError> {
    if let Some(dir) = s.path("mask.images_dir") {
        let report = load_images(&dir, image_size)?;
        for (p, e) in &report.skipped {
            warn!("skipped {}: {e}", p.display());
        }
        return Ok(report
            .images
            .into_iter()
            .map(|(p, image)| MaskInput {
                name: p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                image,
                foreground: None,
            })
            .collect());
    }
    let count: usize = s.get("mask.mask_images")?;
    let ds = open_dataset(s)?;
    if ds.manifest.params.image_size != image_size {
        return Err(CliError::usage("dataset image size differs from the checkpoint's"));
    }
    let val: Vec<_> = ds
        .manifest
        .split(Split::Val)
        .zip(ds.split(Split::Val))
        .take(count)
        .collect();
    val.into_iter()
        .map(|(rec, t)| {
            Ok(MaskInput {
                name: format!("val_{:05}", rec.id),
                image: t.image.clone(),
                foreground: Some(patch_labels(&t.region, image_size, patch)?),
            })
        })
        .collect()
}

fn partition_and_mask(
    emb: &Matrix<f64>,
    trainer: &Trainer,
    hint: f64,
    strategy: HintStrategy,
    seed: u64,
) -> selfmae::Result<(PartitionResult, Vec<f64>, MaskSpec)> {
    let cfg = trainer.config();
    let m = similarity_matrix(emb)?;
    let g = SimilarityGraph::from_similarity(&m, cfg.negative_weights)?;
    let p = ncut_bipartition(&g)?;
    let cluster = match cfg.target_cluster {
        TargetCluster::Background => p.background_tokens(),
        TargetCluster::Object | TargetCluster::Alternate => p.object_tokens(),
    };
    let mut ranking = relevance_scores(emb, cluster)?;
    if cfg.mask_order == MaskOrder::ClusterFirst {
        ranking = ranking.cluster_first(cluster);
    }
    let mask = build_informed_mask(&ranking, cfg.mask_ratio, hint, strategy, seed)?;
    Ok((p, ranking.scores, mask))
}

pub fn mask(s: &Settings) -> Result<(), CliError> {
    let ck_path = s.required_path("analyze.checkpoint")?;
    let scale: usize = s.get("mask.pgm_scale")?;
    let model = load_model(&ck_path)?;
    let cfg = model.config().clone();
    let train_cfg = s.train_config(&cfg)?;
    let hint = train_cfg.hint_schedule.ratio(0, 0, 1);
    let strategy = if hint == 0.0 {
        HintStrategy::None
    } else {
        train_cfg.hint_strategy
    };
    let seed = train_cfg.seed;
    let inputs = mask_inputs(s, cfg.image_size, cfg.patch_size)?;
    if inputs.is_empty() {
        return Err(Error::Dataset("no images to mask".into()).into());
    }
    let patches = patch_rows(inputs.iter().map(|i| &i.image), cfg.patch_size)?;
    let trainer = Trainer::new(model, train_cfg, patches.len())?;
    let embeddings = trainer.mask_embeddings(&patches)?;
    let grid = cfg.grid();

    let mut out = Outputs::new(out_dir(s)?)?;
    let mut per_image = Vec::new();
    let mut coverages = Vec::new();
    for (i, (input, emb)) in inputs.iter().zip(&embeddings).enumerate() {
        match partition_and_mask(emb, &trainer, hint, strategy, derive_seed(seed, &[i as u64])) {
            Ok((p, scores, mask)) => {
                let object = p.object_tokens().to_vec();
                let mut levels = vec![0u8; cfg.num_tokens()];
                for &t in &object {
                    levels[t] = 255;
                }
                out.write(
                    &format!("{}_bipartition.pgm", input.name),
                    &levels_to_pgm(&levels, grid, scale),
                )?;
                out.write(&format!("{}_mask.pgm", input.name), &mask_to_pgm(&mask, grid, scale)?)?;
                let coverage = input.foreground.as_ref().and_then(|fg| {
                    let total = fg.iter().filter(|&&f| f).count();
                    (total > 0).then(|| {
                        let hit = mask.masked().iter().filter(|&&t| fg[t]).count();
                        hit as f64 / total as f64
                    })
                });
                if let Some(c) = coverage {
                    coverages.push(c);
                }
                let detail = json!({
                    "image": input.name,
                    "object_tokens": object,
                    "background_tokens": p.background_tokens(),
                    "eigenvalue": p.eigenvalue,
                    "ncut_energy": p.energy,
                    "relevance": scores,
                    "mask": mask_to_json(&mask),
                    "foreground_coverage": coverage,
                });
                out.write(
                    &format!("{}.json", input.name),
                    serde_json::to_string_pretty(&detail)?.as_bytes(),
                )?;
                per_image.push(json!({"image": input.name, "status": "ok", "foreground_coverage": coverage}));
            }
            Err(e) => {
                warn!("{}: {e}", input.name);
                per_image.push(json!({"image": input.name, "status": "failed", "error": e.to_string()}));
            }
        }
    }
    let covered = coverages.iter().filter(|&&c| c >= 0.9).count();
    let results = json!({
        "checkpoint": ck_path.display().to_string(),
        "hint_ratio": hint,
        "images": per_image,
        "mean_foreground_coverage": (!coverages.is_empty()).then(|| coverages.iter().sum::<f64>() / coverages.len() as f64),
        "share_covering_90pct": (!coverages.is_empty()).then(|| covered as f64 / coverages.len() as f64),
    });
    out.finish("mask", s, results)
}

fn probe_one(path: &Path, ds: &Dataset, s: &Settings) -> Result<ProbeReport, CliError> {
    let model = load_model(path)?;
    let patch = model.config().patch_size;
    let limit: usize = s.get("probe.probe_train")?;
    let (train_x, train_y) = split_patches(ds, Split::Train, limit, patch)?;
    let (test_x, test_y) = split_patches(ds, Split::Val, 0, patch)?;
    info!(
        "probing {} ({} train, {} test)",
        path.display(),
        train_x.len(),
        test_x.len()
    );
    Ok(linear_probe(
        &model,
        (&train_x, &train_y),
        (&test_x, &test_y),
        &s.probe_config()?,
    )?)
}

pub fn probe(s: &Settings) -> Result<(), CliError> {
    let ck_path = s.required_path("analyze.checkpoint")?;
    let ds = open_dataset(s)?;
    let mut paths = vec![ck_path];
    if let Some(other) = s.path("probe.compare") {
        paths.push(other);
    }
    let mut reports = Vec::new();
    for p in &paths {
        reports.push((p.display().to_string(), probe_one(p, &ds, s)?));
    }
    let mut out = Outputs::new(out_dir(s)?)?;
    let mut table = String::from("checkpoint,accuracy,classes,train_size,test_size,iterations,final_loss\n");
    for (p, r) in &reports {
        table.push_str(&format!(
            "{p},{},{},{},{},{},{}\n",
            r.accuracy, r.classes, r.train_size, r.test_size, r.iterations, r.final_loss
        ));
    }
    out.write("probe.csv", table.as_bytes())?;
    let chance = reports.first().map(|(_, r)| 1.0 / r.classes as f64);
    let results = json!({
        "reports": reports.iter().map(|(p, r)| json!({"checkpoint": p, "report": r})).collect::<Vec<_>>(),
        "chance": chance,
        "accuracy_difference": (reports.len() == 2).then(|| reports[0].1.accuracy - reports[1].1.accuracy),
    });
    out.finish("probe", s, results)
}
