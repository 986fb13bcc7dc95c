//! In-memory datasets, on-disk layout and external image loading.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::texture::{generate_texture, GeneratorParams, TextureImage};
use crate::error::{Error, Result};
use crate::model::Image;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: usize,
    pub split: Split,
    pub class: usize,
    pub seed: u64,
    /// Path of the PNG relative to the dataset root.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub params: GeneratorParams,
    pub items: Vec<ItemRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ItemRecord> {
        self.items.iter().filter(move |i| i.split == split)
    }
}

/// Generated dataset held in memory, items in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<TextureImage>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&TextureImage> {
        self.manifest
            .items
            .iter()
            .zip(&self.images)
            .filter(|(r, _)| r.split == split)
            .map(|(_, t)| t)
            .collect()
    }
}

/// Per-item seed derived from the dataset seed.
pub fn item_seed(seed: u64, id: usize) -> u64 {
    let mut z = seed ^ (id as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates the train and validation splits. Classes are dealt round
/// robin within each split, then shuffled.
pub fn gen_texture_dataset(params: &GeneratorParams, seed: u64) -> Result<Dataset> {
    params.validate()?;
    let pairs = params.class_pairs();
    let classes = pairs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deal = |count: usize| {
        let mut c: Vec<usize> = (0..count).map(|i| i % classes).collect();
        c.shuffle(&mut rng);
        c
    };
    let train = deal(params.train);
    let val = deal(params.val);
    let items: Vec<ItemRecord> = train
        .into_iter()
        .map(|c| (Split::Train, c))
        .chain(val.into_iter().map(|c| (Split::Val, c)))
        .enumerate()
        .map(|(id, (split, class))| ItemRecord {
            id,
            split,
            class,
            seed: item_seed(seed, id),
            file: format!(
                "{}/{id:06}.png",
                match split {
                    Split::Train => "train",
                    Split::Val => "val",
                }
            ),
        })
        .collect();
    let images = items
        .par_iter()
        .map(|r| generate_texture(params, r.class, r.seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: DatasetManifest {
            seed,
            classes,
            class_names: pairs
                .iter()
                .map(|(f, b)| format!("{}-on-{}", f.name(), b.name()))
                .collect(),
            params: params.clone(),
            items,
        },
        images,
    })
}

/// Run-length encoding of a boolean map, starting with a background run.
pub fn rle_encode(region: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &r in region {
        if r == current {
            len += 1;
        } else {
            runs.push(len);
            current = r;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[usize]) -> Vec<bool> {
    let mut out = Vec::new();
    for (i, &n) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, n));
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    class: usize,
    seed: u64,
    width: usize,
    height: usize,
    /// Alternating background/foreground run lengths, row-major.
    region_rle: Vec<usize>,
}

fn to_rgb8(img: &Image) -> image::RgbImage {
    image::RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let px = |c| (img.at(y as usize, x as usize, c) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn from_rgb8(img: &image::RgbImage) -> Image {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().flat_map(|p| p.0.map(|v| v as f32 / 255.0)).collect();
    Image::new(h, w, 3, data).expect("consistent buffer")
}

/// Writes PNGs, JSON sidecars and the manifest under `root`.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for sub in ["train", "val"] {
        fs::create_dir_all(root.join(sub))?;
    }
    ds.manifest
        .items
        .par_iter()
        .zip(&ds.images)
        .try_for_each(|(rec, t)| -> Result<()> {
            let path = root.join(&rec.file);
            to_rgb8(&t.image).save(&path)?;
            let side = Sidecar {
                class: t.class,
                seed: t.seed,
                width: t.image.width,
                height: t.image.height,
                region_rle: rle_encode(&t.region),
            };
            fs::write(path.with_extension("json"), serde_json::to_vec(&side)?)?;
            Ok(())
        })?;
    fs::write(root.join(MANIFEST_FILE), serde_json::to_vec_pretty(&ds.manifest)?)?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_slice(
        &fs::read(root.join(MANIFEST_FILE))
            .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", root.join(MANIFEST_FILE).display())))?,
    )?;
    let images = manifest
        .items
        .par_iter()
        .map(|rec| -> Result<TextureImage> {
            let path = root.join(&rec.file);
            let img = image::open(&path)?.to_rgb8();
            let side: Sidecar = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
            let region = rle_decode(&side.region_rle);
            if region.len() != side.width * side.height || side.class != rec.class {
                return Err(Error::Dataset(format!("sidecar of {} inconsistent", rec.file)));
            }
            Ok(TextureImage {
                image: from_rgb8(&img),
                region,
                class: side.class,
                seed: side.seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, images })
}

/// Images read from a directory plus files that could not be decoded.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub images: Vec<(PathBuf, Image)>,
    pub skipped: Vec<(PathBuf, String)>,
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "ppm", "pgm", "pnm", "pbm"];

/// Loads PNG/PNM files in lexicographic order, resizing the shorter side to
/// `size` (bilinear) and centre-cropping. Unreadable files are skipped.
pub fn load_images(dir: &Path, size: usize) -> Result<LoadReport> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", dir.display())));
    }
    let mut report = LoadReport::default();
    for path in paths {
        match image::open(&path) {
            Ok(img) => {
                let rgb = img.to_rgb8();
                let (w, h) = (rgb.width() as f64, rgb.height() as f64);
                let scale = size as f64 / w.min(h);
                let nw = ((w * scale).round() as u32).max(size as u32);
                let nh = ((h * scale).round() as u32).max(size as u32);
                let resized = image::imageops::resize(&rgb, nw, nh, FilterType::Triangle);
                let (x0, y0) = ((nw - size as u32) / 2, (nh - size as u32) / 2);
                let crop = image::imageops::crop_imm(&resized, x0, y0, size as u32, size as u32).to_image();
                report.images.push((path, from_rgb8(&crop)));
            }
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                report.skipped.push((path, e.to_string()));
            }
        }
    }
    Ok(report)
}
