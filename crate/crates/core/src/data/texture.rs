//! Procedural two-region texture images with exact region labels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Image;

/// Texture pattern, each with its own colour pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureFamily {
    Stripes,
    Checker,
    Blobs,
    Noise,
    Rings,
    Dots,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 6] = [
        TextureFamily::Stripes,
        TextureFamily::Checker,
        TextureFamily::Blobs,
        TextureFamily::Noise,
        TextureFamily::Rings,
        TextureFamily::Dots,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown texture family {s:?}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            TextureFamily::Stripes => "stripes",
            TextureFamily::Checker => "checker",
            TextureFamily::Blobs => "blobs",
            TextureFamily::Noise => "noise",
            TextureFamily::Rings => "rings",
            TextureFamily::Dots => "dots",
        }
    }

    /// Dark and light RGB endpoints.
    fn palette(self) -> ([f64; 3], [f64; 3]) {
        match self {
            TextureFamily::Stripes => ([0.35, 0.05, 0.05], [0.95, 0.45, 0.35]),
            TextureFamily::Checker => ([0.05, 0.30, 0.05], [0.45, 0.90, 0.40]),
            TextureFamily::Blobs => ([0.05, 0.08, 0.40], [0.45, 0.55, 0.98]),
            TextureFamily::Noise => ([0.40, 0.35, 0.02], [0.98, 0.92, 0.35]),
            TextureFamily::Rings => ([0.35, 0.04, 0.35], [0.95, 0.45, 0.90]),
            TextureFamily::Dots => ([0.02, 0.30, 0.33], [0.40, 0.95, 0.95]),
        }
    }
}

/// Randomized pattern of one family, evaluated to an intensity in [0, 1].
enum Pattern {
    Stripes {
        angle: f64,
        period: f64,
        phase: f64,
    },
    Checker {
        cell: f64,
        ox: f64,
        oy: f64,
    },
    Blobs {
        centers: Vec<(f64, f64, f64)>,
    },
    Noise {
        values: Vec<f64>,
    },
    Rings {
        cx: f64,
        cy: f64,
        period: f64,
    },
    Dots {
        spacing: f64,
        radius: f64,
        ox: f64,
        oy: f64,
    },
}

impl Pattern {
    fn sample(family: TextureFamily, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = size as f64;
        match family {
            TextureFamily::Stripes => Pattern::Stripes {
                angle: rng.gen_range(0.0..PI),
                period: rng.gen_range(3.0..7.0),
                phase: rng.gen_range(0.0..2.0 * PI),
            },
            TextureFamily::Checker => Pattern::Checker {
                cell: rng.gen_range(2.0..4.0),
                ox: rng.gen_range(0.0..8.0),
                oy: rng.gen_range(0.0..8.0),
            },
            TextureFamily::Blobs => Pattern::Blobs {
                centers: (0..6)
                    .map(|_| (rng.gen_range(0.0..s), rng.gen_range(0.0..s), rng.gen_range(2.0..5.0)))
                    .collect(),
            },
            TextureFamily::Noise => Pattern::Noise {
                values: (0..size * size).map(|_| rng.gen()).collect(),
            },
            TextureFamily::Rings => Pattern::Rings {
                cx: rng.gen_range(0.0..s),
                cy: rng.gen_range(0.0..s),
                period: rng.gen_range(3.0..6.0),
            },
            TextureFamily::Dots => Pattern::Dots {
                spacing: rng.gen_range(4.0..6.0),
                radius: rng.gen_range(1.0..1.8),
                ox: rng.gen_range(0.0..6.0),
                oy: rng.gen_range(0.0..6.0),
            },
        }
    }

    fn at(&self, y: usize, x: usize, size: usize) -> f64 {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        match self {
            Pattern::Stripes { angle, period, phase } => {
                let u = fx * angle.cos() + fy * angle.sin();
                0.5 + 0.5 * (2.0 * PI * u / period + phase).sin()
            }
            Pattern::Checker { cell, ox, oy } => {
                let a = ((fx + ox) / cell).floor() as i64 + ((fy + oy) / cell).floor() as i64;
                if a.rem_euclid(2) == 0 {
                    0.9
                } else {
                    0.1
                }
            }
            Pattern::Blobs { centers } => {
                let v: f64 = centers
                    .iter()
                    .map(|(cy, cx, r)| (-((fy - cy).powi(2) + (fx - cx).powi(2)) / (2.0 * r * r)).exp())
                    .sum();
                v.min(1.0)
            }
            Pattern::Noise { values } => values[y * size + x],
            Pattern::Rings { cx, cy, period } => {
                let r = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
                0.5 + 0.5 * (2.0 * PI * r / period).cos()
            }
            Pattern::Dots {
                spacing,
                radius,
                ox,
                oy,
            } => {
                let dx = (fx + ox).rem_euclid(*spacing) - spacing / 2.0;
                let dy = (fy + oy).rem_euclid(*spacing) - spacing / 2.0;
                if dx * dx + dy * dy <= radius * radius {
                    0.95
                } else {
                    0.1
                }
            }
        }
    }
}

/// Generator settings shared by every image of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub image_size: usize,
    /// Grid the region boundary is aligned to.
    pub patch_size: usize,
    pub families: Vec<TextureFamily>,
    pub min_foreground: f64,
    pub max_foreground: f64,
    pub train: usize,
    pub val: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            families: TextureFamily::ALL.to_vec(),
            min_foreground: 0.15,
            max_foreground: 0.60,
            train: 5000,
            val: 500,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.families.len() < 2 {
            return bad(format!("need at least 2 texture families, got {}", self.families.len()));
        }
        for (i, f) in self.families.iter().enumerate() {
            if self.families[..i].contains(f) {
                return bad(format!("texture family {} listed twice", f.name()));
            }
        }
        if self.patch_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
            || self.image_size / self.patch_size < 2
        {
            return bad(format!(
                "image size {} not a multiple (>= 2x) of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if !(0.0 < self.min_foreground && self.min_foreground <= self.max_foreground && self.max_foreground < 1.0) {
            return bad(format!(
                "foreground bounds [{}, {}] invalid",
                self.min_foreground, self.max_foreground
            ));
        }
        if self.train + self.val == 0 {
            return bad("dataset would be empty".into());
        }
        Ok(())
    }

    /// Ordered `(foreground, background)` family pairs; one class each.
    pub fn class_pairs(&self) -> Vec<(TextureFamily, TextureFamily)> {
        let mut out = Vec::new();
        for &f in &self.families {
            for &b in &self.families {
                if f != b {
                    out.push((f, b));
                }
            }
        }
        out
    }
}

/// One generated image with its pixel-level foreground map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureImage {
    pub image: Image,
    /// Row-major, `true` for foreground.
    pub region: Vec<bool>,
    pub class: usize,
    pub seed: u64,
}

impl TextureImage {
    pub fn foreground_fraction(&self) -> f64 {
        self.region.iter().filter(|&&r| r).count() as f64 / self.region.len() as f64
    }
}

/// Elliptical foreground sampled at patch centres, redrawn until its area
/// lies within the configured bounds.
fn sample_region(p: &GeneratorParams, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let s = p.image_size as f64;
    let size = p.image_size;
    let ps = p.patch_size;
    loop {
        let cy = rng.gen_range(0.25 * s..0.75 * s);
        let cx = rng.gen_range(0.25 * s..0.75 * s);
        let ry = rng.gen_range(0.15 * s..0.5 * s);
        let rx = rng.gen_range(0.15 * s..0.5 * s);
        let theta = rng.gen_range(0.0..PI);
        let (sn, cs) = theta.sin_cos();
        let region: Vec<bool> = (0..size * size)
            .map(|i| {
                let (y, x) = (i / size, i % size);
                let py = (y / ps * ps) as f64 + ps as f64 / 2.0 - cy;
                let px = (x / ps * ps) as f64 + ps as f64 / 2.0 - cx;
                let u = px * cs + py * sn;
                let v = -px * sn + py * cs;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            })
            .collect();
        let frac = region.iter().filter(|&&r| r).count() as f64 / region.len() as f64;
        if frac >= p.min_foreground && frac <= p.max_foreground {
            return region;
        }
    }
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Deterministic image for `seed`; pixels are stored at 8-bit precision so
/// they survive a PNG round trip unchanged.
pub fn generate_texture(p: &GeneratorParams, class: usize, seed: u64) -> Result<TextureImage> {
    p.validate()?;
    let pairs = p.class_pairs();
    let &(fg, bg) = pairs
        .get(class)
        .ok_or_else(|| Error::Dataset(format!("class {class} out of range {}", pairs.len())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let region = sample_region(p, &mut rng);
    let size = p.image_size;
    let fg_pattern = Pattern::sample(fg, size, &mut rng);
    let bg_pattern = Pattern::sample(bg, size, &mut rng);
    let mut image = Image::filled(size, size, 3, 0.0);
    for y in 0..size {
        for x in 0..size {
            let inside = region[y * size + x];
            let (family, pattern) = if inside { (fg, &fg_pattern) } else { (bg, &bg_pattern) };
            let t = pattern.at(y, x, size);
            let (lo, hi) = family.palette();
            for c in 0..3 {
                image.set(y, x, c, quantize(lo[c] + t * (hi[c] - lo[c])));
            }
        }
    }
    Ok(TextureImage {
        image,
        region,
        class,
        seed,
    })
}

/// Per-token foreground flag: strictly more than half of the patch's
/// pixels are foreground.
pub fn patch_labels(region: &[bool], image_size: usize, patch: usize) -> Result<Vec<bool>> {
    if region.len() != image_size * image_size || patch == 0 || !image_size.is_multiple_of(patch) {
        return Err(Error::Dataset(format!(
            "region of {} pixels does not match image size {image_size} / patch {patch}",
            region.len()
        )));
    }
    let g = image_size / patch;
    Ok((0..g * g)
        .map(|t| {
            let (ty, tx) = (t / g, t % g);
            let mut fg = 0;
            for y in ty * patch..(ty + 1) * patch {
                for x in tx * patch..(tx + 1) * patch {
                    fg += usize::from(region[y * image_size + x]);
                }
            }
            2 * fg > patch * patch
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let p = GeneratorParams::default();
        let a = generate_texture(&p, 3, 77).unwrap();
        assert_eq!(a, generate_texture(&p, 3, 77).unwrap());
        assert_ne!(a.image, generate_texture(&p, 3, 78).unwrap().image);
    }

    #[test]
    fn region_within_bounds_and_aligned() {
        let p = GeneratorParams::default();
        for seed in 0..50 {
            let t = generate_texture(&p, (seed % 30) as usize, seed).unwrap();
            let f = t.foreground_fraction();
            assert!((0.15..=0.60).contains(&f), "{f}");
            let labels = patch_labels(&t.region, 32, 4).unwrap();
            let from_labels = labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64;
            assert_eq!(from_labels, f);
        }
    }

    #[test]
    fn class_pairs_exclude_identical() {
        let p = GeneratorParams::default();
        let pairs = p.class_pairs();
        assert_eq!(pairs.len(), 30);
        assert!(pairs.iter().all(|(a, b)| a != b));
        assert!(generate_texture(&p, 30, 0).is_err());
    }

    #[test]
    fn invalid_families_rejected() {
        let mut p = GeneratorParams::default();
        p.families = vec![TextureFamily::Noise];
        assert!(p.validate().is_err());
        p.families = vec![TextureFamily::Noise, TextureFamily::Noise];
        assert!(p.validate().is_err());
        assert!(TextureFamily::parse("plaid").is_err());
    }

    #[test]
    fn label_examples() {
        assert!(patch_labels(&[true; 64], 8, 4).unwrap().iter().all(|&l| l));
        let mut half = vec![false; 16];
        half[..8].iter_mut().for_each(|v| *v = true);
        assert_eq!(patch_labels(&half, 4, 4).unwrap(), vec![false]);
        half[8] = true;
        assert_eq!(patch_labels(&half, 4, 4).unwrap(), vec![true]);
    }
}
