use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::numerics::{Matrix, Real};

/// Row-major `height x width x channels` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape("Image", height * width * channels, data.len()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

/// Raw patch rows plus their grid layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    /// `n x (P * P * channels)`, row `i` is patch `i` flattened row-major
    /// as `(py, px, channel)`.
    pub rows: Matrix<f32>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub positions: Vec<(usize, usize)>,
}

pub fn patchify(image: &Image, patch: usize) -> Result<Patches> {
    if patch == 0 || !image.height.is_multiple_of(patch) || !image.width.is_multiple_of(patch) {
        return Err(invalid(format!(
            "image {}x{} not divisible into {patch}x{patch} patches",
            image.height, image.width
        )));
    }
    if let Some(i) = image.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid(format!("pixel {i} = {} outside [0, 1]", image.data[i])));
    }
    let (gh, gw, c) = (image.height / patch, image.width / patch, image.channels);
    let dim = patch * patch * c;
    let mut rows = Matrix::zeros(gh * gw, dim);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = rows.row_mut(gy * gw + gx);
            let mut k = 0;
            for py in 0..patch {
                let src = ((gy * patch + py) * image.width + gx * patch) * c;
                row[k..k + patch * c].copy_from_slice(&image.data[src..src + patch * c]);
                k += patch * c;
            }
        }
    }
    let positions = (0..gh * gw).map(|i| (i / gw, i % gw)).collect();
    Ok(Patches {
        rows,
        grid_h: gh,
        grid_w: gw,
        positions,
    })
}

pub fn unpatchify(rows: &Matrix<f32>, grid_h: usize, grid_w: usize, patch: usize, channels: usize) -> Result<Image> {
    if rows.rows() != grid_h * grid_w || rows.cols() != patch * patch * channels {
        return Err(shape(
            "unpatchify",
            format!("{}x{}", grid_h * grid_w, patch * patch * channels),
            format!("{:?}", rows.shape()),
        ));
    }
    let (h, w) = (grid_h * patch, grid_w * patch);
    let mut data = vec![0.0; h * w * channels];
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let row = rows.row(gy * grid_w + gx);
            for py in 0..patch {
                let dst = ((gy * patch + py) * w + gx * patch) * channels;
                let src = py * patch * channels;
                data[dst..dst + patch * channels].copy_from_slice(&row[src..src + patch * channels]);
            }
        }
    }
    Image::new(h, w, channels, data)
}

/// Per-patch normalization of reconstruction targets:
/// `(x - mean) / (std + 1e-6)` along each row.
pub fn normalize_patches<T: Real>(rows: &Matrix<T>) -> Matrix<T> {
    let mut out = rows.clone();
    let c = T::lit(rows.cols() as f64);
    let eps = T::lit(1e-6);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().copied().sum::<T>() / c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / c;
        let denom = var.sqrt() + eps;
        for v in row.iter_mut() {
            *v = (*v - mean) / denom;
        }
    }
    out
}
