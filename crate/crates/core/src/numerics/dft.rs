//! Two-dimensional discrete Fourier transform for small feature grids.

use std::f64::consts::PI;

use super::Matrix;
use crate::error::{invalid, Result};

/// A real `height x width x channels` tensor, stored row-major with the
/// channel index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(crate::error::shape(
                "FeatureGrid",
                height * width * channels,
                data.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Token embeddings (`h*w` rows, one per grid cell in row-major order)
    /// as a grid.
    pub fn from_tokens<T: super::Real>(tokens: &Matrix<T>, height: usize, width: usize) -> Result<Self> {
        if tokens.rows() != height * width {
            return Err(crate::error::shape(
                "FeatureGrid::from_tokens",
                height * width,
                tokens.rows(),
            ));
        }
        let data = tokens.data().iter().map(|v| v.as_f64()).collect();
        Self::new(height, width, tokens.cols(), data)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.height * self.width)
            .map(|i| self.data[i * self.channels + c])
            .collect()
    }
}

/// Complex spectrum of one real channel, as `(re, im)` matrices.
pub fn dft2(values: &[f64], height: usize, width: usize) -> (Matrix<f64>, Matrix<f64>) {
    let tw = |n: usize| -> Vec<(f64, f64)> {
        (0..n)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .collect()
    };
    let tw_w = tw(width);
    let tw_h = tw(height);

    // rows
    let mut re = vec![0.0; height * width];
    let mut im = vec![0.0; height * width];
    for y in 0..height {
        let row = &values[y * width..(y + 1) * width];
        for v in 0..width {
            let (mut sr, mut si) = (0.0, 0.0);
            for (x, &val) in row.iter().enumerate() {
                let (c, s) = tw_w[(v * x) % width];
                sr += val * c;
                si += val * s;
            }
            re[y * width + v] = sr;
            im[y * width + v] = si;
        }
    }
    // columns
    let mut out_re = Matrix::zeros(height, width);
    let mut out_im = Matrix::zeros(height, width);
    for v in 0..width {
        for u in 0..height {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..height {
                let (c, s) = tw_h[(u * y) % height];
                let (a, b) = (re[y * width + v], im[y * width + v]);
                sr += a * c - b * s;
                si += a * s + b * c;
            }
            out_re[(u, v)] = sr;
            out_im[(u, v)] = si;
        }
    }
    (out_re, out_im)
}

/// Channel-averaged amplitude spectrum: the mean over channels of
/// `|F_c(u, v)|`.
pub fn dft2_amplitude(grid: &FeatureGrid) -> Result<Matrix<f64>> {
    if grid.data.is_empty() || grid.channels == 0 {
        return Err(invalid("dft2_amplitude: empty grid"));
    }
    if grid.height < 2 || grid.width < 2 {
        return Err(invalid(format!(
            "dft2_amplitude: grid must be at least 2x2, got {}x{}",
            grid.height, grid.width
        )));
    }
    let mut amp = Matrix::zeros(grid.height, grid.width);
    for c in 0..grid.channels {
        let (re, im) = dft2(&grid.channel(c), grid.height, grid.width);
        for (a, (r, i)) in amp.data_mut().iter_mut().zip(re.data().iter().zip(im.data())) {
            *a += r.hypot(*i);
        }
    }
    let inv = 1.0 / grid.channels as f64;
    Ok(amp.scale(inv))
}
