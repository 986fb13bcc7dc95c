//! Linear probing of frozen encoder features.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::model::{Image, Mae};
use crate::numerics::{softmax_rows, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub max_iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Stop once the loss improves by less than this between iterations.
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            lr: 0.05,
            weight_decay: 1e-4,
            tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub iterations: usize,
    pub final_loss: f64,
}

/// Mean-pooled final encoder embeddings of intact images.
pub fn encoder_features(model: &Mae<f32>, patches: &[Matrix<f32>]) -> Result<Matrix<f64>> {
    let n = model.config().num_tokens();
    let mut rows = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(64) {
        let refs: Vec<&Matrix<f32>> = chunk.iter().collect();
        for t in model.encode_intact(&refs, model.config().encoder_layers)? {
            let out = t.output.expect("complete encoder pass");
            let mut mean = vec![0.0; out.cols()];
            for r in 0..n {
                for (m, v) in mean.iter_mut().zip(out.row(r)) {
                    *m += v / n as f64;
                }
            }
            rows.push(mean);
        }
    }
    Matrix::from_rows(&rows)
}

pub fn image_features(model: &Mae<f32>, images: &[&Image]) -> Result<Matrix<f64>> {
    let p = model.config().patch_size;
    let patches = images
        .iter()
        .map(|img| crate::model::patchify(img, p).map(|x| x.rows))
        .collect::<Result<Vec<_>>>()?;
    encoder_features(model, &patches)
}

/// Softmax regression trained with full-batch Adam on standardized
/// features; reports top-1 accuracy on the test split.
pub fn linear_probe_features(
    train_x: &Matrix<f64>,
    train_y: &[usize],
    test_x: &Matrix<f64>,
    test_y: &[usize],
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() {
        return Err(shape("probe labels", train_x.rows(), train_y.len()));
    }
    if train_x.cols() != test_x.cols() {
        return Err(shape("probe feature width", train_x.cols(), test_x.cols()));
    }
    let classes = train_y.iter().chain(test_y).max().map_or(0, |&m| m + 1);
    let distinct = {
        let mut seen = vec![false; classes];
        train_y.iter().for_each(|&y| seen[y] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(invalid("linear probe needs at least two classes in the training split"));
    }
    let (n, d) = train_x.shape();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mean[c] += train_x[(r, c)] / n as f64;
        }
    }
    for r in 0..n {
        for c in 0..d {
            std[c] += (train_x[(r, c)] - mean[c]).powi(2) / n as f64;
        }
    }
    let std: Vec<f64> = std
        .iter()
        .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    let standardize = |x: &Matrix<f64>| {
        Matrix::from_fn(x.rows(), d + 1, |r, c| {
            if c == d {
                1.0
            } else {
                (x[(r, c)] - mean[c]) / std[c]
            }
        })
    };
    let xs = standardize(train_x);
    let ts = standardize(test_x);
    let mut w: Matrix<f64> = Matrix::zeros(d + 1, classes);
    let (mut m1, mut m2): (Matrix<f64>, Matrix<f64>) = (Matrix::zeros(d + 1, classes), Matrix::zeros(d + 1, classes));
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut prev = f64::INFINITY;
    let mut loss = prev;
    let mut iterations = 0;
    for it in 1..=config.max_iterations {
        iterations = it;
        let p = softmax_rows(&xs.matmul(&w)?)?;
        loss = (0..n).map(|r| -(p[(r, train_y[r])].max(1e-300)).ln()).sum::<f64>() / n as f64;
        let mut delta = p;
        for r in 0..n {
            delta[(r, train_y[r])] -= 1.0;
        }
        let mut grad = xs.t_matmul(&delta)?.scale(1.0 / n as f64);
        for r in 0..d {
            for c in 0..classes {
                grad[(r, c)] += config.weight_decay * w[(r, c)];
            }
        }
        let (bc1, bc2) = (1.0 - b1.powi(it as i32), 1.0 - b2.powi(it as i32));
        for i in 0..w.data().len() {
            let g = grad.data()[i];
            let a = b1 * m1.data()[i] + (1.0 - b1) * g;
            let b = b2 * m2.data()[i] + (1.0 - b2) * g * g;
            m1.data_mut()[i] = a;
            m2.data_mut()[i] = b;
            w.data_mut()[i] -= config.lr * (a / bc1) / ((b / bc2).sqrt() + eps);
        }
        if (prev - loss).abs() < config.tolerance {
            break;
        }
        prev = loss;
    }
    let scores = ts.matmul(&w)?;
    let correct = (0..ts.rows())
        .filter(|&r| {
            let row = scores.row(r);
            let best = (0..classes)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            best == test_y[r]
        })
        .count();
    Ok(ProbeReport {
        accuracy: correct as f64 / test_y.len().max(1) as f64,
        classes,
        train_size: n,
        test_size: test_y.len(),
        iterations,
        final_loss: loss,
    })
}

/// Linear probe on frozen encoder features of raw patch rows.
pub fn linear_probe(
    model: &Mae<f32>,
    train: (&[Matrix<f32>], &[usize]),
    test: (&[Matrix<f32>], &[usize]),
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    let tx = encoder_features(model, train.0)?;
    let vx = encoder_features(model, test.0)?;
    linear_probe_features(&tx, train.1, &vx, test.1, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_features_are_learned() {
        let x = Matrix::from_fn(90, 3, |r, c| {
            if c == r % 3 {
                5.0
            } else {
                0.1 * ((r * 7 + c) % 5) as f64
            }
        });
        let y: Vec<usize> = (0..90).map(|r| r % 3).collect();
        let rep = linear_probe_features(&x, &y, &x, &y, &ProbeConfig::default()).unwrap();
        assert!(rep.accuracy >= 0.99, "{rep:?}");
    }

    #[test]
    fn constant_features_give_majority() {
        let x = Matrix::filled(10, 2, 1.0);
        let y = vec![0, 0, 0, 0, 0, 0, 1, 1, 2, 2];
        let rep = linear_probe_features(&x, &y, &x, &y, &ProbeConfig::default()).unwrap();
        assert!((rep.accuracy - 0.6).abs() < 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        let x = Matrix::filled(4, 2, 1.0);
        assert!(linear_probe_features(&x, &[1, 1, 1, 1], &x, &[1, 1, 1, 1], &ProbeConfig::default()).is_err());
    }
}
