//! Gradient, eigensolver and DFT checks against independent oracles.

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfmae::model::{Mae, MaskSpec, ModelConfig};
use selfmae::numerics::{
    dft2, finite_diff_gradcheck, generalized_eigen_pair, softmax_rows, symmetric_eigen, Matrix, ParamSet, Tape, Var,
};

const STEP: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Contracts `out` with a fixed random matrix so every entry matters.
fn contract(tape: &mut Tape<f64>, out: Var, seed: u64) -> selfmae::Result<Var> {
    let (r, c) = tape.value(out).shape();
    let w = random(r, c, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn params(shapes: &[(&str, usize, usize)], seed: u64) -> ParamSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    for &(name, r, c) in shapes {
        p.add(name, random(r, c, &mut rng));
    }
    p
}

fn check<F>(p: &ParamSet<f64>, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &ParamSet<f64>) -> selfmae::Result<Var>,
{
    let err = finite_diff_gradcheck(p, STEP, f).unwrap();
    assert!(err <= GRAD_TOL, "max relative error {err:e}");
    err
}

fn vars(tape: &mut Tape<f64>, p: &ParamSet<f64>) -> Vec<Var> {
    p.ids().map(|id| tape.param(p, id)).collect()
}

#[test]
fn gradcheck_linear_and_matmul() {
    let p = params(&[("x", 5, 4), ("w", 4, 3), ("b", 1, 3)], 1);
    check(&p, |t, p| {
        let v = vars(t, p);
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        contract(t, y, 11)
    });
    check(&p, |t, p| {
        let v = vars(t, p);
        let y = t.matmul(v[0], v[1])?;
        contract(t, y, 12)
    });
}

#[test]
fn gradcheck_elementwise() {
    let p = params(&[("a", 4, 3), ("b", 4, 3), ("row", 2, 3)], 2);
    check(&p, |t, p| {
        let v = vars(t, p);
        let s = t.add(v[0], v[1])?;
        let m = t.mul(s, v[1])?;
        let m = t.scale(m, -1.7);
        let y = t.add_tiled(m, v[2])?;
        contract(t, y, 13)
    });
    check(&p, |t, p| {
        let v = vars(t, p);
        let y = t.gelu(v[0]);
        contract(t, y, 14)
    });
}

#[test]
fn gradcheck_layer_norm() {
    let p = params(&[("x", 6, 8), ("g", 1, 8), ("b", 1, 8)], 3);
    check(&p, |t, p| {
        let v = vars(t, p);
        let y = t.layer_norm(v[0], v[1], v[2])?;
        contract(t, y, 15)
    });
}

#[test]
fn gradcheck_softmax() {
    let p = params(&[("x", 4, 6)], 4);
    check(&p, |t, p| {
        let v = vars(t, p);
        let y = t.softmax_rows(v[0])?;
        contract(t, y, 16)
    });
}

#[test]
fn gradcheck_segmented_attention() {
    // two images of 3 and 4 tokens, 2 heads of width 3
    let p = params(&[("qkv", 7, 18)], 5);
    check(&p, |t, p| {
        let v = vars(t, p);
        let y = t.attention(v[0], 2, &[(0, 3), (3, 4)])?;
        contract(t, y, 17)
    });
}

#[test]
fn gradcheck_gather_assemble_mse() {
    let p = params(&[("rows", 5, 4), ("token", 1, 4)], 6);
    check(&p, |t, p| {
        let v = vars(t, p);
        let g = t.gather_rows(v[0], &[4, 0, 2])?;
        let layout = [Some(1), None, Some(0), None, Some(2), None];
        let a = t.assemble(g, v[1], &layout)?;
        let target = random(6, 4, &mut ChaCha8Rng::seed_from_u64(18));
        t.masked_mse(a, target, &[1, 3, 4])
    });
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 8,
        decoder_dim: 8,
        encoder_layers: 2,
        decoder_layers: 1,
        heads: 2,
        mlp_ratio: 2,
        norm_pix_loss: true,
        seed: 3,
    }
}

#[test]
fn gradcheck_full_model() {
    let cfg = tiny_config();
    let base = Mae::<f64>::new(cfg.clone()).unwrap();
    // perturb biases and norms away from their symmetric initial values
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p = base.params().clone();
    for m in p.values_mut() {
        for x in m.data_mut() {
            *x += rng.gen_range(-0.2..0.2);
        }
    }
    let patches: Vec<Matrix<f64>> = (0..2).map(|_| random(4, 48, &mut rng)).collect();
    let masks = [
        MaskSpec::new(4, vec![0, 2], vec![]).unwrap(),
        MaskSpec::new(4, vec![1, 2, 3], vec![]).unwrap(),
    ];
    let err = check(&p, |t, p| {
        let model = Mae::from_params(cfg.clone(), p.clone())?;
        let refs: Vec<&Matrix<f64>> = patches.iter().collect();
        let mrefs: Vec<&MaskSpec> = masks.iter().collect();
        Ok(model.forward_loss(t, &refs, &mrefs)?.0)
    });
    assert!(err.is_finite());
}

fn to_nalgebra(m: &Matrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |r, c| m[(r, c)])
}

fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let a = random(n, n, rng);
    Matrix::from_fn(n, n, |r, c| a[(r, c)] + a[(c, r)])
}

#[test]
fn symmetric_eigen_matches_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for n in [1, 2, 3, 5, 8, 13, 30, 64] {
        let a = random_symmetric(n, &mut rng);
        let ours = symmetric_eigen(&a).unwrap();
        let mut theirs: Vec<f64> = to_nalgebra(&a).symmetric_eigen().eigenvalues.iter().copied().collect();
        theirs.sort_by(f64::total_cmp);
        for (x, y) in ours.values.iter().zip(&theirs) {
            assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()), "n={n}: {x} vs {y}");
        }
        for k in 0..n {
            let v = ours.vector(k);
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
            for r in 0..n {
                let av: f64 = (0..n).map(|c| a[(r, c)] * v[c]).sum();
                assert!((av - ours.values[k] * v[r]).abs() < 1e-6, "residual n={n} k={k}");
            }
        }
    }
}

#[test]
fn generalized_pair_matches_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for n in [2, 3, 6, 10, 25, 64] {
        let w = Matrix::from_fn(n, n, |_, _| rng.gen_range(0.0..1.0));
        let w = Matrix::from_fn(n, n, |r, c| if r == c { 0.0 } else { w[(r, c)] + w[(c, r)] });
        let d: Vec<f64> = (0..n).map(|r| w.row(r).iter().sum::<f64>() + 1e-8).collect();
        let l = Matrix::from_fn(n, n, |r, c| if r == c { d[r] - 1e-8 } else { -w[(r, c)] });
        let pair = generalized_eigen_pair(&l, &d).unwrap();

        // symmetric reduction D^{-1/2} L D^{-1/2}
        let s = DMatrix::from_fn(n, n, |r, c| l[(r, c)] / (d[r] * d[c]).sqrt());
        let mut vals: Vec<f64> = s.symmetric_eigen().eigenvalues.iter().copied().collect();
        vals.sort_by(f64::total_cmp);
        for k in 0..2 {
            assert!((pair[k].value - vals[k]).abs() < 1e-9, "n={n} k={k}");
            let y = &pair[k].vector;
            let dnorm: f64 = y.iter().zip(&d).map(|(a, b)| a * a * b).sum();
            assert!((dnorm - 1.0).abs() < 1e-9);
            for r in 0..n {
                let ly: f64 = (0..n).map(|c| l[(r, c)] * y[c]).sum();
                assert!((ly - pair[k].value * d[r] * y[r]).abs() < 1e-6);
            }
        }
    }
}

fn direct_dft(values: &[f64], h: usize, w: usize, u: usize, v: usize) -> (f64, f64) {
    let mut acc = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let a = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
            acc.0 += values[y * w + x] * a.cos();
            acc.1 += values[y * w + x] * a.sin();
        }
    }
    acc
}

#[test]
fn dft_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (h, w) in [(2, 2), (3, 5), (8, 8), (7, 4)] {
        let values: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (re, im) = dft2(&values, h, w);
        for u in 0..h {
            for v in 0..w {
                let (a, b) = direct_dft(&values, h, w, u, v);
                assert!((re[(u, v)] - a).abs() < 1e-9 && (im[(u, v)] - b).abs() < 1e-9);
            }
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in any::<u64>(),
        scale in 0.1f64..200.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(rows, cols, &mut rng).scale(scale);
        let s = softmax_rows(&x).unwrap();
        for r in 0..rows {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(s.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn symmetric_eigen_reconstructs(n in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_symmetric(n, &mut rng);
        let e = symmetric_eigen(&a).unwrap();
        prop_assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        let v = &e.vectors;
        let rec = Matrix::from_fn(n, n, |r, c| (0..n).map(|k| v[(r, k)] * e.values[k] * v[(c, k)]).sum());
        prop_assert!(rec.max_abs_diff(&a) < 1e-6);
    }
}
