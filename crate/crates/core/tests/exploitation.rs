//! Set-level provenance against a token-level rollout oracle.

mod common;

use proptest::prelude::*;
use rand::Rng;

use common::{homogeneous_attention, random_attention, rng, token_rollout};
use selfmae::exploitation::{
    accumulate, layer_exploitation, overall_rates, trigger_check, LayerRates, ProvenanceState, TriggerHistory,
};
use selfmae::numerics::Matrix;

fn sets(is_masked: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let v = (0..is_masked.len()).filter(|&i| !is_masked[i]).collect();
    let m = (0..is_masked.len()).filter(|&i| is_masked[i]).collect();
    (v, m)
}

fn rollout(stack: &[Matrix<f64>], is_masked: &[bool]) -> ProvenanceState {
    let (v, m) = sets(is_masked);
    let ratio = m.len() as f64 / is_masked.len() as f64;
    stack.iter().fold(ProvenanceState::base(ratio), |s, a| {
        accumulate(&s, &LayerRates::from_attention(a, &v, &m).unwrap()).unwrap()
    })
}

fn random_split(n: usize, r: &mut impl Rng) -> Vec<bool> {
    let k = r.gen_range(1..n);
    let mut is_masked = vec![false; n];
    let mut placed = 0;
    while placed < k {
        let i = r.gen_range(0..n);
        if !is_masked[i] {
            is_masked[i] = true;
            placed += 1;
        }
    }
    is_masked
}

fn set_mean(p: &[(f64, f64)], idx: &[usize]) -> (f64, f64) {
    let s = idx.iter().fold((0.0, 0.0), |a, &i| (a.0 + p[i].0, a.1 + p[i].1));
    (s.0 / idx.len() as f64, s.1 / idx.len() as f64)
}

#[test]
fn set_rollout_equals_token_rollout_on_homogeneous_attention() {
    let mut r = rng(200);
    for case in 0..300 {
        let n = 2 + case % 30;
        let is_masked = random_split(n, &mut r);
        let layers = 1 + case % 4;
        let stack: Vec<Matrix<f64>> = (0..layers).map(|_| homogeneous_attention(&is_masked, &mut r)).collect();
        let state = rollout(&stack, &is_masked);
        let tokens = token_rollout(&stack, &is_masked);
        let (v, m) = sets(&is_masked);
        let (vv, mv) = set_mean(&tokens, &v);
        let (vm, mm) = set_mean(&tokens, &m);
        for (got, want) in [(state.vv, vv), (state.mv, mv), (state.vm, vm), (state.mm, mm)] {
            assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
        }
        let all: Vec<usize> = (0..n).collect();
        let (vo, mo) = set_mean(&tokens, &all);
        let (gvo, gmo) = overall_rates(&state, state.ratio);
        assert!((gvo - vo).abs() < 1e-9 && (gmo - mo).abs() < 1e-9);
    }
}

#[test]
fn accumulation_depends_on_layer_order() {
    let is_masked = [false, true, true, true];
    let mut r = rng(201);
    let a = homogeneous_attention(&is_masked, &mut r);
    let b = homogeneous_attention(&is_masked, &mut r);
    let ab = rollout(&[a.clone(), b.clone()], &is_masked);
    let ba = rollout(&[b.clone(), a.clone()], &is_masked);
    assert!((ab.vm - ba.vm).abs() > 1e-6);
    let tokens = token_rollout(&[a, b], &is_masked);
    let (vm, _) = set_mean(&tokens, &[1, 2, 3]);
    assert!((ab.vm - vm).abs() < 1e-9);
}

#[test]
fn conservation_over_random_stacks() {
    let mut r = rng(202);
    for case in 0..1000 {
        let n = 2 + case % 40;
        let is_masked = random_split(n, &mut r);
        let layers = 1 + case % 6;
        let stack: Vec<Matrix<f64>> = (0..layers).map(|_| random_attention(n, &mut r)).collect();
        let s = rollout(&stack, &is_masked);
        assert!((s.vv + s.mv - 1.0).abs() < 1e-6);
        assert!((s.vm + s.mm - 1.0).abs() < 1e-6);
        let (vo, mo) = overall_rates(&s, s.ratio);
        assert!((vo + mo - 1.0).abs() < 1e-9);
        for x in [s.vv, s.vm, s.mv, s.mm] {
            assert!((-1e-12..=1.0 + 1e-12).contains(&x));
        }
    }
}

#[test]
fn identity_attention_never_triggers_below_half_masking() {
    for (n, masked) in [(8, 1), (16, 4), (64, 16), (64, 31)] {
        let is_masked: Vec<bool> = (0..n).map(|i| i < masked).collect();
        let stack = vec![Matrix::identity(n); 3];
        let mut history = TriggerHistory::default();
        for epoch in 0..50 {
            let s = rollout(&stack, &is_masked);
            let rates = overall_rates(&s, s.ratio);
            assert!((rates.1 - s.ratio).abs() < 1e-12);
            assert_eq!(trigger_check(&mut history, epoch, rates).unwrap(), None);
        }
    }
}

#[test]
fn identity_attention_at_three_quarters_masking_triggers_immediately() {
    let is_masked: Vec<bool> = (0..64).map(|i| i < 48).collect();
    let s = rollout(&[Matrix::identity(64)], &is_masked);
    let mut history = TriggerHistory::default();
    assert_eq!(
        trigger_check(&mut history, 0, overall_rates(&s, 0.75)).unwrap(),
        Some(0)
    );
}

#[test]
fn trigger_series_examples() {
    let mut h = TriggerHistory::default();
    for (e, m) in [0.40, 0.48, 0.52, 0.45].into_iter().enumerate() {
        trigger_check(&mut h, e, (1.0 - m, m)).unwrap();
    }
    assert_eq!(h.trigger, Some(2));
    assert!(trigger_check(&mut h, 3, (0.5, 0.5)).is_err());
    let csv = h.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().nth(3).unwrap().ends_with(",1"));

    let mut never = TriggerHistory::default();
    for e in 0..10 {
        trigger_check(&mut never, e, (0.6, 0.4)).unwrap();
    }
    assert_eq!(never.trigger, None);
}

proptest! {
    #[test]
    fn layer_rate_matches_direct_sum(n in 2usize..24, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_attention(n, &mut r);
        let is_masked = random_split(n, &mut r);
        let (v, m) = sets(&is_masked);
        let direct = |src: &[usize], dst: &[usize]| {
            let mut total = 0.0;
            for &i in dst {
                for &j in src {
                    total += a[(i, j)];
                }
            }
            total / dst.len() as f64
        };
        let rates = LayerRates::from_attention(&a, &v, &m).unwrap();
        prop_assert!((rates.vm - direct(&v, &m)).abs() < 1e-12);
        prop_assert!((rates.mv - direct(&m, &v)).abs() < 1e-12);
        prop_assert!((rates.vv + rates.mv - 1.0).abs() < 1e-9);
        prop_assert!((layer_exploitation(&a, &m, &m).unwrap() - rates.mm).abs() < 1e-15);
    }
}
