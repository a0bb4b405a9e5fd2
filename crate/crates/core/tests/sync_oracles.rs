//! BMUF, MA, and EMA against hand recursions and closed forms.

use dlstm_core::stream_rng;
use dlstm_core::sync::{bmuf_step, ema_update, ma_update, model_average, BmufState, EmaState, MaState};
use proptest::prelude::*;
use rand::Rng;

fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-10.0..10.0)).collect()
}

#[test]
fn bmuf_without_momentum_is_model_averaging() {
    let mut rng = stream_rng(41, 0);
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let len = rng.random_range(0..20);
        let workers: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut rng, len)).collect();
        let slices: Vec<&[f64]> = workers.iter().map(Vec::as_slice).collect();
        let bar = model_average(&slices).unwrap();
        let mut state = BmufState::new(random_vec(&mut rng, len), 0.0, 1.0).unwrap();
        state.delta = random_vec(&mut rng, len);
        let next = bmuf_step(state, &bar).unwrap();
        assert_eq!(
            next.theta_g.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            bar.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn bmuf_scalar_trace() {
    let s0 = BmufState::new(vec![0.0], 0.9, 1.0).unwrap();
    let s1 = bmuf_step(s0, &[1.0]).unwrap();
    assert_eq!(s1.theta_g, vec![1.0]);
    let s2 = bmuf_step(s1, &[2.0]).unwrap();
    assert_eq!(s2.theta_g, vec![2.9]);
}

#[test]
fn bmuf_fixed_point_and_length_check() {
    let s = BmufState::new(vec![1.5, -2.0], 0.9, 1.0).unwrap();
    let next = bmuf_step(s.clone(), &[1.5, -2.0]).unwrap();
    assert_eq!(next, s);
    assert!(bmuf_step(s, &[1.0]).is_err());
    assert!(BmufState::new(vec![0.0], 1.0, 1.0).is_err());
    assert!(BmufState::new(vec![0.0], 0.5, 0.0).is_err());
}

/// Closed-form EMA: alpha^t * theta_0 + (1 - alpha) * sum alpha^(t - tau) theta_tau.
fn unrolled(theta0: &[f64], seq: &[Vec<f64>], alpha: f64) -> Vec<f64> {
    let t = seq.len() as i32;
    (0..theta0.len())
        .map(|k| {
            let mut v = alpha.powi(t) * theta0[k];
            for (tau, x) in seq.iter().enumerate() {
                v += (1.0 - alpha) * alpha.powi(t - 1 - tau as i32) * x[k];
            }
            v
        })
        .collect()
}

#[test]
fn ema_matches_closed_form() {
    let mut rng = stream_rng(42, 0);
    for case in 0..50 {
        let alpha = if case == 0 { 0.99 } else { rng.random_range(0.0..1.0) };
        let len = rng.random_range(1..10);
        let theta0 = random_vec(&mut rng, len);
        let seq: Vec<Vec<f64>> = (0..100).map(|_| random_vec(&mut rng, len)).collect();
        let mut state = EmaState::new(theta0.clone(), alpha).unwrap();
        for x in &seq {
            state = ema_update(state, x).unwrap();
        }
        for (a, b) in state.export().iter().zip(unrolled(&theta0, &seq, alpha)) {
            assert!((a - b).abs() < 1e-12, "alpha {alpha}: {a} vs {b}");
        }
    }
}

#[test]
fn ema_degenerate_rates() {
    let s = EmaState::new(vec![1.0, 2.0], 0.0).unwrap();
    assert_eq!(ema_update(s, &[5.0, 6.0]).unwrap().export(), vec![5.0, 6.0]);
    let s = EmaState::new(vec![1.0, 2.0], 1.0).unwrap();
    assert_eq!(ema_update(s, &[5.0, 6.0]).unwrap().export(), vec![1.0, 2.0]);
    assert!(EmaState::new(vec![0.0], 1.5).is_err());
}

#[test]
fn ema_weights_decay_strictly_and_stay_positive() {
    for alpha in [0.1, 0.5, 0.9, 0.99] {
        let t = 60;
        // weight of theta_g at age a (a = 0 newest) is (1 - alpha) * alpha^a
        let weights: Vec<f64> = (0..t).map(|a| (1.0 - alpha) * f64::powi(alpha, a)).collect();
        assert!(weights.windows(2).all(|w| w[0] > w[1]));
        assert!(weights.iter().all(|&w| w > 0.0));
        // the same weights recovered by feeding unit impulses through ema_update
        for (age, &w) in weights.iter().enumerate().take(10) {
            let mut s = EmaState::new(vec![0.0], alpha).unwrap();
            for step in 0..t {
                let x = if step == t - 1 - age as i32 { 1.0 } else { 0.0 };
                s = ema_update(s, &[x]).unwrap();
            }
            assert!((s.export()[0] - w).abs() < 1e-15);
        }
    }
}

#[test]
fn ma_examples() {
    let s = ma_update(MaState::default(), &[2.0]).unwrap();
    assert_eq!((s.mean.clone(), s.count), (vec![2.0], 1));
    let s = ma_update(s, &[4.0]).unwrap();
    assert_eq!(s.mean, vec![3.0]);
    assert!(ma_update(s, &[1.0, 2.0]).is_err());
}

#[test]
fn ma_matches_batch_mean() {
    let mut rng = stream_rng(43, 0);
    let xs: Vec<Vec<f64>> = (0..10).map(|_| random_vec(&mut rng, 7)).collect();
    let mut s = MaState::default();
    for x in &xs {
        s = ma_update(s, x).unwrap();
    }
    for k in 0..7 {
        let mean = xs.iter().map(|x| x[k]).sum::<f64>() / 10.0;
        assert!((s.mean[k] - mean).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn ma_permutation_changes_little(seed in 0u64..5000, n in 2usize..30) {
        let mut rng = stream_rng(seed, 0);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut rng, 4)).collect();
        let run = |order: &[usize]| {
            order.iter().fold(MaState::default(), |s, &i| ma_update(s, &xs[i]).unwrap()).mean
        };
        let forward: Vec<usize> = (0..n).collect();
        let reversed: Vec<usize> = (0..n).rev().collect();
        for (a, b) in run(&forward).iter().zip(run(&reversed)) {
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1.0));
        }
    }

    #[test]
    fn average_is_serial_mean(seed in 0u64..5000, n in 1usize..9, len in 0usize..16) {
        let mut rng = stream_rng(seed, 1);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut rng, len)).collect();
        let slices: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let got = model_average(&slices).unwrap();
        for k in 0..len {
            let mut sum = 0.0;
            for x in &xs {
                sum += x[k];
            }
            prop_assert_eq!(got[k].to_bits(), (sum / n as f64).to_bits());
        }
    }
}
