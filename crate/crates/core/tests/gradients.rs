//! Back propagation against finite differences, clipping, and skip rules.

use dlstm_core::losses::ce_loss;
use dlstm_core::model::{backward, forward, xavier_init, ClipConfig, Interval, ModelLayout, ModelParams};
use dlstm_core::train::{sgd_momentum_step, VelocityState};
use dlstm_core::{stream_rng, Matrix};
use proptest::prelude::*;
use rand::Rng;

const STEP: f64 = 1e-5;

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Loss linear in the logits with random weights, so `d_logits` is the
/// weight matrix itself.
fn linear_loss(model: &ModelParams, x: &Matrix, weights: &Matrix, clip: &ClipConfig) -> f64 {
    let cache = forward(model, x, clip).unwrap();
    cache
        .logits()
        .as_slice()
        .iter()
        .zip(weights.as_slice())
        .map(|(z, w)| z * w)
        .sum()
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs());
            if scale < 1e-7 {
                (a - n).abs()
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

fn central_differences(model: &ModelParams, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.values().len());
    for k in 0..model.values().len() {
        let mut plus = model.values().to_vec();
        let mut minus = plus.clone();
        plus[k] += STEP;
        minus[k] -= STEP;
        let fp = f(&model.with_values(plus).unwrap());
        let fm = f(&model.with_values(minus).unwrap());
        out.push((fp - fm) / (2.0 * STEP));
    }
    out
}

fn random_small_layout(rng: &mut impl Rng) -> ModelLayout {
    loop {
        let input = rng.random_range(1..=3);
        let layers: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(1..=2)).collect();
        let layout = ModelLayout::new(input, layers, rng.random_range(2..=3)).unwrap();
        if layout.param_count() <= 100 {
            return layout;
        }
    }
}

#[test]
fn bptt_matches_finite_differences_on_random_models() {
    let clip = ClipConfig::disabled();
    let mut rng = stream_rng(11, 0);
    for case in 0..60 {
        let layout = random_small_layout(&mut rng);
        let mut model = xavier_init(&layout, case);
        // non-zero biases so every gate path carries signal
        let vals: Vec<f64> = model.values().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        model = model.with_values(vals).unwrap();
        let t = rng.random_range(1..=5);
        let x = random_matrix(&mut rng, t, layout.input_dim(), 1.5);
        let w = random_matrix(&mut rng, t, layout.num_classes(), 1.0);

        let cache = forward(&model, &x, &clip).unwrap();
        let grads = backward(&model, &cache, &w, &clip).unwrap();
        assert!(!grads.is_skipped());
        let numeric = central_differences(&model, |m| linear_loss(m, &x, &w, &clip));
        let err = max_relative_error(grads.values(), &numeric);
        assert!(err < 1e-4, "case {case}: {} params, error {err}", layout.param_count());
    }
}

#[test]
fn cross_entropy_chain_matches_finite_differences() {
    let clip = ClipConfig::disabled();
    let mut rng = stream_rng(12, 0);
    for case in 0..20 {
        let layout = random_small_layout(&mut rng);
        let model = xavier_init(&layout, 100 + case);
        let t = rng.random_range(1..=5);
        let x = random_matrix(&mut rng, t, layout.input_dim(), 1.0);
        let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..layout.num_classes())).collect();
        let loss = |m: &ModelParams| {
            let cache = forward(m, &x, &clip).unwrap();
            ce_loss(cache.posteriors(), &labels).unwrap().0
        };
        let cache = forward(&model, &x, &clip).unwrap();
        let (_, d) = ce_loss(cache.posteriors(), &labels).unwrap();
        let grads = backward(&model, &cache, &d, &clip).unwrap();
        let err = max_relative_error(grads.values(), &central_differences(&model, loss));
        assert!(err < 1e-4, "case {case}: error {err}");
    }
}

#[test]
fn shape_mismatch_is_a_contract_error() {
    let layout = ModelLayout::new(2, vec![2], 3).unwrap();
    let model = xavier_init(&layout, 0);
    let x = Matrix::zeros(4, 2);
    let cache = forward(&model, &x, &ClipConfig::default()).unwrap();
    let err = backward(&model, &cache, &Matrix::zeros(3, 3), &ClipConfig::default()).unwrap_err();
    assert!(matches!(err, dlstm_core::Error::Contract(_)));
}

#[test]
fn overflowing_differential_skips_and_freezes_the_step() {
    let layout = ModelLayout::new(3, vec![4, 4], 3).unwrap();
    let model = xavier_init(&layout, 8);
    let mut rng = stream_rng(13, 0);
    let x = random_matrix(&mut rng, 6, 3, 1.0);
    let clip = ClipConfig::default();
    let cache = forward(&model, &x, &clip).unwrap();
    let mut d = random_matrix(&mut rng, 6, 3, 1.0);
    d.scale(1e7);
    let grads = backward(&model, &cache, &d, &clip).unwrap();
    assert!(grads.is_skipped());
    assert!(grads.values().iter().all(|&g| g == 0.0));
    let n = model.values().len();
    let velocity = VelocityState { values: vec![0.25; n] };
    let (after, v) = sgd_momentum_step(model.clone(), &grads, velocity.clone(), 0.1, 0.9).unwrap();
    assert_eq!(after, model);
    assert_eq!(v, velocity);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradients_stay_in_grad_range(seed in 0u64..10_000, scale in 1.0f64..1e3, t in 1usize..8) {
        let layout = ModelLayout::new(3, vec![5], 4).unwrap();
        let model = xavier_init(&layout, seed);
        let mut rng = stream_rng(seed, 1);
        let x = random_matrix(&mut rng, t, 3, 2.0);
        let mut d = random_matrix(&mut rng, t, 4, 1.0);
        d.scale(scale);
        let clip = ClipConfig::default();
        let cache = forward(&model, &x, &clip).unwrap();
        let g = backward(&model, &cache, &d, &clip).unwrap();
        prop_assert!(g.values().iter().all(|v| (-5.0..=5.0).contains(v)));
    }

    #[test]
    fn cells_stay_in_cell_range(seed in 0u64..10_000, weight_scale in 1.0f64..1e4, t in 1usize..40) {
        let layout = ModelLayout::new(2, vec![3, 3], 2).unwrap();
        let base = xavier_init(&layout, seed);
        let model = base.with_values(base.values().iter().map(|v| v * weight_scale).collect()).unwrap();
        let mut rng = stream_rng(seed, 2);
        let x = random_matrix(&mut rng, t, 2, 5.0);
        let cache = forward(&model, &x, &ClipConfig::default()).unwrap();
        for layer in cache.layers() {
            prop_assert!(layer.cells().iter().all(|c| (-50.0..=50.0).contains(c)));
        }
        for row in cache.posteriors().iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn skipped_means_all_zero(seed in 0u64..10_000, bound in 1e-6f64..1e-2) {
        let layout = ModelLayout::new(2, vec![3], 2).unwrap();
        let model = xavier_init(&layout, seed);
        let mut rng = stream_rng(seed, 3);
        let x = random_matrix(&mut rng, 4, 2, 1.0);
        let d = random_matrix(&mut rng, 4, 2, 1.0);
        let clip = ClipConfig { diff_range: Interval::symmetric(bound), ..ClipConfig::default() };
        let cache = forward(&model, &x, &clip).unwrap();
        let g = backward(&model, &cache, &d, &clip).unwrap();
        if g.is_skipped() {
            prop_assert!(g.values().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn deepen_keeps_lower_hidden_sequence() {
    let layout = ModelLayout::new(3, vec![4, 4], 2).unwrap();
    let teacher = xavier_init(&layout, 21);
    let student = dlstm_core::model::deepen(&teacher, 22);
    let mut rng = stream_rng(14, 0);
    let x = random_matrix(&mut rng, 9, 3, 1.0);
    let clip = ClipConfig::default();
    let a = forward(&teacher, &x, &clip).unwrap();
    let b = forward(&student, &x, &clip).unwrap();
    for l in 0..2 {
        assert_eq!(a.layers()[l].hidden(), b.layers()[l].hidden());
    }
    assert_eq!(b.layers().len(), 3);
}
