//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on
//! any failure. `ACCEPTANCE_ONLY=7,8` runs a subset.

use std::cell::Cell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::thread;
use std::time::{Duration, Instant};

use dlstm_core::allreduce::{memory_mesh, mesh_allreduce, partition, MeshEndpoint};
use dlstm_core::data::make_lattices;
use dlstm_core::losses::ce_loss;
use dlstm_core::model::{backward, forward, xavier_init, Interval};
use dlstm_core::smbr::{smbr_loss_and_grad, Lattice, LatticeArc, SmbrConfig};
use dlstm_core::sync::{bmuf_step, ema_update, model_average, BmufState, EmaState};
use dlstm_core::train::{
    distill, evaluate, layerwise_train, partition_indices, sgd_momentum_step, train_parallel,
    transfer_smbr, LayerwiseConfig, TransferConfig, VelocityState,
};
use dlstm_core::{
    stream_rng, ClipConfig, Dataset, Matrix, ModelLayout, ModelParams, SyncStrategy,
    SyntheticTask, TrainConfig, UtteranceSource,
};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::index::sample;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(PropConfig {
        cases,
        failure_persistence: None,
        ..PropConfig::default()
    })
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

// ---------------------------------------------------------------- 1

/// Five-point stencil step; truncation error is O(h^4).
const FD_STEP: f64 = 1e-3;
const FD_MAX_REL: f64 = 1e-4;
/// Below this magnitude the comparison switches to absolute error.
const FD_ABS_FLOOR: f64 = 1e-7;

fn c1_gradients() -> Outcome {
    let clip = ClipConfig::disabled();
    let mut rng = stream_rng(1001, 0);
    let mut worst = 0.0f64;
    let models = 60;
    for case in 0..models {
        let layout = loop {
            let layers: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=3)).collect();
            let l = ModelLayout::new(rng.random_range(1..=3), layers, rng.random_range(2..=4)).unwrap();
            if l.param_count() <= 150 {
                break l;
            }
        };
        let base = xavier_init(&layout, case);
        let model = base
            .with_values(base.values().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect())
            .unwrap();
        let t = rng.random_range(1..=6);
        let x = random_matrix(&mut rng, t, layout.input_dim(), 1.5);
        let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..layout.num_classes())).collect();
        let loss = |m: &ModelParams| ce_loss(forward(m, &x, &clip).unwrap().posteriors(), &labels).unwrap().0;
        let cache = forward(&model, &x, &clip).unwrap();
        let (_, d) = ce_loss(cache.posteriors(), &labels).unwrap();
        let g = backward(&model, &cache, &d, &clip).unwrap();
        ensure(!g.is_skipped(), || format!("model {case} skipped with clipping disabled"))?;
        for k in 0..model.values().len() {
            let at = |offset: f64| {
                let mut v = model.values().to_vec();
                v[k] += offset;
                loss(&model.with_values(v).unwrap())
            };
            let h = FD_STEP;
            let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            let a = g.values()[k];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < FD_ABS_FLOOR { (a - numeric).abs() } else { (a - numeric).abs() / scale };
            worst = worst.max(err);
        }
    }
    ensure(worst < FD_MAX_REL, || format!("max relative error {worst:.3e} >= {FD_MAX_REL:e}"))?;
    Ok(format!("{models} models, max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 2

fn c2_clipping() -> Outcome {
    let clip = ClipConfig::default();
    ensure(clip.grad_range == Interval::symmetric(5.0), || "grad_range default is not [-5, 5]".into())?;
    ensure(clip.cell_range == Interval::symmetric(50.0), || "cell_range default is not [-50, 50]".into())?;
    let saw_grad_clip = Cell::new(false);
    let saw_cell_clip = Cell::new(false);

    runner(256)
        .run(&(0u64..100_000, 1.0f64..1e4, 1usize..10), |(seed, scale, t)| {
            let layout = ModelLayout::new(3, vec![5, 4], 4).unwrap();
            let model = xavier_init(&layout, seed);
            let mut rng = stream_rng(seed, 1);
            let x = random_matrix(&mut rng, t, 3, 2.0);
            let mut d = random_matrix(&mut rng, t, 4, 1.0);
            d.scale(scale);
            let cache = forward(&model, &x, &clip).unwrap();
            let g = backward(&model, &cache, &d, &clip).unwrap();
            prop_assert!(g.values().iter().all(|v| (-5.0..=5.0).contains(v)));
            if g.values().iter().any(|v| v.abs() == 5.0) {
                saw_grad_clip.set(true);
            }
            Ok(())
        })
        .map_err(|e| format!("gradient range: {e}"))?;

    runner(256)
        .run(&(0u64..100_000, 1.0f64..1e4, 1usize..120), |(seed, w, t)| {
            let layout = ModelLayout::new(2, vec![3, 3], 2).unwrap();
            let base = xavier_init(&layout, seed);
            // positive recurrence and biases drive cells toward the bound
            let model = base.with_values(base.values().iter().map(|v| v.abs() * w + 1.0).collect()).unwrap();
            let mut rng = stream_rng(seed, 2);
            // a cell moves by at most 1 per step, so reaching the bound takes 50+ frames
            let mut x = random_matrix(&mut rng, t, 2, 5.0);
            x.as_mut_slice().iter_mut().for_each(|v| *v = v.abs());
            let cache = forward(&model, &x, &clip).unwrap();
            for layer in cache.layers() {
                prop_assert!(layer.cells().iter().all(|c| (-50.0..=50.0).contains(c)));
                if layer.cells().iter().any(|c| c.abs() == 50.0) {
                    saw_cell_clip.set(true);
                }
            }
            Ok(())
        })
        .map_err(|e| format!("cell range: {e}"))?;

    let skips = Cell::new(0u32);
    runner(128)
        .run(&(0u64..100_000, 1e6f64..1e9), |(seed, scale)| {
            let layout = ModelLayout::new(3, vec![4, 4], 3).unwrap();
            let model = xavier_init(&layout, seed);
            let mut rng = stream_rng(seed, 3);
            let x = random_matrix(&mut rng, 6, 3, 1.0);
            let mut d = random_matrix(&mut rng, 6, 3, 1.0);
            d.scale(scale);
            let cache = forward(&model, &x, &clip).unwrap();
            let g = backward(&model, &cache, &d, &clip).unwrap();
            prop_assert!(g.is_skipped());
            prop_assert!(g.values().iter().all(|&v| v == 0.0));
            let velocity = VelocityState { values: vec![0.5; model.values().len()] };
            let (after, v) = sgd_momentum_step(model.clone(), &g, velocity.clone(), 0.1, 0.9).unwrap();
            prop_assert_eq!(after, model);
            prop_assert_eq!(v, velocity);
            skips.set(skips.get() + 1);
            Ok(())
        })
        .map_err(|e| format!("overflow skip: {e}"))?;

    ensure(saw_grad_clip.get(), || "no case exercised gradient clipping".into())?;
    ensure(saw_cell_clip.get(), || "no case exercised cell clamping".into())?;
    Ok(format!("grad and cell bounds held on 256 cases each (both bounds reached), {} overflow cases skipped with zero step", skips.get()))
}

// ---------------------------------------------------------------- 3

fn c3_bmuf() -> Outcome {
    let mut rng = stream_rng(1003, 0);
    for case in 0..1000 {
        let n = rng.random_range(1..=8);
        let len = rng.random_range(1..32);
        let workers: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..len).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let slices: Vec<&[f64]> = workers.iter().map(Vec::as_slice).collect();
        let bar = model_average(&slices).unwrap();
        let mut state = BmufState::new((0..len).map(|_| rng.random_range(-10.0..10.0)).collect(), 0.0, 1.0).unwrap();
        state.delta = (0..len).map(|_| rng.random_range(-10.0..10.0)).collect();
        let next = bmuf_step(state, &bar).unwrap();
        ensure(bits(&next.theta_g) == bits(&bar), || format!("case {case}: BMUF(0,1) differs from MA"))?;
    }
    let s0 = BmufState::new(vec![0.0], 0.9, 1.0).unwrap();
    let s1 = bmuf_step(s0, &[1.0]).unwrap();
    let s2 = bmuf_step(s1.clone(), &[2.0]).unwrap();
    ensure(s1.theta_g == [1.0] && s2.theta_g == [2.9], || {
        format!("scalar trace 0 -> {:?} -> {:?}", s1.theta_g, s2.theta_g)
    })?;
    Ok("1000/1000 bit-equal to model averaging; trace 0 -> 1.0 -> 2.9".into())
}

// ---------------------------------------------------------------- 4

const EMA_TOL: f64 = 1e-12;

fn tiny_task() -> (Dataset, Dataset) {
    let task = SyntheticTask {
        num_states: 5,
        feature_dim: 3,
        train_count: 32,
        valid_count: 8,
        min_len: 9,
        max_len: 18,
        ..SyntheticTask::default()
    };
    let (t, v) = task.generate().unwrap();
    (t.stacked(3), v.stacked(3))
}

fn c4_ema() -> Outcome {
    let mut rng = stream_rng(1004, 0);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let alpha = if case == 0 { 0.99 } else { rng.random_range(0.0..1.0) };
        let len = rng.random_range(1..12);
        let theta0: Vec<f64> = (0..len).map(|_| rng.random_range(-10.0..10.0)).collect();
        let seq: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..len).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let mut state = EmaState::new(theta0.clone(), alpha).unwrap();
        for x in &seq {
            state = ema_update(state, x).unwrap();
        }
        let t = seq.len() as i32;
        for (k, got) in state.export().iter().enumerate() {
            let mut closed = alpha.powi(t) * theta0[k];
            for (tau, x) in seq.iter().enumerate() {
                closed += (1.0 - alpha) * alpha.powi(t - 1 - tau as i32) * x[k];
            }
            worst = worst.max((got - closed).abs());
        }
    }
    ensure(worst <= EMA_TOL, || format!("closed-form deviation {worst:.3e}"))?;

    let (train, valid) = tiny_task();
    let mut cfg = TrainConfig::new(ModelLayout::new(9, vec![6, 5], 5).unwrap());
    cfg.workers = 3;
    cfg.epochs = 2;
    cfg.mini_batch = 3;
    cfg.sync_period = 2;
    cfg.learning_rate = 0.05;
    cfg.ema_alpha = Some(0.9);
    let on = train_parallel(&cfg, &train, &valid).map_err(|e| e.to_string())?;
    cfg.ema_alpha = None;
    let off = train_parallel(&cfg, &train, &valid).map_err(|e| e.to_string())?;
    ensure(bits(on.model.values()) == bits(off.model.values()), || "θ_g changed when EMA was enabled".into())?;
    let ema = on.ema.ok_or("EMA model missing")?;
    ensure(ema.values() != on.model.values(), || "EMA model equals θ_g".into())?;
    Ok(format!("50 sequences of 100 steps, max deviation {worst:.1e}; θ_g bit-identical with EMA on/off"))
}

// ---------------------------------------------------------------- 5

fn c5_allreduce() -> Outcome {
    let mut rng = stream_rng(1005, 0);
    let mut checked = Vec::new();
    for n in [1usize, 2, 4, 8, 16] {
        for len in [16usize, 1001] {
            let inputs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..len).map(|_| rng.random_range(-1e3..1e3)).collect())
                .collect();
            // serial oracle: worker-order sum then division by N
            let mut expected = inputs[0].clone();
            for w in &inputs[1..] {
                expected.iter_mut().zip(w).for_each(|(a, b)| *a += b);
            }
            expected.iter_mut().for_each(|a| *a /= n as f64);
            let part = partition(len, n).unwrap();
            let results: Vec<_> = thread::scope(|s| {
                let handles: Vec<_> = memory_mesh(n, Duration::from_secs(10))
                    .into_iter()
                    .enumerate()
                    .map(|(me, t)| {
                        let (part, local) = (&part, &inputs[me]);
                        s.spawn(move || {
                            let mut ep = MeshEndpoint::new(t);
                            let out = mesh_allreduce(local, me, part, &mut ep).unwrap();
                            (out, ep.stats().messages)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });
            let messages: u64 = results.iter().map(|r| r.1).sum();
            ensure(messages == (2 * n * (n - 1)) as u64, || format!("N={n}: {messages} messages"))?;
            for (w, (out, _)) in results.iter().enumerate() {
                ensure(bits(out) == bits(&expected), || format!("N={n} len={len}: worker {w} differs"))?;
            }
        }
        checked.push(n.to_string());
    }
    Ok(format!("N in {{{}}}: bit-exact, 2N(N-1) messages", checked.join(",")))
}

// ---------------------------------------------------------------- 6

const SMBR_TOL: f64 = 1e-8;
const SMBR_ROW_TOL: f64 = 1e-9;

fn c6_smbr() -> Outcome {
    let mut rng = stream_rng(1006, 0);
    let classes = 5;
    let cases = 240;
    let (mut worst, mut worst_row) = (0.0f64, 0.0f64);
    for case in 0..cases {
        let kappa = [1.0, 0.6, 1.5][case % 3];
        let t_len = rng.random_range(1..=8);
        let reference: Vec<usize> = (0..t_len).map(|_| rng.random_range(0..classes)).collect();
        let frames: Vec<Vec<LatticeArc>> = reference
            .iter()
            .map(|&r| {
                let arcs = rng.random_range(1..=4);
                let mut states = sample(&mut rng, classes, arcs).into_vec();
                if rng.random_bool(0.8) && !states.contains(&r) {
                    states[0] = r;
                }
                states
                    .into_iter()
                    .map(|state| LatticeArc { state, lm_score: rng.random_range(-1.0..0.0) })
                    .collect()
            })
            .collect();
        let mut logp = Matrix::zeros(t_len, classes);
        for t in 0..t_len {
            let row: Vec<f64> = (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            row.iter().enumerate().for_each(|(c, v)| logp.set(t, c, v - lse));
        }
        let lat = Lattice::new(frames.clone(), reference.clone()).unwrap();
        // exhaustive oracle over every path
        let mut paths = Vec::new();
        let mut choice = vec![0usize; t_len];
        'enumerate: loop {
            let score: f64 = (0..t_len)
                .map(|t| kappa * logp.get(t, frames[t][choice[t]].state) + frames[t][choice[t]].lm_score)
                .sum();
            let acc = (0..t_len).filter(|&t| frames[t][choice[t]].state == reference[t]).count() as f64;
            paths.push((choice.clone(), score, acc));
            for t in 0..t_len {
                choice[t] += 1;
                if choice[t] < frames[t].len() {
                    continue 'enumerate;
                }
                choice[t] = 0;
            }
            break;
        }
        let max = paths.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = paths.iter().map(|p| (p.1 - max).exp()).sum();
        let f: f64 = paths.iter().map(|p| (p.1 - max).exp() / z * p.2).sum();
        let mut grad = Matrix::zeros(t_len, classes);
        for (ch, score, acc) in &paths {
            let w = (score - max).exp() / z;
            for t in 0..t_len {
                let s = frames[t][ch[t]].state;
                grad.set(t, s, grad.get(t, s) + kappa * w * (acc - f));
            }
        }
        let out = smbr_loss_and_grad(&lat, &logp, &SmbrConfig { kappa }).map_err(|e| e.to_string())?;
        worst = worst.max((out.expected_accuracy - f).abs());
        for (a, b) in out.grad.as_slice().iter().zip(grad.as_slice()) {
            worst = worst.max((a - b).abs());
        }
        for row in out.grad.iter_rows() {
            worst_row = worst_row.max(row.iter().sum::<f64>().abs());
        }
    }
    ensure(worst < SMBR_TOL, || format!("max deviation from enumeration {worst:.3e}"))?;
    ensure(worst_row < SMBR_ROW_TOL, || format!("per-frame gradient sum {worst_row:.3e}"))?;
    Ok(format!("{cases} lattices, max deviation {worst:.1e}, max frame sum {worst_row:.1e}"))
}

// ---------------------------------------------------------------- 7

const PARALLEL_REL_TOL: f64 = 0.02;

fn task_data(task: &SyntheticTask) -> (Dataset, Dataset) {
    let (t, v) = task.generate().unwrap();
    (t.stacked(3), v.stacked(3))
}

/// Shared recipe for the synthetic analogues: BMUF with block momentum
/// 1 - 1/N and unit block learning rate.
fn recipe(layout: ModelLayout, workers: usize, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::new(layout);
    c.workers = workers;
    c.sync = SyncStrategy::Bmuf { eta: 1.0 - 1.0 / workers as f64, zeta: 1.0 };
    c.epochs = epochs;
    c.learning_rate = 0.02;
    c.ema_alpha = None;
    c
}

fn val_fer(model: &ModelParams, valid: &Dataset) -> f64 {
    evaluate(model, valid, &ClipConfig::default()).unwrap().fer
}

fn c7_parallel() -> Outcome {
    let task = SyntheticTask::default();
    let (train, valid) = task_data(&task);
    let layout = ModelLayout::uniform(train.feature_dim().unwrap(), 32, 2, task.num_states).unwrap();
    let epochs = 40;
    let mut losses = Vec::new();
    let mut batches = Vec::new();
    for n in [1usize, 4] {
        let mut cfg = recipe(layout.clone(), n, epochs);
        cfg.mini_batch = 10;
        cfg.sync_period = 1;
        let splits = partition_indices(train.len(), n, cfg.seed).unwrap();
        batches.push(splits.iter().map(|s| s.len().div_ceil(cfg.mini_batch)).sum::<usize>() * epochs);
        let out = train_parallel(&cfg, &train, &valid).map_err(|e| e.to_string())?;
        losses.push(evaluate(&out.model, &valid, &cfg.clip).unwrap().ce_loss);
    }
    ensure(batches[0] == batches[1], || format!("total mini-batches differ: {batches:?}"))?;
    let rel = (losses[1] - losses[0]) / losses[0];
    let detail = format!(
        "val CE N=1 {:.4}, N=4 {:.4}, relative {:+.2}% (limit ±{}%), {} mini-batches each",
        losses[0],
        losses[1],
        100.0 * rel,
        100.0 * PARALLEL_REL_TOL,
        batches[0]
    );
    ensure(rel.abs() <= PARALLEL_REL_TOL, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn c8_layerwise() -> Outcome {
    let task = SyntheticTask {
        noise_std: 1.5,
        train_count: 4000,
        valid_count: 1000,
        ..SyntheticTask::default()
    };
    let (train, valid) = task_data(&task);
    let d = train.feature_dim().unwrap();
    let epochs = 8;
    let lw = LayerwiseConfig::new(recipe(ModelLayout::uniform(d, 32, 1, task.num_states).unwrap(), 1, epochs), 3);
    let out = layerwise_train(&lw, &train, &valid).map_err(|e| e.to_string())?;
    let fers: Vec<f64> = out.stages.iter().map(|s| val_fer(&s.output.model, &valid)).collect();
    let scratch = train_parallel(&recipe(ModelLayout::uniform(d, 32, 3, task.num_states).unwrap(), 1, epochs), &train, &valid)
        .map_err(|e| e.to_string())?;
    let scratch_fer = val_fer(&scratch.model, &valid);
    let detail = format!(
        "FER layer-wise 3L {:.4}, its 2L teacher {:.4}, 3L from scratch {:.4}",
        fers[2], fers[1], scratch_fer
    );
    ensure(fers[2] <= scratch_fer && fers[2] <= fers[1], || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn c9_distill() -> Outcome {
    let task = SyntheticTask {
        noise_std: 1.5,
        train_count: 4000,
        valid_count: 1000,
        ..SyntheticTask::default()
    };
    let (train, valid) = task_data(&task);
    let d = train.feature_dim().unwrap();
    let c = task.num_states;
    let epochs = 12;
    let lw = LayerwiseConfig::new(recipe(ModelLayout::uniform(d, 32, 1, c).unwrap(), 1, epochs), 4);
    let teacher = layerwise_train(&lw, &train, &valid).map_err(|e| e.to_string())?.final_model().clone();
    let student = ModelLayout::uniform(d, 32, 2, c).unwrap();
    let hard = train_parallel(&recipe(student.clone(), 1, epochs), &train, &valid).map_err(|e| e.to_string())?;
    let soft = distill(&teacher, &student, &train, &valid, &recipe(student.clone(), 1, epochs))
        .map_err(|e| e.to_string())?;
    let clip = ClipConfig::default();
    let t = evaluate(&teacher, &valid, &clip).unwrap();
    let h = evaluate(&hard.model, &valid, &clip).unwrap();
    let s = evaluate(&soft.model, &valid, &clip).unwrap();
    // timing on a repeated pass to steady the per-frame figure
    let (t_us, s_us) = (inference_us(&teacher, &valid), inference_us(&soft.model, &valid));
    let detail = format!(
        "FER distilled 2L {:.4} vs hard 2L {:.4} (teacher 4L {:.4}); us/frame student {:.2} vs teacher {:.2}",
        s.fer, h.fer, t.fer, s_us, t_us
    );
    ensure(s.fer < h.fer && s_us < t_us, || detail.clone())?;
    Ok(detail)
}

fn inference_us(model: &ModelParams, data: &Dataset) -> f64 {
    let clip = ClipConfig::default();
    (0..3).map(|_| evaluate(model, data, &clip).unwrap().us_per_frame).fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------- 10

fn c10_transfer() -> Outcome {
    let source = SyntheticTask { train_count: 2000, ..SyntheticTask::default() };
    let target = SyntheticTask {
        domain_shift: 0.3,
        train_count: 860,
        valid_count: 1000,
        data_seed: 77,
        ..SyntheticTask::default()
    };
    let (src_train, src_valid) = task_data(&source);
    let (tgt_train, tgt_valid) = task_data(&target);
    let d = src_train.feature_dim().unwrap();
    let layout = ModelLayout::uniform(d, 32, 2, source.num_states).unwrap();
    let base = train_parallel(&recipe(layout.clone(), 1, 10), &src_train, &src_valid)
        .map_err(|e| e.to_string())?
        .model;
    let scratch = train_parallel(&recipe(layout.clone(), 1, 10), &tgt_train, &tgt_valid)
        .map_err(|e| e.to_string())?
        .model;
    let clip = ClipConfig::default();
    let lattices = make_lattices(&tgt_train, target.num_states, Some((&base, &clip)), 4, 0).map_err(|e| e.to_string())?;
    let mut tc = TransferConfig::new(recipe(layout, 1, 8));
    tc.subset_fraction = 0.15;
    let tuned = transfer_smbr(&base, &tgt_train, &lattices, &tgt_valid, &tc)
        .map_err(|e| e.to_string())?
        .model;
    let (b, s, t) = (val_fer(&base, &tgt_valid), val_fer(&scratch, &tgt_valid), val_fer(&tuned, &tgt_valid));
    let detail = format!("target FER base+sMBR(15%) {t:.4}, scratch CE(100%) {s:.4}, base alone {b:.4}");
    ensure(t <= s, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 11

fn c11_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = serde_json::json!({
        "task": {"num_states": 6, "feature_dim": 4, "train_count": 80, "valid_count": 16,
                 "min_len": 12, "max_len": 30},
        "train": {
            "layout": {"input_dim": 12, "lstm_layers": [12, 12], "num_classes": 6},
            "workers": 4, "epochs": 3, "mini_batch": 4, "sync_period": 2, "learning_rate": 0.05
        }
    });
    let cfg_path = dir.path().join("run.json");
    std::fs::write(&cfg_path, cfg.to_string()).map_err(|e| e.to_string())?;
    let dlstm = |config: &Path, out: &str| -> Result<(), String> {
        let o = Command::new(env!("CARGO_BIN_EXE_dlstm"))
            .args(["train", "--config", config.to_str().unwrap(), "--out", out])
            .current_dir(dir.path())
            .env("DST_LOG", "error")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())
    };
    dlstm(&cfg_path, "seed_run")?;
    let manifest = dir.path().join("seed_run/manifest.json");
    dlstm(&manifest, "a")?;
    dlstm(&manifest, "b")?;
    for file in ["final.model", "ema.model"] {
        let read = |d: &str| std::fs::read(dir.path().join(d).join(file)).map_err(|e| e.to_string());
        let (s, a, b) = (read("seed_run")?, read("a")?, read("b")?);
        ensure(a == b, || format!("{file} differs between the two manifest runs"))?;
        ensure(a == s, || format!("{file} differs from the original run"))?;
    }
    Ok("final.model and ema.model bit-identical across the original and two manifest runs".into())
}

// ----------------------------------------------------------------

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "gradient exactness", limit: Duration::from_secs(60), run: c1_gradients },
        Criterion { id: 2, name: "clipping and saturation", limit: Duration::from_secs(10), run: c2_clipping },
        Criterion { id: 3, name: "BMUF algebra", limit: Duration::from_secs(5), run: c3_bmuf },
        Criterion { id: 4, name: "EMA closed form", limit: Duration::from_secs(5), run: c4_ema },
        Criterion { id: 5, name: "mesh allreduce oracle", limit: Duration::from_secs(30), run: c5_allreduce },
        Criterion { id: 6, name: "sMBR oracle", limit: Duration::from_secs(60), run: c6_smbr },
        Criterion { id: 7, name: "parallel no-degradation", limit: Duration::from_secs(600), run: c7_parallel },
        Criterion { id: 8, name: "layer-wise benefit", limit: Duration::from_secs(900), run: c8_layerwise },
        Criterion { id: 9, name: "distillation", limit: Duration::from_secs(900), run: c9_distill },
        Criterion { id: 10, name: "transfer with sMBR", limit: Duration::from_secs(900), run: c10_transfer },
        Criterion { id: 11, name: "CLI determinism", limit: Duration::from_secs(300), run: c11_determinism },
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(d) if elapsed <= c.limit => (true, d),
            Ok(d) => (false, format!("{d}; over the time limit")),
            Err(e) => (false, e),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {:>2} {} ({:.1} s of {} s): {}",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            c.limit.as_secs(),
            detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
