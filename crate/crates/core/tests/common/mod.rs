//! Property checks shared by the `invariants` and `acceptance` targets.
//!
//! Every check returns `Err` with a message instead of panicking so the
//! acceptance runner can report it as one line.
#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sparsify::checkpoint::{decode, encode, Checkpoint};
use sparsify::data::{two_gaussians, Dataset};
use sparsify::equiv::{dense_equivalent, EquivSpec};
use sparsify::gradcheck::run_suite;
use sparsify::nn::{
    attained_sparsity, build_cnn_small, build_mlp, build_wrn, count_flops_pruned, count_params, ForwardOptions,
    LayerKind, Network, NetworkSpec,
};
use sparsify::prune::{
    hard_shrink, solve_bound_binary_search, solve_bound_gaussian, sparsity_of_bound, ste_prune_backward, GradientRoute,
    MeanMode, PrunableParam, SparsityTarget,
};
use sparsify::sparsity_loss::{
    avg_density_loss, budget_hinge_loss, budget_quadratic_loss, total_loss, weighted_density_loss, Budget,
    LayerSparsityState, SparsityObjective, TapeBound,
};
use sparsify::tensor::special::{erf_inv_scalar, erf_scalar};
use sparsify::tensor::{Precision, Tape, Tensor};
use sparsify::train::{run_experiment, EpochSummary, Mode, ObjectiveKind, ObjectiveSpec, OptimizerState, RngState, TrainConfig, Trainer};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() })
}

fn prop<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Check
where
    S::Value: std::fmt::Debug,
{
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

pub fn normal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn s(e: impl ToString) -> String {
    e.to_string()
}

// ---- tensor -------------------------------------------------------------

pub fn gradients_match_finite_differences() -> Check {
    for seed in [1, 2, 3] {
        for c in run_suite(seed).map_err(s)? {
            ensure!(c.passed(), "seed {seed}: {} error {:.3e} > {:.0e}", c.name, c.error, c.tol);
        }
    }
    Ok(())
}

pub fn backward_is_deterministic() -> Check {
    let grads = || -> Result<Vec<Vec<f64>>, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Network::new(build_cnn_small([1, 6, 6], [3, 4], 3).map_err(s)?, MeanMode::AssumeZero, &mut rng)
            .map_err(s)?;
        let mut tape = Tape::new(Precision::F32);
        let x = tape.constant(Tensor::new(vec![2, 1, 6, 6], normal(72, 9)).map_err(s)?);
        let opts = ForwardOptions { training: true, route: GradientRoute::Straight, trainable_bounds: true, param_grads: true };
        let pass = net.forward(&mut tape, x, opts).map_err(s)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &[0, 2]).map_err(s)?;
        tape.backward(loss).map_err(s)?;
        Ok(pass.weights.iter().chain(pass.bounds.iter().flatten()).map(|v| tape.grad(*v).unwrap().into_data()).collect())
    };
    let (a, b) = (grads()?, grads()?);
    let bits = |g: &Vec<Vec<f64>>| g.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure!(bits(&a) == bits(&b), "two identical backward passes differ");
    Ok(())
}

pub fn erf_inverse_round_trips() -> Check {
    prop(256, 0.0f64..=0.999999, |s| {
            let back = erf_scalar(erf_inv_scalar(s));
            prop_assert!((back - s).abs() <= 1e-9, "erf(erf⁻¹({s})) = {back}");
            Ok(())
        })?;
    prop(256, (-6.0f64..6.0, 0.0f64..3.0), |(x, d)| {
            prop_assert_eq!(erf_scalar(-x), -erf_scalar(x));
            prop_assert!(erf_scalar(x + d) >= erf_scalar(x));
            Ok(())
        })
}

// ---- prune --------------------------------------------------------------

pub fn hard_shrink_is_idempotent() -> Check {
    prop(256, (proptest::collection::vec(-5.0f64..5.0, 1..64), 0.0f64..4.0), |(w, b)| {
            let t = Tensor::from_vec(w);
            let once = hard_shrink(&t, b).unwrap();
            prop_assert_eq!(hard_shrink(&once, b).unwrap(), once);
            Ok(())
        })
}

pub fn gaussian_bound_inverts_sparsity() -> Check {
    for k in 0..=100 {
        let sigma = 0.01 * 1000f64.powf(k as f64 / 100.0);
        for j in 0..=10 {
            let target = if j == 10 { 0.99 } else { j as f64 / 10.0 };
            let b = solve_bound_gaussian(sigma, target).map_err(s)?;
            let back = sparsity_of_bound(b, sigma).map_err(s)?;
            ensure!((back - target).abs() <= 1e-9, "σ={sigma}, s={target}: got {back}");
        }
    }
    Ok(())
}

pub fn binary_search_meets_attainable_targets() -> Check {
    prop(128, (20usize..2000, any::<u64>(), 0.0f64..0.99), |(n, seed, frac)| {
            let k = ((frac * n as f64) as usize).clamp(1, n - 1);
            let target = SparsityTarget::new(k as f64 / n as f64, 1e-3, 50).unwrap();
            let sol = solve_bound_binary_search(&Tensor::from_vec(normal(n, seed)), &target).unwrap();
            prop_assert!(sol.residual(target.s) < 1e-3, "n={n} k={k}: attained {}", sol.attained);
            Ok(())
        })
}

pub fn binary_search_residual_bounded_by_ties() -> Check {
    prop(128, (proptest::collection::vec(0u8..6, 10..200), 0.05f64..0.95), |(vals, target)| {
            let n = vals.len();
            let mut counts = [0usize; 6];
            vals.iter().for_each(|&v| counts[v as usize] += 1);
            let mult = *counts.iter().max().unwrap();
            let w = Tensor::from_vec(vals.iter().map(|&v| v as f64).collect());
            let sol = solve_bound_binary_search(&w, &SparsityTarget::new(target, 1e-3, 50).unwrap()).unwrap();
            prop_assert!(sol.residual(target) <= mult as f64 / n as f64, "residual {} with multiplicity {mult}/{n}", sol.residual(target));
            Ok(())
        })
}

pub fn straight_through_weight_gradient_is_identity() -> Check {
    prop(128, (any::<u64>(), 0.0f64..3.0, 1usize..100), |(seed, b, n)| {
            let mut p = PrunableParam::new(Tensor::from_vec(normal(n, seed)), MeanMode::AssumeZero);
            p.set_bound(b);
            p.pruned_weights();
            let g = Tensor::from_vec(normal(n, seed ^ 1));
            let (gw, _) = ste_prune_backward(&g, &p).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&gw), bits(&g));
            Ok(())
        })
}

/// Upstream gradient of `L = −Σ w̃ᵢ·sign(wᵢ)`, a loss that falls as more
/// weights stay active.
fn active_weight_loss_grad(w: &[f64]) -> Tensor {
    Tensor::from_vec(w.iter().map(|v| -v.signum()).collect())
}

pub fn pruning_pressure_shrinks_bound() -> Check {
    prop(128, (any::<u64>(), 0.01f64..3.0, 1usize..200), |(seed, b, n)| {
            let w = normal(n, seed);
            let mut p = PrunableParam::new(Tensor::from_vec(w.clone()), MeanMode::AssumeZero);
            p.set_bound(b);
            p.pruned_weights();
            let (_, gb) = ste_prune_backward(&active_weight_loss_grad(&w), &p).unwrap();
            prop_assert!(gb >= 0.0, "grad_b = {gb}");
            Ok(())
        })
}

/// Overall parameter sparsity deviation from 0.85 of fixed-GA training with
/// the straight-through and the masked backward.
pub fn ste_vs_masked(seed: u64) -> Result<(f64, f64), String> {
    let data = two_gaussians(2000, 1000, 20, 1.0, 7).map_err(s)?;
    let mut dev = Vec::new();
    for route in [GradientRoute::Straight, GradientRoute::Masked] {
        let cfg = TrainConfig {
            mode: Mode::FixedGa,
            target: Some(SparsityTarget::with_sparsity(0.85).map_err(s)?),
            route,
            epochs: 30,
            lr: 0.1,
            batch_size: 32,
            seed,
            ..Default::default()
        };
        let out = run_experiment(&cfg, build_mlp(20, &[256, 256], 2).map_err(s)?, &data).map_err(s)?;
        dev.push((out.report.param_sparsity - 0.85).abs());
    }
    Ok((dev[0], dev[1]))
}

pub fn ste_preserves_target_sparsity() -> Check {
    let (ste, masked) = ste_vs_masked(0)?;
    ensure!(ste < masked, "straight-through deviation {ste:.4} not below masked {masked:.4}");
    Ok(())
}

// ---- sparsity_loss ------------------------------------------------------

/// `(t, σ)` pairs with `t/σ` inside the clamp range of the bounds, where
/// the Gaussian density is far from underflow.
fn state_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
    proptest::collection::vec((0.0f64..3.9, 0.05f64..3.0).prop_map(|(u, sigma)| (u * sigma, sigma)), 1..8)
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub fn density_loss_competes_with_task_loss() -> Check {
    prop(256, state_strategy(), |pairs| {
            let st = LayerSparsityState::from_pairs(&pairs).unwrap();
            for (i, g) in avg_density_loss(&st).grad.iter().enumerate() {
                prop_assert!(*g < 0.0, "∂L_s/∂t[{i}] = {g}");
            }
            Ok(())
        })?;
    // The task-loss side of the tension: the same sign test as the pruning
    // pressure check, on a bound that prunes something.
    let w = normal(500, 3);
    let mut p = PrunableParam::new(Tensor::from_vec(w.clone()), MeanMode::AssumeZero);
    p.set_bound(0.8);
    p.pruned_weights();
    let (_, gb) = ste_prune_backward(&active_weight_loss_grad(&w), &p).map_err(s)?;
    ensure!(gb > 0.0, "task-loss bound gradient {gb} is not positive");
    Ok(())
}

pub fn weighted_uniform_equals_avg() -> Check {
    prop(256, state_strategy(), |pairs| {
            let st = LayerSparsityState::from_pairs(&pairs).unwrap();
            let a = avg_density_loss(&st);
            let w = weighted_density_loss(&st, &uniform(pairs.len())).unwrap();
            prop_assert!((a.value - w.value).abs() <= 1e-12);
            for (x, y) in a.grad.iter().zip(&w.grad) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            Ok(())
        })
}

fn budget(n: usize, budget_p: f64) -> Budget {
    Budget { lambda_p: 1.0, lambda_f: 0.0, budget_p, budget_f: 1.0, contrib_p: uniform(n), contrib_f: uniform(n) }
}

pub fn budget_losses_vanish_where_expected() -> Check {
    prop(256, (state_strategy(), 0.01f64..1.0), |(pairs, bp)| {
            let st = LayerSparsityState::from_pairs(&pairs).unwrap();
            let d = avg_density_loss(&st).value;
            let hinge = budget_hinge_loss(&st, &SparsityObjective::BudgetHinge(budget(pairs.len(), bp))).unwrap();
            let quad = budget_quadratic_loss(&st, &SparsityObjective::BudgetQuadratic(budget(pairs.len(), bp))).unwrap();
            if d <= bp {
                prop_assert_eq!(hinge.value, 0.0);
            }
            prop_assert_eq!(quad.value == 0.0, d == bp, "density {} budget {} quadratic {}", d, bp, quad.value);
            Ok(())
        })?;
    // Exactly at the budget.
    let st = LayerSparsityState::from_pairs(&[(1.0, 1.0)]).map_err(s)?;
    let d = avg_density_loss(&st).value;
    let q = budget_quadratic_loss(&st, &SparsityObjective::BudgetQuadratic(budget(1, d))).map_err(s)?;
    ensure!(q.value == 0.0, "quadratic loss {} at its budget", q.value);
    Ok(())
}

/// `task + penalty` through a two-layer network, as a function of the
/// σ-unit bounds, with the gradient the tape assigns to each bound. The
/// masked route keeps the task term's bound gradient at zero, matching the
/// hard threshold inside a mask-constant neighborhood.
fn network_total(net: &mut Network, x: &Tensor, y: &[usize], obj: &SparsityObjective) -> Result<(f64, Vec<f64>), String> {
    let mut tape = Tape::new(Precision::F64);
    let xv = tape.constant(x.clone());
    let opts = ForwardOptions { training: false, route: GradientRoute::Masked, trainable_bounds: true, param_grads: false };
    let pass = net.forward(&mut tape, xv, opts).map_err(s)?;
    let task = tape.softmax_cross_entropy(pass.logits, y).map_err(s)?;
    let bounds: Vec<TapeBound> = pass
        .bounds
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.map(|var| TapeBound { var, sigma: net.params.weights[i].sigma() }))
        .collect();
    let loss = total_loss(&mut tape, task, &bounds, obj).map_err(s)?;
    tape.backward(loss).map_err(s)?;
    let grads = bounds.iter().map(|b| tape.grad(b.var).map_or(0.0, |g| g.data()[0])).collect();
    Ok((tape.value(loss).item().map_err(s)?, grads))
}

pub fn network_bound_gradients_match_finite_differences() -> Check {
    let spec = build_mlp(4, &[6], 3).map_err(s)?;
    let obj = ObjectiveSpec { lambda_p: 2.0, ..ObjectiveSpec::budget(ObjectiveKind::BudgetQuadratic, 0.3) }
        .resolve(&spec)
        .map_err(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut net = Network::new(spec, MeanMode::AssumeZero, &mut rng).map_err(s)?;
    let b0 = [0.6, 0.9];
    for (p, b) in net.params.weights.iter_mut().zip(b0) {
        p.set_bound(b);
    }
    let x = Tensor::new(vec![5, 4], normal(20, 12)).map_err(s)?;
    let y = [0, 1, 2, 1, 0];
    let (_, analytic) = network_total(&mut net, &x, &y, &obj)?;
    let h = 1e-6;
    let masks = |net: &Network| net.params.weights.iter().map(|p| p.mask().to_vec()).collect::<Vec<_>>();
    let reference = masks(&net);
    let mut numeric = Vec::new();
    for i in 0..b0.len() {
        let mut at = |d: f64| -> Result<f64, String> {
            net.params.weights[i].set_bound(b0[i] + d);
            let v = network_total(&mut net, &x, &y, &obj)?.0;
            ensure!(masks(&net) == reference, "mask changed at b[{i}] {d:+e}");
            Ok(v)
        };
        numeric.push((at(h)? - at(-h)?) / (2.0 * h));
        net.params.weights[i].set_bound(b0[i]);
    }
    let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let err = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs())) / scale;
    ensure!(err <= 1e-4, "relative error {err:.3e}: analytic {analytic:?}, numeric {numeric:?}");
    Ok(())
}

// ---- nn -----------------------------------------------------------------

pub fn dense_counts_ignore_pruning_state() -> Check {
    prop(32, (any::<u64>(), proptest::collection::vec(0.0f64..3.0, 3)), |(seed, bounds)| {
            let spec = build_cnn_small([1, 8, 8], [4, 6], 3).unwrap();
            let (params, flops) = (count_params(&spec), spec.dense_flops());
            let mut net = Network::new(spec, MeanMode::AssumeZero, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for (p, b) in net.params.weights.iter_mut().zip(&bounds) {
                p.set_bound(*b);
            }
            let report = attained_sparsity(&mut net);
            prop_assert_eq!(count_params(net.spec()), params);
            prop_assert_eq!(net.spec().dense_flops(), flops);
            let kept: f64 = report.layers.iter().map(|l| l.kept_flops).sum();
            let recount = count_flops_pruned(net.spec(), &report.sparsities()).unwrap();
            prop_assert!((kept - recount).abs() <= 1e-9 * flops as f64, "{} vs {}", kept, recount);
            for l in &report.layers {
                prop_assert_eq!(l.kept_params as f64, (l.weights as f64 * (1.0 - l.sparsity)).round());
            }
            Ok(())
        })
}

pub fn checkpoint_round_trip_is_bit_identical() -> Check {
    prop(16, (any::<u64>(), proptest::collection::vec(0.0f64..3.0, 3)), |(seed, bounds)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = build_cnn_small([1, 6, 6], [3, 5], 4).unwrap();
            let mut net = Network::new(spec, MeanMode::Center, &mut rng).unwrap();
            for (p, b) in net.params.weights.iter_mut().zip(&bounds) {
                p.set_bound(*b);
                p.pruned_weights();
            }
            let cfg = TrainConfig { seed, ..Default::default() };
            let opt = OptimizerState::zeros(&net);
            let t = Trainer::from_state(cfg, net, opt, RngState::capture(&rng), 3, 17, 1).unwrap();
            let ck = Checkpoint::from_trainer(&t, "seed = 1\n".into());
            let back = decode(&encode(&ck)).unwrap();
            let bits = |c: &Checkpoint| -> Vec<u64> {
                c.params.weights.iter().flat_map(|p| p.weights.data().iter().map(|v| v.to_bits()).chain([p.bound().to_bits()])).collect()
            };
            prop_assert_eq!(bits(&back), bits(&ck));
            let masks = |c: &Checkpoint| c.params.weights.iter().map(|p| p.mask().to_vec()).collect::<Vec<_>>();
            prop_assert_eq!(masks(&back), masks(&ck));
            prop_assert_eq!(back, ck);
            Ok(())
        })
}

pub fn zero_bound_matches_unpruned_forward() -> Check {
    let spec = build_mlp(5, &[7], 3).map_err(s)?;
    let mut net = Network::new(spec, MeanMode::AssumeZero, &mut ChaCha8Rng::seed_from_u64(2)).map_err(s)?;
    for p in &mut net.params.weights {
        p.set_bound(0.0);
    }
    let x = Tensor::new(vec![4, 5], normal(20, 5)).map_err(s)?;
    let out = net.predict(&x, Precision::F32).map_err(s)?;
    // Hand-rolled reference: relu(x·W1ᵀ + b1)·W2ᵀ + b2.
    let layer = |input: &[f64], rows: usize, i: usize, relu: bool| -> Vec<f64> {
        let w = net.params.weights[i].weights.data();
        let b = net.params.biases[i].as_ref().unwrap().data();
        let (n_out, n_in) = (b.len(), w.len() / b.len());
        let mut out = vec![0.0; rows * n_out];
        for r in 0..rows {
            for o in 0..n_out {
                let z = b[o] + (0..n_in).map(|k| input[r * n_in + k] * w[o * n_in + k]).sum::<f64>();
                out[r * n_out + o] = if relu { z.max(0.0) } else { z };
            }
        }
        out
    };
    let h = layer(x.data(), 4, 0, true);
    let reference = layer(&h, 4, 1, false);
    let err = out.data().iter().zip(&reference).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    ensure!(err <= 1e-6, "max deviation {err:.3e}");
    Ok(())
}

// ---- train --------------------------------------------------------------

pub fn toy_data() -> Result<Dataset, String> {
    two_gaussians(2000, 1000, 2, 3.0, 7).map_err(s)
}

pub fn toy_spec() -> NetworkSpec {
    build_mlp(2, &[64, 64], 2).unwrap()
}

pub fn toy_config(mode: Mode) -> TrainConfig {
    let base = TrainConfig { mode, epochs: 10, lr: 0.1, batch_size: 32, ..Default::default() };
    match mode {
        Mode::Dense => base,
        Mode::FixedBs | Mode::FixedGa => TrainConfig { target: SparsityTarget::with_sparsity(0.85).ok(), ..base },
        Mode::Adaptive => TrainConfig {
            objective: Some(ObjectiveSpec { lambda_p: 10.0, ..ObjectiveSpec::budget(ObjectiveKind::BudgetHinge, 0.15) }),
            bound_lr_scale: 0.01,
            ..base
        },
    }
}

/// First epoch (1-based) whose test accuracy reaches 97% of the final one.
pub fn epochs_to_97(history: &[EpochSummary]) -> usize {
    let last = history.last().map_or(0.0, |h| h.test_accuracy);
    history.iter().position(|h| h.test_accuracy >= 0.97 * last).map_or(history.len(), |i| i + 1)
}

pub fn pruned_runs_converge_like_dense() -> Check {
    let data = toy_data()?;
    let dense = run_experiment(&toy_config(Mode::Dense), toy_spec(), &data).map_err(s)?;
    let reference = epochs_to_97(&dense.history) as f64;
    for mode in [Mode::FixedBs, Mode::FixedGa, Mode::Adaptive] {
        let out = run_experiment(&toy_config(mode), toy_spec(), &data).map_err(s)?;
        let e = epochs_to_97(&out.history) as f64;
        ensure!(e <= 1.5 * reference, "{}: {e} epochs to 97% of final accuracy, dense needs {reference}", mode.name());
    }
    Ok(())
}

fn frozen_trainer(mode: Mode, weight_decay: f64) -> Result<(Trainer, Dataset), String> {
    let data = toy_data()?;
    let cfg = TrainConfig { lr: 0.0, weight_decay, precision: Precision::F64, ..toy_config(mode) };
    Ok((Trainer::new(cfg, toy_spec(), data.train.len()).map_err(s)?, data))
}

pub fn weight_decay_touches_weights_only() -> Check {
    let wd = 0.01;
    let (mut t, data) = frozen_trainer(Mode::Adaptive, wd)?;
    let w0: Vec<Vec<f64>> = t.net.params.weights.iter().map(|p| p.weights.data().to_vec()).collect();
    let bounds0: Vec<f64> = t.net.params.weights.iter().map(|p| p.bound()).collect();
    let biases0 = t.net.params.biases.clone();
    let steps = 5;
    for i in 0..steps {
        let (x, y) = data.train.batch(&(i * 32..(i + 1) * 32).collect::<Vec<_>>());
        t.train_step(&x, &y).map_err(s)?;
    }
    for (p, w) in t.net.params.weights.iter().zip(&w0) {
        for (a, b) in p.weights.data().iter().zip(w) {
            let expected = (0..steps).fold(*b, |v, _| (1.0 - wd) * v);
            ensure!(*a == expected, "weight {b} became {a}, expected {expected}");
        }
    }
    let bounds: Vec<f64> = t.net.params.weights.iter().map(|p| p.bound()).collect();
    ensure!(bounds == bounds0, "bounds moved: {bounds0:?} -> {bounds:?}");
    ensure!(t.net.params.biases == biases0, "biases changed");
    Ok(())
}

pub fn pruning_never_mutates_dense_weights() -> Check {
    for mode in [Mode::Dense, Mode::FixedBs, Mode::FixedGa, Mode::Adaptive] {
        let (mut t, data) = frozen_trainer(mode, 0.0)?;
        let w0: Vec<Vec<f64>> = t.net.params.weights.iter().map(|p| p.weights.data().to_vec()).collect();
        for i in 0..3 {
            let (x, y) = data.train.batch(&(i * 32..(i + 1) * 32).collect::<Vec<_>>());
            t.train_step(&x, &y).map_err(s)?;
        }
        t.evaluate(&data.test).map_err(s)?;
        let report = t.report().map_err(s)?;
        let w: Vec<Vec<f64>> = t.net.params.weights.iter().map(|p| p.weights.data().to_vec()).collect();
        ensure!(w == w0, "{}: stored weights changed", mode.name());
        if mode != Mode::Dense {
            ensure!(report.param_sparsity > 0.0, "{}: nothing pruned", mode.name());
            let hidden = t.net.params.weights.iter().any(|p| p.mask().iter().zip(p.weights.data()).any(|(m, v)| *m && *v != 0.0));
            ensure!(hidden, "{}: pruned entries lost their dense values", mode.name());
        }
    }
    Ok(())
}

// ---- equiv --------------------------------------------------------------

pub fn thinning_composes_within_one_channel() -> Check {
    let bases = [build_wrn(16, 4, 10).unwrap(), build_cnn_small([3, 8, 8], [48, 96], 10).unwrap(), build_mlp(10, &[100, 60], 5).unwrap()];
    prop(128, (0usize..3, 0.05f64..=1.0, 0.05f64..=1.0), |(k, a, b)| {
            let base = &bases[k];
            let (Ok(two), Ok(one)) = (dense_equivalent(base, a).and_then(|s| EquivSpec::new(&s, b)), EquivSpec::new(base, a * b))
            else {
                return Ok(());
            };
            for (x, y) in two.channels.iter().zip(&one.channels) {
                prop_assert!(x.scaled_out.abs_diff(y.scaled_out) <= 1, "{}: {} vs {}", x.layer, x.scaled_out, y.scaled_out);
                prop_assert!(x.scaled_in.abs_diff(y.scaled_in) <= 1, "{}: {} vs {}", x.layer, x.scaled_in, y.scaled_in);
            }
            Ok(())
        })
}

/// Weights of the convs whose input and output widths are both scaled. The
/// stem reads image channels, which stay fixed, so it thins by `√r` only.
fn scaled_conv_weights(spec: &NetworkSpec, scaled: &[&str]) -> usize {
    spec.weight_layers()
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Conv2d { .. }) && scaled.contains(&l.name.as_str()))
        .map(|l| l.weight_count())
        .sum()
}

pub fn conv_parameter_ratio_tracks_target() -> Check {
    let base = build_wrn(16, 8, 100).map_err(s)?;
    for r in [0.9, 0.5, 0.25, 0.1518, 0.1, 0.05] {
        let e = EquivSpec::new(&base, r).map_err(s)?;
        let inner: Vec<&str> = e.channels.iter().filter(|c| c.c_in != 3).map(|c| c.layer.as_str()).collect();
        let ratio = scaled_conv_weights(&e.thin, &inner) as f64 / scaled_conv_weights(&base, &inner) as f64;
        let min_ch = e.channels.iter().filter(|c| inner.contains(&c.layer.as_str())).map(|c| c.scaled_out.min(c.scaled_in)).min().unwrap_or(1);
        let delta = 2.0 / min_ch as f64;
        ensure!(ratio <= r && ratio >= r * (1.0 - delta), "r={r}: conv ratio {ratio:.5}, δ={delta:.4}");
    }
    Ok(())
}

// ---- cli ----------------------------------------------------------------

pub const CLI_CONFIG: &str = r#"seed = 5

[dataset]
kind = "two_gaussians"
train = 300
test = 200

[arch]
kind = "mlp"
hidden = [16, 16]

[train]
mode = "adaptive"
epochs = 3
log_interval = 4

[objective]
kind = "budget_hinge"
budget_p = 0.3
"#;

pub fn cli(args: &[&str], cwd: &Path) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_sparsify")).args(args).current_dir(cwd).output().map_err(s)
}

pub fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map_err(s)?
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    Ok(files)
}

fn run_ok(args: &[&str], cwd: &Path) -> Check {
    let out = cli(args, cwd)?;
    ensure!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

pub fn cli_artifacts_are_reproducible() -> Check {
    let tmp = tempfile::tempdir().map_err(s)?;
    let cwd = tmp.path();
    std::fs::write(cwd.join("c.toml"), CLI_CONFIG).map_err(s)?;
    run_ok(&["run", "c.toml", "--out", "a"], cwd)?;
    run_ok(&["run", "c.toml", "--out", "b"], cwd)?;
    let a = dir_bytes(&cwd.join("a"))?;
    ensure!(a.len() == 5, "expected 5 artifacts, got {:?}", a.iter().map(|f| &f.0).collect::<Vec<_>>());
    ensure!(a == dir_bytes(&cwd.join("b"))?, "two identical runs wrote different bytes");
    // The echoed configuration reproduces the run.
    run_ok(&["run", "a/config.toml", "--out", "c"], cwd)?;
    ensure!(a == dir_bytes(&cwd.join("c"))?, "rerunning the echoed config wrote different bytes");
    Ok(())
}

pub fn cli_resume_matches_uninterrupted_run() -> Check {
    let tmp = tempfile::tempdir().map_err(s)?;
    let cwd = tmp.path();
    std::fs::write(cwd.join("c.toml"), CLI_CONFIG).map_err(s)?;
    run_ok(&["run", "c.toml", "--out", "full"], cwd)?;
    run_ok(&["run", "c.toml", "--out", "split", "--stop-after", "1"], cwd)?;
    run_ok(&["run", "c.toml", "--out", "split", "--resume"], cwd)?;
    ensure!(dir_bytes(&cwd.join("full"))? == dir_bytes(&cwd.join("split"))?, "resumed run differs from the uninterrupted one");
    Ok(())
}

pub type Named = (&'static str, fn() -> Check);

/// Every invariant, grouped by module.
pub const INVARIANTS: &[Named] = &[
    ("tensor: gradients match finite differences", gradients_match_finite_differences),
    ("tensor: backward is deterministic", backward_is_deterministic),
    ("tensor: erf inverse round-trips, erf odd and monotone", erf_inverse_round_trips),
    ("prune: hard_shrink is idempotent", hard_shrink_is_idempotent),
    ("prune: gaussian bound inverts sparsity", gaussian_bound_inverts_sparsity),
    ("prune: binary search meets attainable targets", binary_search_meets_attainable_targets),
    ("prune: binary search residual bounded by ties", binary_search_residual_bounded_by_ties),
    ("prune: straight-through weight gradient is identity", straight_through_weight_gradient_is_identity),
    ("prune: pruning pressure gives grad_b >= 0", pruning_pressure_shrinks_bound),
    ("prune: straight-through preserves target sparsity", ste_preserves_target_sparsity),
    ("sparsity_loss: density loss competes with task loss", density_loss_competes_with_task_loss),
    ("sparsity_loss: uniform weighted equals avg", weighted_uniform_equals_avg),
    ("sparsity_loss: budget losses vanish where expected", budget_losses_vanish_where_expected),
    ("sparsity_loss: network bound gradients match finite differences", network_bound_gradients_match_finite_differences),
    ("nn: dense counts ignore pruning state", dense_counts_ignore_pruning_state),
    ("nn: checkpoint round trip is bit-identical", checkpoint_round_trip_is_bit_identical),
    ("nn: zero bound matches unpruned forward", zero_bound_matches_unpruned_forward),
    ("train: pruned runs converge like dense", pruned_runs_converge_like_dense),
    ("train: weight decay touches weights only", weight_decay_touches_weights_only),
    ("train: pruning never mutates dense weights", pruning_never_mutates_dense_weights),
    ("equiv: thinning composes within one channel", thinning_composes_within_one_channel),
    ("equiv: conv parameter ratio tracks target", conv_parameter_ratio_tracks_target),
    ("cli: artifacts are reproducible", cli_artifacts_are_reproducible),
    ("cli: resume matches uninterrupted run", cli_resume_matches_uninterrupted_run),
];
