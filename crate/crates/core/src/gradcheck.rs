//! Central finite-difference checks of every differentiable piece.
//!
//! Each check evaluates a scalar function twice per coordinate at `x ± h`
//! in 64-bit precision and compares against the tape's (or the loss
//! module's) analytic gradient. The error of one check is the largest
//! absolute deviation divided by the largest gradient magnitude of either
//! route.
//!
//! Pruning is checked on its straight-through surrogate: inside a
//! mask-constant neighborhood the threshold `T` is replaced by its
//! linearization with unit slope, `T(x) ≈ T(x₀) + (x − x₀)`, which is the
//! function whose exact derivative the straight-through rule claims to be.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::prune::{ste_prune_forward, GradientRoute, MeanMode, PrunableParam};
use crate::sparsity_loss::{
    avg_density_loss, budget_hinge_loss, budget_quadratic_loss, total_loss, weighted_density_loss, Budget,
    LayerSparsity, LayerSparsityState, LossValue, SparsityObjective, TapeBound,
};
use crate::tensor::{Precision, Tape, Tensor, Var};

/// Tolerance for ops on the tape.
pub const OP_TOL: f64 = 1e-5;
/// Tolerance for the closed-form sparsity losses.
pub const LOSS_TOL: f64 = 1e-6;

const H: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub error: f64,
    pub tol: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.error <= self.tol
    }
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("non-empty shape")
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Reduces an op output to a scalar with fixed random weights so every
/// output element carries a distinct upstream gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(randn(&mut rng, &shape));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn eval(inputs: &[Tensor], build: &Build<'_>) -> Result<f64> {
    let mut tape = Tape::new(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = build(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares tape gradients of `build` against central differences for
/// every element of every input.
pub fn check_tape(name: &str, inputs: Vec<Tensor>, build: &Build<'_>) -> Result<GradCheck> {
    let mut tape = Tape::new(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (k, v) in vars.iter().enumerate() {
        let g = tape.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        analytic.extend_from_slice(g.data());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            numeric.push((eval(&plus, build)? - eval(&minus, build)?) / (2.0 * H));
        }
    }
    Ok(GradCheck { name: name.to_string(), error: relative_error(&analytic, &numeric), tol: OP_TOL })
}

fn check_loss(name: &str, state: &LayerSparsityState, f: &dyn Fn(&LayerSparsityState) -> Result<LossValue>) -> Result<GradCheck> {
    let analytic = f(state)?.grad;
    let mut numeric = Vec::new();
    for i in 0..state.len() {
        let shifted = |d: f64| -> Result<f64> {
            let mut layers = state.layers().to_vec();
            layers[i].bound += d;
            f(&LayerSparsityState::new(layers)?).map(|l| l.value)
        };
        numeric.push((shifted(H)? - shifted(-H)?) / (2.0 * H));
    }
    Ok(GradCheck { name: name.to_string(), error: relative_error(&analytic, &numeric), tol: LOSS_TOL })
}

/// Checks the pruning op's weight and bound gradients on its surrogate.
/// `x` feeds a linear layer with the pruned weights; the loss is a random
/// projection of the output.
fn check_prune(name: &str, route: GradientRoute, mean_mode: MeanMode, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w0 = randn(&mut rng, &[5, 6]);
    let x = randn(&mut rng, &[4, 6]);
    let b0 = 0.9;
    let mut p = PrunableParam::new(w0.clone(), mean_mode);
    p.set_bound(b0);

    let mut tape = Tape::new(Precision::F64);
    let xv = tape.constant(x.clone());
    let wv = tape.leaf(w0.clone(), true);
    let bv = tape.leaf(Tensor::scalar(b0), true);
    let pruned = ste_prune_forward(&mut tape, &mut p, wv, Some(bv), route)?;
    let y = tape.linear(xv, pruned)?;
    let loss = project(&mut tape, y, seed + 1)?;
    tape.backward(loss)?;
    let mut analytic = tape.grad(wv).expect("weights require grad").into_data();
    analytic.push(tape.grad(bv).map_or(0.0, |g| g.data()[0]));

    // μ and the mask are frozen at the expansion point.
    let (mu, mask) = (p.center(), p.mask().to_vec());
    let surrogate = |w: &[f64], b: f64| -> Result<f64> {
        let wt: Vec<f64> = w
            .iter()
            .zip(&w0.data().to_vec())
            .zip(&mask)
            .map(|((&wi, &w0i), &m)| match (route, m) {
                (_, false) => wi,
                // μ + bσ·[T(x₀) + x − x₀] with x = (w − μ)/(bσ) and T(x₀) = 0.
                (GradientRoute::Straight, true) => wi - b * (w0i - mu) / b0,
                (GradientRoute::Masked, true) => 0.0,
            })
            .collect();
        let mut t = Tape::new(Precision::F64);
        let xv = t.constant(x.clone());
        let wv = t.constant(Tensor::new(w0.shape().to_vec(), wt)?);
        let y = t.linear(xv, wv)?;
        let l = project(&mut t, y, seed + 1)?;
        t.value(l).item()
    };
    let mut numeric = Vec::new();
    let base = w0.data().to_vec();
    for i in 0..base.len() {
        let (mut plus, mut minus) = (base.clone(), base.clone());
        plus[i] += H;
        minus[i] -= H;
        numeric.push((surrogate(&plus, b0)? - surrogate(&minus, b0)?) / (2.0 * H));
    }
    let gb = match route {
        GradientRoute::Straight => (surrogate(&base, b0 + H)? - surrogate(&base, b0 - H)?) / (2.0 * H),
        GradientRoute::Masked => 0.0,
    };
    numeric.push(gb);
    if p.pruned_count() == 0 {
        return Err(Error::contract("pruning check needs at least one pruned weight"));
    }
    Ok(GradCheck { name: name.to_string(), error: relative_error(&analytic, &numeric), tol: OP_TOL })
}

fn budget(n: usize, budget_p: f64, budget_f: f64, rng: &mut ChaCha8Rng) -> Budget {
    let weights = |rng: &mut ChaCha8Rng| {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    Budget { lambda_p: 1.7, lambda_f: 0.6, budget_p, budget_f, contrib_p: weights(rng), contrib_f: weights(rng) }
}

/// Runs every check. Deterministic for a given seed.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| randn(&mut rng, shape);
    let mut out = Vec::new();
    let s = seed;

    let (a, b) = (r(&[3, 4]), r(&[3, 4]));
    out.push(check_tape("add", vec![a.clone(), b.clone()], &|t, v| {
        let o = t.add(v[0], v[1])?;
        project(t, o, s)
    })?);
    out.push(check_tape("sub", vec![a.clone(), b.clone()], &|t, v| {
        let o = t.sub(v[0], v[1])?;
        project(t, o, s)
    })?);
    out.push(check_tape("mul", vec![a.clone(), b.clone()], &|t, v| {
        let o = t.mul(v[0], v[1])?;
        project(t, o, s)
    })?);
    out.push(check_tape("scale", vec![a.clone()], &|t, v| {
        let o = t.scale(v[0], -1.3);
        project(t, o, s)
    })?);
    out.push(check_tape("relu", vec![a.clone()], &|t, v| {
        let o = t.relu(v[0]);
        project(t, o, s)
    })?);
    out.push(check_tape("bias_add", vec![r(&[2, 3, 2, 2]), r(&[3])], &|t, v| {
        let o = t.bias_add(v[0], v[1])?;
        project(t, o, s)
    })?);
    out.push(check_tape("matmul", vec![r(&[3, 4]), r(&[4, 2])], &|t, v| {
        let o = t.matmul(v[0], v[1])?;
        project(t, o, s)
    })?);
    out.push(check_tape("linear", vec![r(&[3, 4]), r(&[5, 4])], &|t, v| {
        let o = t.linear(v[0], v[1])?;
        project(t, o, s)
    })?);
    for (name, stride, pad, k) in [("conv2d_s1_p1", 1, 1, 3), ("conv2d_s2_p1", 2, 1, 3), ("conv2d_1x1_s2", 2, 0, 1)] {
        out.push(check_tape(name, vec![r(&[2, 2, 5, 5]), r(&[3, 2, k, k])], &move |t, v| {
            let o = t.conv2d(v[0], v[1], stride, pad)?;
            project(t, o, s)
        })?);
    }
    out.push(check_tape("batch_norm_train", vec![r(&[4, 3, 2, 2]), r(&[3]), r(&[3])], &|t, v| {
        let (o, _) = t.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
        project(t, o, s)
    })?);
    let (rm, rv) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
    out.push(check_tape("batch_norm_eval", vec![r(&[4, 3, 2, 2]), r(&[3]), r(&[3])], &move |t, v| {
        let (o, _) = t.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)), 1e-5)?;
        project(t, o, s)
    })?);
    out.push(check_tape("global_avg_pool", vec![r(&[2, 3, 3, 3])], &|t, v| {
        let o = t.global_avg_pool(v[0])?;
        project(t, o, s)
    })?);
    out.push(check_tape("flatten", vec![r(&[2, 3, 2])], &|t, v| {
        let o = t.flatten(v[0])?;
        project(t, o, s)
    })?);
    out.push(check_tape("sum", vec![r(&[3, 3])], &|t, v| Ok(t.sum(v[0])))?);
    out.push(check_tape("mean", vec![r(&[3, 3])], &|t, v| Ok(t.mean(v[0])))?);
    let labels = [0usize, 2, 1, 2];
    out.push(check_tape("softmax_cross_entropy", vec![r(&[4, 3])], &move |t, v| {
        t.softmax_cross_entropy(v[0], &labels)
    })?);

    out.push(check_prune("prune_ste", GradientRoute::Straight, MeanMode::AssumeZero, seed + 10)?);
    out.push(check_prune("prune_ste_center", GradientRoute::Straight, MeanMode::Center, seed + 11)?);
    out.push(check_prune("prune_masked", GradientRoute::Masked, MeanMode::AssumeZero, seed + 12)?);

    let mut lrng = ChaCha8Rng::seed_from_u64(seed + 20);
    let layers: Vec<LayerSparsity> = (0..4)
        .map(|_| LayerSparsity { bound: lrng.random_range(0.05..0.6), sigma: lrng.random_range(0.1..0.5) })
        .collect();
    let state = LayerSparsityState::new(layers)?;
    let contrib = budget(4, 0.5, 0.5, &mut lrng).contrib_p;
    out.push(check_loss("avg_density_loss", &state, &|st| Ok(avg_density_loss(st)))?);
    out.push(check_loss("weighted_density_loss", &state, &|st| weighted_density_loss(st, &contrib))?);
    let quad = SparsityObjective::BudgetQuadratic(budget(4, 0.2, 0.3, &mut lrng));
    out.push(check_loss("budget_quadratic_loss", &state, &|st| budget_quadratic_loss(st, &quad))?);
    // Budgets 0.1 below the current densities keep the hinge off its kink.
    let mut b = budget(4, 1.0, 1.0, &mut lrng);
    b.budget_p = weighted_density_loss(&state, &b.contrib_p)?.value - 0.1;
    b.budget_f = weighted_density_loss(&state, &b.contrib_f)?.value - 0.1;
    let hinge = SparsityObjective::BudgetHinge(b);
    out.push(check_loss("budget_hinge_loss", &state, &|st| budget_hinge_loss(st, &hinge))?);

    let sigmas = [0.3, 0.7, 1.9];
    let obj = SparsityObjective::BudgetQuadratic(Budget {
        lambda_p: 2.0,
        lambda_f: 0.5,
        budget_p: 0.3,
        budget_f: 0.6,
        contrib_p: vec![0.2, 0.3, 0.5],
        contrib_f: vec![0.5, 0.25, 0.25],
    });
    out.push(check_tape("total_loss", vec![r(&[3]), Tensor::scalar(0.4), Tensor::scalar(1.1), Tensor::scalar(0.7)], &move |t, v| {
        let task = t.sum(v[0]);
        let bounds: Vec<TapeBound> = v[1..].iter().zip(sigmas).map(|(&var, sigma)| TapeBound { var, sigma }).collect();
        total_loss(t, task, &bounds, &obj)
    })?);
    Ok(out)
}
