//! Magnitude thresholding, the two per-layer bound solvers and the
//! straight-through pruning op.
//!
//! A [`PrunableParam`] keeps its bound in units of the layer's standard
//! deviation: weight `w` is pruned when `|w − μ| < b·σ`. The free functions
//! [`solve_bound_gaussian`] and [`sparsity_of_bound`] work with absolute
//! thresholds `t = b·σ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::special::{erf_inv_scalar, erf_scalar};
use crate::tensor::{mean_of, std_of, Tape, Tensor, Var};

/// Largest trainable bound, in σ units: the bound whose Gaussian sparsity is 0.9999.
pub fn bound_max() -> f64 {
    std::f64::consts::SQRT_2 * erf_inv_scalar(0.9999)
}

/// Zeroes every entry with `|w| < b`. Entries with `|w| == b` are kept.
pub fn hard_shrink(w: &Tensor, b: f64) -> Result<Tensor> {
    if !(b >= 0.0) {
        return Err(Error::contract(format!("hard_shrink bound must be >= 0, got {b}")));
    }
    Ok(w.map(|v| if v.abs() < b { 0.0 } else { v }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityTarget {
    pub s: f64,
    pub epsilon: f64,
    pub max_iters: usize,
}

impl SparsityTarget {
    pub const DEFAULT_EPSILON: f64 = 1e-3;
    pub const DEFAULT_MAX_ITERS: usize = 50;

    pub fn new(s: f64, epsilon: f64, max_iters: usize) -> Result<Self> {
        let t = SparsityTarget { s, epsilon, max_iters };
        t.validate()?;
        Ok(t)
    }

    pub fn with_sparsity(s: f64) -> Result<Self> {
        Self::new(s, Self::DEFAULT_EPSILON, Self::DEFAULT_MAX_ITERS)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.s) {
            return Err(Error::contract(format!("target sparsity {} outside [0, 1)", self.s)));
        }
        if !(self.epsilon > 0.0) || self.s + self.epsilon >= 1.0 {
            return Err(Error::contract(format!(
                "approximation margin {} must be > 0 with s + ε < 1",
                self.epsilon
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::contract("max_iters must be positive"));
        }
        Ok(())
    }
}

/// Result of a binary-search bound solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundSolution {
    /// Absolute magnitude threshold.
    pub bound: f64,
    /// Fraction of entries with magnitude below `bound`.
    pub attained: f64,
    pub iterations: usize,
    /// Whether `|attained − s| < ε` was reached.
    pub converged: bool,
}

impl BoundSolution {
    pub fn residual(&self, s: f64) -> f64 {
        (self.attained - s).abs()
    }
}

/// Finds `b` with `|#{|w| < b}/#W − s| < ε` by bisection on
/// `[0, max|w|·(1 + 1e−6)]`.
///
/// When the target cannot be met (ties), returns the best bound seen, with
/// ties in residual going to the lower attained sparsity.
pub fn solve_bound_binary_search(weights: &Tensor, target: &SparsityTarget) -> Result<BoundSolution> {
    solve_bound_binary_search_about(weights.data(), 0.0, target)
}

/// Same as [`solve_bound_binary_search`] on the magnitudes `|w − center|`.
pub fn solve_bound_binary_search_about(
    values: &[f64],
    center: f64,
    target: &SparsityTarget,
) -> Result<BoundSolution> {
    if values.is_empty() {
        return Err(Error::contract("cannot solve a bound for an empty tensor"));
    }
    target.validate()?;
    let mags: Vec<f64> = values.iter().map(|v| (v - center).abs()).collect();
    let n = mags.len() as f64;
    let pruned_fraction = |b: f64| mags.iter().filter(|&&m| m < b).count() as f64 / n;

    let max = mags.iter().cloned().fold(0.0, f64::max);
    let (mut lo, mut hi) = (0.0, max * (1.0 + 1e-6));
    let mut best = BoundSolution { bound: 0.0, attained: 0.0, iterations: 0, converged: false };
    let better = |cand: BoundSolution, best: &mut BoundSolution| {
        let (rc, rb) = (cand.residual(target.s), best.residual(target.s));
        if rc < rb || (rc == rb && cand.attained < best.attained) {
            *best = cand;
        }
    };
    if target.s.abs() < target.epsilon {
        // b = 0 prunes nothing and already satisfies the margin.
        return Ok(BoundSolution { bound: 0.0, attained: 0.0, iterations: 0, converged: true });
    }
    for iter in 1..=target.max_iters {
        let mid = 0.5 * (lo + hi);
        let attained = pruned_fraction(mid);
        let cand = BoundSolution { bound: mid, attained, iterations: iter, converged: false };
        if (attained - target.s).abs() < target.epsilon {
            return Ok(BoundSolution { converged: true, ..cand });
        }
        better(cand, &mut best);
        if attained < target.s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best.iterations = target.max_iters;
    Ok(best)
}

/// Absolute threshold `σ·√2·erf⁻¹(s)` that prunes a fraction `s` of a
/// zero-mean Gaussian with standard deviation `σ`.
pub fn solve_bound_gaussian(sigma: f64, s: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Degenerate(format!("standard deviation must be > 0, got {sigma}")));
    }
    if !(0.0..1.0).contains(&s) {
        return Err(Error::contract(format!("sparsity {s} outside [0, 1)")));
    }
    Ok(sigma * std::f64::consts::SQRT_2 * erf_inv_scalar(s))
}

/// Gaussian sparsity `erf(b / (σ√2))` of an absolute threshold `b`.
pub fn sparsity_of_bound(b: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Degenerate(format!("standard deviation must be > 0, got {sigma}")));
    }
    if !(b >= 0.0) {
        return Err(Error::contract(format!("bound must be >= 0, got {b}")));
    }
    Ok(erf_scalar(b / (sigma * std::f64::consts::SQRT_2)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// Threshold `|w|`.
    #[default]
    AssumeZero,
    /// Threshold `|w − mean(w)|`; pruned entries are still set to zero.
    Center,
}

/// How the pruning op routes the weight gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientRoute {
    /// Straight-through: every weight receives the upstream gradient.
    #[default]
    Straight,
    /// Plain derivative of the hard threshold: pruned weights get zero
    /// gradient and the bound gets none.
    Masked,
}

/// A weight tensor together with its pruning bound and cached statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunableParam {
    pub weights: Tensor,
    bound: f64,
    sigma: f64,
    center: f64,
    mask: Vec<bool>,
    pub mean_mode: MeanMode,
}

impl PrunableParam {
    pub fn new(weights: Tensor, mean_mode: MeanMode) -> Self {
        let n = weights.len();
        let mut p = PrunableParam { weights, bound: 0.0, sigma: 0.0, center: 0.0, mask: vec![false; n], mean_mode };
        p.refresh_stats();
        p
    }

    /// Bound in σ units.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Sets the bound, clamped to `[0, bound_max()]`.
    pub fn set_bound(&mut self, b: f64) {
        self.bound = if b.is_nan() { 0.0 } else { b.clamp(0.0, bound_max()) };
    }

    /// Sets the bound without the upper clamp (fixed-sparsity solvers may
    /// legitimately exceed it).
    pub fn set_bound_unclamped(&mut self, b: f64) -> Result<()> {
        if !(b >= 0.0) {
            return Err(Error::contract(format!("bound must be >= 0, got {b}")));
        }
        self.bound = b;
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    /// `true` where the last forward pruned the weight.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.weights.len() {
            return Err(Error::dim("mask length does not match weights"));
        }
        self.mask = mask;
        Ok(())
    }

    pub fn pruned_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn attained_sparsity(&self) -> f64 {
        self.pruned_count() as f64 / self.mask.len() as f64
    }

    /// Recomputes σ (population std) and μ from the live weights.
    pub fn refresh_stats(&mut self) {
        let data = self.weights.data();
        self.sigma = std_of(data);
        self.center = match self.mean_mode {
            MeanMode::AssumeZero => 0.0,
            MeanMode::Center => mean_of(data),
        };
    }

    /// Absolute threshold `b·σ`.
    pub fn threshold(&self) -> f64 {
        self.bound * self.sigma
    }

    /// Applies the threshold to the current weights, updating the mask.
    pub fn pruned_weights(&mut self) -> Tensor {
        self.refresh_stats();
        if self.sigma == 0.0 {
            if self.bound > 0.0 {
                log::warn!("all weights are equal (σ = 0); leaving layer unpruned");
            }
            self.mask.iter_mut().for_each(|m| *m = false);
            return self.weights.clone();
        }
        let (t, mu) = (self.threshold(), self.center);
        let mut out = self.weights.clone();
        for (v, m) in out.data_mut().iter_mut().zip(self.mask.iter_mut()) {
            *m = (*v - mu).abs() < t;
            if *m {
                *v = 0.0;
            }
        }
        out
    }
}

/// Records `w̃ = prune(W; b·σ)` on the tape.
///
/// `weights` must hold the current `p.weights`; `bound` is an optional
/// scalar leaf carrying `p.bound()` when the bound is trainable. σ is a
/// constant of the op.
pub fn ste_prune_forward(
    tape: &mut Tape,
    p: &mut PrunableParam,
    weights: Var,
    bound: Option<Var>,
    route: GradientRoute,
) -> Result<Var> {
    if tape.value(weights).shape() != p.weights.shape() {
        return Err(Error::dim("pruning op: weight variable does not match parameter"));
    }
    let out = p.pruned_weights();
    let snapshot = StePruneState { mask: p.mask.clone(), bound: p.bound, center: p.center };
    let mut inputs = vec![weights];
    inputs.extend(bound);
    let has_bound = bound.is_some();
    Ok(tape.custom(
        &inputs,
        out,
        Box::new(move |values, _, g| {
            let (gw, gb) = snapshot.backward(values[0].data(), g, route);
            let mut grads = vec![Some(gw)];
            if has_bound {
                grads.push(Some(vec![gb]));
            }
            grads
        }),
    ))
}

/// What the backward rule needs from a forward pass.
#[derive(Debug, Clone)]
struct StePruneState {
    mask: Vec<bool>,
    bound: f64,
    center: f64,
}

impl StePruneState {
    fn backward(&self, w: &[f64], g: &[f64], route: GradientRoute) -> (Vec<f64>, f64) {
        match route {
            GradientRoute::Straight => {
                // w̃ᵢ − wᵢ is −(wᵢ − μ) on pruned entries and 0 elsewhere.
                let gb = if self.bound > 0.0 {
                    self.mask
                        .iter()
                        .zip(w.iter().zip(g))
                        .filter(|(m, _)| **m)
                        .map(|(_, (wi, gi))| -(wi - self.center) / self.bound * gi)
                        .sum()
                } else {
                    0.0
                };
                (g.to_vec(), gb)
            }
            GradientRoute::Masked => {
                let gw = g.iter().zip(&self.mask).map(|(gi, &m)| if m { 0.0 } else { *gi }).collect();
                (gw, 0.0)
            }
        }
    }
}

/// Gradients of the pruning op given the upstream gradient `g = ∂L/∂w̃`:
/// `(∂L/∂W, ∂L/∂b)` with `∂L/∂b = Σ_pruned (w̃ᵢ − wᵢ)/b · gᵢ` and 0 at `b = 0`.
pub fn ste_prune_backward(g: &Tensor, p: &PrunableParam) -> Result<(Tensor, f64)> {
    if g.shape() != p.weights.shape() {
        return Err(Error::dim("upstream gradient does not match weight shape"));
    }
    let state = StePruneState { mask: p.mask.clone(), bound: p.bound, center: p.center };
    let (gw, gb) = state.backward(p.weights.data(), g.data(), GradientRoute::Straight);
    Ok((Tensor::from_parts(g.shape().to_vec(), gw), gb))
}
