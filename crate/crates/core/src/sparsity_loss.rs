//! Differentiable density losses over per-layer pruning bounds.
//!
//! Under a zero-mean Gaussian model a layer with weight std `σ` and absolute
//! threshold `t` has sparsity `erf(t/(σ√2))`, so its density
//! `1 − erf(t/(σ√2))` is a smooth function of `t`. The losses here combine
//! those densities across layers and return their exact gradients w.r.t.
//! each threshold.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::special::erf_scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Absolute threshold and weight std of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSparsity {
    pub bound: f64,
    pub sigma: f64,
}

impl LayerSparsity {
    pub fn sparsity(&self) -> f64 {
        erf_scalar(self.bound / (self.sigma * SQRT_2))
    }

    /// `∂s/∂t = 2·e^{−t²/(2σ²)} / (σ√(2π))`.
    pub fn sparsity_slope(&self) -> f64 {
        2.0 * (-self.bound * self.bound / (2.0 * self.sigma * self.sigma)).exp()
            / (self.sigma * (2.0 * PI).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSparsityState {
    layers: Vec<LayerSparsity>,
}

impl LayerSparsityState {
    pub fn new(layers: Vec<LayerSparsity>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("sparsity state needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if !(l.sigma > 0.0) {
                return Err(Error::Degenerate(format!("layer {i}: σ = {} is not positive", l.sigma)));
            }
            if !(l.bound >= 0.0) {
                return Err(Error::contract(format!("layer {i}: bound {} is negative", l.bound)));
            }
        }
        Ok(LayerSparsityState { layers })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|&(bound, sigma)| LayerSparsity { bound, sigma }).collect())
    }

    pub fn layers(&self) -> &[LayerSparsity] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn sparsities(&self) -> Vec<f64> {
        self.layers.iter().map(LayerSparsity::sparsity).collect()
    }
}

/// A scalar loss and its gradient w.r.t. each layer's threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `1 − (1/N) Σ erf(bᵢ/(σᵢ√2))`.
pub fn avg_density_loss(state: &LayerSparsityState) -> LossValue {
    let n = state.len() as f64;
    let value = 1.0 - state.layers.iter().map(LayerSparsity::sparsity).sum::<f64>() / n;
    let grad = state.layers.iter().map(|l| -l.sparsity_slope() / n).collect();
    LossValue { value, grad }
}

/// `1 − Σ cᵢ·erf(bᵢ/(σᵢ√2))` with normalized contribution weights, i.e. the
/// density of whatever resource the weights measure.
pub fn weighted_density_loss(state: &LayerSparsityState, contrib: &[f64]) -> Result<LossValue> {
    check_contrib(contrib, state.len())?;
    let value = 1.0
        - state.layers.iter().zip(contrib).map(|(l, c)| c * l.sparsity()).sum::<f64>();
    let grad = state.layers.iter().zip(contrib).map(|(l, c)| -c * l.sparsity_slope()).collect();
    Ok(LossValue { value, grad })
}

pub(crate) fn check_contrib(contrib: &[f64], n: usize) -> Result<()> {
    if contrib.len() != n {
        return Err(Error::contract(format!("{} contribution weights for {n} layers", contrib.len())));
    }
    if contrib.iter().any(|c| !(*c >= 0.0)) {
        return Err(Error::contract("contribution weights must be nonnegative"));
    }
    let total: f64 = contrib.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("contribution weights sum to {total}, not 1")));
    }
    Ok(())
}

/// Coefficients of the two budget-constrained losses. Budgets are densities:
/// `budget_p = 0.15` keeps 15% of the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub lambda_p: f64,
    pub lambda_f: f64,
    pub budget_p: f64,
    pub budget_f: f64,
    pub contrib_p: Vec<f64>,
    pub contrib_f: Vec<f64>,
}

impl Budget {
    fn validate(&self, n: usize) -> Result<()> {
        if !(self.lambda_p >= 0.0 && self.lambda_f >= 0.0) {
            return Err(Error::contract("budget coefficients must be >= 0"));
        }
        for (name, b) in [("parameter", self.budget_p), ("flop", self.budget_f)] {
            if !(b > 0.0 && b <= 1.0) {
                return Err(Error::contract(format!("{name} budget {b} outside (0, 1]")));
            }
        }
        check_contrib(&self.contrib_p, n)?;
        check_contrib(&self.contrib_f, n)
    }

    /// Weighted densities for the parameter and FLOP resources.
    fn densities(&self, state: &LayerSparsityState) -> Result<(LossValue, LossValue)> {
        self.validate(state.len())?;
        Ok((
            weighted_density_loss(state, &self.contrib_p)?,
            weighted_density_loss(state, &self.contrib_f)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum SparsityObjective {
    /// `λ · avg_density_loss`.
    Avg { lambda: f64 },
    /// `λ · weighted_density_loss`.
    Weighted { lambda: f64, contrib: Vec<f64> },
    /// `λ_p (d_p − B_p)² + λ_f (d_f − B_f)²`.
    BudgetQuadratic(Budget),
    /// `λ_p max(d_p − B_p, 0) + λ_f max(d_f − B_f, 0)`.
    BudgetHinge(Budget),
}

impl SparsityObjective {
    pub fn name(&self) -> &'static str {
        match self {
            SparsityObjective::Avg { .. } => "avg",
            SparsityObjective::Weighted { .. } => "weighted",
            SparsityObjective::BudgetQuadratic(_) => "budget_quadratic",
            SparsityObjective::BudgetHinge(_) => "budget_hinge",
        }
    }

    /// The term added to the task loss, with its threshold gradient.
    pub fn penalty(&self, state: &LayerSparsityState) -> Result<LossValue> {
        match self {
            SparsityObjective::Avg { lambda } => Ok(scaled(avg_density_loss(state), *lambda)),
            SparsityObjective::Weighted { lambda, contrib } => {
                Ok(scaled(weighted_density_loss(state, contrib)?, *lambda))
            }
            SparsityObjective::BudgetQuadratic(_) => budget_quadratic_loss(state, self),
            SparsityObjective::BudgetHinge(_) => budget_hinge_loss(state, self),
        }
    }

    /// The unweighted density the objective tracks (parameter density for
    /// budget variants).
    pub fn density(&self, state: &LayerSparsityState) -> Result<f64> {
        Ok(match self {
            SparsityObjective::Avg { .. } => avg_density_loss(state).value,
            SparsityObjective::Weighted { contrib, .. } => weighted_density_loss(state, contrib)?.value,
            SparsityObjective::BudgetQuadratic(b) | SparsityObjective::BudgetHinge(b) => {
                weighted_density_loss(state, &b.contrib_p)?.value
            }
        })
    }
}

fn scaled(mut l: LossValue, k: f64) -> LossValue {
    l.value *= k;
    l.grad.iter_mut().for_each(|g| *g *= k);
    l
}

pub fn budget_quadratic_loss(state: &LayerSparsityState, obj: &SparsityObjective) -> Result<LossValue> {
    let SparsityObjective::BudgetQuadratic(b) = obj else {
        return Err(Error::contract(format!("budget_quadratic_loss called with {} objective", obj.name())));
    };
    let (dp, df) = b.densities(state)?;
    let (ep, ef) = (dp.value - b.budget_p, df.value - b.budget_f);
    let value = b.lambda_p * ep * ep + b.lambda_f * ef * ef;
    let grad = dp
        .grad
        .iter()
        .zip(&df.grad)
        .map(|(gp, gf)| 2.0 * b.lambda_p * ep * gp + 2.0 * b.lambda_f * ef * gf)
        .collect();
    Ok(LossValue { value, grad })
}

pub fn budget_hinge_loss(state: &LayerSparsityState, obj: &SparsityObjective) -> Result<LossValue> {
    let SparsityObjective::BudgetHinge(b) = obj else {
        return Err(Error::contract(format!("budget_hinge_loss called with {} objective", obj.name())));
    };
    let (dp, df) = b.densities(state)?;
    let (ep, ef) = (dp.value - b.budget_p, df.value - b.budget_f);
    // Subgradient 0 at and below the budget.
    let (ap, af) = ((ep > 0.0) as u8 as f64, (ef > 0.0) as u8 as f64);
    let value = b.lambda_p * ep.max(0.0) + b.lambda_f * ef.max(0.0);
    let grad = dp
        .grad
        .iter()
        .zip(&df.grad)
        .map(|(gp, gf)| b.lambda_p * ap * gp + b.lambda_f * af * gf)
        .collect();
    Ok(LossValue { value, grad })
}

/// A trainable bound on the tape: the variable holds `b` in σ units and the
/// layer's absolute threshold is `b·σ`.
#[derive(Debug, Clone, Copy)]
pub struct TapeBound {
    pub var: Var,
    pub sigma: f64,
}

/// Records `task_loss + penalty(bounds)` on the tape. The penalty's
/// gradient reaches each bound variable as `σᵢ · ∂penalty/∂tᵢ`.
pub fn total_loss(tape: &mut Tape, task_loss: Var, bounds: &[TapeBound], obj: &SparsityObjective) -> Result<Var> {
    let state = bound_state(tape, bounds)?;
    let LossValue { value, grad } = obj.penalty(&state)?;
    let sigmas: Vec<f64> = bounds.iter().map(|b| b.sigma).collect();
    let inputs: Vec<Var> = bounds.iter().map(|b| b.var).collect();
    let penalty = tape.custom(
        &inputs,
        Tensor::scalar(value),
        Box::new(move |_, _, g| {
            grad.iter().zip(&sigmas).map(|(gt, s)| Some(vec![g[0] * gt * s])).collect()
        }),
    );
    tape.add(task_loss, penalty)
}

/// Builds the threshold state from σ-unit bound variables.
pub fn bound_state(tape: &Tape, bounds: &[TapeBound]) -> Result<LayerSparsityState> {
    let layers = bounds
        .iter()
        .map(|b| {
            let v = tape.value(b.var).item()?;
            Ok(LayerSparsity { bound: v * b.sigma, sigma: b.sigma })
        })
        .collect::<Result<Vec<_>>>()?;
    LayerSparsityState::new(layers)
}
