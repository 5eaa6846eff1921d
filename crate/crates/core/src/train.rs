//! Online-pruning training loop.
//!
//! Every step prunes inside the forward pass and updates the dense weights,
//! pruned or not. Fixed modes re-solve each layer's bound for a target
//! sparsity before the forward; the adaptive mode learns the bounds through
//! a sparsity objective.

use std::f64::consts::{PI, SQRT_2};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{attained_sparsity, contribution_weights, ForwardOptions, Network, NetworkSpec, Resource, SparsityReport};
use crate::prune::{
    solve_bound_binary_search_about, solve_bound_gaussian, GradientRoute, MeanMode, SparsityTarget,
};
use crate::sparsity_loss::{total_loss, Budget, SparsityObjective, TapeBound};
use crate::tensor::special::erf_inv_scalar;
use crate::tensor::{Precision, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Dense,
    FixedBs,
    FixedGa,
    Adaptive,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Dense => "dense",
            Mode::FixedBs => "fixed_bs",
            Mode::FixedGa => "fixed_ga",
            Mode::Adaptive => "adaptive",
        }
    }

    pub fn is_fixed(self) -> bool {
        matches!(self, Mode::FixedBs | Mode::FixedGa)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    #[default]
    Avg,
    Weighted,
    BudgetQuadratic,
    BudgetHinge,
}

/// Sparsity objective before contribution weights are attached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub lambda: f64,
    pub lambda_p: f64,
    pub lambda_f: f64,
    /// Kept-parameter budget; `None` disables the parameter term.
    pub budget_p: Option<f64>,
    /// Kept-FLOP budget; `None` disables the FLOP term.
    pub budget_f: Option<f64>,
    /// Layer weighting of the weighted objective.
    pub resource: Resource,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec {
            kind: ObjectiveKind::Avg,
            lambda: 1.0,
            lambda_p: 10.0,
            lambda_f: 10.0,
            budget_p: None,
            budget_f: None,
            resource: Resource::Params,
        }
    }
}

impl ObjectiveSpec {
    pub fn avg(lambda: f64) -> Self {
        ObjectiveSpec { kind: ObjectiveKind::Avg, lambda, ..Default::default() }
    }

    pub fn budget(kind: ObjectiveKind, budget_p: f64) -> Self {
        ObjectiveSpec { kind, budget_p: Some(budget_p), ..Default::default() }
    }

    /// Binds the objective to a network's prunable layers.
    pub fn resolve(&self, spec: &NetworkSpec) -> Result<SparsityObjective> {
        Ok(match self.kind {
            ObjectiveKind::Avg => SparsityObjective::Avg { lambda: self.lambda },
            ObjectiveKind::Weighted => {
                SparsityObjective::Weighted { lambda: self.lambda, contrib: contribution_weights(spec, self.resource)? }
            }
            ObjectiveKind::BudgetQuadratic | ObjectiveKind::BudgetHinge => {
                if self.budget_p.is_none() && self.budget_f.is_none() {
                    return Err(Error::contract("budget objective needs budget_p or budget_f"));
                }
                let b = Budget {
                    lambda_p: if self.budget_p.is_some() { self.lambda_p } else { 0.0 },
                    lambda_f: if self.budget_f.is_some() { self.lambda_f } else { 0.0 },
                    budget_p: self.budget_p.unwrap_or(1.0),
                    budget_f: self.budget_f.unwrap_or(1.0),
                    contrib_p: contribution_weights(spec, Resource::Params)?,
                    contrib_f: contribution_weights(spec, Resource::Flops)?,
                };
                if self.kind == ObjectiveKind::BudgetQuadratic {
                    SparsityObjective::BudgetQuadratic(b)
                } else {
                    SparsityObjective::BudgetHinge(b)
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Floor of the cosine schedule.
    pub lr_min: f64,
    pub momentum: f64,
    /// Decoupled decay: each step scales conv/linear weights by `1 − weight_decay`.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs per cosine cycle; 0 means a single cycle over the whole run.
    pub restart_period: usize,
    pub mode: Mode,
    pub objective: Option<ObjectiveSpec>,
    pub target: Option<SparsityTarget>,
    pub route: GradientRoute,
    pub seed: u64,
    pub precision: Precision,
    /// Steps between logged metrics.
    pub log_interval: usize,
    /// Steps between bound re-solves in fixed modes.
    pub recompute_period: usize,
    /// Bound learning rate relative to `lr`.
    pub bound_lr_scale: f64,
    /// Sparsity the adaptive bounds start from.
    pub bound_init: f64,
    pub bn_momentum: f64,
    pub mean_mode: MeanMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 64,
            restart_period: 0,
            mode: Mode::Dense,
            objective: None,
            target: None,
            route: GradientRoute::Straight,
            seed: 0,
            precision: Precision::F32,
            log_interval: 50,
            recompute_period: 1,
            bound_lr_scale: 1.0,
            bound_init: 0.05,
            bn_momentum: 0.1,
            mean_mode: MeanMode::AssumeZero,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad(format!("need 0 <= lr_min <= lr, got lr={} lr_min={}", self.lr, self.lr_min));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return bad(format!("weight_decay {} outside [0, 1)", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.log_interval == 0 || self.recompute_period == 0 {
            return bad("epochs, batch_size, log_interval and recompute_period must be positive".into());
        }
        if !(0.0..1.0).contains(&self.bound_init) || !(self.bound_lr_scale >= 0.0) {
            return bad("bound_init must be in [0, 1) and bound_lr_scale >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum {} outside [0, 1]", self.bn_momentum));
        }
        match self.mode {
            Mode::FixedBs | Mode::FixedGa => match &self.target {
                Some(t) => t.validate()?,
                None => return bad(format!("mode {} needs a target sparsity", self.mode.name())),
            },
            Mode::Adaptive if self.objective.is_none() => return bad("adaptive mode needs an objective".into()),
            _ => {}
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·t))` with `t` the position in the
/// current restart cycle.
pub fn cosine_lr(iter: usize, iters_per_restart: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if iters_per_restart == 0 {
        return Err(Error::contract("iters_per_restart must be positive"));
    }
    let t = (iter % iters_per_restart) as f64 / iters_per_restart as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t).cos()))
}

/// Initial adaptive bound (σ units) that prunes a fraction `s` of a
/// Gaussian layer.
pub fn initial_bound(s: f64) -> f64 {
    SQRT_2 * erf_inv_scalar(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub epoch: usize,
    pub iter: usize,
    pub task_loss: f64,
    pub sparsity_loss: f64,
    /// Overall fraction of conv/linear weights pruned in this step's forward.
    pub param_sparsity: f64,
    pub layer_sparsity: Vec<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub param_sparsity: f64,
    pub lr: f64,
}

/// Momentum buffers, shaped like the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Option<Vec<f64>>>,
    pub batchnorms: Vec<(Vec<f64>, Vec<f64>)>,
    /// One per weight layer; unused entries stay zero.
    pub bounds: Vec<f64>,
}

impl OptimizerState {
    pub fn zeros(net: &Network) -> Self {
        let p = &net.params;
        OptimizerState {
            weights: p.weights.iter().map(|w| vec![0.0; w.weights.len()]).collect(),
            biases: p.biases.iter().map(|b| b.as_ref().map(|b| vec![0.0; b.len()])).collect(),
            batchnorms: p.batchnorms.iter().map(|b| (vec![0.0; b.gamma.len()], vec![0.0; b.beta.len()])).collect(),
            bounds: vec![0.0; p.weights.len()],
        }
    }
}

/// Serializable position of the training RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

struct Sgd {
    lr: f64,
    momentum: f64,
    decay: f64,
    precision: Precision,
}

impl Sgd {
    /// `v ← μv + g`, then `p ← (1 − decay)·p − lr·v`.
    fn apply(&self, param: &mut [f64], vel: &mut [f64], grad: &[f64], decay: bool) {
        let keep = if decay { 1.0 - self.decay } else { 1.0 };
        for ((p, v), g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
            *v = self.precision.round(self.momentum * *v + g);
            *p = self.precision.round(keep * *p - self.lr * *v);
        }
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    pub net: Network,
    objective: Option<SparsityObjective>,
    pub opt: OptimizerState,
    rng: ChaCha8Rng,
    iters_per_epoch: usize,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub iter: usize,
    pub log: Vec<StepMetrics>,
    pub history: Vec<EpochSummary>,
}

impl Trainer {
    /// Initializes weights from the seed. `train_len` fixes the schedule's
    /// steps per epoch.
    pub fn new(cfg: TrainConfig, spec: NetworkSpec, train_len: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut net = Network::new(spec, cfg.mean_mode, &mut rng)?;
        if cfg.mode == Mode::Adaptive {
            let b = initial_bound(cfg.bound_init);
            for i in net.prunable_indices() {
                net.params.weights[i].set_bound(b);
            }
        }
        let opt = OptimizerState::zeros(&net);
        Self::from_state(cfg, net, opt, RngState::capture(&rng), 0, 0, train_len)
    }

    /// Rebuilds a trainer from saved state.
    pub fn from_state(
        cfg: TrainConfig,
        net: Network,
        opt: OptimizerState,
        rng: RngState,
        epoch: usize,
        iter: usize,
        train_len: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if train_len == 0 {
            return Err(Error::contract("empty training split"));
        }
        let objective = match (&cfg.objective, cfg.mode) {
            (Some(o), Mode::Adaptive) => Some(o.resolve(net.spec())?),
            _ => None,
        };
        Ok(Trainer {
            iters_per_epoch: train_len.div_ceil(cfg.batch_size),
            cfg,
            net,
            objective,
            opt,
            rng: rng.restore(),
            epoch,
            iter,
            log: Vec::new(),
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        let total = self.cfg.epochs * self.iters_per_epoch;
        let period = match self.cfg.restart_period {
            0 => total,
            p => (p * self.iters_per_epoch).min(total),
        };
        cosine_lr(iter, period, self.cfg.lr, self.cfg.lr_min).expect("period is positive")
    }

    /// Sets every prunable layer's bound for the fixed target (or zero in
    /// dense mode) from the current weights.
    pub fn refresh_bounds(&mut self) -> Result<()> {
        let mode = self.cfg.mode;
        if mode == Mode::Adaptive {
            return Ok(());
        }
        for i in self.net.prunable_indices() {
            let p = &mut self.net.params.weights[i];
            p.refresh_stats();
            let target = match (mode, &self.cfg.target) {
                (Mode::Dense, _) | (_, None) => {
                    p.set_bound_unclamped(0.0)?;
                    continue;
                }
                (_, Some(t)) => *t,
            };
            let sigma = p.sigma();
            if sigma == 0.0 {
                log::warn!("layer {i} has constant weights; leaving it unpruned");
                p.set_bound_unclamped(0.0)?;
                continue;
            }
            let t = match mode {
                Mode::FixedBs => solve_bound_binary_search_about(p.weights.data(), p.center(), &target)?.bound,
                _ => solve_bound_gaussian(sigma, target.s)?,
            };
            p.set_bound_unclamped(t / sigma)?;
        }
        Ok(())
    }

    /// One forward/backward/update on a batch.
    pub fn train_step(&mut self, x: &Tensor, y: &[usize]) -> Result<StepMetrics> {
        if self.cfg.mode != Mode::Adaptive && self.iter.is_multiple_of(self.cfg.recompute_period) {
            self.refresh_bounds()?;
        }
        let lr = self.lr_at(self.iter);
        let adaptive = self.cfg.mode == Mode::Adaptive;
        let mut tape = Tape::new(self.cfg.precision);
        let xv = tape.constant(x.clone());
        let opts = ForwardOptions { training: true, route: self.cfg.route, trainable_bounds: adaptive, param_grads: true };
        let pass = self.net.forward(&mut tape, xv, opts)?;
        let task = tape.softmax_cross_entropy(pass.logits, y)?;
        let loss = match &self.objective {
            Some(obj) => {
                let bounds: Vec<TapeBound> = pass
                    .bounds
                    .iter()
                    .enumerate()
                    .filter_map(|(i, b)| b.map(|var| TapeBound { var, sigma: self.net.params.weights[i].sigma() }))
                    .collect();
                total_loss(&mut tape, task, &bounds, obj)?
            }
            None => task,
        };
        let task_loss = tape.value(task).item()?;
        let total = tape.value(loss).item()?;
        if !total.is_finite() {
            return Err(Error::Divergence { epoch: self.epoch, iter: self.iter, loss: total });
        }
        tape.backward(loss)?;

        self.net.update_running_stats(&pass.batch_stats, self.cfg.bn_momentum);
        let sgd = Sgd { lr, momentum: self.cfg.momentum, decay: self.cfg.weight_decay, precision: self.cfg.precision };
        let params = &mut self.net.params;
        for (i, w) in pass.weights.iter().enumerate() {
            if let Some(g) = tape.grad(*w) {
                sgd.apply(params.weights[i].weights.data_mut(), &mut self.opt.weights[i], g.data(), true);
            }
            if let (Some(bv), Some(b), Some(vel)) = (pass.biases[i], params.biases[i].as_mut(), self.opt.biases[i].as_mut())
            {
                if let Some(g) = tape.grad(bv) {
                    sgd.apply(b.data_mut(), vel, g.data(), false);
                }
            }
            if let Some(bv) = pass.bounds[i] {
                let g = tape.grad(bv).map_or(0.0, |g| g.data()[0]);
                let bound_sgd = Sgd { lr: lr * self.cfg.bound_lr_scale, decay: 0.0, ..sgd };
                let mut b = [params.weights[i].bound()];
                bound_sgd.apply(&mut b, std::slice::from_mut(&mut self.opt.bounds[i]), &[g], false);
                params.weights[i].set_bound(b[0]);
            }
        }
        for (j, (g, b)) in pass.batchnorms.iter().enumerate() {
            let bn = &mut params.batchnorms[j];
            let (vg, vb) = &mut self.opt.batchnorms[j];
            if let Some(grad) = tape.grad(*g) {
                sgd.apply(bn.gamma.data_mut(), vg, grad.data(), false);
            }
            if let Some(grad) = tape.grad(*b) {
                sgd.apply(bn.beta.data_mut(), vb, grad.data(), false);
            }
        }

        let layer_sparsity: Vec<f64> = self
            .net
            .spec()
            .weight_layers()
            .iter()
            .zip(&self.net.params.weights)
            .map(|(l, p)| if l.prunable { p.attained_sparsity() } else { 0.0 })
            .collect();
        let (mut kept, mut all) = (0.0, 0.0);
        for (s, p) in layer_sparsity.iter().zip(&self.net.params.weights) {
            let n = p.weights.len() as f64;
            kept += (1.0 - s) * n;
            all += n;
        }
        let metrics = StepMetrics {
            epoch: self.epoch,
            iter: self.iter,
            task_loss,
            sparsity_loss: total - task_loss,
            param_sparsity: 1.0 - kept / all,
            layer_sparsity,
            lr,
        };
        self.iter += 1;
        Ok(metrics)
    }

    /// One shuffled pass over the training split, then a test evaluation.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochSummary> {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let (x, y) = data.train.batch(chunk);
            let m = self.train_step(&x, &y)?;
            loss_sum += m.task_loss;
            steps += 1;
            if m.iter % self.cfg.log_interval == 0 {
                self.log.push(m);
            }
        }
        let lr = self.lr_at(self.iter.saturating_sub(1));
        let test_accuracy = self.evaluate(&data.test)?;
        let report = self.report()?;
        let summary = EpochSummary {
            epoch: self.epoch,
            train_loss: loss_sum / steps as f64,
            test_accuracy,
            param_sparsity: report.param_sparsity,
            lr,
        };
        self.epoch += 1;
        self.history.push(summary.clone());
        Ok(summary)
    }

    /// Trains until the configured epoch count, calling `after_epoch` after
    /// each epoch.
    pub fn run(&mut self, data: &Dataset, mut after_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch(data)?;
            after_epoch(self)?;
        }
        Ok(())
    }

    /// Classification accuracy in evaluation mode.
    pub fn evaluate(&mut self, split: &Split) -> Result<f64> {
        self.refresh_bounds()?;
        accuracy(&mut self.net, split, self.cfg.precision)
    }

    pub fn report(&mut self) -> Result<SparsityReport> {
        self.refresh_bounds()?;
        Ok(attained_sparsity(&mut self.net))
    }

    pub fn finish(mut self, data: &Dataset) -> Result<RunOutput> {
        let test_accuracy = self.evaluate(&data.test)?;
        let report = self.report()?;
        Ok(RunOutput { net: self.net, log: self.log, history: self.history, report, test_accuracy })
    }
}

pub fn accuracy(net: &mut Network, split: &Split, precision: Precision) -> Result<f64> {
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let (x, y) = split.batch(chunk);
        let logits = net.predict(&x, precision)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            let arg = row.iter().enumerate().fold(0, |best, (j, v)| if *v > row[best] { j } else { best });
            correct += (arg == label) as usize;
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

pub struct RunOutput {
    pub net: Network,
    pub log: Vec<StepMetrics>,
    pub history: Vec<EpochSummary>,
    pub report: SparsityReport,
    pub test_accuracy: f64,
}

/// Trains a fresh network described by `spec` on `data`.
pub fn run_experiment(cfg: &TrainConfig, spec: NetworkSpec, data: &Dataset) -> Result<RunOutput> {
    if spec.input_shape != data.input_shape() || spec.classes != data.classes {
        return Err(Error::dim(format!(
            "network expects input {:?} with {} classes, dataset has {:?} with {}",
            spec.input_shape,
            spec.classes,
            data.input_shape(),
            data.classes
        )));
    }
    let mut t = Trainer::new(cfg.clone(), spec, data.train.len())?;
    t.run(data, |_| Ok(()))?;
    t.finish(data)
}
