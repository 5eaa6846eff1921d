use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{LayerKind, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::prune::{ste_prune_forward, GradientRoute, MeanMode, PrunableParam};
use crate::tensor::{BatchNormStats, Precision, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormParams {
    fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// Trainable state, indexed like [`NetworkSpec::weight_layers`] and
/// [`NetworkSpec::batchnorm_channels`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub weights: Vec<PrunableParam>,
    pub biases: Vec<Option<Tensor>>,
    pub batchnorms: Vec<BatchNormParams>,
}

/// A network layout bound to its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    pub params: NetParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    /// Use batch statistics in batch norm.
    pub training: bool,
    pub route: GradientRoute,
    /// Put each prunable layer's bound on the tape as a trainable leaf.
    pub trainable_bounds: bool,
    /// Track weight, bias and batch-norm gradients.
    pub param_grads: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions { training: false, route: GradientRoute::Straight, trainable_bounds: false, param_grads: false }
    }
}

/// Tape handles of one forward pass.
pub struct ForwardPass {
    pub logits: Var,
    pub weights: Vec<Var>,
    pub biases: Vec<Option<Var>>,
    /// Set for prunable layers when bounds are trainable.
    pub bounds: Vec<Option<Var>>,
    pub batchnorms: Vec<(Var, Var)>,
    pub batch_stats: Vec<Option<BatchNormStats>>,
}

impl Network {
    /// Fan-in Kaiming-normal weights, zero biases, identity batch norm.
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, mean_mode: MeanMode, rng: &mut R) -> Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for layer in spec.weight_layers() {
            let shape = layer.weight_shape().expect("weight layer");
            let std = (2.0 / layer.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::contract(e.to_string()))?;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| normal.sample(rng) as f32 as f64).collect();
            weights.push(PrunableParam::new(Tensor::new(shape, data)?, mean_mode));
            let (_, c_out) = layer.channels().expect("weight layer");
            biases.push(layer.has_bias.then(|| Tensor::zeros(&[c_out])));
        }
        let batchnorms = spec.batchnorm_channels().into_iter().map(BatchNormParams::new).collect();
        Ok(Network { spec, params: NetParams { weights, biases, batchnorms } })
    }

    pub fn from_parts(spec: NetworkSpec, params: NetParams) -> Result<Self> {
        let layers = spec.weight_layers();
        if layers.len() != params.weights.len() || layers.len() != params.biases.len() {
            return Err(Error::dim("parameter count does not match the network's weight layers"));
        }
        for (l, p) in layers.iter().zip(&params.weights) {
            if Some(p.weights.shape().to_vec()) != l.weight_shape() {
                return Err(Error::dim(format!("{}: weight shape {:?} does not match", l.name, p.weights.shape())));
            }
        }
        if spec.batchnorm_channels().len() != params.batchnorms.len() {
            return Err(Error::dim("batch-norm count does not match"));
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weight_names(&self) -> Vec<String> {
        self.spec.weight_layers().iter().map(|l| l.name.clone()).collect()
    }

    /// Indices (into the weight-layer list) of prunable layers.
    pub fn prunable_indices(&self) -> Vec<usize> {
        self.spec.weight_layers().iter().enumerate().filter(|(_, l)| l.prunable).map(|(i, _)| i).collect()
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, opts: ForwardOptions) -> Result<ForwardPass> {
        let mut walker = Walker {
            params: &mut self.params,
            opts,
            pass: ForwardPass {
                logits: x,
                weights: Vec::new(),
                biases: Vec::new(),
                bounds: Vec::new(),
                batchnorms: Vec::new(),
                batch_stats: Vec::new(),
            },
        };
        let out = walker.run(tape, &self.spec.layers, x)?;
        let mut pass = walker.pass;
        pass.logits = out;
        Ok(pass)
    }

    /// Evaluation-mode logits for a batch.
    pub fn predict(&mut self, inputs: &Tensor, precision: Precision) -> Result<Tensor> {
        let mut tape = Tape::new(precision);
        let x = tape.constant(inputs.clone());
        let pass = self.forward(&mut tape, x, ForwardOptions::eval())?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[Option<BatchNormStats>], momentum: f64) {
        for (bn, s) in self.params.batchnorms.iter_mut().zip(stats) {
            let Some(s) = s else { continue };
            for c in 0..bn.running_mean.len() {
                bn.running_mean[c] = (1.0 - momentum) * bn.running_mean[c] + momentum * s.mean[c];
                bn.running_var[c] = (1.0 - momentum) * bn.running_var[c] + momentum * s.var[c];
            }
        }
    }
}

struct Walker<'a> {
    params: &'a mut NetParams,
    opts: ForwardOptions,
    pass: ForwardPass,
}

impl Walker<'_> {
    fn run(&mut self, tape: &mut Tape, layers: &[LayerSpec], mut x: Var) -> Result<Var> {
        for layer in layers {
            x = self.layer(tape, layer, x)?;
        }
        Ok(x)
    }

    fn layer(&mut self, tape: &mut Tape, layer: &LayerSpec, x: Var) -> Result<Var> {
        match &layer.kind {
            LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => {
                let i = self.pass.weights.len();
                let param = &mut self.params.weights[i];
                let w = tape.leaf(param.weights.clone(), self.opts.param_grads);
                let b = self.params.biases[i].as_ref().map(|b| tape.leaf(b.clone(), self.opts.param_grads));
                let bound = (layer.prunable && self.opts.trainable_bounds)
                    .then(|| tape.leaf(Tensor::scalar(param.bound()), true));
                let y = if layer.prunable {
                    prunable_forward(tape, layer, x, param, w, b, bound, self.opts.route)?
                } else {
                    weight_layer_forward(tape, layer, x, w, b)?
                };
                self.pass.weights.push(w);
                self.pass.biases.push(b);
                self.pass.bounds.push(bound);
                Ok(y)
            }
            LayerKind::BatchNorm { .. } => {
                let i = self.pass.batchnorms.len();
                let bn = &self.params.batchnorms[i];
                let g = tape.leaf(bn.gamma.clone(), self.opts.param_grads);
                let b = tape.leaf(bn.beta.clone(), self.opts.param_grads);
                let running = (!self.opts.training).then_some((&bn.running_mean[..], &bn.running_var[..]));
                let (y, stats) = tape.batch_norm(x, g, b, running, BN_EPS)?;
                self.pass.batchnorms.push((g, b));
                self.pass.batch_stats.push(stats);
                Ok(y)
            }
            LayerKind::Relu => Ok(tape.relu(x)),
            LayerKind::Pool => tape.global_avg_pool(x),
            LayerKind::Residual { pre, body, shortcut } => {
                let p = self.run(tape, pre, x)?;
                let y = self.run(tape, body, p)?;
                let skip = match shortcut {
                    Some(s) => self.layer(tape, s, p)?,
                    None => x,
                };
                tape.add(y, skip)
            }
        }
    }
}

fn weight_layer_forward(tape: &mut Tape, layer: &LayerSpec, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let y = match layer.kind {
        LayerKind::Linear { .. } => tape.linear(x, w)?,
        LayerKind::Conv2d { stride, pad, .. } => tape.conv2d(x, w, stride, pad)?,
        _ => return Err(Error::contract(format!("{} is not a weight layer", layer.name))),
    };
    match bias {
        Some(b) => tape.bias_add(y, b),
        None => Ok(y),
    }
}

/// Layer output computed from the pruned weights `w̃`, never the raw `W`.
/// The bias is added unpruned.
#[allow(clippy::too_many_arguments)]
pub fn prunable_forward(
    tape: &mut Tape,
    layer: &LayerSpec,
    x: Var,
    param: &mut PrunableParam,
    weights: Var,
    bias: Option<Var>,
    bound: Option<Var>,
    route: GradientRoute,
) -> Result<Var> {
    let pruned = ste_prune_forward(tape, param, weights, bound, route)?;
    weight_layer_forward(tape, layer, x, pruned, bias)
}
