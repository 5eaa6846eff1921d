use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::out_extent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Linear { fan_in: usize, fan_out: usize },
    Conv2d { c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize },
    BatchNorm { channels: usize },
    Relu,
    /// Global average pooling over spatial dimensions.
    Pool,
    /// `body(pre(x)) + shortcut(pre(x))`, or `body(pre(x)) + x` without a shortcut.
    Residual { pre: Vec<LayerSpec>, body: Vec<LayerSpec>, shortcut: Option<Box<LayerSpec>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Only linear and conv layers may be prunable.
    pub prunable: bool,
    pub has_bias: bool,
    /// Per-sample input and output shapes.
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
}

impl LayerSpec {
    pub fn is_weight_layer(&self) -> bool {
        matches!(self.kind, LayerKind::Linear { .. } | LayerKind::Conv2d { .. })
    }

    /// Shape of the weight tensor of a conv/linear layer.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Linear { fan_in, fan_out } => Some(vec![fan_out, fan_in]),
            LayerKind::Conv2d { c_in, c_out, kernel, .. } => Some(vec![c_out, c_in, kernel, kernel]),
            _ => None,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().map(|s| s.iter().product()).unwrap_or(0)
    }

    /// Fan-in used for weight initialization.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Linear { fan_in, .. } => fan_in,
            LayerKind::Conv2d { c_in, kernel, .. } => c_in * kernel * kernel,
            _ => 0,
        }
    }

    /// `(C_in, C_out)` of a weight layer.
    pub fn channels(&self) -> Option<(usize, usize)> {
        match self.kind {
            LayerKind::Linear { fan_in, fan_out } => Some((fan_in, fan_out)),
            LayerKind::Conv2d { c_in, c_out, .. } => Some((c_in, c_out)),
            _ => None,
        }
    }

    /// Parameters of this layer alone (nested layers included).
    pub fn param_count(&self) -> usize {
        match &self.kind {
            LayerKind::Linear { fan_out, .. } | LayerKind::Conv2d { c_out: fan_out, .. } => {
                self.weight_count() + if self.has_bias { *fan_out } else { 0 }
            }
            LayerKind::BatchNorm { channels } => 2 * channels,
            LayerKind::Relu | LayerKind::Pool => 0,
            LayerKind::Residual { pre, body, shortcut } => {
                pre.iter().chain(body).chain(shortcut.iter().map(|s| s.as_ref())).map(LayerSpec::param_count).sum()
            }
        }
    }

    /// Dense multiply-add FLOPs (2 per MAC) of a weight layer.
    pub fn dense_flops(&self) -> u64 {
        match self.kind {
            LayerKind::Linear { fan_in, fan_out } => 2 * (fan_in * fan_out) as u64,
            LayerKind::Conv2d { c_in, c_out, kernel, .. } => {
                let spatial: usize = self.out_shape[1..].iter().product();
                2 * (c_in * c_out * kernel * kernel * spatial) as u64
            }
            _ => 0,
        }
    }
}

/// How a network was produced; enough to rebuild it or a thinner variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Architecture {
    Mlp { input: usize, hidden: Vec<usize>, classes: usize },
    /// conv(3×3) → bn → relu → conv(3×3, stride 2) → bn → relu → pool → linear.
    CnnSmall { input: [usize; 3], channels: [usize; 2], classes: usize },
    /// Wide ResNet; `widths = [stem, group1, group2, group3]`.
    Wrn { depth: usize, widths: [usize; 4], classes: usize, input: [usize; 3] },
}

/// Which weight layers are excluded from pruning.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PruneScope {
    pub exempt_classifier: bool,
    pub exempt: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub arch: Architecture,
    pub scope: PruneScope,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// All conv/linear layers in forward order, residual blocks expanded as
    /// pre, body, shortcut.
    pub fn weight_layers(&self) -> Vec<&LayerSpec> {
        fn walk<'a>(layers: &'a [LayerSpec], out: &mut Vec<&'a LayerSpec>) {
            for l in layers {
                match &l.kind {
                    LayerKind::Residual { pre, body, shortcut } => {
                        walk(pre, out);
                        walk(body, out);
                        if let Some(s) = shortcut {
                            walk(std::slice::from_ref(s.as_ref()), out);
                        }
                    }
                    _ if l.is_weight_layer() => out.push(l),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }

    pub fn prunable_layers(&self) -> Vec<&LayerSpec> {
        self.weight_layers().into_iter().filter(|l| l.prunable).collect()
    }

    /// Batch-norm layers in forward order.
    pub fn batchnorm_channels(&self) -> Vec<usize> {
        fn walk(layers: &[LayerSpec], out: &mut Vec<usize>) {
            for l in layers {
                match &l.kind {
                    LayerKind::Residual { pre, body, shortcut } => {
                        walk(pre, out);
                        walk(body, out);
                        if let Some(s) = shortcut {
                            walk(std::slice::from_ref(s.as_ref()), out);
                        }
                    }
                    LayerKind::BatchNorm { channels } => out.push(*channels),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn dense_flops(&self) -> u64 {
        self.weight_layers().iter().map(|l| l.dense_flops()).sum()
    }
}

/// Total parameters: conv `C_in·C_out·k²`, linear `fan_in·fan_out`, plus
/// biases and batch-norm affine terms.
pub fn count_params(spec: &NetworkSpec) -> usize {
    spec.param_count()
}

/// Dense FLOPs, `2·C_in·C_out·H_out·W_out·k²` per conv and
/// `2·fan_in·fan_out` per linear layer.
pub fn count_flops(spec: &NetworkSpec) -> u64 {
    spec.dense_flops()
}

/// FLOPs after pruning, each weight layer scaled by its density. `sparsity`
/// is indexed like [`NetworkSpec::weight_layers`].
pub fn count_flops_pruned(spec: &NetworkSpec, sparsity: &[f64]) -> Result<f64> {
    let layers = spec.weight_layers();
    if layers.len() != sparsity.len() {
        return Err(Error::dim(format!("{} sparsities for {} weight layers", sparsity.len(), layers.len())));
    }
    Ok(layers.iter().zip(sparsity).map(|(l, s)| (1.0 - s) * l.dense_flops() as f64).sum())
}

struct Builder<'a> {
    shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    scope: &'a PruneScope,
}

impl<'a> Builder<'a> {
    fn new(shape: Vec<usize>, scope: &'a PruneScope) -> Self {
        Builder { shape, layers: Vec::new(), scope }
    }

    fn push(&mut self, name: String, kind: LayerKind, weight: bool, out_shape: Vec<usize>) {
        let prunable = weight && !self.scope.exempt.iter().any(|e| e == &name);
        self.layers.push(LayerSpec {
            name,
            kind,
            prunable,
            has_bias: weight,
            in_shape: std::mem::replace(&mut self.shape, out_shape.clone()),
            out_shape,
        });
    }

    fn conv(&mut self, name: String, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Result<()> {
        let [c_in, h, w] = self.shape[..] else {
            return Err(Error::dim(format!("{name}: conv needs [C, H, W] input, got {:?}", self.shape)));
        };
        let ext = |n| {
            out_extent(n, kernel, stride, pad)
                .ok_or_else(|| Error::dim(format!("{name}: kernel {kernel} does not fit input {n} (pad {pad})")))
        };
        let out = vec![c_out, ext(h)?, ext(w)?];
        self.push(name, LayerKind::Conv2d { c_in, c_out, kernel, stride, pad }, true, out);
        Ok(())
    }

    fn linear(&mut self, name: String, fan_out: usize) -> Result<()> {
        let [fan_in] = self.shape[..] else {
            return Err(Error::dim(format!("{name}: linear needs flat input, got {:?}", self.shape)));
        };
        self.push(name, LayerKind::Linear { fan_in, fan_out }, true, vec![fan_out]);
        Ok(())
    }

    fn bn(&mut self, name: String) {
        let channels = self.shape[0];
        let shape = self.shape.clone();
        self.push(name, LayerKind::BatchNorm { channels }, false, shape);
    }

    fn relu(&mut self, name: String) {
        let shape = self.shape.clone();
        self.push(name, LayerKind::Relu, false, shape);
    }

    fn pool(&mut self, name: String) {
        let out = vec![self.shape[0]];
        self.push(name, LayerKind::Pool, false, out);
    }

    fn finish(self) -> Vec<LayerSpec> {
        self.layers
    }
}

fn nonzero(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::contract(format!("{name} must be positive")));
    }
    Ok(())
}

/// Builds any [`Architecture`].
pub fn build(arch: &Architecture, scope: &PruneScope) -> Result<NetworkSpec> {
    let (input_shape, classes, layers) = match arch {
        Architecture::Mlp { input, hidden, classes } => {
            nonzero("input width", *input)?;
            nonzero("class count", *classes)?;
            let mut b = Builder::new(vec![*input], scope);
            for (i, &h) in hidden.iter().enumerate() {
                nonzero("hidden width", h)?;
                b.linear(format!("fc{}", i + 1), h)?;
                b.relu(format!("relu{}", i + 1));
            }
            b.linear(format!("fc{}", hidden.len() + 1), *classes)?;
            (vec![*input], *classes, b.finish())
        }
        Architecture::CnnSmall { input, channels, classes } => {
            for &c in input.iter().chain(channels) {
                nonzero("channel/extent", c)?;
            }
            nonzero("class count", *classes)?;
            let mut b = Builder::new(input.to_vec(), scope);
            b.conv("conv1".into(), channels[0], 3, 1, 1)?;
            b.bn("bn1".into());
            b.relu("relu1".into());
            b.conv("conv2".into(), channels[1], 3, 2, 1)?;
            b.bn("bn2".into());
            b.relu("relu2".into());
            b.pool("pool".into());
            b.linear("fc".into(), *classes)?;
            (input.to_vec(), *classes, b.finish())
        }
        Architecture::Wrn { depth, widths, classes, input } => {
            if *depth < 10 || (depth - 4) % 6 != 0 {
                return Err(Error::contract(format!("WRN depth {depth} must satisfy (depth − 4) % 6 == 0")));
            }
            for &w in widths.iter().chain(input) {
                nonzero("WRN width/extent", w)?;
            }
            nonzero("class count", *classes)?;
            let blocks = (depth - 4) / 6;
            let mut b = Builder::new(input.to_vec(), scope);
            b.conv("conv1".into(), widths[0], 3, 1, 1)?;
            for g in 0..3 {
                let out = widths[g + 1];
                for i in 0..blocks {
                    let stride = if g > 0 && i == 0 { 2 } else { 1 };
                    let name = format!("group{}.block{}", g + 1, i + 1);
                    let block = wrn_block(&name, &b.shape, out, stride, scope)?;
                    b.layers.push(block);
                    b.shape = b.layers.last().unwrap().out_shape.clone();
                }
            }
            b.bn("bn".into());
            b.relu("relu".into());
            b.pool("pool".into());
            b.linear("fc".into(), *classes)?;
            (input.to_vec(), *classes, b.finish())
        }
    };
    let mut spec = NetworkSpec { arch: arch.clone(), scope: scope.clone(), input_shape, classes, layers };
    if scope.exempt_classifier {
        if let Some(last) = spec.layers.iter_mut().rev().find(|l| l.is_weight_layer()) {
            last.prunable = false;
        }
    }
    Ok(spec)
}

fn wrn_block(name: &str, in_shape: &[usize], out: usize, stride: usize, scope: &PruneScope) -> Result<LayerSpec> {
    let c_in = in_shape[0];
    let mut pre = Builder::new(in_shape.to_vec(), scope);
    pre.bn(format!("{name}.bn1"));
    pre.relu(format!("{name}.relu1"));
    let pre_shape = pre.shape.clone();
    let mut body = Builder::new(pre_shape.clone(), scope);
    body.conv(format!("{name}.conv1"), out, 3, stride, 1)?;
    body.bn(format!("{name}.bn2"));
    body.relu(format!("{name}.relu2"));
    body.conv(format!("{name}.conv2"), out, 3, 1, 1)?;
    let out_shape = body.shape.clone();
    let shortcut = if c_in != out || stride != 1 {
        let mut sc = Builder::new(pre_shape, scope);
        sc.conv(format!("{name}.shortcut"), out, 1, stride, 0)?;
        Some(Box::new(sc.finish().pop().unwrap()))
    } else {
        None
    };
    Ok(LayerSpec {
        name: name.to_string(),
        kind: LayerKind::Residual { pre: pre.finish(), body: body.finish(), shortcut },
        prunable: false,
        has_bias: false,
        in_shape: in_shape.to_vec(),
        out_shape,
    })
}

pub fn build_mlp(input: usize, hidden: &[usize], classes: usize) -> Result<NetworkSpec> {
    build(&Architecture::Mlp { input, hidden: hidden.to_vec(), classes }, &PruneScope::default())
}

pub fn build_cnn_small(input: [usize; 3], channels: [usize; 2], classes: usize) -> Result<NetworkSpec> {
    build(&Architecture::CnnSmall { input, channels, classes }, &PruneScope::default())
}

/// WRN-`depth`-`k` for 3×32×32 inputs.
pub fn build_wrn(depth: usize, k: usize, classes: usize) -> Result<NetworkSpec> {
    nonzero("width multiplier", k)?;
    build(
        &Architecture::Wrn { depth, widths: [16, 16 * k, 32 * k, 64 * k], classes, input: [3, 32, 32] },
        &PruneScope::default(),
    )
}
