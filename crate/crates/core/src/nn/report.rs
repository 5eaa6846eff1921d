use serde::{Deserialize, Serialize};

use super::network::Network;
use super::spec::NetworkSpec;
use crate::error::{Error, Result};

/// Per-layer weighting used by the weighted and budget losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    #[default]
    Params,
    Flops,
    Uniform,
}

/// Normalized contribution weights over the prunable layers.
pub fn contribution_weights(spec: &NetworkSpec, resource: Resource) -> Result<Vec<f64>> {
    let layers = spec.prunable_layers();
    if layers.is_empty() {
        return Err(Error::contract("network has no prunable layers"));
    }
    let raw: Vec<f64> = layers
        .iter()
        .map(|l| match resource {
            Resource::Params => l.weight_count() as f64,
            Resource::Flops => l.dense_flops() as f64,
            Resource::Uniform => 1.0,
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub prunable: bool,
    pub weights: usize,
    pub bound: f64,
    pub sparsity: f64,
    pub kept_params: usize,
    pub dense_flops: u64,
    pub kept_flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerReport>,
    /// Fraction of conv/linear weights pruned.
    pub param_sparsity: f64,
    /// Fraction of conv/linear FLOPs removed.
    pub flop_sparsity: f64,
}

impl SparsityReport {
    pub fn param_density(&self) -> f64 {
        1.0 - self.param_sparsity
    }

    pub fn flop_density(&self) -> f64 {
        1.0 - self.flop_sparsity
    }

    pub fn sparsities(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.sparsity).collect()
    }
}

/// Sparsity attained by the current weights and bounds. Masks are
/// recomputed first so the report never reflects a stale forward pass.
pub fn attained_sparsity(net: &mut Network) -> SparsityReport {
    let spec = net.spec().clone();
    let mut layers = Vec::new();
    for (layer, p) in spec.weight_layers().into_iter().zip(net.params.weights.iter_mut()) {
        let (bound, pruned) = if layer.prunable {
            p.pruned_weights();
            (p.bound(), p.pruned_count())
        } else {
            (0.0, 0)
        };
        let n = p.weights.len();
        let sparsity = pruned as f64 / n as f64;
        let dense_flops = layer.dense_flops();
        layers.push(LayerReport {
            name: layer.name.clone(),
            prunable: layer.prunable,
            weights: n,
            bound,
            sparsity,
            kept_params: n - pruned,
            dense_flops,
            kept_flops: (1.0 - sparsity) * dense_flops as f64,
        });
    }
    let total_w: usize = layers.iter().map(|l| l.weights).sum();
    let kept_w: usize = layers.iter().map(|l| l.kept_params).sum();
    let total_f: f64 = layers.iter().map(|l| l.dense_flops as f64).sum();
    let kept_f: f64 = layers.iter().map(|l| l.kept_flops).sum();
    SparsityReport {
        layers,
        param_sparsity: 1.0 - kept_w as f64 / total_w as f64,
        flop_sparsity: 1.0 - kept_f / total_f,
    }
}
