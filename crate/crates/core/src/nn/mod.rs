//! Network descriptions, parameter counting and the executable network.

pub mod network;
pub mod report;
pub mod spec;

pub use network::{BatchNormParams, ForwardOptions, ForwardPass, NetParams, Network};
pub use report::{attained_sparsity, contribution_weights, LayerReport, Resource, SparsityReport};
pub use spec::{
    build, build_cnn_small, build_mlp, build_wrn, count_flops, count_flops_pruned, count_params, Architecture,
    LayerKind, LayerSpec, NetworkSpec, PruneScope,
};
