//! Dense-equivalent baselines and error-vs-budget trade-off curves.
//!
//! A dense equivalent keeps the architecture but multiplies every internal
//! channel (or hidden) width by `√r_c`, rounding down, so its weight count
//! is roughly `r_c` times the original. Image channels and the class count
//! are never scaled.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{build, Architecture, NetworkSpec};
use crate::prune::SparsityTarget;
use crate::train::{run_experiment, Mode, ObjectiveKind, ObjectiveSpec, RunOutput, TrainConfig};

fn scale(width: usize, root: f64, layer: &str) -> Result<usize> {
    let w = (root * width as f64).floor() as usize;
    if w == 0 {
        return Err(Error::contract(format!("{layer}: width {width} scaled by {root:.4} rounds to zero channels")));
    }
    Ok(w)
}

fn check_ratio(r: f64) -> Result<()> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::contract(format!("compression ratio {r} outside (0, 1]")));
    }
    Ok(())
}

/// A thinner unpruned network whose weight budget matches a fraction `r_c`
/// of `base`.
pub fn dense_equivalent(base: &NetworkSpec, r_c: f64) -> Result<NetworkSpec> {
    check_ratio(r_c)?;
    let root = r_c.sqrt();
    let arch = match &base.arch {
        Architecture::Mlp { input, hidden, classes } => Architecture::Mlp {
            input: *input,
            hidden: hidden.iter().enumerate().map(|(i, &h)| scale(h, root, &format!("fc{}", i + 1))).collect::<Result<_>>()?,
            classes: *classes,
        },
        Architecture::CnnSmall { input, channels, classes } => Architecture::CnnSmall {
            input: *input,
            channels: [scale(channels[0], root, "conv1")?, scale(channels[1], root, "conv2")?],
            classes: *classes,
        },
        Architecture::Wrn { depth, widths, classes, input } => Architecture::Wrn {
            depth: *depth,
            widths: [
                scale(widths[0], root, "conv1")?,
                scale(widths[1], root, "group1")?,
                scale(widths[2], root, "group2")?,
                scale(widths[3], root, "group3")?,
            ],
            classes: *classes,
            input: *input,
        },
    };
    build(&arch, &base.scope)
}

/// Channel widths of one weight layer before and after thinning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMap {
    pub layer: String,
    pub c_in: usize,
    pub c_out: usize,
    pub scaled_in: usize,
    pub scaled_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivSpec {
    pub base: NetworkSpec,
    pub ratio: f64,
    pub thin: NetworkSpec,
    pub channels: Vec<ChannelMap>,
}

impl EquivSpec {
    pub fn new(base: &NetworkSpec, ratio: f64) -> Result<Self> {
        let thin = dense_equivalent(base, ratio)?;
        let thin_layers = thin.weight_layers();
        let mut channels = Vec::new();
        for l in base.weight_layers() {
            let Some(t) = thin_layers.iter().find(|t| t.name == l.name) else { continue };
            let (c_in, c_out) = l.channels().expect("weight layer");
            let (scaled_in, scaled_out) = t.channels().expect("weight layer");
            channels.push(ChannelMap { layer: l.name.clone(), c_in, c_out, scaled_in, scaled_out });
        }
        Ok(EquivSpec { base: base.clone(), ratio, thin, channels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffRow {
    pub ratio: f64,
    /// `dense_equivalent` or a pruning mode name.
    pub mode: String,
    /// Parameters of the thin network, or parameters left after pruning.
    pub params: usize,
    /// Test error; NaN when the run failed.
    pub error: f64,
    pub failure: Option<String>,
}

/// Training setup of one pruned curve point at parameter budget `ratio`.
pub fn curve_config(base: &TrainConfig, mode: Mode, ratio: f64) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    cfg.mode = mode;
    match mode {
        Mode::Dense => {}
        Mode::FixedBs | Mode::FixedGa => {
            let mut t = base.target.unwrap_or(SparsityTarget::with_sparsity(0.0)?);
            t.s = 1.0 - ratio;
            cfg.target = Some(t);
        }
        Mode::Adaptive => {
            let mut o = base.objective.unwrap_or_default();
            if !matches!(o.kind, ObjectiveKind::BudgetQuadratic | ObjectiveKind::BudgetHinge) {
                o = ObjectiveSpec { kind: ObjectiveKind::BudgetQuadratic, ..o };
            }
            o.budget_p = Some(ratio);
            cfg.objective = Some(o);
        }
    }
    Ok(cfg)
}

fn kept_params(out: &RunOutput) -> usize {
    let pruned: usize = out.report.layers.iter().map(|l| l.weights - l.kept_params).sum();
    out.net.spec().param_count() - pruned
}

/// Trains, for every ratio, the dense equivalent and each requested mode at
/// the matching budget. Failed runs become rows with a NaN error; the
/// remaining rows still run. With `parallel`, rows are trained on the rayon
/// pool; each run stays sequential and seed-deterministic, so the table is
/// identical either way.
pub fn tradeoff_curve(
    base: &NetworkSpec,
    ratios: &[f64],
    modes: &[Mode],
    cfg: &TrainConfig,
    data: &Dataset,
    parallel: bool,
) -> Result<Vec<TradeoffRow>> {
    for &r in ratios {
        check_ratio(r)?;
    }
    let jobs: Vec<(f64, Option<Mode>)> =
        ratios.iter().flat_map(|&r| std::iter::once((r, None)).chain(modes.iter().map(move |&m| (r, Some(m))))).collect();
    let run = |&(ratio, mode): &(f64, Option<Mode>)| -> TradeoffRow {
        let name = mode.map_or("dense_equivalent", Mode::name).to_string();
        let result = match mode {
            None => dense_equivalent(base, ratio).and_then(|thin| {
                let params = thin.param_count();
                let dense = TrainConfig { mode: Mode::Dense, ..cfg.clone() };
                run_experiment(&dense, thin, data).map(|o| (params, o.test_accuracy))
            }),
            Some(m) => curve_config(cfg, m, ratio)
                .and_then(|c| run_experiment(&c, base.clone(), data))
                .map(|o| (kept_params(&o), o.test_accuracy)),
        };
        match result {
            Ok((params, acc)) => TradeoffRow { ratio, mode: name, params, error: 1.0 - acc, failure: None },
            Err(e) => {
                log::error!("trade-off row ({ratio}, {name}) failed: {e}");
                TradeoffRow { ratio, mode: name, params: 0, error: f64::NAN, failure: Some(e.to_string()) }
            }
        }
    };
    Ok(if parallel { jobs.par_iter().map(run).collect() } else { jobs.iter().map(run).collect() })
}
