//! TOML experiment configuration.
//!
//! Every key has a default except `dataset.kind` and `arch.kind`. Unknown
//! keys are rejected by their full dotted path. [`ExperimentConfig::to_toml`]
//! writes the resolved configuration, which parses back to an identical
//! value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, DatasetSource};
use crate::error::{ConfigError, Error, Result};
use crate::nn::{build, Architecture, NetworkSpec, PruneScope, Resource};
use crate::prune::{GradientRoute, MeanMode, SparsityTarget};
use crate::tensor::Precision;
use crate::train::{Mode, ObjectiveKind, ObjectiveSpec, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoGaussians,
    Rings,
    Motifs,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<DatasetKind>,
    pub train: usize,
    pub test: usize,
    /// Feature count of `two_gaussians`.
    pub dim: usize,
    /// Distance between the `two_gaussians` class means.
    pub separation: f64,
    /// Class count of `rings` and `motifs`.
    pub classes: usize,
    /// Ring radius noise or per-pixel noise of `motifs`.
    pub noise: f64,
    pub size: usize,
    pub distractors: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// `[C, H, W]` of manifest images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
    /// Generator seed; defaults to the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: None,
            train: 2000,
            test: 1000,
            dim: 2,
            separation: 3.0,
            classes: 4,
            noise: 0.3,
            size: 12,
            distractors: 1,
            path: None,
            shape: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    CnnSmall,
    Wrn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<ArchKind>,
    pub hidden: Vec<usize>,
    pub channels: [usize; 2],
    pub depth: usize,
    /// WRN width multiplier `k`.
    pub width: usize,
    pub exempt_classifier: bool,
    pub exempt: Vec<String>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            kind: None,
            hidden: vec![64, 64],
            channels: [32, 64],
            depth: 16,
            width: 1,
            exempt_classifier: false,
            exempt: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub mode: Mode,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub restart_period: usize,
    pub route: GradientRoute,
    pub log_interval: usize,
    pub recompute_period: usize,
    pub bound_lr_scale: f64,
    pub bound_init: f64,
    pub bn_momentum: f64,
    pub mean_mode: MeanMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            mode: t.mode,
            lr: t.lr,
            lr_min: t.lr_min,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            restart_period: t.restart_period,
            route: t.route,
            log_interval: t.log_interval,
            recompute_period: t.recompute_period,
            bound_lr_scale: t.bound_lr_scale,
            bound_init: t.bound_init,
            bn_momentum: t.bn_momentum,
            mean_mode: t.mean_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    pub epsilon: f64,
    pub max_iters: usize,
}

impl Default for TargetSection {
    fn default() -> Self {
        TargetSection { s: None, epsilon: SparsityTarget::DEFAULT_EPSILON, max_iters: SparsityTarget::DEFAULT_MAX_ITERS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveSection {
    pub kind: ObjectiveKind,
    pub lambda: f64,
    pub lambda_p: f64,
    pub lambda_f: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget_f: Option<f64>,
    pub resource: Resource,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        let o = ObjectiveSpec::default();
        ObjectiveSection {
            kind: o.kind,
            lambda: o.lambda,
            lambda_p: o.lambda_p,
            lambda_f: o.lambda_f,
            budget_p: None,
            budget_f: None,
            resource: o.resource,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub ratios: Vec<f64>,
    pub modes: Vec<Mode>,
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// 32 or 64.
    pub precision: u32,
    pub threads: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub train: TrainSection,
    pub target: TargetSection,
    pub objective: ObjectiveSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            precision: 32,
            threads: 1,
            out: None,
            dataset: DatasetConfig::default(),
            arch: ArchConfig::default(),
            train: TrainSection::default(),
            target: TargetSection::default(),
            objective: ObjectiveSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

fn inconsistent(key: &str, msg: impl Into<String>) -> Error {
    ConfigError::Inconsistent { key: key.into(), msg: msg.into() }.into()
}

fn invalid(key: &str, msg: impl Into<String>) -> Error {
    ConfigError::Invalid { key: key.into(), msg: msg.into() }.into()
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        ConfigError::Syntax { line, column, msg: e.message().to_string() }
    })?;
    let mut unknown = Vec::new();
    let cfg: ExperimentConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string())).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        invalid(&format!("line {line}, column {column}"), e.message())
    })?;
    if let Some(key) = unknown.into_iter().next() {
        return Err(ConfigError::UnknownKey { key }.into());
    }
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        Precision::from_bits(self.precision).ok_or_else(|| invalid("precision", "must be 32 or 64"))?;
        if self.threads == 0 {
            return Err(invalid("threads", "must be >= 1"));
        }
        let kind = self.dataset.kind.ok_or(ConfigError::Missing { key: "dataset.kind".into() })?;
        if kind == DatasetKind::Manifest {
            if self.dataset.path.is_none() {
                return Err(inconsistent("dataset.path", "required for manifest datasets"));
            }
            if self.dataset.shape.is_none() {
                return Err(inconsistent("dataset.shape", "required for manifest datasets"));
            }
        }
        self.arch.kind.ok_or(ConfigError::Missing { key: "arch.kind".into() })?;
        match self.train.mode {
            Mode::FixedBs | Mode::FixedGa if self.target.s.is_none() => {
                return Err(inconsistent("target.s", format!("mode `{}` needs a target sparsity", self.train.mode.name())));
            }
            Mode::Adaptive
                if matches!(self.objective.kind, ObjectiveKind::BudgetQuadratic | ObjectiveKind::BudgetHinge)
                    && self.objective.budget_p.is_none()
                    && self.objective.budget_f.is_none() =>
            {
                return Err(inconsistent("objective.budget_p", "budget objectives need budget_p or budget_f"));
            }
            _ => {}
        }
        for &r in &self.sweep.ratios {
            if !(r > 0.0 && r <= 1.0) {
                return Err(invalid("sweep.ratios", format!("{r} outside (0, 1]")));
            }
        }
        self.train_config().validate().map_err(|e| invalid("train", e.to_string()))?;
        Ok(())
    }

    pub fn precision(&self) -> Precision {
        Precision::from_bits(self.precision).unwrap_or_default()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let target = self.target.s.map(|s| SparsityTarget { s, epsilon: self.target.epsilon, max_iters: self.target.max_iters });
        let o = &self.objective;
        let objective = (t.mode == Mode::Adaptive).then_some(ObjectiveSpec {
            kind: o.kind,
            lambda: o.lambda,
            lambda_p: o.lambda_p,
            lambda_f: o.lambda_f,
            budget_p: o.budget_p,
            budget_f: o.budget_f,
            resource: o.resource,
        });
        TrainConfig {
            lr: t.lr,
            lr_min: t.lr_min,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            restart_period: t.restart_period,
            mode: t.mode,
            objective,
            target: if t.mode.is_fixed() { target } else { None },
            route: t.route,
            seed: self.seed,
            precision: self.precision(),
            log_interval: t.log_interval,
            recompute_period: t.recompute_period,
            bound_lr_scale: t.bound_lr_scale,
            bound_init: t.bound_init,
            bn_momentum: t.bn_momentum,
            mean_mode: t.mean_mode,
        }
    }

    pub fn dataset_source(&self) -> Result<DatasetSource> {
        let d = &self.dataset;
        Ok(match d.kind.ok_or(ConfigError::Missing { key: "dataset.kind".into() })? {
            DatasetKind::TwoGaussians => {
                DatasetSource::TwoGaussians { train: d.train, test: d.test, dim: d.dim, separation: d.separation }
            }
            DatasetKind::Rings => DatasetSource::Rings { train: d.train, test: d.test, classes: d.classes, noise: d.noise },
            DatasetKind::Motifs => DatasetSource::Motifs {
                train: d.train,
                test: d.test,
                classes: d.classes,
                size: d.size,
                noise: d.noise,
                distractors: d.distractors,
            },
            DatasetKind::Manifest => DatasetSource::Manifest {
                path: d.path.clone().ok_or(ConfigError::Missing { key: "dataset.path".into() })?,
                shape: d.shape.ok_or(ConfigError::Missing { key: "dataset.shape".into() })?,
            },
        })
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        data::load(&self.dataset_source()?, self.dataset.seed.unwrap_or(self.seed))
    }

    /// The architecture sized for `input_shape` and `classes`.
    pub fn architecture(&self, input_shape: &[usize], classes: usize) -> Result<Architecture> {
        let a = &self.arch;
        let image = |kind: &str| -> Result<[usize; 3]> {
            input_shape.try_into().map_err(|_| inconsistent("arch.kind", format!("{kind} needs [C, H, W] inputs, dataset gives {input_shape:?}")))
        };
        Ok(match a.kind.ok_or(ConfigError::Missing { key: "arch.kind".into() })? {
            ArchKind::Mlp => {
                let [input] = input_shape else {
                    return Err(inconsistent("arch.kind", format!("mlp needs flat inputs, dataset gives {input_shape:?}")));
                };
                Architecture::Mlp { input: *input, hidden: a.hidden.clone(), classes }
            }
            ArchKind::CnnSmall => Architecture::CnnSmall { input: image("cnn_small")?, channels: a.channels, classes },
            ArchKind::Wrn => {
                let k = a.width;
                Architecture::Wrn { depth: a.depth, widths: [16, 16 * k, 32 * k, 64 * k], classes, input: image("wrn")? }
            }
        })
    }

    pub fn network_spec(&self, data: &Dataset) -> Result<NetworkSpec> {
        let arch = self.architecture(data.input_shape(), data.classes)?;
        let scope = PruneScope { exempt_classifier: self.arch.exempt_classifier, exempt: self.arch.exempt.clone() };
        build(&arch, &scope)
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }
}
