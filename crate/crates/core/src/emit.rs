//! CSV and text reports written by the command-line runner.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::equiv::TradeoffRow;
use crate::error::{Error, Result};
use crate::nn::SparsityReport;
use crate::train::StepMetrics;

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

#[derive(Serialize)]
struct ConvergenceRow {
    iter: usize,
    epoch: usize,
    task_loss: f64,
    sparsity_loss: f64,
    param_sparsity: f64,
    lr: f64,
}

/// Writes `rows` to `convergence.csv`, creating it with a header unless
/// `append` is set and the file exists.
pub fn write_convergence(path: &Path, rows: &[StepMetrics], append: bool) -> Result<()> {
    let header = !(append && path.exists());
    let mut file = OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if header {
        file.write_all(b"iter,epoch,task_loss,sparsity_loss,param_sparsity,lr\n").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    for m in rows {
        let row = ConvergenceRow {
            iter: m.iter,
            epoch: m.epoch,
            task_loss: m.task_loss,
            sparsity_loss: m.sparsity_loss,
            param_sparsity: m.param_sparsity,
            lr: m.lr,
        };
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Drops rows of an existing `convergence.csv` logged at or after `iter`,
/// so a resumed run appends exactly what an uninterrupted one would have.
pub fn truncate_convergence(path: &Path, iter: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 || line.split(',').next().and_then(|v| v.parse::<usize>().ok()).is_some_and(|v| v < iter);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct LayerRow<'a> {
    layer: &'a str,
    prunable: bool,
    weights: usize,
    sparsity: f64,
    kept_params: usize,
    kept_flops: f64,
}

pub fn write_layers(path: &Path, report: &SparsityReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for l in &report.layers {
        let row = LayerRow {
            layer: &l.name,
            prunable: l.prunable,
            weights: l.weights,
            sparsity: l.sparsity,
            kept_params: l.kept_params,
            kept_flops: l.kept_flops,
        };
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct TradeoffCsvRow<'a> {
    ratio: f64,
    params: usize,
    mode: &'a str,
    error: f64,
}

pub fn write_tradeoff(path: &Path, rows: &[TradeoffRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(TradeoffCsvRow { ratio: r.ratio, params: r.params, mode: &r.mode, error: r.error })
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Final numbers of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub method: String,
    pub params: usize,
    pub kept_params: usize,
    pub param_sparsity: f64,
    pub flop_sparsity: f64,
    pub test_accuracy: f64,
    pub epochs: usize,
}

impl Summary {
    pub fn new(method: &str, params: usize, report: &SparsityReport, test_accuracy: f64, epochs: usize) -> Self {
        let pruned: usize = report.layers.iter().map(|l| l.weights - l.kept_params).sum();
        Summary {
            method: method.to_string(),
            params,
            kept_params: params - pruned,
            param_sparsity: report.param_sparsity,
            flop_sparsity: report.flop_sparsity,
            test_accuracy,
            epochs,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<18} {:>12} {:>12} {:>10} {:>10} {:>8}\n",
            "method", "#params", "kept", "sparsity%", "flops%", "acc%"
        ));
        s.push_str(&format!(
            "{:<18} {:>12} {:>12} {:>10.2} {:>10.2} {:>8.2}\n",
            self.method,
            self.params,
            self.kept_params,
            100.0 * self.param_sparsity,
            100.0 * self.flop_sparsity,
            100.0 * self.test_accuracy
        ));
        s.push_str(&format!("epochs: {}\n", self.epochs));
        s
    }
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(summary.render().as_bytes()).map_err(|e| Error::io(path, e))
}
