//! Datasets: seed-deterministic synthetic generators and a raw-image
//! manifest format.
//!
//! Manifest layout: a CSV file with header `path,label,split`, where `path`
//! is relative to the manifest's directory, `label` is a class index and
//! `split` is `train` or `test`. Every image file holds `C·H·W` bytes in
//! channel-major order.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples of one split: `x` is `[N, ...]`, `y[i] < classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let row: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(row * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.x.data()[i * row..(i + 1) * row]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor::from_parts(shape, data), indices.iter().map(|&i| self.y[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub classes: usize,
}

impl Dataset {
    pub fn input_shape(&self) -> &[usize] {
        self.train.sample_shape()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Two isotropic unit-variance Gaussians whose means are `separation`
    /// apart along the diagonal.
    TwoGaussians { train: usize, test: usize, dim: usize, separation: f64 },
    /// Concentric rings in the plane, class `k` at radius `k + 1`.
    Rings { train: usize, test: usize, classes: usize, noise: f64 },
    /// Single-channel images; each class is a fixed 3×3 pattern stamped at a
    /// random position over noise, alongside random distractor patterns.
    Motifs { train: usize, test: usize, classes: usize, size: usize, noise: f64, distractors: usize },
    Manifest { path: PathBuf, shape: [usize; 3] },
}

pub fn load(source: &DatasetSource, seed: u64) -> Result<Dataset> {
    match source {
        DatasetSource::TwoGaussians { train, test, dim, separation } => {
            two_gaussians(*train, *test, *dim, *separation, seed)
        }
        DatasetSource::Rings { train, test, classes, noise } => rings(*train, *test, *classes, *noise, seed),
        DatasetSource::Motifs { train, test, classes, size, noise, distractors } => {
            motifs(*train, *test, *classes, *size, *noise, *distractors, seed)
        }
        DatasetSource::Manifest { path, shape } => ingest_manifest(path, *shape),
    }
}

fn check_sizes(train: usize, test: usize) -> Result<()> {
    if train == 0 || test == 0 {
        return Err(Error::contract("train and test splits must be non-empty"));
    }
    Ok(())
}

fn split(x: Vec<f64>, y: Vec<usize>, sample: &[usize], train: usize, classes: usize) -> Dataset {
    let row: usize = sample.iter().product();
    let make = |x: &[f64], y: &[usize]| {
        let mut shape = vec![y.len()];
        shape.extend_from_slice(sample);
        Split { x: Tensor::from_parts(shape, x.to_vec()), y: y.to_vec() }
    };
    Dataset {
        train: make(&x[..train * row], &y[..train]),
        test: make(&x[train * row..], &y[train..]),
        classes,
    }
}

pub fn two_gaussians(train: usize, test: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    check_sizes(train, test)?;
    if dim == 0 {
        return Err(Error::contract("two_gaussians: dim must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = 0.5 * separation / (dim as f64).sqrt();
    let n = train + test;
    let (mut x, mut y) = (Vec::with_capacity(n * dim), Vec::with_capacity(n));
    for _ in 0..n {
        let label = rng.random_range(0..2usize);
        let sign = if label == 0 { -1.0 } else { 1.0 };
        for _ in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            x.push(sign * offset + z);
        }
        y.push(label);
    }
    Ok(split(x, y, &[dim], train, 2))
}

pub fn rings(train: usize, test: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_sizes(train, test)?;
    if classes < 2 {
        return Err(Error::contract("rings: need at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = train + test;
    let (mut x, mut y) = (Vec::with_capacity(2 * n), Vec::with_capacity(n));
    for _ in 0..n {
        let label = rng.random_range(0..classes);
        let angle = rng.random_range(0.0..2.0 * PI);
        let z: f64 = rng.sample(StandardNormal);
        let r = label as f64 + 1.0 + noise * z;
        x.push(r * angle.cos());
        x.push(r * angle.sin());
        y.push(label);
    }
    Ok(split(x, y, &[2], train, classes))
}

fn random_pattern(rng: &mut ChaCha8Rng) -> [f64; 9] {
    let mut p = [0.0; 9];
    for v in p.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    p.map(|v| 3.0 * v / norm)
}

pub fn motifs(
    train: usize,
    test: usize,
    classes: usize,
    size: usize,
    noise: f64,
    distractors: usize,
    seed: u64,
) -> Result<Dataset> {
    check_sizes(train, test)?;
    if classes < 2 || size < 3 {
        return Err(Error::contract("motifs: need >= 2 classes and images of at least 3x3"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patterns: Vec<[f64; 9]> = (0..classes).map(|_| random_pattern(&mut rng)).collect();
    let clutter: Vec<[f64; 9]> = (0..classes.max(4)).map(|_| random_pattern(&mut rng)).collect();
    let stamp = |img: &mut [f64], p: &[f64; 9], rng: &mut ChaCha8Rng| {
        let (r0, c0) = (rng.random_range(0..=size - 3), rng.random_range(0..=size - 3));
        for r in 0..3 {
            for c in 0..3 {
                img[(r0 + r) * size + c0 + c] += p[r * 3 + c];
            }
        }
    };
    let n = train + test;
    let (mut x, mut y) = (Vec::with_capacity(n * size * size), Vec::with_capacity(n));
    for _ in 0..n {
        let label = rng.random_range(0..classes);
        let mut img: Vec<f64> = (0..size * size).map(|_| noise * rng.sample::<f64, _>(StandardNormal)).collect();
        stamp(&mut img, &patterns[label], &mut rng);
        for _ in 0..distractors {
            let k = rng.random_range(0..clutter.len());
            stamp(&mut img, &clutter[k], &mut rng);
        }
        x.extend(img);
        y.push(label);
    }
    Ok(split(x, y, &[1, size, size], train, classes))
}

struct ManifestRow {
    path: PathBuf,
    label: usize,
    train: bool,
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let bad = |msg: String| Error::Dataset { path: path.to_path_buf(), msg };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| bad(format!("manifest has no `{name}` column")))
    };
    let (pc, lc, sc) = (col("path")?, col("label")?, col("split")?);
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let line = i + 2;
        let file = rec.get(pc).unwrap_or("");
        let label = rec
            .get(lc)
            .and_then(|l| l.parse::<usize>().ok())
            .ok_or_else(|| bad(format!("line {line} ({file}): label is not a class index")))?;
        let train = match rec.get(sc) {
            Some("train") => true,
            Some("test") => false,
            other => return Err(bad(format!("line {line} ({file}): unknown split {other:?}"))),
        };
        rows.push(ManifestRow { path: base.join(file), label, train });
    }
    Ok(rows)
}

/// Loads a manifest dataset. Pixels are scaled to `[0, 1]` and normalized
/// per channel with statistics of the train split only.
pub fn ingest_manifest(path: &Path, shape: [usize; 3]) -> Result<Dataset> {
    let rows = read_manifest(path)?;
    let row_len: usize = shape.iter().product();
    if row_len == 0 {
        return Err(Error::contract("image shape must be non-zero"));
    }
    let mut seen = HashSet::new();
    let (mut train_x, mut train_y, mut test_x, mut test_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for row in &rows {
        if !seen.insert(row.path.clone()) {
            return Err(Error::Dataset { path: row.path.clone(), msg: "listed more than once".into() });
        }
        let bytes = std::fs::read(&row.path).map_err(|e| Error::Dataset {
            path: row.path.clone(),
            msg: format!("cannot read image: {e}"),
        })?;
        if bytes.len() != row_len {
            return Err(Error::Dataset {
                path: row.path.clone(),
                msg: format!("expected {row_len} bytes for shape {shape:?}, found {}", bytes.len()),
            });
        }
        let (x, y) = if row.train { (&mut train_x, &mut train_y) } else { (&mut test_x, &mut test_y) };
        x.extend(bytes.iter().map(|&b| b as f64 / 255.0));
        y.push(row.label);
    }
    if train_y.is_empty() || test_y.is_empty() {
        return Err(Error::Dataset { path: path.to_path_buf(), msg: "both splits need at least one image".into() });
    }
    let classes = train_y.iter().chain(&test_y).max().map_or(0, |m| m + 1);
    let plane = shape[1] * shape[2];
    for c in 0..shape[0] {
        let vals = train_x.chunks(row_len).flat_map(|img| &img[c * plane..(c + 1) * plane]);
        let n = (train_y.len() * plane) as f64;
        let mean = vals.clone().sum::<f64>() / n;
        let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        for img in train_x.chunks_mut(row_len).chain(test_x.chunks_mut(row_len)) {
            for v in &mut img[c * plane..(c + 1) * plane] {
                *v = (*v - mean) / std;
            }
        }
    }
    let make = |x: Vec<f64>, y: Vec<usize>| {
        let mut s = vec![y.len()];
        s.extend_from_slice(&shape);
        Split { x: Tensor::from_parts(s, x), y }
    };
    Ok(Dataset { train: make(train_x, train_y), test: make(test_x, test_y), classes })
}
