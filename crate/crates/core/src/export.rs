//! Compressed sparse row export of pruned weights.
//!
//! Each weight tensor is viewed as a `[C_out, rest]` matrix. File layout
//! (little-endian): magic `SPRSCSR1`, a `u32` layer count, then per layer
//! the name (`u32` length + UTF-8), the shape (`u32` rank + `u32` dims),
//! `u32` nnz, `rows + 1` `u32` row offsets, nnz `u32` column indices and nnz
//! `f32` values.

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SPRSCSR1";

#[derive(Debug, Clone, PartialEq)]
pub struct CsrLayer {
    pub name: String,
    pub shape: Vec<usize>,
    pub row_ptr: Vec<u32>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f32>,
}

impl CsrLayer {
    pub fn from_dense(name: &str, w: &Tensor) -> Self {
        let rows = w.shape()[0];
        let cols = w.len() / rows.max(1);
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let (mut col_idx, mut values) = (Vec::new(), Vec::new());
        row_ptr.push(0);
        for row in w.data().chunks(cols.max(1)) {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(j as u32);
                    values.push(v as f32);
                }
            }
            row_ptr.push(col_idx.len() as u32);
        }
        CsrLayer { name: name.to_string(), shape: w.shape().to_vec(), row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn to_dense(&self) -> Result<Tensor> {
        let n: usize = self.shape.iter().product();
        let rows = self.row_ptr.len() - 1;
        let cols = n / rows.max(1);
        let mut data = vec![0.0; n];
        for r in 0..rows {
            for k in self.row_ptr[r] as usize..self.row_ptr[r + 1] as usize {
                data[r * cols + self.col_idx[k] as usize] = self.values[k] as f64;
            }
        }
        Tensor::new(self.shape.clone(), data)
    }
}

/// The pruned weights of every weight layer, in network order.
pub fn sparse_layers(net: &mut Network) -> Vec<CsrLayer> {
    let names = net.weight_names();
    net.params.weights.iter_mut().zip(names).map(|(p, name)| CsrLayer::from_dense(&name, &p.pruned_weights())).collect()
}

pub fn encode_csr(layers: &[CsrLayer]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    u32le(&mut out, layers.len());
    for l in layers {
        u32le(&mut out, l.name.len());
        out.extend_from_slice(l.name.as_bytes());
        u32le(&mut out, l.shape.len());
        l.shape.iter().for_each(|&d| u32le(&mut out, d));
        u32le(&mut out, l.nnz());
        l.row_ptr.iter().chain(&l.col_idx).for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        l.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| CheckpointError::Truncated(format!("sparse export at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_csr(bytes: &[u8]) -> Result<Vec<CsrLayer>> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let mut r = Reader { bytes, pos: 8 };
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Mismatch("layer name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let rows = *shape.first().ok_or_else(|| CheckpointError::Mismatch(format!("{name}: empty shape")))?;
        let nnz = r.u32()? as usize;
        let row_ptr = (0..=rows).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let col_idx = (0..nnz).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let values = (0..nnz).map(|_| r.u32().map(f32::from_bits)).collect::<Result<Vec<_>>>()?;
        layers.push(CsrLayer { name, shape, row_ptr, col_idx, values });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Mismatch(format!("{} trailing bytes", bytes.len() - r.pos)).into());
    }
    Ok(layers)
}

/// Writes the export and returns its size in bytes.
pub fn write_sparse(path: &Path, layers: &[CsrLayer]) -> Result<usize> {
    let bytes = encode_csr(layers);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}
