//! Binary checkpoints.
//!
//! Layout (little-endian): the 8-byte magic `SPRSCKPT`, a `u32` version,
//! the body, and a CRC-32 of everything before it. Dense weights are stored
//! together with bit-packed masks so pruned weights can return after a
//! resume.

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::nn::{build, Architecture, BatchNormParams, NetParams, Network, PruneScope};
use crate::prune::{MeanMode, PrunableParam};
use crate::tensor::Tensor;
use crate::train::{OptimizerState, RngState, TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"SPRSCKPT";
pub const VERSION: u32 = 1;

/// Everything needed to resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Resolved configuration as TOML.
    pub config: String,
    pub arch: Architecture,
    pub scope: PruneScope,
    /// Completed epochs and steps.
    pub epoch: usize,
    pub iter: usize,
    pub rng: RngState,
    pub params: NetParams,
    pub opt: OptimizerState,
}

impl Checkpoint {
    /// Rebuilds the network, checking that the stored parameters fit it.
    pub fn network(&self) -> Result<Network> {
        let spec = build(&self.arch, &self.scope)?;
        Network::from_parts(spec, self.params.clone())
            .map_err(|e| CheckpointError::Mismatch(e.to_string()).into())
    }

    /// Snapshot of a trainer between steps. `config` is the resolved
    /// configuration text echoed into the file.
    pub fn from_trainer(t: &Trainer, config: String) -> Self {
        let spec = t.net.spec();
        Checkpoint {
            config,
            arch: spec.arch.clone(),
            scope: spec.scope.clone(),
            epoch: t.epoch,
            iter: t.iter,
            rng: t.rng_state(),
            params: t.net.params.clone(),
            opt: t.opt.clone(),
        }
    }

    /// A trainer that continues from this snapshot.
    pub fn trainer(&self, cfg: TrainConfig, train_len: usize) -> Result<Trainer> {
        Trainer::from_state(cfg, self.network()?, self.opt.clone(), self.rng, self.epoch, self.iter, train_len)
    }
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.usize(b.len());
        self.0.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }
    fn usizes(&mut self, v: &[usize]) {
        self.usize(v.len());
        for &x in v {
            self.usize(x);
        }
    }
    fn tensor(&mut self, t: &Tensor) {
        self.usizes(t.shape());
        for &x in t.data() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(format!("ran out of data reading {what}")).into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| CheckpointError::Mismatch(format!("{what}: length {v} too large")).into())
    }
    /// A length prefix for items of `item` bytes, checked against the bytes left.
    fn len(&mut self, item: usize, what: &str) -> Result<usize> {
        let n = self.usize(what)?;
        if n.saturating_mul(item.max(1)) > self.buf.len() - self.pos {
            return Err(CheckpointError::Truncated(format!("{what}: {n} items do not fit")).into());
        }
        Ok(n)
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.len(1, what)?;
        self.take(n, what)
    }
    fn str(&mut self, what: &str) -> Result<String> {
        String::from_utf8(self.bytes(what)?.to_vec())
            .map_err(|_| CheckpointError::Mismatch(format!("{what} is not UTF-8")).into())
    }
    fn f64s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.len(8, what)?;
        (0..n).map(|_| self.f64(what)).collect()
    }
    fn usizes(&mut self, what: &str) -> Result<Vec<usize>> {
        let n = self.len(8, what)?;
        (0..n).map(|_| self.usize(what)).collect()
    }
    fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let shape = self.usizes(what)?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n.saturating_mul(8) <= self.buf.len() - self.pos).ok_or_else(|| {
            Error::from(CheckpointError::Truncated(format!("{what}: shape {shape:?} does not fit")))
        })?;
        let data = (0..n).map(|_| self.f64(what)).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| CheckpointError::Mismatch(format!("{what}: {e}")).into())
    }
}

fn write_arch(w: &mut Writer, arch: &Architecture, scope: &PruneScope) {
    match arch {
        Architecture::Mlp { input, hidden, classes } => {
            w.u8(0);
            w.usize(*input);
            w.usizes(hidden);
            w.usize(*classes);
        }
        Architecture::CnnSmall { input, channels, classes } => {
            w.u8(1);
            w.usizes(input);
            w.usizes(channels);
            w.usize(*classes);
        }
        Architecture::Wrn { depth, widths, classes, input } => {
            w.u8(2);
            w.usize(*depth);
            w.usizes(widths);
            w.usize(*classes);
            w.usizes(input);
        }
    }
    w.u8(scope.exempt_classifier as u8);
    w.usize(scope.exempt.len());
    for e in &scope.exempt {
        w.str(e);
    }
}

fn fixed<const N: usize>(v: Vec<usize>, what: &str) -> Result<[usize; N]> {
    v.try_into().map_err(|_| CheckpointError::Mismatch(format!("{what}: expected {N} values")).into())
}

fn read_arch(r: &mut Reader) -> Result<(Architecture, PruneScope)> {
    let arch = match r.u8("architecture tag")? {
        0 => Architecture::Mlp { input: r.usize("mlp input")?, hidden: r.usizes("mlp hidden")?, classes: r.usize("classes")? },
        1 => Architecture::CnnSmall {
            input: fixed(r.usizes("cnn input")?, "cnn input")?,
            channels: fixed(r.usizes("cnn channels")?, "cnn channels")?,
            classes: r.usize("classes")?,
        },
        2 => Architecture::Wrn {
            depth: r.usize("wrn depth")?,
            widths: fixed(r.usizes("wrn widths")?, "wrn widths")?,
            classes: r.usize("classes")?,
            input: fixed(r.usizes("wrn input")?, "wrn input")?,
        },
        t => return Err(CheckpointError::Mismatch(format!("unknown architecture tag {t}")).into()),
    };
    let exempt_classifier = r.u8("scope")? != 0;
    let n = r.len(8, "exempt list")?;
    let exempt = (0..n).map(|_| r.str("exempt layer")).collect::<Result<_>>()?;
    Ok((arch, PruneScope { exempt_classifier, exempt }))
}

/// Serializes a checkpoint to bytes.
pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&ck.config);
    write_arch(&mut w, &ck.arch, &ck.scope);
    w.usize(ck.epoch);
    w.usize(ck.iter);
    w.0.extend_from_slice(&ck.rng.seed);
    w.u64(ck.rng.stream);
    w.0.extend_from_slice(&ck.rng.word_pos.to_le_bytes());

    let names: Vec<String> = build(&ck.arch, &ck.scope)
        .map(|s| s.weight_layers().iter().map(|l| l.name.clone()).collect())
        .unwrap_or_default();
    w.usize(ck.params.weights.len());
    for (i, p) in ck.params.weights.iter().enumerate() {
        w.str(names.get(i).map_or("", String::as_str));
        w.tensor(&p.weights);
        w.f64(p.bound());
        w.u8(matches!(p.mean_mode, MeanMode::Center) as u8);
        w.bytes(&pack_bits(p.mask()));
        match &ck.params.biases[i] {
            Some(b) => {
                w.u8(1);
                w.tensor(b);
            }
            None => w.u8(0),
        }
    }
    w.usize(ck.params.batchnorms.len());
    for bn in &ck.params.batchnorms {
        w.tensor(&bn.gamma);
        w.tensor(&bn.beta);
        w.f64s(&bn.running_mean);
        w.f64s(&bn.running_var);
    }

    let o = &ck.opt;
    w.usize(o.weights.len());
    for (i, v) in o.weights.iter().enumerate() {
        w.f64s(v);
        match &o.biases[i] {
            Some(b) => {
                w.u8(1);
                w.f64s(b);
            }
            None => w.u8(0),
        }
        w.f64(o.bounds[i]);
    }
    w.usize(o.batchnorms.len());
    for (g, b) in &o.batchnorms {
        w.f64s(g);
        w.f64s(b);
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

/// Parses and verifies checkpoint bytes. Nothing is returned unless the
/// checksum and every record are valid.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    if bytes.len() < MAGIC.len() + 8 {
        return Err(CheckpointError::Truncated("file ends inside the header".into()).into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed }.into());
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let found = r.u32("version")?;
    if found != VERSION {
        return Err(CheckpointError::Version { found, expected: VERSION }.into());
    }
    let config = r.str("config")?;
    let (arch, scope) = read_arch(&mut r)?;
    let epoch = r.usize("epoch")?;
    let iter = r.usize("iteration")?;
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
    let stream = r.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());

    let spec = build(&arch, &scope).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    let layers = spec.weight_layers();
    let n = r.len(8, "weight records")?;
    if n != layers.len() {
        return Err(CheckpointError::Mismatch(format!("{n} weight records for {} layers", layers.len())).into());
    }
    let (mut weights, mut biases) = (Vec::new(), Vec::new());
    for layer in &layers {
        let name = r.str("layer name")?;
        if name != layer.name {
            return Err(CheckpointError::Mismatch(format!("record `{name}` where `{}` was expected", layer.name)).into());
        }
        let t = r.tensor(&name)?;
        let bound = r.f64(&name)?;
        let mode = if r.u8(&name)? == 1 { MeanMode::Center } else { MeanMode::AssumeZero };
        let bits = r.bytes(&name)?;
        if bits.len() != t.len().div_ceil(8) {
            return Err(CheckpointError::Mismatch(format!("{name}: mask size")).into());
        }
        let mut p = PrunableParam::new(t, mode);
        let mask = unpack_bits(bits, p.weights.len());
        p.set_mask(mask)?;
        p.set_bound_unclamped(bound).map_err(|e| CheckpointError::Mismatch(format!("{name}: {e}")))?;
        weights.push(p);
        biases.push(if r.u8(&name)? == 1 { Some(r.tensor(&name)?) } else { None });
    }
    let nb = r.len(8, "batch-norm records")?;
    let mut batchnorms = Vec::with_capacity(nb);
    for _ in 0..nb {
        batchnorms.push(BatchNormParams {
            gamma: r.tensor("batch-norm gamma")?,
            beta: r.tensor("batch-norm beta")?,
            running_mean: r.f64s("running mean")?,
            running_var: r.f64s("running variance")?,
        });
    }
    let no = r.len(8, "optimizer records")?;
    let mut opt = OptimizerState { weights: Vec::new(), biases: Vec::new(), batchnorms: Vec::new(), bounds: Vec::new() };
    for _ in 0..no {
        opt.weights.push(r.f64s("weight momentum")?);
        opt.biases.push(if r.u8("bias momentum")? == 1 { Some(r.f64s("bias momentum")?) } else { None });
        opt.bounds.push(r.f64("bound momentum")?);
    }
    let nbo = r.len(8, "batch-norm momentum")?;
    for _ in 0..nbo {
        opt.batchnorms.push((r.f64s("gamma momentum")?, r.f64s("beta momentum")?));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Mismatch(format!("{} trailing bytes", body.len() - r.pos)).into());
    }
    let ck = Checkpoint {
        config,
        arch,
        scope,
        epoch,
        iter,
        rng: RngState { seed, stream, word_pos },
        params: NetParams { weights, biases, batchnorms },
        opt,
    };
    let net = ck.network()?;
    if ck.opt.weights.len() != net.params.weights.len() || ck.opt.batchnorms.len() != net.params.batchnorms.len() {
        return Err(CheckpointError::Mismatch("optimizer state does not match the network".into()).into());
    }
    Ok(ck)
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode(ck);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_cnn_small, Network};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = build_cnn_small([1, 6, 6], [3, 4], 2).unwrap();
        let mut net = Network::new(spec.clone(), MeanMode::AssumeZero, &mut rng).unwrap();
        net.params.weights[1].set_bound(0.8);
        net.params.weights[1].pruned_weights();
        net.params.batchnorms[0].running_var[1] = 0.25;
        let mut opt = OptimizerState::zeros(&net);
        opt.weights[0][3] = -1.5;
        opt.bounds[1] = 0.125;
        Checkpoint {
            config: "seed = 5\n".into(),
            arch: spec.arch.clone(),
            scope: spec.scope.clone(),
            epoch: 3,
            iter: 42,
            rng: RngState::capture(&rng),
            params: net.params,
            opt,
        }
    }

    #[test]
    fn bit_packing_round_trips() {
        let bits = vec![true, false, false, true, true, false, true, false, true, true];
        let packed = pack_bits(&bits);
        assert_eq!(packed.len(), 2);
        assert_eq!(unpack_bits(&packed, bits.len()), bits);
    }

    #[test]
    fn encode_decode_is_exact() {
        let ck = sample();
        let back = decode(&encode(&ck)).unwrap();
        assert_eq!(back, ck);
        assert!(back.params.weights[1].pruned_count() > 0);
    }

    #[test]
    fn corruption_and_truncation_are_distinct() {
        let bytes = encode(&sample());
        let mut bad = bytes.clone();
        bad[100] ^= 0x01;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(CheckpointError::Checksum { .. }))));
        assert!(matches!(decode(&bytes[..10]), Err(Error::Checkpoint(CheckpointError::Truncated(_)))));
        assert!(matches!(decode(b"not a checkpoint"), Err(Error::Checkpoint(CheckpointError::BadMagic))));
        let mut future = bytes[..bytes.len() - 4].to_vec();
        future[8..12].copy_from_slice(&2u32.to_le_bytes());
        let crc = crc32fast::hash(&future);
        future.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode(&future),
            Err(Error::Checkpoint(CheckpointError::Version { found: 2, expected: VERSION }))
        ));
    }

    #[test]
    fn truncated_body_with_valid_checksum() {
        let bytes = encode(&sample());
        let mut short = bytes[..bytes.len() / 2].to_vec();
        let crc = crc32fast::hash(&short);
        short.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&short), Err(Error::Checkpoint(CheckpointError::Truncated(_)))));
    }
}
