//! Binary checkpoint and export files.
//!
//! Both share one little-endian container:
//!
//! ```text
//! magic     4 bytes  "CBCN"
//! version   u16      1
//! kind      u16      1 = training checkpoint, 2 = packed export
//! sections  u32      count, then per section:
//!   tag     4 bytes  ASCII
//!   length  u64      payload bytes
//!   payload
//! ```
//!
//! Sections (`u32` counts, `f64` reals, `u64` lengths unless noted):
//!
//! - `TOPO` k, filter_side, input_side, classes, batch_norm (u8),
//!   dropout, stage count, stage widths.
//! - `NORM` input mean, input std.
//! - `CONF` (checkpoint) the configuration as `key = value` text.
//! - `WGHT` (checkpoint) per stage: length, learned filters `W` in
//!   `(out_map, in_map, row, col)` order.
//! - `BITS` (export) per stage: 4 dims, byte length, sign bits of `W` in
//!   the same order, bit `i % 8` of byte `i / 8` set for `+1` (lowest bit
//!   first), tail bits zero.
//! - `BNRM` per stage: present (u8); if present channels, eps, momentum,
//!   tracked (u8), then gamma, beta, running mean, running var.
//! - `FCLY` inputs, outputs, weights `(out, in)`, bias.
//! - `OPTM` (checkpoint) momentum, weight decay, slot count, per slot:
//!   length and velocity values.
//! - `CNTR` (checkpoint) classes, dim, lambda, alpha, centers.
//! - `RNGS` (checkpoint) seed (u64), next epoch (u64), has initial loss
//!   (u8), initial loss. All randomness is keyed by seed and epoch, so this
//!   is the complete generator state.
//!
//! Unknown sections are rejected.

use std::path::Path;

use cbcn_core::inference::PackedModel;
use cbcn_core::layers::{BatchNorm, CenterLoss, Linear};
use cbcn_core::model::{Network, Topology};
use cbcn_core::optim::Sgd;
use cbcn_core::train::{TrainConfig, TrainState, Trainer};
use cbcn_core::{PackedBitTensor, Shape4};

use crate::{config, Error, Result};

pub const MAGIC: &[u8; 4] = b"CBCN";
pub const VERSION: u16 = 1;
pub const KIND_CHECKPOINT: u16 = 1;
pub const KIND_EXPORT: u16 = 2;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.0.extend_from_slice(v);
    }
    fn section(&mut self, tag: &[u8; 4], body: Writer) {
        self.0.extend_from_slice(tag);
        self.u64(body.0.len() as u64);
        self.0.extend_from_slice(&body.0);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// File offset of `bytes[0]`, for error messages.
    base: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.base + self.pos,
            reason: reason.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.err(format!("invalid flag byte {v}"))),
        }
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.bytes.len() - self.pos) as u64;
        if n.saturating_mul(elem as u64) > left {
            return Err(self.err(format!("length {n} exceeds the remaining {left} bytes")));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn f64s_exact(&mut self, expected: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.pos;
        let v = self.f64s()?;
        if v.len() != expected {
            self.pos = at;
            return Err(self.err(format!("{what}: expected {expected} values, found {}", v.len())));
        }
        Ok(v)
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn finish(&self, tag: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} unread bytes at the end of {tag}", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// Sections of a container, with the absolute offset of each payload.
struct Container<'a> {
    kind: u16,
    sections: Vec<([u8; 4], usize, &'a [u8])>,
}

fn write_container(kind: u16, sections: Vec<(&[u8; 4], Writer)>) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.u16(kind);
    w.u32(sections.len());
    for (tag, body) in sections {
        w.section(tag, body);
    }
    w.0
}

fn read_container<'a>(bytes: &'a [u8], path: &'a Path) -> Result<Container<'a>> {
    let mut r = Reader { bytes, pos: 0, base: 0, path };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected \"CBCN\""));
    }
    let version = r.u16()?;
    if version != VERSION {
        r.pos -= 2;
        return Err(r.err(format!("unsupported version {version}")));
    }
    let kind = r.u16()?;
    let count = r.u32()?;
    let mut sections = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let n = r.len(1)?;
        let start = r.pos;
        sections.push((tag, start, r.take(n)?));
    }
    r.finish("file")?;
    Ok(Container { kind, sections })
}

impl<'a> Container<'a> {
    fn section(&self, tag: &[u8; 4], path: &'a Path) -> Result<Reader<'a>> {
        let mut found = self.sections.iter().filter(|(t, ..)| t == tag);
        let name = String::from_utf8_lossy(tag).into_owned();
        let (_, start, body) = found.next().ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: format!("missing section {name}"),
        })?;
        if found.next().is_some() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: *start,
                reason: format!("duplicate section {name}"),
            });
        }
        Ok(Reader {
            bytes: body,
            pos: 0,
            base: *start,
            path,
        })
    }

    fn check_tags(&self, allowed: &[&[u8; 4]], path: &Path) -> Result<()> {
        for (tag, start, _) in &self.sections {
            if !allowed.contains(&tag) {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: *start - 12,
                    reason: format!("unknown section {}", String::from_utf8_lossy(tag)),
                });
            }
        }
        Ok(())
    }
}

fn write_topology(t: &Topology) -> Writer {
    let mut w = Writer::default();
    w.u32(t.k);
    w.u32(t.filter_side);
    w.u32(t.input_side);
    w.u32(t.classes);
    w.u8(t.batch_norm as u8);
    w.f64(t.dropout);
    w.u32(t.stages.len());
    for &s in &t.stages {
        w.u32(s);
    }
    w
}

fn read_topology(r: &mut Reader) -> Result<Topology> {
    let k = r.u32()?;
    let filter_side = r.u32()?;
    let input_side = r.u32()?;
    let classes = r.u32()?;
    let batch_norm = r.flag()?;
    let dropout = r.f64()?;
    let n = r.u32()?;
    if n > 64 {
        return Err(r.err(format!("implausible stage count {n}")));
    }
    let stages = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    r.finish("TOPO")?;
    let t = Topology {
        k,
        filter_side,
        stages,
        input_side,
        classes,
        batch_norm,
        dropout,
    };
    t.validate()?;
    Ok(t)
}

fn write_norm(mean: f64, std: f64) -> Writer {
    let mut w = Writer::default();
    w.f64(mean);
    w.f64(std);
    w
}

fn write_batch_norms<'b>(bns: impl Iterator<Item = Option<&'b BatchNorm>>) -> Writer {
    let mut w = Writer::default();
    for bn in bns {
        match bn {
            None => w.u8(0),
            Some(bn) => {
                w.u8(1);
                w.u32(bn.channels());
                w.f64(bn.eps);
                w.f64(bn.momentum);
                w.u8(bn.tracked as u8);
                w.f64s(&bn.gamma);
                w.f64s(&bn.beta);
                w.f64s(&bn.running_mean);
                w.f64s(&bn.running_var);
            }
        }
    }
    w
}

fn read_batch_norms(r: &mut Reader, topology: &Topology) -> Result<Vec<Option<BatchNorm>>> {
    let mut out = Vec::with_capacity(topology.stages.len());
    for &maps in &topology.stages {
        if !r.flag()? {
            out.push(None);
            continue;
        }
        let channels = r.u32()?;
        if channels != maps * topology.k {
            return Err(r.err(format!("batch norm width {channels}, expected {}", maps * topology.k)));
        }
        let mut bn = BatchNorm::new(channels);
        bn.eps = r.f64()?;
        bn.momentum = r.f64()?;
        bn.tracked = r.flag()?;
        bn.gamma = r.f64s_exact(channels, "gamma")?;
        bn.beta = r.f64s_exact(channels, "beta")?;
        bn.running_mean = r.f64s_exact(channels, "running mean")?;
        bn.running_var = r.f64s_exact(channels, "running var")?;
        out.push(Some(bn));
    }
    r.finish("BNRM")?;
    Ok(out)
}

fn write_fc(fc: &Linear) -> Writer {
    let mut w = Writer::default();
    w.u32(fc.inputs);
    w.u32(fc.outputs);
    w.f64s(&fc.weight);
    w.f64s(&fc.bias);
    w
}

fn read_fc(r: &mut Reader, topology: &Topology) -> Result<Linear> {
    let inputs = r.u32()?;
    let outputs = r.u32()?;
    let expected = (topology.feature_dim()?, topology.classes);
    if (inputs, outputs) != expected {
        return Err(r.err(format!(
            "classifier is {inputs}->{outputs}, topology needs {}->{}",
            expected.0, expected.1
        )));
    }
    let mut fc = Linear::new(inputs, outputs);
    fc.weight = r.f64s_exact(inputs * outputs, "fc weight")?;
    fc.bias = r.f64s_exact(outputs, "fc bias")?;
    r.finish("FCLY")?;
    Ok(fc)
}

/// Serializes a training state and its configuration.
pub fn encode_checkpoint(config: &TrainConfig, state: &TrainState) -> Vec<u8> {
    let net = &state.network;
    let mut conf = Writer::default();
    conf.bytes(config::render(config).as_bytes());
    let mut weights = Writer::default();
    for s in &net.stages {
        weights.f64s(s.conv.weights());
    }
    let mut optim = Writer::default();
    optim.f64(state.optimizer.momentum);
    optim.f64(state.optimizer.weight_decay);
    optim.u32(state.optimizer.velocity.len());
    for v in &state.optimizer.velocity {
        optim.f64s(v);
    }
    let mut centers = Writer::default();
    centers.u32(state.center.classes);
    centers.u32(state.center.dim);
    centers.f64(state.center.lambda);
    centers.f64(state.center.alpha);
    centers.f64s(&state.center.centers);
    let mut rng = Writer::default();
    rng.u64(config.seed);
    rng.u64(state.epoch as u64);
    rng.u8(state.initial_loss.is_some() as u8);
    rng.f64(state.initial_loss.unwrap_or(0.0));
    write_container(
        KIND_CHECKPOINT,
        vec![
            (b"TOPO", write_topology(net.topology())),
            (b"CONF", conf),
            (b"NORM", write_norm(net.input_mean, net.input_std)),
            (b"WGHT", weights),
            (b"BNRM", write_batch_norms(net.stages.iter().map(|s| s.bn.as_ref()))),
            (b"FCLY", write_fc(&net.fc)),
            (b"OPTM", optim),
            (b"CNTR", centers),
            (b"RNGS", rng),
        ],
    )
}

fn kind_error(path: &Path, found: u16, expected: u16) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: 6,
        reason: format!("file kind {found}, expected {expected}"),
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(TrainConfig, TrainState)> {
    let c = read_container(bytes, path)?;
    if c.kind != KIND_CHECKPOINT {
        return Err(kind_error(path, c.kind, KIND_CHECKPOINT));
    }
    c.check_tags(
        &[b"TOPO", b"CONF", b"NORM", b"WGHT", b"BNRM", b"FCLY", b"OPTM", b"CNTR", b"RNGS"],
        path,
    )?;
    let topology = read_topology(&mut c.section(b"TOPO", path)?)?;
    let mut r = c.section(b"CONF", path)?;
    let text = std::str::from_utf8(r.bytes()?).map_err(|_| r.err("configuration is not UTF-8"))?;
    r.finish("CONF")?;
    let config = config::parse(text)?;
    let mut net = Network::new(topology.clone(), config.sign_fn()?)?;

    let mut r = c.section(b"NORM", path)?;
    net.input_mean = r.f64()?;
    net.input_std = r.f64()?;
    r.finish("NORM")?;

    let mut r = c.section(b"WGHT", path)?;
    for (i, stage) in net.stages.iter_mut().enumerate() {
        let n = stage.conv.weights().len();
        let w = r.f64s_exact(n, &format!("stage {i} filters"))?;
        stage.conv.weights_mut().copy_from_slice(&w);
    }
    r.finish("WGHT")?;

    let bns = read_batch_norms(&mut c.section(b"BNRM", path)?, &topology)?;
    for (stage, bn) in net.stages.iter_mut().zip(bns) {
        if bn.is_some() != stage.bn.is_some() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                reason: "batch-norm presence disagrees with the topology".into(),
            });
        }
        stage.bn = bn;
    }
    net.fc = read_fc(&mut c.section(b"FCLY", path)?, &topology)?;

    let mut r = c.section(b"OPTM", path)?;
    let mut optimizer = Sgd::new(r.f64()?, r.f64()?);
    let slots = r.u32()?;
    let mut sizes = Vec::new();
    net.visit_params(|_, p, _| sizes.push(p.len()));
    if slots != 0 && slots != sizes.len() {
        return Err(r.err(format!("{slots} momentum buffers for {} parameter groups", sizes.len())));
    }
    for size in sizes.iter().take(slots) {
        optimizer.velocity.push(r.f64s_exact(*size, "momentum buffer")?);
    }
    r.finish("OPTM")?;

    let mut r = c.section(b"CNTR", path)?;
    let classes = r.u32()?;
    let dim = r.u32()?;
    if (classes, dim) != (topology.classes, topology.feature_dim()?) {
        return Err(r.err("center-loss shape disagrees with the topology"));
    }
    let mut center = CenterLoss::new(classes, dim, r.f64()?, r.f64()?)?;
    center.centers = r.f64s_exact(classes * dim, "centers")?;
    r.finish("CNTR")?;

    let mut r = c.section(b"RNGS", path)?;
    let seed = r.u64()?;
    if seed != config.seed {
        return Err(r.err(format!("seed {seed} disagrees with configuration seed {}", config.seed)));
    }
    let epoch = r.u64()? as usize;
    let has_loss = r.flag()?;
    let loss = r.f64()?;
    r.finish("RNGS")?;

    Ok((
        config,
        TrainState {
            network: net,
            optimizer,
            center,
            epoch,
            initial_loss: has_loss.then_some(loss),
        },
    ))
}

/// Writes through a temporary file and a rename so a crash never leaves a
/// half-written file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    write_atomic(path, &encode_checkpoint(trainer.config(), &trainer.state))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, state) = decode_checkpoint(&bytes, path)?;
    Ok(Trainer::from_state(config, state)?)
}

/// Serializes the packed inference model: sign bits of `W` only.
pub fn encode_export(model: &PackedModel) -> Vec<u8> {
    let mut bits = Writer::default();
    for f in &model.filters {
        for d in f.shape().dims() {
            bits.u32(d);
        }
        bits.bytes(&f.to_bytes());
    }
    write_container(
        KIND_EXPORT,
        vec![
            (b"TOPO", write_topology(model.topology())),
            (b"NORM", write_norm(model.input_mean, model.input_std)),
            (b"BITS", bits),
            (b"BNRM", write_batch_norms(model.batch_norms.iter().map(Option::as_ref))),
            (b"FCLY", write_fc(&model.fc)),
        ],
    )
}

pub fn decode_export(bytes: &[u8], path: &Path) -> Result<PackedModel> {
    let c = read_container(bytes, path)?;
    if c.kind != KIND_EXPORT {
        return Err(kind_error(path, c.kind, KIND_EXPORT));
    }
    c.check_tags(&[b"TOPO", b"NORM", b"BITS", b"BNRM", b"FCLY"], path)?;
    let topology = read_topology(&mut c.section(b"TOPO", path)?)?;
    let mut r = c.section(b"NORM", path)?;
    let (mean, std) = (r.f64()?, r.f64()?);
    r.finish("NORM")?;
    let mut r = c.section(b"BITS", path)?;
    let mut filters = Vec::with_capacity(topology.stages.len());
    for _ in &topology.stages {
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3])?;
        let at = r.pos;
        let payload = r.bytes()?;
        filters.push(PackedBitTensor::from_bytes(shape, payload).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: at,
            reason: e.to_string(),
        })?);
    }
    r.finish("BITS")?;
    let bns = read_batch_norms(&mut c.section(b"BNRM", path)?, &topology)?;
    let fc = read_fc(&mut c.section(b"FCLY", path)?, &topology)?;
    Ok(PackedModel::new(topology, mean, std, filters, bns, fc)?)
}

pub fn save_export(path: &Path, model: &PackedModel) -> Result<()> {
    write_atomic(path, &encode_export(model))
}

pub fn load_export(path: &Path) -> Result<PackedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_export(&bytes, path)
}

/// The kind field of a container file, for dispatching on file type.
pub fn peek_kind(path: &Path) -> Result<u16> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        base: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected \"CBCN\""));
    }
    r.u16()?;
    r.u16()
}
