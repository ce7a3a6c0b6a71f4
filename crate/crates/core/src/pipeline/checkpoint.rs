//! Binary model checkpoints.
//!
//! Layout (little endian): magic `ADMC`, format version `u32`, architecture
//! hash `u64`, record count `u32`, then per record: name length `u32`, UTF-8
//! name, rank `u32`, `rank` extents as `u32`, and the `f32` values.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::Architecture;
use super::model::{Layer, Model};
use crate::discovery::{ClassPrototype, JointHead, PrototypeStore};
use crate::error::{Error, Result};
use crate::ops::BnParams;
use crate::reparam::{ConvBnUnit, DualBranchLayer, FoldedConv, MergeMode};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADMC";
pub const FORMAT_VERSION: u32 = 1;

fn vec_tensor(v: &[f32]) -> Tensor<f32> {
    Tensor::from_vec(&[v.len()], v.to_vec()).expect("length matches")
}

fn scalar_tensor(v: f32) -> Tensor<f32> {
    Tensor::from_vec(&[1], vec![v]).expect("one element")
}

fn mode_code(m: MergeMode) -> f32 {
    match m {
        MergeMode::Imm => 0.0,
        MergeMode::Aff => 1.0,
        MergeMode::Amm => 2.0,
    }
}

fn records(model: &Model) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    let counts: Vec<f32> = model.class_counts.iter().map(|&c| c as f32).collect();
    out.push(("meta.class_counts".to_string(), vec_tensor(&counts)));
    out.push(("meta.task_cursor".to_string(), scalar_tensor(model.task_cursor as f32)));
    for (i, layer) in model.layers.iter().enumerate() {
        let base = layer.base();
        out.push((format!("layer.{i}.kernel"), base.kernel.clone()));
        out.push((format!("layer.{i}.bias"), vec_tensor(&base.bias)));
        out.push((format!("layer.{i}.gamma"), vec_tensor(layer.gamma())));
        if let Layer::Dual(d) = layer {
            let bn = &d.novel.bn;
            out.push((format!("layer.{i}.mode"), scalar_tensor(mode_code(d.mode))));
            out.push((format!("layer.{i}.novel.kernel"), d.novel.kernel.clone()));
            out.push((format!("layer.{i}.novel.mean"), vec_tensor(&bn.mean)));
            out.push((format!("layer.{i}.novel.var"), vec_tensor(&bn.var)));
            out.push((format!("layer.{i}.novel.gamma"), vec_tensor(&bn.gamma)));
            out.push((format!("layer.{i}.novel.beta"), vec_tensor(&bn.beta)));
            out.push((format!("layer.{i}.novel.eps"), scalar_tensor(bn.eps)));
        }
    }
    let h = &model.head;
    out.push(("head.base_weight".into(), h.base_weight.clone()));
    out.push(("head.base_bias".into(), h.base_bias.clone()));
    out.push(("head.novel_weight".into(), h.novel_weight.clone()));
    out.push(("head.novel_bias".into(), h.novel_bias.clone()));
    for (j, p) in model.prototypes.prototypes.iter().enumerate() {
        out.push((format!("proto.{j}.class"), scalar_tensor(p.class as f32)));
        out.push((format!("proto.{j}.count"), scalar_tensor(p.count as f32)));
        out.push((format!("proto.{j}.mean"), vec_tensor(&p.mean)));
        out.push((format!("proto.{j}.var"), vec_tensor(&p.var)));
    }
    out
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let recs = records(model);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&model.arch.hash().to_le_bytes());
    buf.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for (name, t) in recs {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, arch: &Architecture) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, arch)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: {what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

const MAX_RANK: u32 = 8;

fn parse_records(bytes: &[u8]) -> Result<(u64, Vec<(String, Tensor<f32>)>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint: bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let hash = r.u64("config hash")?;
    let count = r.u32("record count")?;
    let mut out = Vec::new();
    for k in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "record name")?)
            .map_err(|_| Error::Checkpoint(format!("record {k}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")?;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("record `{name}`: implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let numel = numel
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Checkpoint(format!("record `{name}`: shape {shape:?} exceeds the file")))?;
        let raw = r.take(numel * 4, "record data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the last record", bytes.len() - r.pos)));
    }
    Ok((hash, out))
}

struct Records(BTreeMap<String, Tensor<f32>>);

impl Records {
    fn get(&mut self, name: &str) -> Result<Tensor<f32>> {
        self.0
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))
    }

    fn vec(&mut self, name: &str) -> Result<Vec<f32>> {
        Ok(self.get(name)?.into_vec())
    }

    fn scalar(&mut self, name: &str) -> Result<f32> {
        self.get(name)?
            .item()
            .map_err(|_| Error::Checkpoint(format!("record `{name}` should hold one value")))
    }

    fn count(&mut self, name: &str) -> Result<usize> {
        let v = self.scalar(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("record `{name}` should be a count, found {v}")));
        }
        Ok(v as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], arch: &Architecture) -> Result<Model> {
    let (hash, list) = parse_records(bytes)?;
    let mut recs = Records(BTreeMap::new());
    for (name, t) in list {
        if recs.0.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("record `{name}` appears twice")));
        }
    }
    let stored_layers = (0..).take_while(|i| recs.0.contains_key(&format!("layer.{i}.kernel"))).count();
    if stored_layers != arch.channels.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {stored_layers} layers but the configuration describes {}",
            arch.channels.len()
        )));
    }
    if hash != arch.hash() {
        return Err(Error::Checkpoint(format!(
            "architecture hash {hash:016x} does not match the configuration ({:016x})",
            arch.hash()
        )));
    }

    let class_counts = recs.vec("meta.class_counts")?.into_iter().map(|v| v as usize).collect();
    let task_cursor = recs.count("meta.task_cursor")?;
    let mut layers = Vec::with_capacity(stored_layers);
    for (i, spec) in arch.specs()?.into_iter().enumerate() {
        let base = FoldedConv::new(spec, recs.get(&format!("layer.{i}.kernel"))?, recs.vec(&format!("layer.{i}.bias"))?)?;
        let gamma = recs.vec(&format!("layer.{i}.gamma"))?;
        let mode_key = format!("layer.{i}.mode");
        if recs.0.contains_key(&mode_key) {
            let mode = match recs.scalar(&mode_key)? {
                0.0 => MergeMode::Imm,
                1.0 => MergeMode::Aff,
                2.0 => MergeMode::Amm,
                v => return Err(Error::Checkpoint(format!("layer {i}: unknown mode code {v}"))),
            };
            let bn = BnParams::new(
                recs.vec(&format!("layer.{i}.novel.mean"))?,
                recs.vec(&format!("layer.{i}.novel.var"))?,
                recs.vec(&format!("layer.{i}.novel.gamma"))?,
                recs.vec(&format!("layer.{i}.novel.beta"))?,
                recs.scalar(&format!("layer.{i}.novel.eps"))?,
            )?;
            let novel = ConvBnUnit::new(spec, recs.get(&format!("layer.{i}.novel.kernel"))?, bn)?;
            layers.push(Layer::Dual(DualBranchLayer::new(base, novel, gamma, mode)?));
        } else {
            if gamma.len() != spec.out_channels {
                return Err(Error::shape("checkpoint", "gate length", spec.out_channels, gamma.len()));
            }
            layers.push(Layer::Single { conv: base, gamma });
        }
    }
    let head = JointHead::new(
        recs.get("head.base_weight")?,
        recs.get("head.base_bias")?,
        recs.get("head.novel_weight")?,
        recs.get("head.novel_bias")?,
    )?;
    let mut prototypes = Vec::new();
    for j in 0.. {
        if !recs.0.contains_key(&format!("proto.{j}.class")) {
            break;
        }
        prototypes.push(ClassPrototype {
            class: recs.count(&format!("proto.{j}.class"))?,
            count: recs.count(&format!("proto.{j}.count"))?,
            mean: recs.vec(&format!("proto.{j}.mean"))?,
            var: recs.vec(&format!("proto.{j}.var"))?,
        });
    }
    if let Some(extra) = recs.0.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected record `{extra}`")));
    }
    let model = Model {
        arch: arch.clone(),
        layers,
        head,
        prototypes: PrototypeStore::new(prototypes)?,
        class_counts,
        task_cursor,
    };
    model.validate()?;
    Ok(model)
}
