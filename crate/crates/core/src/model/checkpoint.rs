//! Binary checkpoint bundles.
//!
//! ```text
//! "TCV2CKPT"  u16 version
//! u32 P, then P × (u32 len, id bytes, u32 rank, rank × u32 dim, f64 values)
//! u64 optimizer step
//! u32 M, then M × (u32 len, id bytes, u32 n, n × f64 m, n × f64 v)
//! u32 len, metadata text ("key=value\n", keys sorted)
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use super::{Activation, EncoderConfig, HeadInit, ModelConfig, MultiTaskModel};
use crate::data::{TaskKind, TaskRegistry, TaskSpec};
use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, ParamStore};
use crate::train::{Moments, OptimizerState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TCV2CKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Canonical key-value text carried by a bundle.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Metadata(BTreeMap<String, String>);

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.0.insert(key.into(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key).ok_or_else(|| meta_err(format!("missing metadata key `{key}`")))?;
        raw.parse()
            .map_err(|_| meta_err(format!("metadata `{key}` = `{raw}` is malformed")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn extend(&mut self, other: &Metadata) {
        self.0.extend(other.0.clone());
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        for (k, v) in &self.0 {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(meta_err(format!("metadata entry `{k}` cannot be encoded")));
            }
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| meta_err(format!("metadata line `{line}` lacks `=`")))?;
            m.insert(k.to_string(), v.to_string());
        }
        Ok(Metadata(m))
    }
}

fn meta_err(detail: String) -> Error {
    Error::Checkpoint {
        detail,
        missing: vec![],
        extra: vec![],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub params: Vec<(String, DenseTensor)>,
    pub optimizer: OptimizerState,
    pub metadata: Metadata,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| meta_err(format!("bundle truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| meta_err("value count overflows".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| meta_err("non-UTF-8 text".into()))
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| meta_err(format!("length {n} exceeds u32")))?;
    out.extend(n.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend(s.as_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend(x.to_le_bytes());
    }
}

impl CheckpointBundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::from(&CHECKPOINT_MAGIC[..]);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, self.params.len())?;
        for (id, t) in &self.params {
            put_str(&mut out, id)?;
            put_u32(&mut out, t.dims().len())?;
            for &d in t.dims() {
                put_u32(&mut out, d)?;
            }
            put_f64s(&mut out, t.values());
        }
        out.extend(self.optimizer.step.to_le_bytes());
        put_u32(&mut out, self.optimizer.moments.len())?;
        for (id, m) in &self.optimizer.moments {
            put_str(&mut out, id)?;
            put_u32(&mut out, m.m.len())?;
            put_f64s(&mut out, &m.m);
            put_f64s(&mut out, &m.v);
        }
        put_str(&mut out, &self.metadata.to_text()?)?;
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(meta_err("not a checkpoint bundle (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(meta_err(format!(
                "unsupported bundle version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let n = r.u32()?;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let id = r.string()?;
            let rank = r.u32()?;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| meta_err(format!("`{id}` shape overflows")))?;
            let values = r.f64s(numel)?;
            let t = DenseTensor::new(&dims, values).map_err(|e| meta_err(format!("`{id}`: {e}")))?;
            params.push((id, t));
        }
        let step = r.u64()?;
        let n = r.u32()?;
        let mut moments = BTreeMap::new();
        for _ in 0..n {
            let id = r.string()?;
            let len = r.u32()?;
            let m = r.f64s(len)?;
            let v = r.f64s(len)?;
            moments.insert(id, Moments { m, v });
        }
        let metadata = Metadata::from_text(&r.string()?)?;
        if r.pos != buf.len() {
            return Err(meta_err(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(CheckpointBundle {
            params,
            optimizer: OptimizerState { step, moments },
            metadata,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Bitwise equality of parameters, optimizer state and metadata.
    pub fn bit_eq(&self, other: &CheckpointBundle) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((a, x), (b, y))| a == b && x.bit_eq(y))
            && self.optimizer.bit_eq(&other.optimizer)
            && self.metadata == other.metadata
    }
}

fn architecture(model: &MultiTaskModel) -> Metadata {
    let c = model.config();
    let mut m = Metadata::new();
    let hidden: Vec<String> = c.encoder.hidden_widths.iter().map(ToString::to_string).collect();
    m.set("model.input_width", c.encoder.input_width)
        .set("model.hidden_widths", hidden.join(","))
        .set("model.output_width", c.encoder.output_width)
        .set("model.activation", c.encoder.activation)
        .set("model.heads", c.heads)
        .set("model.att_dim", c.att_dim)
        .set("model.dropout_p", format!("{:?}", c.dropout_p))
        .set("model.head_init", c.head_init);
    let tasks = model.registry().tasks();
    m.set("tasks.count", tasks.len());
    for (i, t) in tasks.iter().enumerate() {
        m.set(format!("tasks.{i}.id"), &t.task_id)
            .set(format!("tasks.{i}.kind"), t.kind.as_str())
            .set(format!("tasks.{i}.classes"), t.num_classes)
            .set(format!("tasks.{i}.weight"), format!("{:?}", t.loss_weight))
            .set(format!("tasks.{i}.cohort"), &t.cohort_tag);
    }
    m
}

fn config_from(meta: &Metadata) -> Result<(ModelConfig, TaskRegistry)> {
    let hidden = meta.get("model.hidden_widths").unwrap_or("");
    let hidden_widths = hidden
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| meta_err(format!("bad hidden width `{s}`"))))
        .collect::<Result<Vec<usize>>>()?;
    let config = ModelConfig {
        encoder: EncoderConfig {
            input_width: meta.parse("model.input_width")?,
            hidden_widths,
            output_width: meta.parse("model.output_width")?,
            activation: meta.parse::<Activation>("model.activation")?,
        },
        heads: meta.parse("model.heads")?,
        att_dim: meta.parse("model.att_dim")?,
        dropout_p: meta.parse("model.dropout_p")?,
        head_init: meta.parse::<HeadInit>("model.head_init")?,
    };
    let n: usize = meta.parse("tasks.count")?;
    let tasks = (0..n)
        .map(|i| {
            Ok(TaskSpec {
                task_id: meta.parse(&format!("tasks.{i}.id"))?,
                kind: meta.parse::<TaskKind>(&format!("tasks.{i}.kind"))?,
                num_classes: meta.parse(&format!("tasks.{i}.classes"))?,
                loss_weight: meta.parse(&format!("tasks.{i}.weight"))?,
                cohort_tag: meta.get(&format!("tasks.{i}.cohort")).unwrap_or("").to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((config, TaskRegistry::new(tasks)?))
}

/// Bundles parameters, optimizer state and `metadata` plus the architecture
/// needed to rebuild the model.
pub fn save_checkpoint(model: &MultiTaskModel, optimizer: &OptimizerState, metadata: &Metadata) -> CheckpointBundle {
    let mut meta = metadata.clone();
    meta.extend(&architecture(model));
    CheckpointBundle {
        params: model
            .store()
            .iter()
            .map(|p| (p.stable_id().to_string(), p.value().clone()))
            .collect(),
        optimizer: optimizer.clone(),
        metadata: meta,
    }
}

/// Rebuilds the model a bundle was saved from.
pub fn load_checkpoint(bundle: &CheckpointBundle) -> Result<(MultiTaskModel, OptimizerState, Metadata)> {
    let (config, registry) = config_from(&bundle.metadata)?;
    let mut model = MultiTaskModel::new(config, registry, 0)?;
    load_into(&mut model, bundle)?;
    Ok((model, bundle.optimizer.clone(), bundle.metadata.clone()))
}

/// Overwrites every parameter of `model` from `bundle`. The stable id sets
/// must match exactly.
pub fn load_into(model: &mut MultiTaskModel, bundle: &CheckpointBundle) -> Result<()> {
    let store: &mut ParamStore = model.store_mut();
    let have: BTreeMap<&str, &DenseTensor> = bundle.params.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let missing: Vec<String> = store
        .iter()
        .filter(|p| !have.contains_key(p.stable_id()))
        .map(|p| p.stable_id().to_string())
        .collect();
    let extra: Vec<String> = have
        .keys()
        .filter(|k| store.lookup(k).is_none())
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Checkpoint {
            detail: "stable id mismatch".into(),
            missing,
            extra,
        });
    }
    for id in store.ids().collect::<Vec<_>>() {
        let src = have[store.get(id).stable_id()];
        if src.dims() != store.value(id).dims() {
            return Err(meta_err(format!(
                "`{}` has shape {:?}, expected {:?}",
                store.get(id).stable_id(),
                src.dims(),
                store.value(id).dims()
            )));
        }
        *store.get_mut(id).value_mut() = src.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn model(tasks: &[&str]) -> MultiTaskModel {
        let reg = TaskRegistry::new(tasks.iter().map(|t| TaskSpec::binary(*t)).collect()).unwrap();
        let mut cfg = ModelConfig::new(EncoderConfig::new(3, 8));
        cfg.head_init = HeadInit::Uniform;
        MultiTaskModel::new(cfg, reg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model(&["a", "b"]);
        let mut opt = OptimizerState::new();
        opt.step = 7;
        opt.moments.insert(
            "pool.output_projection".into(),
            Moments {
                m: vec![0.1, -0.0, f64::MIN_POSITIVE],
                v: vec![1e-300, 2.0, 3.0],
            },
        );
        let mut meta = Metadata::new();
        meta.set("epoch", 3).set("rng.seed", 42).set("val_loss.a", format!("{:?}", 0.1 + 0.2));
        let b = save_checkpoint(&m, &opt, &meta);
        let back = CheckpointBundle::from_bytes(&b.to_bytes().unwrap()).unwrap();
        assert!(back.bit_eq(&b));
        let (m2, opt2, meta2) = load_checkpoint(&back).unwrap();
        assert!(opt2.bit_eq(&opt));
        assert_eq!(meta2.parse::<f64>("val_loss.a").unwrap(), 0.1 + 0.2);
        let mut r = stream(0, &[]);
        let x = DenseTensor::matrix(4, 3, (0..12).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        for t in ["a", "b"] {
            assert!(m.predict(t, &x).unwrap().0.bit_eq(&m2.predict(t, &x).unwrap().0));
        }
    }

    #[test]
    fn extra_head_is_named() {
        let b = save_checkpoint(&model(&["a"]), &OptimizerState::new(), &Metadata::new());
        let mut bigger = model(&["a", "extra"]);
        match load_into(&mut bigger, &b) {
            Err(Error::Checkpoint { missing, extra, .. }) => {
                assert!(extra.is_empty());
                assert_eq!(missing, vec!["head.extra.weight", "head.extra.bias"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_and_magic_are_checked() {
        let b = save_checkpoint(&model(&["a"]), &OptimizerState::new(), &Metadata::new());
        let mut bytes = b.to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(CheckpointBundle::from_bytes(&bytes), Err(Error::Checkpoint { .. })));
        bytes[0] = b'X';
        assert!(matches!(CheckpointBundle::from_bytes(&bytes), Err(Error::Checkpoint { .. })));
        let good = b.to_bytes().unwrap();
        assert!(CheckpointBundle::from_bytes(&good[..good.len() - 1]).is_err());
    }
}
