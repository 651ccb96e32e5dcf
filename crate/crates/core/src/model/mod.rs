//! Encoder, shared attention pooling and per-task linear heads.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, load_into, save_checkpoint, CheckpointBundle, Metadata, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::data::{TaskRegistry, TaskSpec};
use crate::error::{Error, Result};
use crate::pooling::{attention_pool, collect_map, default_att_dim, AttentionMap, AttentionPoolParams, PoolVars, DEFAULT_HEADS};
use crate::rng::{stream, tag};
use crate::tensor::{glorot_uniform, DenseTensor, Mode, ParamId, ParamStore, Tape, Var};

pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const DEFAULT_WIDTH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::Config(format!("unknown activation `{s}`"))),
        }
    }
}

/// MLP mapping `input_width` to `output_width`. Hidden layers are followed by
/// the activation; the output layer is affine.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_width: usize,
    pub hidden_widths: Vec<usize>,
    pub output_width: usize,
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn new(input_width: usize, output_width: usize) -> Self {
        EncoderConfig {
            input_width,
            hidden_widths: vec![output_width],
            output_width,
            activation: Activation::Relu,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width];
        w.extend(&self.hidden_widths);
        w.push(self.output_width);
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadInit {
    Zero,
    /// Glorot-uniform heads; used where a zero head would hide gradients.
    Uniform,
}

impl fmt::Display for HeadInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadInit::Zero => "zero",
            HeadInit::Uniform => "uniform",
        })
    }
}

impl FromStr for HeadInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(HeadInit::Zero),
            "uniform" => Ok(HeadInit::Uniform),
            _ => Err(Error::Config(format!("unknown head init `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: usize,
    pub att_dim: usize,
    pub dropout_p: f64,
    pub head_init: HeadInit,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        let att_dim = default_att_dim(encoder.output_width);
        ModelConfig {
            encoder,
            heads: DEFAULT_HEADS,
            att_dim,
            dropout_p: DEFAULT_DROPOUT,
            head_init: HeadInit::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.widths().contains(&0) || self.heads == 0 || self.att_dim == 0 {
            return Err(Error::Config("all model widths and the head count must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

/// Parameter groups addressable by [`MultiTaskModel::freeze`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scope {
    Encoder,
    Pool,
    Heads,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Encoder, Scope::Pool, Scope::Heads];

    pub fn prefix(self) -> &'static str {
        match self {
            Scope::Encoder => "encoder.",
            Scope::Pool => "pool.",
            Scope::Heads => "head.",
        }
    }
}

#[derive(Clone, Debug)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct TaskHead {
    pub task_id: String,
    pub num_classes: usize,
    pub dropout_p: f64,
    /// `[C × D]`
    pub weight: ParamId,
    /// `[C]`
    pub bias: ParamId,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[1 × C]`
    pub logits: Var,
    pub pool: PoolVars,
}

#[derive(Clone, Debug)]
pub struct MultiTaskModel {
    config: ModelConfig,
    registry: TaskRegistry,
    store: ParamStore,
    layers: Vec<Layer>,
    pool: AttentionPoolParams,
    heads: Vec<TaskHead>,
}

impl MultiTaskModel {
    /// Fresh model with one head per registered task, initialized from `seed`.
    pub fn new(config: ModelConfig, registry: TaskRegistry, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[tag::INIT]);
        let mut store = ParamStore::new();
        let widths = config.encoder.widths();
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weight = store.register(
                format!("encoder.layer{i}.weight"),
                glorot_uniform(&[fan_out, fan_in], fan_in, fan_out, &mut rng)?,
            )?;
            let bias = store.register(format!("encoder.layer{i}.bias"), DenseTensor::zeros(&[fan_out])?)?;
            layers.push(Layer { weight, bias });
        }
        let d = config.encoder.output_width;
        let pool = AttentionPoolParams::init(&mut store, "pool", d, config.heads, config.att_dim, &mut rng)?;
        let mut heads = Vec::new();
        for t in registry.tasks() {
            let c = t.num_classes;
            let w = match config.head_init {
                HeadInit::Zero => DenseTensor::zeros(&[c, d])?,
                HeadInit::Uniform => glorot_uniform(&[c, d], d, c, &mut rng)?,
            };
            let b = match config.head_init {
                HeadInit::Zero => DenseTensor::zeros(&[c])?,
                HeadInit::Uniform => glorot_uniform(&[c], d, c, &mut rng)?,
            };
            heads.push(TaskHead {
                task_id: t.task_id.clone(),
                num_classes: c,
                dropout_p: config.dropout_p,
                weight: store.register(format!("head.{}.weight", t.task_id), w)?,
                bias: store.register(format!("head.{}.bias", t.task_id), b)?,
            });
        }
        Ok(MultiTaskModel {
            config,
            registry,
            store,
            layers,
            pool,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &TaskRegistry {
        &self.registry
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn pool(&self) -> &AttentionPoolParams {
        &self.pool
    }

    pub fn heads(&self) -> &[TaskHead] {
        &self.heads
    }

    pub fn input_width(&self) -> usize {
        self.config.encoder.input_width
    }

    pub fn head(&self, task_id: &str) -> Result<&TaskHead> {
        self.heads
            .iter()
            .find(|h| h.task_id == task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    /// Encodes every instance of `bag` (`[N × D_in]`) to `[N × D]`.
    pub fn encode(&self, tape: &mut Tape, bag: Var) -> Result<Var> {
        let dims = tape.value(bag).dims().to_vec();
        if dims.len() != 2 || dims[1] != self.input_width() {
            return Err(Error::Dimension {
                op: "encode",
                lhs: dims,
                rhs: vec![self.input_width()],
            });
        }
        let mut h = bag;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(&self.store, layer.weight);
            let wt = tape.transpose(w)?;
            let b = tape.param(&self.store, layer.bias);
            h = tape.matmul(h, wt)?;
            h = tape.add(h, b)?;
            if i < last {
                h = match self.config.encoder.activation {
                    Activation::Tanh => tape.tanh(h)?,
                    Activation::Relu => tape.relu(h)?,
                };
            }
        }
        Ok(h)
    }

    /// Records encoder, pooling, dropout and the task head on `tape`.
    pub fn forward_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        task_id: &str,
        bag: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardVars> {
        let head = self.head(task_id)?;
        let e = self.encode(tape, bag)?;
        let pool = attention_pool(tape, &self.store, &self.pool, e)?;
        let z = tape.dropout(pool.slide, head.dropout_p, mode, rng)?;
        let w = tape.param(&self.store, head.weight);
        let wt = tape.transpose(w)?;
        let b = tape.param(&self.store, head.bias);
        let logits = tape.matmul(z, wt)?;
        let logits = tape.add(logits, b)?;
        Ok(ForwardVars { logits, pool })
    }

    /// Logits `[C]` and attention map for one bag.
    pub fn forward_bag<R: Rng + ?Sized>(
        &self,
        task_id: &str,
        bag: &DenseTensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(DenseTensor, AttentionMap)> {
        let mut tape = Tape::new();
        let x = tape.constant(bag.clone());
        let out = self.forward_tape(&mut tape, task_id, x, mode, rng)?;
        let c = tape.value(out.logits).numel();
        let logits = tape.value(out.logits).clone().reshaped(&[c])?;
        let map = collect_map(&tape, &out.pool, (0..bag.rows()).collect())?;
        Ok((logits, map))
    }

    /// Eval-mode logits without an rng.
    pub fn predict(&self, task_id: &str, bag: &DenseTensor) -> Result<(DenseTensor, AttentionMap)> {
        self.forward_bag(task_id, bag, Mode::Eval, &mut stream(0, &[]))
    }

    /// Stops optimizer updates for `scope`; gradients still flow.
    pub fn freeze(&mut self, scope: Scope) {
        self.store.set_frozen_prefix(scope.prefix(), true);
    }

    pub fn unfreeze(&mut self, scope: Scope) {
        self.store.set_frozen_prefix(scope.prefix(), false);
    }

    /// SHA-256 over ids, shapes and value bits of every parameter in `scope`.
    pub fn digest(&self, scope: Scope) -> String {
        let mut h = Sha256::new();
        for p in self.store.iter().filter(|p| p.stable_id().starts_with(scope.prefix())) {
            h.update(p.stable_id().as_bytes());
            for d in p.value().dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value().values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Overwrites every parameter of `scope` with the same-id value of `other`.
    pub fn copy_scope_from(&mut self, other: &MultiTaskModel, scope: Scope) -> Result<()> {
        for id in self.store.ids().collect::<Vec<_>>() {
            let p = self.store.get(id);
            if !p.stable_id().starts_with(scope.prefix()) {
                continue;
            }
            let src = other
                .store
                .lookup(p.stable_id())
                .map(|o| other.store.value(o))
                .ok_or_else(|| Error::Contract(format!("source model lacks `{}`", p.stable_id())))?;
            if src.dims() != p.value().dims() {
                return Err(Error::Dimension {
                    op: "copy_scope_from",
                    lhs: p.value().dims().to_vec(),
                    rhs: src.dims().to_vec(),
                });
            }
            *self.store.get_mut(id).value_mut() = src.clone();
        }
        Ok(())
    }

    /// Re-draws the pooling parameters.
    pub fn reinit_pool<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.pool.reinit(&mut self.store, rng)
    }

    /// A single-task model for `task` sharing this model's encoder and
    /// pooling weights, with a fresh zero head.
    pub fn transfer(&self, task: TaskSpec) -> Result<MultiTaskModel> {
        let config = ModelConfig {
            head_init: HeadInit::Zero,
            ..self.config.clone()
        };
        let mut m = MultiTaskModel::new(config, TaskRegistry::new(vec![task])?, 0)?;
        m.copy_scope_from(self, Scope::Encoder)?;
        m.copy_scope_from(self, Scope::Pool)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskSpec;
    use crate::rng::stream;

    fn model(init: HeadInit) -> MultiTaskModel {
        let reg = TaskRegistry::new(vec![TaskSpec::binary("a"), TaskSpec::multiclass("b", 3)]).unwrap();
        let mut cfg = ModelConfig::new(EncoderConfig::new(4, 8));
        cfg.head_init = init;
        MultiTaskModel::new(cfg, reg, 3).unwrap()
    }

    fn bag(n: usize, d: usize, seed: u64) -> DenseTensor {
        let mut r = stream(seed, &[]);
        DenseTensor::matrix(n, d, (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn eval_is_deterministic_and_zero_head_gives_bias() {
        let m = model(HeadInit::Zero);
        let x = bag(5, 4, 1);
        let (a, _) = m.predict("b", &x).unwrap();
        let (b, _) = m.predict("b", &x).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn unknown_task_and_width_mismatch() {
        let m = model(HeadInit::Zero);
        assert!(matches!(m.predict("zz", &bag(3, 4, 0)), Err(Error::UnknownTask(_))));
        assert!(matches!(m.predict("a", &bag(3, 5, 0)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn swapping_heads_swaps_logits() {
        let reg = TaskRegistry::new(vec![TaskSpec::binary("a"), TaskSpec::binary("b")]).unwrap();
        let mut cfg = ModelConfig::new(EncoderConfig::new(4, 8));
        cfg.head_init = HeadInit::Uniform;
        let mut m = MultiTaskModel::new(cfg, reg, 9).unwrap();
        let x = bag(6, 4, 2);
        let (la, _) = m.predict("a", &x).unwrap();
        let (lb, _) = m.predict("b", &x).unwrap();
        let (ha, hb) = (m.head("a").unwrap().clone(), m.head("b").unwrap().clone());
        for (p, q) in [(ha.weight, hb.weight), (ha.bias, hb.bias)] {
            let vp = m.store().value(p).clone();
            let vq = m.store().value(q).clone();
            *m.store_mut().get_mut(p).value_mut() = vq;
            *m.store_mut().get_mut(q).value_mut() = vp;
        }
        assert!(m.predict("a", &x).unwrap().0.bit_eq(&lb));
        assert!(m.predict("b", &x).unwrap().0.bit_eq(&la));
    }

    #[test]
    fn transfer_copies_encoder_and_pool() {
        let m = model(HeadInit::Uniform);
        let t = m.transfer(TaskSpec::binary("new")).unwrap();
        assert_eq!(t.digest(Scope::Encoder), m.digest(Scope::Encoder));
        assert_eq!(t.digest(Scope::Pool), m.digest(Scope::Pool));
        assert_eq!(t.heads().len(), 1);
        assert!(t.store().value(t.head("new").unwrap().weight).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_changes_train_but_not_eval_output() {
        let m = model(HeadInit::Uniform);
        let x = bag(4, 4, 5);
        let mut r = stream(1, &[]);
        let (e, _) = m.forward_bag("a", &x, Mode::Eval, &mut r).unwrap();
        let (e2, _) = m.forward_bag("a", &x, Mode::Eval, &mut stream(2, &[])).unwrap();
        assert!(e.bit_eq(&e2));
        let differs = (0..8).any(|s| {
            !m.forward_bag("a", &x, Mode::Train, &mut stream(s, &[])).unwrap().0.bit_eq(&e)
        });
        assert!(differs);
    }
}
