//! Multi-head attention MIL pooling and the mean/max baselines.
//!
//! Each head `h` scores instance `k` as `w_hᵀ · tanh(V_h · e_k)`, normalizes
//! the scores over the bag with a softmax and takes the weighted sum of the
//! raw instance embeddings. The per-head sums are concatenated and projected
//! back to the embedding width by `W_o`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, DenseTensor, ParamId, ParamStore, Tape, Var};

pub const DEFAULT_HEADS: usize = 8;

/// Attention hidden width used when none is configured: half the embedding
/// width, never below 16.
pub fn default_att_dim(dim: usize) -> usize {
    (dim / 2).max(16)
}

/// Handles to the learnable pooling parameters inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AttentionPoolParams {
    dim: usize,
    att_dim: usize,
    score_matrices: Vec<ParamId>,
    score_vectors: Vec<ParamId>,
    output_projection: ParamId,
}

impl AttentionPoolParams {
    /// Registers freshly initialized pooling parameters under `prefix`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        att_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || att_dim == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "attention pool needs heads, width and attention width >= 1 (got {heads}, {dim}, {att_dim})"
            )));
        }
        let mut score_matrices = Vec::with_capacity(heads);
        let mut score_vectors = Vec::with_capacity(heads);
        for h in 0..heads {
            let v = glorot_uniform(&[att_dim, dim], dim, att_dim, rng)?;
            score_matrices.push(store.register(format!("{prefix}.head{h}.score_matrix"), v)?);
            let w = glorot_uniform(&[att_dim], att_dim, 1, rng)?;
            score_vectors.push(store.register(format!("{prefix}.head{h}.score_vector"), w)?);
        }
        let wo = glorot_uniform(&[dim, heads * dim], heads * dim, dim, rng)?;
        let output_projection = store.register(format!("{prefix}.output_projection"), wo)?;
        Ok(AttentionPoolParams {
            dim,
            att_dim,
            score_matrices,
            score_vectors,
            output_projection,
        })
    }

    /// Binds to pooling parameters already registered under `prefix`.
    pub fn attach(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        let find = |id: String| {
            store
                .lookup(&id)
                .ok_or_else(|| Error::Contract(format!("missing pooling parameter `{id}`")))
        };
        let mut score_matrices = Vec::with_capacity(heads);
        let mut score_vectors = Vec::with_capacity(heads);
        for h in 0..heads {
            score_matrices.push(find(format!("{prefix}.head{h}.score_matrix"))?);
            score_vectors.push(find(format!("{prefix}.head{h}.score_vector"))?);
        }
        let output_projection = find(format!("{prefix}.output_projection"))?;
        let dims = store.value(score_matrices.first().copied().unwrap_or(output_projection)).dims();
        let (att_dim, dim) = (dims[0], *dims.last().unwrap());
        if heads == 0 || store.value(output_projection).dims() != [dim, heads * dim] {
            return Err(Error::Contract(format!("pooling parameters under `{prefix}` are inconsistent")));
        }
        Ok(AttentionPoolParams {
            dim,
            att_dim,
            score_matrices,
            score_vectors,
            output_projection,
        })
    }

    /// Re-draws every pooling parameter in place.
    pub fn reinit<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let (d, da, h) = (self.dim, self.att_dim, self.heads());
        for (&v, &w) in self.score_matrices.iter().zip(&self.score_vectors) {
            *store.get_mut(v).value_mut() = glorot_uniform(&[da, d], d, da, rng)?;
            *store.get_mut(w).value_mut() = glorot_uniform(&[da], da, 1, rng)?;
        }
        *store.get_mut(self.output_projection).value_mut() = glorot_uniform(&[d, h * d], h * d, d, rng)?;
        Ok(())
    }

    pub fn heads(&self) -> usize {
        self.score_matrices.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn att_dim(&self) -> usize {
        self.att_dim
    }

    pub fn score_matrix(&self, head: usize) -> ParamId {
        self.score_matrices[head]
    }

    pub fn score_vector(&self, head: usize) -> ParamId {
        self.score_vectors[head]
    }

    pub fn output_projection(&self) -> ParamId {
        self.output_projection
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .score_matrices
            .iter()
            .zip(&self.score_vectors)
            .flat_map(|(&v, &w)| [v, w])
            .collect();
        ids.push(self.output_projection);
        ids
    }
}

/// Per-head attention weights over the instances of one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// `[H × N]`, each row a probability vector.
    pub weights: DenseTensor,
    /// Instance identifiers in bag order (index into the source slide).
    pub instance_ids: Vec<usize>,
}

impl AttentionMap {
    pub fn heads(&self) -> usize {
        self.weights.rows()
    }

    pub fn len(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_ids.is_empty()
    }

    pub fn head(&self, h: usize) -> &[f64] {
        self.weights.row(h)
    }

    /// Mean weight per instance across heads.
    pub fn mean_over_heads(&self) -> Vec<f64> {
        let h = self.heads() as f64;
        (0..self.len())
            .map(|k| (0..self.heads()).map(|r| self.weights.at(r, k)).sum::<f64>() / h)
            .collect()
    }
}

/// Tape handles produced by [`attention_pool`].
#[derive(Clone, Debug)]
pub struct PoolVars {
    /// `[1 × D]`
    pub slide: Var,
    /// Per head, `[1 × D]` weighted sum of instances.
    pub head_vectors: Vec<Var>,
    /// Per head, `[1 × N]` softmax weights.
    pub weights: Vec<Var>,
}

/// Differentiable attention pooling of `bag` (`[N × D]`).
pub fn attention_pool(tape: &mut Tape, store: &ParamStore, params: &AttentionPoolParams, bag: Var) -> Result<PoolVars> {
    let dims = tape.value(bag).dims().to_vec();
    if dims.len() != 2 || dims[1] != params.dim {
        return Err(Error::Dimension {
            op: "attention_pool",
            lhs: dims,
            rhs: vec![params.dim],
        });
    }
    let n = dims[0];
    let mut head_vectors = Vec::with_capacity(params.heads());
    let mut weights = Vec::with_capacity(params.heads());
    for h in 0..params.heads() {
        let v = tape.param(store, params.score_matrices[h]);
        let vt = tape.transpose(v)?;
        let hidden = tape.matmul(bag, vt)?;
        let hidden = tape.tanh(hidden)?;
        let w = tape.param(store, params.score_vectors[h]);
        let w = tape.reshape(w, &[params.att_dim, 1])?;
        let scores = tape.matmul(hidden, w)?;
        let scores = tape.reshape(scores, &[1, n])?;
        let alpha = tape.softmax(scores, 1)?;
        head_vectors.push(tape.matmul(alpha, bag)?);
        weights.push(alpha);
    }
    let joined = tape.concat_cols(&head_vectors)?;
    let wo = tape.param(store, params.output_projection);
    let wot = tape.transpose(wo)?;
    let slide = tape.matmul(joined, wot)?;
    Ok(PoolVars {
        slide,
        head_vectors,
        weights,
    })
}

/// Collects per-head weights from the tape into an [`AttentionMap`].
pub fn collect_map(tape: &Tape, vars: &PoolVars, instance_ids: Vec<usize>) -> Result<AttentionMap> {
    let n = instance_ids.len();
    let values: Vec<f64> = vars
        .weights
        .iter()
        .flat_map(|&w| tape.value(w).values().to_vec())
        .collect();
    Ok(AttentionMap {
        weights: DenseTensor::matrix(vars.weights.len(), n, values)?,
        instance_ids,
    })
}

/// Value-level attention pooling: returns the `[D]` slide vector and the map.
pub fn pool_attention(store: &ParamStore, params: &AttentionPoolParams, bag: &DenseTensor) -> Result<(DenseTensor, AttentionMap)> {
    let mut tape = Tape::new();
    let b = tape.constant(bag.clone());
    let vars = attention_pool(&mut tape, store, params, b)?;
    let slide = tape.value(vars.slide).clone().reshaped(&[params.dim])?;
    let map = collect_map(&tape, &vars, (0..bag.rows()).collect())?;
    Ok((slide, map))
}

fn require_matrix(op: &'static str, bag: &DenseTensor) -> Result<()> {
    if bag.shape().rank() != 2 {
        return Err(Error::Dimension {
            op,
            lhs: bag.dims().to_vec(),
            rhs: vec![],
        });
    }
    Ok(())
}

/// Arithmetic mean over instances.
pub fn pool_mean(bag: &DenseTensor) -> Result<DenseTensor> {
    require_matrix("pool_mean", bag)?;
    let mut tape = Tape::new();
    let b = tape.constant(bag.clone());
    let m = tape.mean_rows(b)?;
    Ok(tape.value(m).clone())
}

/// Elementwise maximum over instances.
pub fn pool_max(bag: &DenseTensor) -> Result<DenseTensor> {
    require_matrix("pool_max", bag)?;
    let mut tape = Tape::new();
    let b = tape.constant(bag.clone());
    let m = tape.max_rows(b)?;
    Ok(tape.value(m).clone())
}

/// Rejects bags with no instances before they reach a tensor.
pub fn bag_from_rows(rows: &[Vec<f64>]) -> Result<DenseTensor> {
    if rows.is_empty() {
        return Err(Error::Contract("empty bag".into()));
    }
    DenseTensor::from_rows(rows)
}
