use rand::Rng;

use crate::kvrl::{uniform, EncoderConfig};
use crate::numerics::{axpy, Gradients, ParamId, ParameterStore, Tensor};
use crate::sequence::{FieldSpec, FieldValue, Schema};

const TABLE_INIT: f64 = 0.5;

#[derive(Clone, Debug)]
pub enum FieldEmbedding {
    /// Lookup table with one row per category.
    Categorical(ParamId),
    /// `weight * (x - mean) / std + bias`, both `d x 1`.
    Numeric {
        weight: ParamId,
        bias: ParamId,
        mean: f64,
        std: f64,
    },
}

/// Ids of every input-embedding table. Tables are `rows x d`.
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub fields: Vec<FieldEmbedding>,
    pub membership: ParamId,
    pub position: ParamId,
    pub time: ParamId,
    pub d_model: usize,
    pub slot_count: usize,
    pub max_seq_pos: usize,
    pub max_time: usize,
    pub use_membership: bool,
    pub use_time: bool,
}

/// What the embedding needs to know about one item.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingIndex {
    pub slot: usize,
    pub seq_pos: usize,
    pub time_pos: usize,
}

impl EmbeddingTables {
    pub fn register(store: &mut ParameterStore, cfg: &EncoderConfig, schema: &Schema, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let fields = schema
            .fields
            .iter()
            .enumerate()
            .map(|(i, f)| match f.spec {
                FieldSpec::Categorical { cardinality } => FieldEmbedding::Categorical(store.add(
                    format!("embed.field{i}"),
                    uniform(rng, cardinality as usize, d, TABLE_INIT),
                )),
                FieldSpec::Numeric { mean, std } => FieldEmbedding::Numeric {
                    weight: store.add(format!("embed.field{i}.weight"), uniform(rng, d, 1, TABLE_INIT)),
                    bias: store.add(format!("embed.field{i}.bias"), Tensor::zeros(d, 1)),
                    mean,
                    std,
                },
            })
            .collect();
        EmbeddingTables {
            fields,
            membership: store.add("embed.membership", uniform(rng, cfg.slot_count, d, TABLE_INIT)),
            position: store.add("embed.position", uniform(rng, cfg.max_seq_pos, d, TABLE_INIT)),
            time: store.add("embed.time", uniform(rng, cfg.window, d, TABLE_INIT)),
            d_model: d,
            slot_count: cfg.slot_count,
            max_seq_pos: cfg.max_seq_pos,
            max_time: cfg.window,
            use_membership: cfg.membership_embedding,
            use_time: cfg.time_embeddings,
        }
    }

    /// Table rows for a key ordinal, 1-based sequence position and 1-based
    /// arrival index, clamped to the last row.
    pub fn index(&self, key: usize, seq_index: usize, arrival: usize) -> EmbeddingIndex {
        EmbeddingIndex {
            slot: key % self.slot_count,
            seq_pos: (seq_index - 1).min(self.max_seq_pos - 1),
            time_pos: (arrival - 1).min(self.max_time - 1),
        }
    }

    /// Column of the input embedding for one item.
    pub fn embed(&self, store: &ParameterStore, value: &[FieldValue], at: EmbeddingIndex) -> Vec<f64> {
        let mut out = vec![0.0; self.d_model];
        for (f, v) in self.fields.iter().zip(value) {
            match *f {
                FieldEmbedding::Categorical(id) => {
                    let code = v.as_code().expect("normalized categorical value") as usize;
                    axpy(1.0, store.value(id).row(code), &mut out);
                }
                FieldEmbedding::Numeric { weight, bias, mean, std } => {
                    let z = (v.as_real() - mean) / std;
                    axpy(z, store.value(weight).data(), &mut out);
                    axpy(1.0, store.value(bias).data(), &mut out);
                }
            }
        }
        if self.use_membership {
            axpy(1.0, store.value(self.membership).row(at.slot), &mut out);
        }
        if self.use_time {
            axpy(1.0, store.value(self.position).row(at.seq_pos), &mut out);
            axpy(1.0, store.value(self.time).row(at.time_pos), &mut out);
        }
        out
    }

    pub fn backward(&self, value: &[FieldValue], at: EmbeddingIndex, upstream: &[f64], grads: &mut Gradients) {
        for (f, v) in self.fields.iter().zip(value) {
            match *f {
                FieldEmbedding::Categorical(id) => {
                    let code = v.as_code().expect("normalized categorical value") as usize;
                    axpy(1.0, upstream, grads.get_mut(id).row_mut(code));
                }
                FieldEmbedding::Numeric { weight, bias, mean, std } => {
                    let z = (v.as_real() - mean) / std;
                    axpy(z, upstream, grads.get_mut(weight).data_mut());
                    axpy(1.0, upstream, grads.get_mut(bias).data_mut());
                }
            }
        }
        if self.use_membership {
            axpy(1.0, upstream, grads.get_mut(self.membership).row_mut(at.slot));
        }
        if self.use_time {
            axpy(1.0, upstream, grads.get_mut(self.position).row_mut(at.seq_pos));
            axpy(1.0, upstream, grads.get_mut(self.time).row_mut(at.time_pos));
        }
    }
}
