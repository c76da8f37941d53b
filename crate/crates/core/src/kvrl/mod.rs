//! Key-value sequence representation learning: input embedding, stacked
//! masked-attention blocks, and the gated fusion that turns a key's item
//! embeddings into its sequence state.

mod attention;
mod context;
mod embedding;
mod encoder;
mod fusion;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KvecError, Result};
use crate::numerics::{ParamId, ParameterStore, Tensor};
use crate::sequence::{MaskConfig, Schema};

pub use attention::{attention_row, attention_row_backward, AttentionBlock, RowGrad, RowTrace};
pub use context::{EncodeContext, ItemEmbeddingInput};
pub use embedding::{EmbeddingIndex, EmbeddingTables, FieldEmbedding};
pub use encoder::{attention_stack, EncoderPass};
pub use fusion::{fuse, fuse_backward, FusionCell, FusionTrace, SequenceState};

/// Encoder hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Item embedding width `d`.
    pub d_model: usize,
    /// FFN inner width `d'`.
    pub ffn_width: usize,
    pub blocks: usize,
    /// Fusion state width `h`.
    pub hidden: usize,
    pub slot_count: usize,
    pub max_seq_pos: usize,
    pub window: usize,
    pub residual: bool,
    pub dropout: f64,
    pub key_correlation: bool,
    pub value_correlation: bool,
    /// Relative-position and time embeddings.
    pub time_embeddings: bool,
    pub membership_embedding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::traffic()
    }
}

impl EncoderConfig {
    /// Widths used for traffic-style data: d = 128, six blocks, 256 state cells.
    pub fn traffic() -> Self {
        EncoderConfig {
            d_model: 128,
            ffn_width: 512,
            blocks: 6,
            hidden: 256,
            slot_count: 64,
            max_seq_pos: 256,
            window: 512,
            residual: false,
            dropout: 0.1,
            key_correlation: true,
            value_correlation: true,
            time_embeddings: true,
            membership_embedding: true,
        }
    }

    /// Profile for small data: d = 64, two blocks.
    pub fn small() -> Self {
        EncoderConfig {
            d_model: 64,
            ffn_width: 256,
            blocks: 2,
            ..Self::traffic()
        }
    }

    /// Single-core desk profile used by the synthetic experiments.
    pub fn desk() -> Self {
        EncoderConfig {
            d_model: 16,
            ffn_width: 32,
            blocks: 1,
            hidden: 16,
            slot_count: 16,
            max_seq_pos: 128,
            window: 512,
            dropout: 0.0,
            ..Self::traffic()
        }
    }

    pub fn mask(&self) -> MaskConfig {
        MaskConfig {
            window: self.window,
            key_correlation: self.key_correlation,
            value_correlation: self.value_correlation,
        }
    }

    pub fn check(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("ffn_width", self.ffn_width),
            ("blocks", self.blocks),
            ("hidden", self.hidden),
            ("slot_count", self.slot_count),
            ("max_seq_pos", self.max_seq_pos),
            ("window", self.window),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(KvecError::Config(format!("encoder.{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(KvecError::Config("encoder.dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Parameter ids of one attention block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Parameter ids of the fusion cell; every gate reads `[s; e]`.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub wf: ParamId,
    pub wi: ParamId,
    pub wo: ParamId,
    pub wc: ParamId,
    pub bf: ParamId,
    pub bi: ParamId,
    pub bo: ParamId,
    pub bc: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embeddings: EmbeddingTables,
    pub blocks: Vec<BlockParams>,
    pub fusion: FusionParams,
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// Fan-in scaled uniform init.
pub fn dense(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    uniform(rng, rows, cols, 1.0 / (cols as f64).sqrt())
}

impl EncoderParams {
    pub fn register(store: &mut ParameterStore, cfg: &EncoderConfig, schema: &Schema, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let embeddings = EmbeddingTables::register(store, cfg, schema, rng);
        let blocks = (0..cfg.blocks)
            .map(|b| BlockParams {
                wq: store.add(format!("block{b}.wq"), dense(rng, d, d)),
                wk: store.add(format!("block{b}.wk"), dense(rng, d, d)),
                wv: store.add(format!("block{b}.wv"), dense(rng, d, d)),
                w1: store.add(format!("block{b}.ffn.w1"), dense(rng, cfg.ffn_width, d)),
                b1: store.add(format!("block{b}.ffn.b1"), Tensor::zeros(cfg.ffn_width, 1)),
                w2: store.add(format!("block{b}.ffn.w2"), dense(rng, d, cfg.ffn_width)),
                b2: store.add(format!("block{b}.ffn.b2"), Tensor::zeros(d, 1)),
            })
            .collect();
        let h = cfg.hidden;
        let z = h + d;
        let fusion = FusionParams {
            wf: store.add("fusion.wf", dense(rng, h, z)),
            wi: store.add("fusion.wi", dense(rng, h, z)),
            wo: store.add("fusion.wo", dense(rng, h, z)),
            wc: store.add("fusion.wc", dense(rng, h, z)),
            bf: store.add("fusion.bf", Tensor::filled(h, 1, 1.0)),
            bi: store.add("fusion.bi", Tensor::zeros(h, 1)),
            bo: store.add("fusion.bo", Tensor::zeros(h, 1)),
            bc: store.add("fusion.bc", Tensor::zeros(h, 1)),
        };
        EncoderParams {
            embeddings,
            blocks,
            fusion,
        }
    }

    pub fn block<'a>(&self, store: &'a ParameterStore, index: usize) -> AttentionBlock<'a> {
        let p = &self.blocks[index];
        AttentionBlock {
            wq: store.value(p.wq),
            wk: store.value(p.wk),
            wv: store.value(p.wv),
            w1: store.value(p.w1),
            b1: store.value(p.b1),
            w2: store.value(p.w2),
            b2: store.value(p.b2),
        }
    }

    pub fn fusion<'a>(&self, store: &'a ParameterStore) -> FusionCell<'a> {
        let p = &self.fusion;
        FusionCell {
            wf: store.value(p.wf),
            wi: store.value(p.wi),
            wo: store.value(p.wo),
            wc: store.value(p.wc),
            bf: store.value(p.bf),
            bi: store.value(p.bi),
            bo: store.value(p.bo),
            bc: store.value(p.bc),
        }
    }
}
