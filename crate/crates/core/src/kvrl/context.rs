//! Incremental encoding with a FIFO cache of per-layer columns bounded by the
//! context window. Each new item costs one attention row per layer.

use std::collections::{HashMap, VecDeque};

use crate::error::{KvecError, Result};
use crate::kvrl::{attention_row, fuse, EncoderConfig, EncoderParams, SequenceState};
use crate::numerics::ParameterStore;
use crate::sequence::{FieldValue, KeyId, MaskBuilder, Schema};

#[derive(Clone, Debug)]
struct CachedPosition {
    arrival: usize,
    /// Input column of every layer, then the final output.
    columns: Vec<Vec<f64>>,
    /// Projected keys and values per layer, when that cache is enabled.
    kv: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Result of pushing one item through the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemEmbeddingInput {
    pub key: KeyId,
    pub arrival: usize,
    pub seq_index: usize,
    /// Final-layer column.
    pub column: Vec<f64>,
    /// Visible arrival indices of the new row.
    pub visible: Vec<usize>,
}

/// Streaming encoder state for a single input stream.
pub struct EncodeContext<'m> {
    params: &'m EncoderParams,
    cfg: &'m EncoderConfig,
    store: &'m ParameterStore,
    schema: Schema,
    cache_kv: bool,
    builder: MaskBuilder,
    key_index: HashMap<String, KeyId>,
    keys: Vec<String>,
    states: Vec<SequenceState>,
    /// Items observed per key, halted or not.
    seen: Vec<usize>,
    cache: VecDeque<CachedPosition>,
    macs: u64,
}

impl<'m> EncodeContext<'m> {
    pub fn new(
        params: &'m EncoderParams,
        cfg: &'m EncoderConfig,
        store: &'m ParameterStore,
        schema: Schema,
        cache_kv: bool,
    ) -> Self {
        let builder = MaskBuilder::new(cfg.mask(), schema.session_gap);
        EncodeContext {
            params,
            cfg,
            store,
            schema,
            cache_kv,
            builder,
            key_index: HashMap::new(),
            keys: Vec::new(),
            states: Vec::new(),
            seen: Vec::new(),
            cache: VecDeque::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.builder.len()
    }

    pub fn is_empty(&self) -> bool {
        self.builder.is_empty()
    }

    pub fn cached_positions(&self) -> usize {
        self.cache.len()
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn key_id(&self, key: &str) -> Option<KeyId> {
        self.key_index.get(key).copied()
    }

    pub fn state(&self, key: KeyId) -> &SequenceState {
        &self.states[key]
    }

    pub fn mark_halted(&mut self, key: KeyId) {
        self.states[key].halted = true;
    }

    /// Cached columns (every layer input, then the final output) of a position
    /// still inside the window.
    pub fn cached_columns(&self, arrival: usize) -> Option<&[Vec<f64>]> {
        let front = self.cache.front()?.arrival;
        self.cache
            .get(arrival.checked_sub(front)?)
            .map(|c| c.columns.as_slice())
    }

    fn cached(&self, arrival: usize) -> &CachedPosition {
        let front = self.cache.front().expect("non-empty cache").arrival;
        &self.cache[arrival - front]
    }

    /// Embeds and encodes the next item, appending it to every layer's cache.
    /// The key's sequence state is not touched.
    pub fn ingest(&mut self, key: &str, value: Vec<FieldValue>) -> Result<ItemEmbeddingInput> {
        let value = self.schema.normalize(value)?;
        let key_id = match self.key_index.get(key) {
            Some(&k) => k,
            None => {
                let k = self.keys.len();
                self.key_index.insert(key.to_string(), k);
                self.keys.push(key.to_string());
                self.states.push(SequenceState::new(self.cfg.hidden));
                self.seen.push(0);
                k
            }
        };
        self.seen[key_id] += 1;
        let seq_index = self.seen[key_id];
        let code = self.schema.session_code(&value);
        let visible = self.builder.push(key_id, code);
        let arrival = self.builder.len();

        while self.cache.len() >= self.cfg.window {
            self.cache.pop_front();
        }
        let at = self.params.embeddings.index(key_id, seq_index, arrival);
        let mut x = self.params.embeddings.embed(self.store, &value, at);
        self.macs += (value.len() * self.cfg.d_model) as u64;
        let d = self.cfg.d_model as u64;
        let mut columns = Vec::with_capacity(self.cfg.blocks + 1);
        let mut kv = Vec::new();
        for layer in 0..self.cfg.blocks {
            let block = self.params.block(self.store, layer);
            let own = (block.key(&x), block.value(&x));
            self.macs += 2 * d * d;
            let earlier = &visible[..visible.len() - 1];
            let mut owned = Vec::new();
            if !self.cache_kv {
                for &j in earlier {
                    let col = &self.cached(j).columns[layer];
                    owned.push((block.key(col), block.value(col)));
                }
                self.macs += 2 * d * d * earlier.len() as u64;
            }
            let mut keys: Vec<&[f64]> = Vec::with_capacity(visible.len());
            let mut values: Vec<&[f64]> = Vec::with_capacity(visible.len());
            for (idx, &j) in earlier.iter().enumerate() {
                let (k, v) = if self.cache_kv {
                    let c = &self.cached(j).kv[layer];
                    (&c.0, &c.1)
                } else {
                    (&owned[idx].0, &owned[idx].1)
                };
                keys.push(k);
                values.push(v);
            }
            keys.push(&own.0);
            values.push(&own.1);
            let (out, _) = attention_row(&block, &x, &keys, &values, self.cfg.residual, None);
            self.macs += block.row_cost(keys.len());
            columns.push(std::mem::replace(&mut x, out));
            if self.cache_kv {
                kv.push(own);
            }
        }
        columns.push(x.clone());
        self.cache.push_back(CachedPosition { arrival, columns, kv });
        Ok(ItemEmbeddingInput {
            key: key_id,
            arrival,
            seq_index,
            column: x,
            visible,
        })
    }

    /// Fuses an encoded column into its key's state.
    pub fn fuse_key(&mut self, key: KeyId, column: &[f64]) -> Result<&SequenceState> {
        let state = &self.states[key];
        if state.halted {
            return Err(KvecError::HaltedKey(self.keys[key].clone()));
        }
        let cell = self.params.fusion(self.store);
        let (next, _) = fuse(&cell, state, column)?;
        let h = self.cfg.hidden as u64;
        self.macs += 4 * h * (h + self.cfg.d_model as u64);
        self.states[key] = next;
        Ok(&self.states[key])
    }

    /// Ingest followed by fuse. The item stays in the context even when its key
    /// has already halted.
    pub fn encode_step(&mut self, key: &str, value: Vec<FieldValue>) -> Result<&SequenceState> {
        let enc = self.ingest(key, value)?;
        self.fuse_key(enc.key, &enc.column)
    }
}
