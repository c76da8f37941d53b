//! Batch encoding of a tangled sequence. Columns are computed on demand and
//! memoized, so a training episode that halts every key early only pays for the
//! positions it actually reached (plus whatever those positions can see).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KvecError, Result};
use crate::kvrl::embedding::EmbeddingIndex;
use crate::kvrl::{attention_row, attention_row_backward, AttentionBlock, EncoderConfig, EncoderParams, RowTrace};
use crate::numerics::{axpy, Gradients, ParameterStore, Tensor};
use crate::sequence::{DynamicMask, TangledSequence};

/// Runs every block over all columns of `inputs` (`d x t`) under `mask`.
pub fn attention_stack(inputs: &Tensor, mask: &DynamicMask, blocks: &[AttentionBlock], residual: bool) -> Result<Tensor> {
    let t = inputs.cols();
    if mask.size() != t {
        return Err(KvecError::Shape(format!("mask is {} but input has {t} columns", mask.size())));
    }
    let rows: Vec<Vec<usize>> = (1..=t).map(|i| mask.row(i).into_iter().map(|j| j - 1).collect()).collect();
    let mut cols: Vec<Vec<f64>> = (0..t).map(|c| inputs.col(c)).collect();
    for block in blocks {
        if block.wq.cols() != inputs.rows() {
            return Err(KvecError::Shape("block width differs from input rows".into()));
        }
        let keys: Vec<Vec<f64>> = cols.iter().map(|x| block.key(x)).collect();
        let values: Vec<Vec<f64>> = cols.iter().map(|x| block.value(x)).collect();
        cols = (0..t)
            .map(|i| {
                let k: Vec<&[f64]> = rows[i].iter().map(|&j| keys[j].as_slice()).collect();
                let v: Vec<&[f64]> = rows[i].iter().map(|&j| values[j].as_slice()).collect();
                attention_row(block, &cols[i], &k, &v, residual, None).0
            })
            .collect();
    }
    let mut out = Tensor::zeros(inputs.rows(), t);
    for (c, col) in cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            out.set(r, c, x);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
struct Layer {
    keys: Vec<Option<Vec<f64>>>,
    values: Vec<Option<Vec<f64>>>,
    out: Vec<Option<Vec<f64>>>,
    traces: Vec<Option<RowTrace>>,
    /// Positions in the order their rows were computed.
    order: Vec<usize>,
}

impl Layer {
    fn new(n: usize) -> Self {
        Layer {
            keys: vec![None; n],
            values: vec![None; n],
            out: vec![None; n],
            traces: vec![None; n],
            order: Vec::new(),
        }
    }
}

/// Memoized forward pass over one tangled sequence with a frozen parameter
/// snapshot. Positions are 0-based here.
pub struct EncoderPass<'m> {
    params: &'m EncoderParams,
    cfg: &'m EncoderConfig,
    store: &'m ParameterStore,
    seq: &'m TangledSequence,
    rows: Vec<Vec<usize>>,
    index: Vec<EmbeddingIndex>,
    inputs: Vec<Option<Vec<f64>>>,
    layers: Vec<Layer>,
    dropout: Option<ChaCha8Rng>,
    macs: u64,
}

impl<'m> EncoderPass<'m> {
    /// `dropout` enables training-mode dropout driven by the given stream.
    pub fn new(
        params: &'m EncoderParams,
        cfg: &'m EncoderConfig,
        store: &'m ParameterStore,
        seq: &'m TangledSequence,
        dropout: Option<ChaCha8Rng>,
    ) -> Self {
        Self::prefix(params, cfg, store, seq, seq.len(), dropout)
    }

    /// Pass over the first `n` items only.
    pub fn prefix(
        params: &'m EncoderParams,
        cfg: &'m EncoderConfig,
        store: &'m ParameterStore,
        seq: &'m TangledSequence,
        n: usize,
        dropout: Option<ChaCha8Rng>,
    ) -> Self {
        let rows = seq
            .mask_rows(n, &cfg.mask())
            .into_iter()
            .map(|r| r.into_iter().map(|j| j - 1).collect())
            .collect();
        let index = seq.items()[..n]
            .iter()
            .map(|it| params.embeddings.index(it.key, it.seq_index, it.arrival))
            .collect();
        let dropout = dropout.filter(|_| cfg.dropout > 0.0);
        EncoderPass {
            params,
            cfg,
            store,
            seq,
            rows,
            index,
            inputs: vec![None; n],
            layers: (0..cfg.blocks).map(|_| Layer::new(n)).collect(),
            dropout,
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Visible positions of `pos`, ascending and ending with `pos`.
    pub fn visible(&self, pos: usize) -> &[usize] {
        &self.rows[pos]
    }

    /// Multiply-accumulates spent so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn input(&mut self, pos: usize) -> &[f64] {
        if self.inputs[pos].is_none() {
            let item = &self.seq.items()[pos];
            let col = self.params.embeddings.embed(self.store, &item.value, self.index[pos]);
            self.macs += (self.params.embeddings.fields.len() * self.cfg.d_model) as u64;
            self.inputs[pos] = Some(col);
        }
        self.inputs[pos].as_deref().expect("just computed")
    }

    fn layer_input(&self, layer: usize, pos: usize) -> &[f64] {
        if layer == 0 {
            self.inputs[pos].as_deref()
        } else {
            self.layers[layer - 1].out[pos].as_deref()
        }
        .expect("ensured before use")
    }

    fn ensure_kv(&mut self, layer: usize, pos: usize) {
        if self.layers[layer].keys[pos].is_some() {
            return;
        }
        if layer == 0 {
            self.input(pos);
        } else {
            self.ensure(layer - 1, pos);
        }
        let block = self.params.block(self.store, layer);
        let x = self.layer_input(layer, pos);
        let (k, v) = (block.key(x), block.value(x));
        let d = self.cfg.d_model as u64;
        self.macs += 2 * d * d;
        let l = &mut self.layers[layer];
        l.keys[pos] = Some(k);
        l.values[pos] = Some(v);
    }

    fn ensure(&mut self, layer: usize, pos: usize) {
        if self.layers[layer].out[pos].is_some() {
            return;
        }
        for idx in 0..self.rows[pos].len() {
            let j = self.rows[pos][idx];
            self.ensure_kv(layer, j);
        }
        let mask = self.dropout.as_mut().map(|rng| {
            let p = self.cfg.dropout;
            (0..self.cfg.d_model)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                .collect()
        });
        let block = self.params.block(self.store, layer);
        let l = &self.layers[layer];
        let keys: Vec<&[f64]> = self.rows[pos].iter().map(|&j| l.keys[j].as_deref().unwrap()).collect();
        let values: Vec<&[f64]> = self.rows[pos].iter().map(|&j| l.values[j].as_deref().unwrap()).collect();
        let (out, trace) = attention_row(
            &block,
            self.layer_input(layer, pos),
            &keys,
            &values,
            self.cfg.residual,
            mask,
        );
        self.macs += block.row_cost(keys.len());
        let l = &mut self.layers[layer];
        l.out[pos] = Some(out);
        l.traces[pos] = Some(trace);
        l.order.push(pos);
    }

    /// Final-layer column of `pos`.
    pub fn output(&mut self, pos: usize) -> &[f64] {
        self.layer_output(self.layers.len() - 1, pos)
    }

    pub fn layer_output(&mut self, layer: usize, pos: usize) -> &[f64] {
        self.ensure(layer, pos);
        self.layers[layer].out[pos].as_deref().expect("ensured")
    }

    /// Forces every position through every layer.
    pub fn compute_all(&mut self) {
        let top = self.layers.len() - 1;
        for pos in 0..self.len() {
            self.ensure(top, pos);
        }
    }

    /// Attention weights of a computed row, aligned with [`Self::visible`].
    pub fn attention_weights(&self, layer: usize, pos: usize) -> Option<&[f64]> {
        self.layers[layer].traces[pos].as_ref().map(|t| t.weights.as_slice())
    }

    /// Back-propagates gradients on final-layer columns (`None` = zero) into
    /// every encoder parameter.
    pub fn backward(&self, top: Vec<Option<Vec<f64>>>, grads: &mut Gradients) {
        let n = self.len();
        let d = self.cfg.d_model;
        let mut upstream = top;
        for layer in (0..self.layers.len()).rev() {
            let block = self.params.block(self.store, layer);
            let ids = &self.params.blocks[layer];
            let l = &self.layers[layer];
            let mut dinput: Vec<Option<Vec<f64>>> = vec![None; n];
            let mut dk: Vec<Option<Vec<f64>>> = vec![None; n];
            let mut dv: Vec<Option<Vec<f64>>> = vec![None; n];
            for &i in &l.order {
                let Some(g) = upstream[i].as_deref() else { continue };
                let trace = l.traces[i].as_ref().expect("computed row");
                let keys: Vec<&[f64]> = self.rows[i].iter().map(|&j| l.keys[j].as_deref().unwrap()).collect();
                let values: Vec<&[f64]> = self.rows[i].iter().map(|&j| l.values[j].as_deref().unwrap()).collect();
                let rg = attention_row_backward(
                    &block,
                    ids,
                    self.layer_input(layer, i),
                    &keys,
                    &values,
                    trace,
                    self.cfg.residual,
                    g,
                    grads,
                );
                add_into(&mut dinput[i], &rg.dx, d);
                for (idx, &j) in self.rows[i].iter().enumerate() {
                    add_into(&mut dk[j], &rg.dkeys[idx], d);
                    add_into(&mut dv[j], &rg.dvalues[idx], d);
                }
            }
            for j in 0..n {
                let x = match (&dk[j], &dv[j]) {
                    (None, None) => continue,
                    _ => self.layer_input(layer, j),
                };
                for (g, w, t) in [(&dk[j], ids.wk, block.wk), (&dv[j], ids.wv, block.wv)] {
                    if let Some(g) = g {
                        grads.get_mut(w).outer_acc(g, x);
                        let slot = dinput[j].get_or_insert_with(|| vec![0.0; d]);
                        t.matvec_t_acc(g, slot);
                    }
                }
            }
            upstream = dinput;
        }
        for (pos, g) in upstream.iter().enumerate() {
            if let Some(g) = g {
                let item = &self.seq.items()[pos];
                self.params.embeddings.backward(&item.value, self.index[pos], g, grads);
            }
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64], d: usize) {
    axpy(1.0, g, slot.get_or_insert_with(|| vec![0.0; d]));
}
