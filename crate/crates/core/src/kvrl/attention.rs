//! One attention row: the query at a single position attends over its visible
//! keys and values, then the position-wise FFN. Batch and streaming both go
//! through these functions so their arithmetic is identical.

use crate::kvrl::BlockParams;
use crate::numerics::{axpy, dot, softmax_backward, softmax_in_place, Gradients, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AttentionBlock<'a> {
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
    pub wv: &'a Tensor,
    pub w1: &'a Tensor,
    pub b1: &'a Tensor,
    pub w2: &'a Tensor,
    pub b2: &'a Tensor,
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RowTrace {
    pub query: Vec<f64>,
    /// Attention weights over the visible positions, in the order given.
    pub weights: Vec<f64>,
    pub mixed: Vec<f64>,
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    /// Inverted-dropout multipliers on the FFN output, when training.
    pub dropout: Option<Vec<f64>>,
}

impl<'a> AttentionBlock<'a> {
    pub fn width(&self) -> usize {
        self.wq.rows()
    }

    pub fn key(&self, x: &[f64]) -> Vec<f64> {
        self.wk.matvec(x)
    }

    pub fn value(&self, x: &[f64]) -> Vec<f64> {
        self.wv.matvec(x)
    }

    /// Multiply-accumulates of one row over `visible` positions, excluding the
    /// key/value projections.
    pub fn row_cost(&self, visible: usize) -> u64 {
        let d = self.width() as u64;
        let f = self.w1.rows() as u64;
        d * d + 2 * visible as u64 * d + 2 * d * f
    }
}

/// Output column for the query input `x` given the visible keys and values
/// (ascending positions, ending with the query's own).
pub fn attention_row(
    block: &AttentionBlock,
    x: &[f64],
    keys: &[&[f64]],
    values: &[&[f64]],
    residual: bool,
    dropout: Option<Vec<f64>>,
) -> (Vec<f64>, RowTrace) {
    debug_assert!(!keys.is_empty() && keys.len() == values.len());
    let d = block.width();
    let scale = 1.0 / (d as f64).sqrt();
    let query = block.wq.matvec(x);
    let mut weights: Vec<f64> = keys.iter().map(|k| dot(&query, k) * scale).collect();
    softmax_in_place(&mut weights);
    let mut mixed = vec![0.0; d];
    for (a, v) in weights.iter().zip(values) {
        axpy(*a, v, &mut mixed);
    }
    let mut pre = block.w1.matvec(&mixed);
    axpy(1.0, block.b1.data(), &mut pre);
    let hidden: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
    let mut out = block.w2.matvec(&hidden);
    axpy(1.0, block.b2.data(), &mut out);
    if let Some(mask) = &dropout {
        out.iter_mut().zip(mask).for_each(|(o, m)| *o *= m);
    }
    if residual {
        axpy(1.0, x, &mut out);
    }
    let trace = RowTrace {
        query,
        weights,
        mixed,
        pre,
        hidden,
        dropout,
    };
    (out, trace)
}

/// Gradients of one row with respect to its query input, keys and values.
#[derive(Clone, Debug)]
pub struct RowGrad {
    pub dx: Vec<f64>,
    pub dkeys: Vec<Vec<f64>>,
    pub dvalues: Vec<Vec<f64>>,
}

/// Back-propagates `dout` through one row, accumulating the query-side and FFN
/// parameter gradients. Key/value projection gradients are left to the caller
/// since keys and values are shared between rows.
#[allow(clippy::too_many_arguments)]
pub fn attention_row_backward(
    block: &AttentionBlock,
    params: &BlockParams,
    x: &[f64],
    keys: &[&[f64]],
    values: &[&[f64]],
    trace: &RowTrace,
    residual: bool,
    dout: &[f64],
    grads: &mut Gradients,
) -> RowGrad {
    let d = block.width();
    let scale = 1.0 / (d as f64).sqrt();
    let mut dx = vec![0.0; d];
    if residual {
        axpy(1.0, dout, &mut dx);
    }
    let mut g = dout.to_vec();
    if let Some(mask) = &trace.dropout {
        g.iter_mut().zip(mask).for_each(|(a, m)| *a *= m);
    }
    grads.get_mut(params.w2).outer_acc(&g, &trace.hidden);
    axpy(1.0, &g, grads.get_mut(params.b2).data_mut());
    let mut dh = vec![0.0; trace.hidden.len()];
    block.w2.matvec_t_acc(&g, &mut dh);
    for (v, &z) in dh.iter_mut().zip(&trace.pre) {
        if z <= 0.0 {
            *v = 0.0;
        }
    }
    grads.get_mut(params.w1).outer_acc(&dh, &trace.mixed);
    axpy(1.0, &dh, grads.get_mut(params.b1).data_mut());
    let mut dmixed = vec![0.0; d];
    block.w1.matvec_t_acc(&dh, &mut dmixed);

    let dweights: Vec<f64> = values.iter().map(|v| dot(&dmixed, v)).collect();
    let dvalues = trace.weights.iter().map(|&a| dmixed.iter().map(|g| a * g).collect()).collect();
    let mut dscores = vec![0.0; keys.len()];
    softmax_backward(&trace.weights, &dweights, &mut dscores);
    let mut dquery = vec![0.0; d];
    let mut dkeys = Vec::with_capacity(keys.len());
    for (k, &s) in keys.iter().zip(&dscores) {
        let s = s * scale;
        axpy(s, k, &mut dquery);
        dkeys.push(trace.query.iter().map(|q| s * q).collect());
    }
    grads.get_mut(params.wq).outer_acc(&dquery, x);
    block.wq.matvec_t_acc(&dquery, &mut dx);
    RowGrad { dx, dkeys, dvalues }
}
