use serde::{Deserialize, Serialize};

use crate::error::{KvecError, Result};
use crate::kvrl::FusionParams;
use crate::numerics::{axpy, sigmoid, Gradients, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct FusionCell<'a> {
    pub wf: &'a Tensor,
    pub wi: &'a Tensor,
    pub wo: &'a Tensor,
    pub wc: &'a Tensor,
    pub bf: &'a Tensor,
    pub bi: &'a Tensor,
    pub bo: &'a Tensor,
    pub bc: &'a Tensor,
}

impl FusionCell<'_> {
    pub fn hidden(&self) -> usize {
        self.wf.rows()
    }

    pub fn input_width(&self) -> usize {
        self.wf.cols() - self.wf.rows()
    }
}

/// Running representation of one key-value sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceState {
    pub s: Vec<f64>,
    pub cell: Vec<f64>,
    pub n: usize,
    pub halted: bool,
}

impl SequenceState {
    pub fn new(hidden: usize) -> Self {
        SequenceState {
            s: vec![0.0; hidden],
            cell: vec![0.0; hidden],
            n: 0,
            halted: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionTrace {
    /// `[s_prev; e]`.
    pub input: Vec<f64>,
    pub cell_prev: Vec<f64>,
    pub forget: Vec<f64>,
    pub input_gate: Vec<f64>,
    pub output: Vec<f64>,
    pub candidate: Vec<f64>,
    pub cell_tanh: Vec<f64>,
}

fn gate(w: &Tensor, b: &Tensor, z: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut out = w.matvec(z);
    axpy(1.0, b.data(), &mut out);
    out.iter_mut().for_each(|x| *x = f(*x));
    out
}

/// One gated update of `state` with the item embedding `e`.
pub fn fuse(cell: &FusionCell, state: &SequenceState, e: &[f64]) -> Result<(SequenceState, FusionTrace)> {
    if state.halted {
        return Err(KvecError::HaltedKey("fuse on a halted sequence".into()));
    }
    if e.len() != cell.input_width() || state.s.len() != cell.hidden() {
        return Err(KvecError::Shape(format!(
            "fusion expects e of width {} and s of width {}, got {} and {}",
            cell.input_width(),
            cell.hidden(),
            e.len(),
            state.s.len()
        )));
    }
    let mut z = Vec::with_capacity(state.s.len() + e.len());
    z.extend_from_slice(&state.s);
    z.extend_from_slice(e);
    let forget = gate(cell.wf, cell.bf, &z, sigmoid);
    let input_gate = gate(cell.wi, cell.bi, &z, sigmoid);
    let output = gate(cell.wo, cell.bo, &z, sigmoid);
    let candidate = gate(cell.wc, cell.bc, &z, f64::tanh);
    let c: Vec<f64> = (0..forget.len())
        .map(|k| forget[k] * state.cell[k] + input_gate[k] * candidate[k])
        .collect();
    let cell_tanh: Vec<f64> = c.iter().map(|x| x.tanh()).collect();
    let s = output.iter().zip(&cell_tanh).map(|(o, t)| o * t).collect();
    let next = SequenceState {
        s,
        cell: c,
        n: state.n + 1,
        halted: false,
    };
    let trace = FusionTrace {
        input: z,
        cell_prev: state.cell.clone(),
        forget,
        input_gate,
        output,
        candidate,
        cell_tanh,
    };
    Ok((next, trace))
}

/// Given gradients on the new `s` and cell, returns gradients on the previous
/// `s`, previous cell and the item embedding.
pub fn fuse_backward(
    cell: &FusionCell,
    params: &FusionParams,
    trace: &FusionTrace,
    ds: &[f64],
    dcell: &[f64],
    grads: &mut Gradients,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let h = ds.len();
    let mut dc = dcell.to_vec();
    let mut d_out = vec![0.0; h];
    for k in 0..h {
        d_out[k] = ds[k] * trace.cell_tanh[k] * trace.output[k] * (1.0 - trace.output[k]);
        dc[k] += ds[k] * trace.output[k] * (1.0 - trace.cell_tanh[k] * trace.cell_tanh[k]);
    }
    let mut d_forget = vec![0.0; h];
    let mut d_input = vec![0.0; h];
    let mut d_cand = vec![0.0; h];
    let mut dcell_prev = vec![0.0; h];
    for k in 0..h {
        let (f, i, g) = (trace.forget[k], trace.input_gate[k], trace.candidate[k]);
        d_forget[k] = dc[k] * trace.cell_prev[k] * f * (1.0 - f);
        d_input[k] = dc[k] * g * i * (1.0 - i);
        d_cand[k] = dc[k] * i * (1.0 - g * g);
        dcell_prev[k] = dc[k] * f;
    }
    let mut dz = vec![0.0; trace.input.len()];
    for (w, b, dg, wt) in [
        (params.wf, params.bf, &d_forget, cell.wf),
        (params.wi, params.bi, &d_input, cell.wi),
        (params.wo, params.bo, &d_out, cell.wo),
        (params.wc, params.bc, &d_cand, cell.wc),
    ] {
        grads.get_mut(w).outer_acc(dg, &trace.input);
        axpy(1.0, dg, grads.get_mut(b).data_mut());
        wt.matvec_t_acc(dg, &mut dz);
    }
    let de = dz.split_off(h);
    (dz, dcell_prev, de)
}
