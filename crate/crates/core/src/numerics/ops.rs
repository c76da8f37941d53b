//! Differentiable kernels shared by every layer.

use crate::error::{KvecError, Result};
use crate::numerics::tensor::Tensor;
use crate::sequence::DynamicMask;

/// Stand-in for `-inf` in additive masks. Finite so that `0 * MASKED` never
/// yields NaN.
pub const MASKED: f64 = f64::MIN / 4.0;

fn is_masked(x: f64) -> bool {
    x <= MASKED / 2.0
}

/// Additive attention mask of `0` (visible) and [`MASKED`] entries.
#[derive(Clone, Debug, PartialEq)]
pub struct AdditiveMask(Tensor);

impl AdditiveMask {
    pub fn new(tensor: Tensor) -> Result<Self> {
        for r in 0..tensor.rows() {
            if !tensor.row(r).iter().any(|&x| !is_masked(x)) {
                return Err(KvecError::FullyMasked(r));
            }
        }
        Ok(AdditiveMask(tensor))
    }

    pub fn from_dynamic(mask: &DynamicMask) -> Self {
        let t = mask.size();
        let mut m = Tensor::filled(t, t, MASKED);
        for i in 1..=t {
            for j in mask.row(i) {
                m.set(i - 1, j - 1, 0.0);
            }
        }
        AdditiveMask(m)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// In-place softmax with max subtraction. `row` must be non-empty.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Gradient of softmax: `dz = p * (dp - <p, dp>)`.
pub fn softmax_backward(p: &[f64], dp: &[f64], dz: &mut [f64]) {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((z, &pi), &g) in dz.iter_mut().zip(p).zip(dp) {
        *z = pi * (g - inner);
    }
}

/// Row-wise softmax of `logits + mask`; masked entries come out exactly zero.
pub fn masked_softmax(logits: &Tensor, mask: &AdditiveMask) -> Result<Tensor> {
    let m = mask.tensor();
    if logits.shape() != m.shape() {
        return Err(KvecError::Shape(format!(
            "logits {:?} vs mask {:?}",
            logits.shape(),
            m.shape()
        )));
    }
    let mut out = Tensor::zeros(logits.rows(), logits.cols());
    let mut buf = Vec::with_capacity(logits.cols());
    for r in 0..logits.rows() {
        let open: Vec<usize> = (0..logits.cols()).filter(|&c| !is_masked(m.get(r, c))).collect();
        if open.is_empty() {
            return Err(KvecError::FullyMasked(r));
        }
        buf.clear();
        buf.extend(open.iter().map(|&c| logits.get(r, c) + m.get(r, c)));
        softmax_in_place(&mut buf);
        for (&c, &p) in open.iter().zip(&buf) {
            out.set(r, c, p);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn elementwise(kind: Activation, x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| kind.apply(v)).collect();
    Tensor::from_vec(x.rows(), x.cols(), data).expect("same shape")
}

pub fn elementwise_backward(kind: Activation, x: &Tensor, y: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(dy.data())
        .map(|((&xi, &yi), &g)| g * kind.derivative(xi, yi))
        .collect();
    Tensor::from_vec(x.rows(), x.cols(), data).expect("same shape")
}

/// `y = W x + b` for column-stacked inputs `x` (`in x n`), `W` (`out x in`),
/// `b` (`out x 1`).
pub fn affine(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if bias.shape() != (weight.rows(), 1) {
        return Err(KvecError::Shape(format!(
            "bias {:?} for weight {:?}",
            bias.shape(),
            weight.shape()
        )));
    }
    let mut y = weight.matmul(x)?;
    for r in 0..y.rows() {
        let b = bias.get(r, 0);
        y.row_mut(r).iter_mut().for_each(|v| *v += b);
    }
    Ok(y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineGrad {
    pub dx: Tensor,
    pub dweight: Tensor,
    pub dbias: Tensor,
}

pub fn affine_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> Result<AffineGrad> {
    let dx = weight.transpose().matmul(dy)?;
    let dweight = dy.matmul(&x.transpose())?;
    let dbias = Tensor::column((0..dy.rows()).map(|r| dy.row(r).iter().sum()).collect());
    Ok(AffineGrad { dx, dweight, dbias })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open(t: usize) -> AdditiveMask {
        AdditiveMask::new(Tensor::zeros(t, t)).unwrap()
    }

    #[test]
    fn uniform_softmax() {
        let p = masked_softmax(&Tensor::zeros(1, 4), &AdditiveMask::new(Tensor::zeros(1, 4)).unwrap()).unwrap();
        assert_eq!(p.data(), &[0.25; 4]);
        let _ = open(2);
    }

    #[test]
    fn masked_entries_renormalize() {
        let mask = AdditiveMask::new(Tensor::from_vec(1, 3, vec![0.0, 0.0, MASKED]).unwrap()).unwrap();
        let p = masked_softmax(&Tensor::zeros(1, 3), &mask).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn diagonal_mask_gives_one_hot() {
        let mut m = Tensor::filled(3, 3, MASKED);
        for i in 0..3 {
            m.set(i, i, 0.0);
        }
        let logits = Tensor::from_vec(3, 3, vec![5., -2., 9., 1., 1., 1., 0., 3., -4.]).unwrap();
        let p = masked_softmax(&logits, &AdditiveMask::new(m).unwrap()).unwrap();
        assert_eq!(p, Tensor::identity(3));
    }

    #[test]
    fn fully_masked_row_rejected() {
        let m = Tensor::from_vec(2, 2, vec![0.0, MASKED, MASKED, MASKED]).unwrap();
        assert!(matches!(AdditiveMask::new(m), Err(KvecError::FullyMasked(1))));
    }

    #[test]
    fn huge_logits_stay_finite() {
        let mask = AdditiveMask::new(Tensor::from_vec(1, 3, vec![0.0, 0.0, MASKED]).unwrap()).unwrap();
        let logits = Tensor::from_vec(1, 3, vec![1e300, -1e300, 1e308]).unwrap();
        let p = masked_softmax(&logits, &mask).unwrap();
        assert!(p.is_finite());
        assert_eq!(p.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn activation_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!(sigmoid(-700.0) > 0.0);
    }

    #[test]
    fn affine_identity_and_bias_gradient() {
        let x = Tensor::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = affine(&x, &Tensor::identity(3), &Tensor::zeros(3, 1)).unwrap();
        assert_eq!(y, x);
        let g = affine_backward(&x, &Tensor::identity(3), &Tensor::filled(3, 2, 1.0)).unwrap();
        assert_eq!(g.dbias.data(), &[2.0, 2.0, 2.0]);
        assert!(affine(&x, &Tensor::identity(2), &Tensor::zeros(2, 1)).is_err());
    }
}
