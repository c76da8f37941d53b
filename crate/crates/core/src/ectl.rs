//! Halting policy, action selection, reward, baseline value network and the
//! classification head.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{KvecError, Result};
use crate::kvrl::{dense, uniform};
use crate::numerics::{axpy, dot, sigmoid, softmax_in_place, Gradients, ParamId, ParameterStore, Tensor};
use crate::sequence::ClassId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Halt,
    Wait,
}

/// How an action is drawn from a halting probability.
pub enum DecisionMode<'r> {
    Sample(&'r mut dyn RngCore),
    /// Halt iff `p >= 0.5`.
    Threshold,
}

pub fn decide(p: f64, mode: &mut DecisionMode) -> Action {
    let halt = match mode {
        DecisionMode::Sample(rng) => rng.gen::<f64>() < p,
        DecisionMode::Threshold => p >= 0.5,
    };
    if halt {
        Action::Halt
    } else {
        Action::Wait
    }
}

/// `+1` for a correct prediction, `-1` otherwise.
pub fn reward_of(predicted: ClassId, truth: ClassId, classes: usize) -> Result<f64> {
    for label in [predicted, truth] {
        if label >= classes {
            return Err(KvecError::Label { label, classes });
        }
    }
    Ok(if predicted == truth { 1.0 } else { -1.0 })
}

/// `sigma(w . s + b)` with `w` stored as a `1 x h` row.
#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PolicyNet {
    pub fn register(store: &mut ParameterStore, hidden: usize, bias_init: f64, rng: &mut impl Rng) -> Self {
        PolicyNet {
            weight: store.add("policy.weight", uniform(rng, 1, hidden, 0.1 / (hidden as f64).sqrt())),
            bias: store.add("policy.bias", Tensor::filled(1, 1, bias_init)),
        }
    }

    pub fn logit(&self, store: &ParameterStore, s: &[f64]) -> f64 {
        dot(store.value(self.weight).data(), s) + store.value(self.bias).data()[0]
    }

    pub fn halt_probability(&self, store: &ParameterStore, s: &[f64]) -> Result<f64> {
        let w = store.value(self.weight);
        if w.cols() != s.len() {
            return Err(KvecError::Shape(format!("policy expects width {}, got {}", w.cols(), s.len())));
        }
        Ok(sigmoid(self.logit(store, s)))
    }

    /// Accumulates `dlogit` into the policy gradients and returns `d s`.
    pub fn backward(&self, store: &ParameterStore, s: &[f64], dlogit: f64, grads: &mut Gradients) -> Vec<f64> {
        axpy(dlogit, s, grads.get_mut(self.weight).data_mut());
        grads.get_mut(self.bias).data_mut()[0] += dlogit;
        store.value(self.weight).data().iter().map(|w| w * dlogit).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub distribution: Vec<f64>,
    pub label: ClassId,
}

/// First index of the maximum; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct ClassifierNet {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ClassifierNet {
    pub fn register(store: &mut ParameterStore, hidden: usize, classes: usize, rng: &mut impl Rng) -> Self {
        ClassifierNet {
            weight: store.add("classifier.weight", dense(rng, classes, hidden)),
            bias: store.add("classifier.bias", Tensor::zeros(classes, 1)),
        }
    }

    pub fn logits(&self, store: &ParameterStore, s: &[f64]) -> Vec<f64> {
        let mut z = store.value(self.weight).matvec(s);
        axpy(1.0, store.value(self.bias).data(), &mut z);
        z
    }

    pub fn classify(&self, store: &ParameterStore, s: &[f64]) -> Classification {
        let mut distribution = self.logits(store, s);
        softmax_in_place(&mut distribution);
        let label = argmax(&distribution);
        Classification { distribution, label }
    }

    /// Accumulates gradients for upstream `dlogits` and returns `d s`.
    pub fn backward(&self, store: &ParameterStore, s: &[f64], dlogits: &[f64], grads: &mut Gradients) -> Vec<f64> {
        grads.get_mut(self.weight).outer_acc(dlogits, s);
        axpy(1.0, dlogits, grads.get_mut(self.bias).data_mut());
        let mut ds = vec![0.0; s.len()];
        store.value(self.weight).matvec_t_acc(dlogits, &mut ds);
        ds
    }
}

/// State-value estimate `h -> h/2 (ReLU) -> 1`, kept in its own store.
#[derive(Clone, Debug)]
pub struct BaselineNet {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl BaselineNet {
    /// The output layer starts at zero so the initial estimate is 0 everywhere.
    pub fn register(store: &mut ParameterStore, hidden: usize, rng: &mut impl Rng) -> Self {
        let mid = (hidden / 2).max(1);
        BaselineNet {
            w1: store.add("baseline.w1", dense(rng, mid, hidden)),
            b1: store.add("baseline.b1", Tensor::zeros(mid, 1)),
            w2: store.add("baseline.w2", Tensor::zeros(1, mid)),
            b2: store.add("baseline.b2", Tensor::zeros(1, 1)),
        }
    }

    fn hidden(&self, store: &ParameterStore, s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pre = store.value(self.w1).matvec(s);
        axpy(1.0, store.value(self.b1).data(), &mut pre);
        let h = pre.iter().map(|&z| z.max(0.0)).collect();
        (pre, h)
    }

    pub fn value(&self, store: &ParameterStore, s: &[f64]) -> f64 {
        let (_, h) = self.hidden(store, s);
        dot(store.value(self.w2).data(), &h) + store.value(self.b2).data()[0]
    }

    /// Mean squared error of the estimates against `targets`, accumulating its
    /// gradient. States are inputs only; nothing flows back into them.
    pub fn regress(&self, store: &ParameterStore, states: &[&[f64]], targets: &[f64], grads: &mut Gradients) -> f64 {
        if states.is_empty() {
            return 0.0;
        }
        let n = states.len() as f64;
        let mut mse = 0.0;
        for (s, &r) in states.iter().zip(targets) {
            let (pre, h) = self.hidden(store, s);
            let out = dot(store.value(self.w2).data(), &h) + store.value(self.b2).data()[0];
            let err = out - r;
            mse += err * err / n;
            let g = 2.0 * err / n;
            axpy(g, &h, grads.get_mut(self.w2).data_mut());
            grads.get_mut(self.b2).data_mut()[0] += g;
            let dh: Vec<f64> = store
                .value(self.w2)
                .data()
                .iter()
                .zip(&pre)
                .map(|(w, &z)| if z > 0.0 { w * g } else { 0.0 })
                .collect();
            grads.get_mut(self.w1).outer_acc(&dh, s);
            axpy(1.0, &dh, grads.get_mut(self.b1).data_mut());
        }
        mse
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn policy_probability_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::default();
        let p = PolicyNet::register(&mut store, 3, 0.0, &mut rng);
        store.value_mut(p.weight).fill(0.0);
        assert_eq!(p.halt_probability(&store, &[1.0, 2.0, 3.0]).unwrap(), 0.5);
        store.value_mut(p.bias).data_mut()[0] = 3f64.ln();
        assert!((p.halt_probability(&store, &[0.0; 3]).unwrap() - 0.75).abs() < 1e-12);
        store.value_mut(p.bias).data_mut()[0] = 20.0;
        assert!(p.halt_probability(&store, &[0.0; 3]).unwrap() > 0.9999);
        assert!(p.halt_probability(&store, &[0.0; 2]).is_err());
    }

    #[test]
    fn threshold_and_sampled_decisions() {
        assert_eq!(decide(0.75, &mut DecisionMode::Threshold), Action::Halt);
        assert_eq!(decide(0.5, &mut DecisionMode::Threshold), Action::Halt);
        assert_eq!(decide(0.49, &mut DecisionMode::Threshold), Action::Wait);
        let draws = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10_000)
                .filter(|_| decide(0.75, &mut DecisionMode::Sample(&mut rng)) == Action::Halt)
                .count()
        };
        assert_eq!(draws(3), draws(3));
        let frac = draws(3) as f64 / 10_000.0;
        assert!((frac - 0.75).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn classifier_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::default();
        let c = ClassifierNet::register(&mut store, 2, 4, &mut rng);
        store.value_mut(c.weight).fill(0.0);
        let out = c.classify(&store, &[0.3, -0.2]);
        assert_eq!(out.distribution, vec![0.25; 4]);
        assert_eq!(out.label, 0);

        let mut z = vec![2.0, 0.0];
        softmax_in_place(&mut z);
        assert!((z[0] - 0.8808).abs() < 1e-4 && (z[1] - 0.1192).abs() < 1e-4);
        let mut shifted = vec![7.0, 5.0];
        softmax_in_place(&mut shifted);
        assert!((shifted[0] - z[0]).abs() < 1e-15);
    }

    #[test]
    fn rewards() {
        assert_eq!(reward_of(1, 1, 2).unwrap(), 1.0);
        assert_eq!(reward_of(0, 1, 2).unwrap(), -1.0);
        assert_eq!(reward_of(1, 0, 2).unwrap(), -1.0);
        assert!(reward_of(2, 0, 2).is_err());
    }

    #[test]
    fn fresh_baseline_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::default();
        let b = BaselineNet::register(&mut store, 6, &mut rng);
        assert_eq!(b.value(&store, &[0.4, -1.0, 2.0, 0.0, 0.1, 3.0]), 0.0);
        let s = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert_eq!(b.value(&store, &s), b.value(&store, &s));
    }
}
