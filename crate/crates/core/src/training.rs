//! Episode generation, the three-part loss with its gradients, and the
//! training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ectl::{decide, reward_of, Action, DecisionMode};
use crate::error::{KvecError, Result};
use crate::kvrl::{fuse, fuse_backward, EncoderPass, FusionTrace, SequenceState};
use crate::model::KvecModel;
use crate::numerics::{axpy, Gradients};
use crate::sequence::{ClassId, KeyId, TangledSequence};

/// Lower clamp on every probability that goes through a log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Adam step size for encoder, policy and classifier.
    pub learning_rate: f64,
    pub baseline_learning_rate: f64,
    pub epochs: usize,
    /// Tangled sequences per parameter update.
    pub batch: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Leading epochs that optimize the classification loss only, leaving the
    /// halting policy at its initialization.
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            baseline_learning_rate: 1e-3,
            epochs: 100,
            batch: 1,
            alpha: 0.1,
            beta: 0.1,
            warmup_epochs: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.baseline_learning_rate > 0.0) {
            return Err(KvecError::Config("learning rates must be positive".into()));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(KvecError::Config("epochs and batch must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(KvecError::Config("alpha and beta must be finite".into()));
        }
        Ok(())
    }
}

/// `R[i] = sum of rewards strictly after i`.
pub fn compute_returns(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(KvecError::Config("returns of an empty reward list".into()));
    }
    let mut out = vec![0.0; rewards.len()];
    for i in (0..rewards.len() - 1).rev() {
        out[i] = out[i + 1] + rewards[i + 1];
    }
    Ok(out)
}

/// When each key stops.
pub enum HaltRule<'r> {
    /// The learned policy.
    Policy(DecisionMode<'r>),
    /// Halt at step `tau` (or at the sequence end if shorter).
    Fixed(usize),
    /// Halt once the top class probability reaches `mu`.
    Confidence(f64),
    /// Caller-chosen action for `(key, step)`; used to replay fixed trajectories.
    Scripted(&'r dyn Fn(KeyId, usize) -> Action),
}

/// Trajectory of one key within one tangled sequence.
#[derive(Clone, Debug)]
pub struct Episode {
    pub key: KeyId,
    pub truth: ClassId,
    /// 0-based positions of the observed items.
    pub positions: Vec<usize>,
    pub states: Vec<Vec<f64>>,
    pub halt_probabilities: Vec<f64>,
    pub actions: Vec<Action>,
    /// The final Halt was imposed at the sequence end.
    pub forced: bool,
    /// Baseline estimates, held fixed inside the policy loss.
    pub baselines: Vec<f64>,
    pub reward: f64,
    pub returns: Vec<f64>,
    pub distribution: Vec<f64>,
    pub prediction: ClassId,
    pub sequence_length: usize,
    traces: Vec<FusionTrace>,
}

impl Episode {
    /// `n_k`: items observed before halting.
    pub fn halt_step(&self) -> usize {
        self.states.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        vec![self.reward; self.states.len()]
    }

    /// 1-based arrival index of the halting item.
    pub fn halt_arrival(&self) -> usize {
        self.positions.last().expect("non-empty episode") + 1
    }

    pub fn earliness(&self) -> f64 {
        self.halt_step() as f64 / self.sequence_length as f64
    }

    pub fn correct(&self) -> bool {
        self.prediction == self.truth
    }
}

/// Encoder pass plus the episodes generated from it.
pub struct Rollout<'m> {
    pub pass: EncoderPass<'m>,
    pub episodes: Vec<Episode>,
}

/// Runs every key of `seq` to its halt. Items of halted keys are skipped, and
/// keys still waiting at their final item are halted there.
pub fn run_episodes<'m>(
    model: &'m KvecModel,
    seq: &'m TangledSequence,
    mut rule: HaltRule,
    dropout: Option<ChaCha8Rng>,
) -> Result<Rollout<'m>> {
    seq.check_labels(model.classes)?;
    let h = model.config.encoder.hidden;
    let cell = model.fusion();
    let mut pass = model.pass(seq, dropout);
    let key_count = seq.keys().len();
    let mut states: Vec<SequenceState> = (0..key_count).map(|_| SequenceState::new(h)).collect();
    let mut open: Vec<Option<Episode>> = (0..key_count)
        .map(|k| {
            Some(Episode {
                key: k,
                truth: seq.label(k).expect("checked"),
                positions: Vec::new(),
                states: Vec::new(),
                halt_probabilities: Vec::new(),
                actions: Vec::new(),
                forced: false,
                baselines: Vec::new(),
                reward: 0.0,
                returns: Vec::new(),
                distribution: Vec::new(),
                prediction: 0,
                sequence_length: seq.key_len(k),
                traces: Vec::new(),
            })
        })
        .collect();
    let mut done: Vec<Option<Episode>> = vec![None; key_count];

    for pos in 0..seq.len() {
        let item = &seq.items()[pos];
        let k = item.key;
        if states[k].halted {
            continue;
        }
        let (next, trace) = fuse(&cell, &states[k], pass.output(pos))?;
        states[k] = next;
        let s = &states[k].s;
        let p = model.policy.halt_probability(&model.store, s)?;
        let step = states[k].n;
        let mut action = match &mut rule {
            HaltRule::Policy(mode) => decide(p, mode),
            HaltRule::Fixed(tau) => {
                if step >= *tau {
                    Action::Halt
                } else {
                    Action::Wait
                }
            }
            HaltRule::Confidence(mu) => {
                let c = model.classifier.classify(&model.store, s);
                if c.distribution[c.label] >= *mu {
                    Action::Halt
                } else {
                    Action::Wait
                }
            }
            HaltRule::Scripted(f) => f(k, step),
        };
        let ep = open[k].as_mut().expect("open episode");
        if action == Action::Wait && seq.is_last_of_key(item.arrival) {
            action = Action::Halt;
            ep.forced = true;
        }
        ep.positions.push(pos);
        ep.states.push(s.clone());
        ep.halt_probabilities.push(p);
        ep.actions.push(action);
        ep.baselines.push(model.baseline.value(&model.baseline_store, s));
        ep.traces.push(trace);
        if action == Action::Halt {
            let c = model.classifier.classify(&model.store, s);
            ep.reward = reward_of(c.label, ep.truth, model.classes)?;
            ep.returns = compute_returns(&ep.rewards())?;
            ep.prediction = c.label;
            ep.distribution = c.distribution;
            states[k].halted = true;
            done[k] = open[k].take();
        }
    }
    let episodes = done.into_iter().map(|e| e.expect("every key halts")).collect();
    Ok(Rollout { pass, episodes })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_FLOOR {
        (PROB_FLOOR, false)
    } else if p > 1.0 - PROB_FLOOR {
        (1.0 - PROB_FLOOR, false)
    } else {
        (p, true)
    }
}

/// Classification cross-entropy, policy surrogate and earliness penalty.
/// With `grads`, also back-propagates the total into the model store
/// (through the states into fusion and encoder).
pub fn loss_total(
    model: &KvecModel,
    rollout: &Rollout,
    alpha: f64,
    beta: f64,
    mut grads: Option<&mut Gradients>,
) -> LossBreakdown {
    let (mut l1, mut l2, mut l3) = (0.0, 0.0, 0.0);
    let h = model.config.encoder.hidden;
    let cell = model.fusion();
    let mut top: Vec<Option<Vec<f64>>> = vec![None; rollout.pass.len()];
    for ep in &rollout.episodes {
        let n = ep.halt_step();
        let mut ds: Vec<Vec<f64>> = vec![vec![0.0; h]; n];

        let (py, live) = clamp_prob(ep.distribution[ep.truth]);
        l1 -= py.ln();
        if let Some(g) = grads.as_deref_mut() {
            if live {
                let mut dlogits = ep.distribution.clone();
                dlogits[ep.truth] -= 1.0;
                ds[n - 1] = model.classifier.backward(&model.store, &ep.states[n - 1], &dlogits, g);
            }
        }

        for i in 0..n {
            let p = ep.halt_probabilities[i];
            let advantage = ep.returns[i] - ep.baselines[i];
            let (ph, halt_live) = clamp_prob(p);
            let (logp, dlogp) = match ep.actions[i] {
                Action::Halt => (ph.ln(), if halt_live { 1.0 - p } else { 0.0 }),
                Action::Wait => {
                    let (pw, live) = clamp_prob(1.0 - p);
                    (pw.ln(), if live { -p } else { 0.0 })
                }
            };
            l2 -= advantage * logp;
            l3 -= ph.ln();
            if let Some(g) = grads.as_deref_mut() {
                let dlogit = -alpha * advantage * dlogp - beta * if halt_live { 1.0 - p } else { 0.0 };
                if dlogit != 0.0 {
                    let d = model.policy.backward(&model.store, &ep.states[i], dlogit, g);
                    axpy(1.0, &d, &mut ds[i]);
                }
            }
        }

        if let Some(g) = grads.as_deref_mut() {
            let mut ds_next = vec![0.0; h];
            let mut dc_next = vec![0.0; h];
            for i in (0..n).rev() {
                axpy(1.0, &ds_next, &mut ds[i]);
                let (dsp, dcp, de) = fuse_backward(&cell, &model.encoder.fusion, &ep.traces[i], &ds[i], &dc_next, g);
                ds_next = dsp;
                dc_next = dcp;
                let slot = top[ep.positions[i]].get_or_insert_with(|| vec![0.0; de.len()]);
                axpy(1.0, &de, slot);
            }
        }
    }
    if let Some(g) = grads {
        rollout.pass.backward(top, g);
    }
    LossBreakdown {
        l1,
        l2,
        l3,
        total: l1 + alpha * l2 + beta * l3,
        alpha,
        beta,
    }
}

/// Regresses the baseline onto the episodes' returns; returns the MSE.
pub fn baseline_loss(model: &KvecModel, episodes: &[Episode], grads: &mut Gradients) -> f64 {
    let states: Vec<&[f64]> = episodes.iter().flat_map(|e| e.states.iter().map(Vec::as_slice)).collect();
    let targets: Vec<f64> = episodes.iter().flat_map(|e| e.returns.iter().copied()).collect();
    model.baseline.regress(&model.baseline_store, &states, &targets, grads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    pub accuracy: f64,
    pub earliness: f64,
    pub baseline_mse: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,l1,l2,l3,total,accuracy,earliness\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.l1, r.l2, r.l3, r.total, r.accuracy, r.earliness
        ));
    }
    out
}

/// Trains in place. `on_epoch` sees each record and the model after that
/// epoch's updates (for checkpointing or early inspection).
pub fn train(
    model: &mut KvecModel,
    data: &[TangledSequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &KvecModel) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.check()?;
    if data.is_empty() {
        return Err(KvecError::Dataset("no training sequences".into()));
    }
    for seq in data {
        seq.check_labels(model.classes)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (alpha, beta) = if epoch <= cfg.warmup_epochs {
            (0.0, 0.0)
        } else {
            (cfg.alpha, cfg.beta)
        };
        let mut record = EpochRecord {
            epoch,
            l1: 0.0,
            l2: 0.0,
            l3: 0.0,
            total: 0.0,
            accuracy: 0.0,
            earliness: 0.0,
            baseline_mse: 0.0,
        };
        let (mut keys, mut correct, mut early, mut batches) = (0usize, 0usize, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let mut grads = model.store.zero_gradients();
            let mut bgrads = model.baseline_store.zero_gradients();
            for &idx in chunk {
                let dropout = Some(ChaCha8Rng::seed_from_u64(rng.gen()));
                let rollout = run_episodes(
                    model,
                    &data[idx],
                    HaltRule::Policy(DecisionMode::Sample(&mut rng)),
                    dropout,
                )?;
                let loss = loss_total(model, &rollout, alpha, beta, Some(&mut grads));
                if !loss.total.is_finite() {
                    return Err(KvecError::NonFiniteLoss {
                        epoch,
                        sequence: idx,
                        detail: format!("l1={} l2={} l3={}", loss.l1, loss.l2, loss.l3),
                    });
                }
                record.baseline_mse += baseline_loss(model, &rollout.episodes, &mut bgrads);
                record.l1 += loss.l1;
                record.l2 += loss.l2;
                record.l3 += loss.l3;
                record.total += loss.total;
                for ep in &rollout.episodes {
                    keys += 1;
                    correct += ep.correct() as usize;
                    early += ep.earliness();
                }
            }
            batches += 1;
            model.store.accumulate(&grads);
            model.store.adam_step(cfg.learning_rate)?;
            model.baseline_store.accumulate(&bgrads);
            model.baseline_store.adam_step(cfg.baseline_learning_rate)?;
        }
        record.accuracy = correct as f64 / keys as f64;
        record.earliness = early / keys as f64;
        record.baseline_mse /= data.len().max(batches) as f64;
        on_epoch(&record, model)?;
        history.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn returns_examples() {
        assert_eq!(compute_returns(&[1.0, 1.0, 1.0]).unwrap(), vec![2.0, 1.0, 0.0]);
        assert_eq!(compute_returns(&[-1.0, -1.0, -1.0]).unwrap(), vec![-2.0, -1.0, 0.0]);
        assert_eq!(compute_returns(&[1.0]).unwrap(), vec![0.0]);
        assert!(compute_returns(&[]).is_err());
    }

    #[test]
    fn clamp_marks_saturation() {
        assert_eq!(clamp_prob(0.0), (PROB_FLOOR, false));
        assert_eq!(clamp_prob(1.0), (1.0 - PROB_FLOOR, false));
        assert_eq!(clamp_prob(0.3), (0.3, true));
    }
}
