//! Real-time inference over a single input stream. Each item costs one
//! attention row per layer against the cached columns of earlier positions.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::ectl::{decide, Action, DecisionMode};
use crate::error::{KvecError, Result};
use crate::kvrl::{fuse, EncodeContext};
use crate::model::KvecModel;
use crate::sequence::{ClassId, FieldValue, KeyId, TangledSequence};
use crate::training::{run_episodes, HaltRule};

/// What happened to one incoming item.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepOutcome {
    pub key: String,
    pub arrival: usize,
    /// Items of this key consumed by its state (`n`), 0 when skipped.
    pub step: usize,
    /// `None` when the key had already halted and the item was skipped.
    pub action: Option<Action>,
    pub p_halt: Option<f64>,
    pub label: Option<ClassId>,
    pub distribution: Option<Vec<f64>>,
}

impl StepOutcome {
    pub fn skipped(&self) -> bool {
        self.action.is_none()
    }

    /// Top class probability of an emitted classification.
    pub fn confidence(&self) -> Option<f64> {
        Some(self.distribution.as_ref()?[self.label?])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StreamStats {
    pub items: usize,
    /// Items that arrived for a key that had already halted.
    pub skipped: usize,
    pub halted: usize,
    pub macs: u64,
}

/// Emitted prediction of a halted key.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeyDecision {
    pub key: String,
    pub step: usize,
    pub arrival: usize,
    pub label: ClassId,
    pub distribution: Vec<f64>,
    /// Decided at end of stream rather than by the policy.
    pub forced: bool,
}

/// Streaming engine with the deterministic threshold policy. One engine per
/// stream; the model stays frozen.
pub struct StreamEngine<'m> {
    model: &'m KvecModel,
    context: EncodeContext<'m>,
    decisions: Vec<Option<KeyDecision>>,
    last_arrival: Vec<usize>,
    stats: StreamStats,
}

impl<'m> StreamEngine<'m> {
    /// `cache_kv` keeps projected keys and values per layer instead of
    /// recomputing them from cached columns.
    pub fn new(model: &'m KvecModel, cache_kv: bool) -> Self {
        StreamEngine {
            model,
            context: model.context(cache_kv),
            decisions: Vec::new(),
            last_arrival: Vec::new(),
            stats: StreamStats::default(),
        }
    }

    pub fn context(&self) -> &EncodeContext<'m> {
        &self.context
    }

    pub fn stats(&self) -> StreamStats {
        StreamStats {
            macs: self.context.macs(),
            ..self.stats
        }
    }

    pub fn decision(&self, key: KeyId) -> Option<&KeyDecision> {
        self.decisions.get(key)?.as_ref()
    }

    pub fn stream_step(&mut self, key: &str, value: Vec<FieldValue>) -> Result<StepOutcome> {
        let enc = self.context.ingest(key, value)?;
        let k = enc.key;
        if self.decisions.len() <= k {
            self.decisions.resize(k + 1, None);
            self.last_arrival.resize(k + 1, 0);
        }
        self.last_arrival[k] = enc.arrival;
        self.stats.items += 1;
        if self.context.state(k).halted {
            self.stats.skipped += 1;
            return Ok(StepOutcome {
                key: key.to_string(),
                arrival: enc.arrival,
                step: 0,
                action: None,
                p_halt: None,
                label: None,
                distribution: None,
            });
        }
        let s = self.context.fuse_key(k, &enc.column)?.clone();
        let p = self.model.policy.halt_probability(&self.model.store, &s.s)?;
        let action = decide(p, &mut DecisionMode::Threshold);
        let mut out = StepOutcome {
            key: key.to_string(),
            arrival: enc.arrival,
            step: s.n,
            action: Some(action),
            p_halt: Some(p),
            label: None,
            distribution: None,
        };
        if action == Action::Halt {
            let d = self.halt(k, false);
            out.label = Some(d.label);
            out.distribution = Some(d.distribution.clone());
        }
        Ok(out)
    }

    fn halt(&mut self, k: KeyId, forced: bool) -> &KeyDecision {
        let s = self.context.state(k);
        let c = self.model.classifier.classify(&self.model.store, &s.s);
        let decision = KeyDecision {
            key: self.context.keys()[k].clone(),
            step: s.n,
            arrival: self.last_arrival[k],
            label: c.label,
            distribution: c.distribution,
            forced,
        };
        self.context.mark_halted(k);
        self.stats.halted += 1;
        self.decisions[k].insert(decision)
    }

    /// Ends the stream: every key still waiting is classified from its latest
    /// state, as if halted at its final item.
    pub fn finish(mut self) -> (Vec<KeyDecision>, StreamStats) {
        for k in 0..self.decisions.len() {
            if self.decisions[k].is_none() {
                self.halt(k, true);
            }
        }
        let stats = self.stats();
        (self.decisions.into_iter().map(|d| d.expect("all halted")).collect(), stats)
    }
}

/// Largest deviation found at one position.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PositionDeviation {
    pub arrival: usize,
    pub max_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub max_deviation: f64,
    pub positions: Vec<PositionDeviation>,
    /// Every key took the same action at every step in both modes.
    pub decisions_match: bool,
    pub tolerance: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.decisions_match && self.max_deviation <= self.tolerance
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Replays `seq` through the streaming engine and the batch path (threshold
/// policy) and compares every layer column, state, halt probability and
/// emitted distribution.
pub fn verify_equivalence(model: &KvecModel, seq: &TangledSequence, tolerance: f64) -> Result<EquivalenceReport> {
    if model.config.encoder.window < seq.len() {
        return Err(KvecError::Config(format!(
            "window {} is shorter than the stream ({} items)",
            model.config.encoder.window,
            seq.len()
        )));
    }
    let mut rollout = run_episodes(model, seq, HaltRule::Policy(DecisionMode::Threshold), None)?;
    // per position: (key, step index within the episode)
    let mut owner: Vec<Option<(KeyId, usize)>> = vec![None; seq.len()];
    for ep in &rollout.episodes {
        for (i, &pos) in ep.positions.iter().enumerate() {
            owner[pos] = Some((ep.key, i));
        }
    }
    let blocks = model.config.encoder.blocks;
    let mut engine = StreamEngine::new(model, false);
    let mut positions = Vec::with_capacity(seq.len());
    let mut decisions_match = true;
    for (pos, item) in seq.items().iter().enumerate() {
        let out = engine.stream_step(seq.key_name(item.key), item.value.clone())?;
        let cols = engine
            .context()
            .cached_columns(item.arrival)
            .expect("window covers the stream")
            .to_vec();
        let mut dev = max_abs_diff(&cols[0], rollout.pass.input(pos));
        for (layer, col) in cols[1..].iter().enumerate().take(blocks) {
            dev = dev.max(max_abs_diff(col, rollout.pass.layer_output(layer, pos)));
        }
        match owner[pos] {
            Some((k, i)) => {
                let ep = &rollout.episodes[k];
                let stream_state = &engine.context().state(k).s;
                dev = dev.max(max_abs_diff(stream_state, &ep.states[i]));
                dev = dev.max((out.p_halt.unwrap_or(f64::NAN) - ep.halt_probabilities[i]).abs());
                let last = i + 1 == ep.halt_step();
                // a forced batch halt is a streaming Wait that `finish` resolves
                let expected = if last && ep.forced { Action::Wait } else { ep.actions[i] };
                decisions_match &= out.action == Some(expected);
                if let Some(d) = &out.distribution {
                    dev = dev.max(max_abs_diff(d, &ep.distribution));
                }
            }
            None => decisions_match &= out.skipped(),
        }
        positions.push(PositionDeviation {
            arrival: item.arrival,
            max_deviation: dev,
        });
    }
    let (finals, _) = engine.finish();
    for (k, d) in finals.iter().enumerate() {
        let ep = &rollout.episodes[k];
        decisions_match &= d.forced == ep.forced && d.step == ep.halt_step() && d.label == ep.prediction;
        let dev = max_abs_diff(&d.distribution, &ep.distribution);
        let slot = &mut positions[ep.halt_arrival() - 1].max_deviation;
        *slot = slot.max(dev);
    }
    let max_deviation = positions.iter().map(|p| p.max_deviation).fold(0.0, f64::max);
    Ok(EquivalenceReport {
        max_deviation,
        positions,
        decisions_match,
        tolerance,
    })
}

/// Cost of a streaming or recomputing run over a whole sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RunCost {
    pub elapsed: Duration,
    pub macs: u64,
    /// Keys that received a decision.
    pub halted: usize,
}

/// Streams `seq` through a fresh engine. Returns the decisions and the cost,
/// plus the per-item operation counts.
pub fn stream_sequence(model: &KvecModel, seq: &TangledSequence, cache_kv: bool) -> Result<(Vec<KeyDecision>, RunCost, Vec<u64>)> {
    let start = Instant::now();
    let mut engine = StreamEngine::new(model, cache_kv);
    let mut per_item = Vec::with_capacity(seq.len());
    let mut before = 0;
    for item in seq.items() {
        engine.stream_step(seq.key_name(item.key), item.value.clone())?;
        let now = engine.context().macs();
        per_item.push(now - before);
        before = now;
    }
    let (decisions, stats) = engine.finish();
    let cost = RunCost {
        elapsed: start.elapsed(),
        macs: stats.macs,
        halted: stats.halted,
    };
    Ok((decisions, cost, per_item))
}

/// The no-cache strawman: at every arrival the whole prefix is re-encoded
/// from scratch before the newest column is fused.
pub fn recompute_sequence(model: &KvecModel, seq: &TangledSequence) -> Result<(Vec<KeyDecision>, RunCost, Vec<u64>)> {
    let start = Instant::now();
    let cell = model.fusion();
    let h = model.config.encoder.hidden;
    let mut states = vec![crate::kvrl::SequenceState::new(h); seq.keys().len()];
    let mut decisions: Vec<Option<KeyDecision>> = vec![None; seq.keys().len()];
    let mut per_item = Vec::with_capacity(seq.len());
    let mut macs = 0;
    for t in 1..=seq.len() {
        let mut pass = crate::kvrl::EncoderPass::prefix(&model.encoder, &model.config.encoder, &model.store, seq, t, None);
        pass.compute_all();
        per_item.push(pass.macs());
        macs += pass.macs();
        let k = seq.items()[t - 1].key;
        if states[k].halted {
            continue;
        }
        let (next, _) = fuse(&cell, &states[k], pass.output(t - 1))?;
        states[k] = next;
        let p = model.policy.halt_probability(&model.store, &states[k].s)?;
        if decide(p, &mut DecisionMode::Threshold) == Action::Halt || seq.is_last_of_key(t) {
            let c = model.classifier.classify(&model.store, &states[k].s);
            decisions[k] = Some(KeyDecision {
                key: seq.key_name(k).to_string(),
                step: states[k].n,
                arrival: t,
                label: c.label,
                distribution: c.distribution,
                forced: p < 0.5,
            });
            states[k].halted = true;
        }
    }
    let decisions: Vec<KeyDecision> = decisions.into_iter().map(|d| d.expect("all halted")).collect();
    let cost = RunCost {
        elapsed: start.elapsed(),
        macs,
        halted: decisions.len(),
    };
    Ok((decisions, cost, per_item))
}
