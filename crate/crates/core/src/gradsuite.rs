//! Finite-difference verification of every trained gradient path on a small
//! fixed model and tangled sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ectl::Action;
use crate::error::Result;
use crate::kvrl::EncoderConfig;
use crate::model::{KvecModel, ModelConfig};
use crate::numerics::{finite_diff_check, GradCheckReport, ParameterStore};
use crate::sequence::{Field, FieldSpec, FieldValue, KeyId, Schema, TangledSequence};
use crate::training::{baseline_loss, loss_total, run_episodes, HaltRule};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Fixture seed used by the CLI and the test suites.
pub const DEFAULT_SEED: u64 = 1;
const SCALE: f64 = 0.9;

/// Direction (session field), a token and a numeric size.
pub fn fixture_schema() -> Schema {
    Schema::new(
        vec![
            Field {
                name: "direction".into(),
                spec: FieldSpec::Categorical { cardinality: 2 },
            },
            Field {
                name: "token".into(),
                spec: FieldSpec::Categorical { cardinality: 6 },
            },
            Field {
                name: "size".into(),
                spec: FieldSpec::Numeric { mean: 1.0, std: 2.0 },
            },
        ],
        0,
    )
    .expect("valid schema")
}

/// Random labeled tangled sequence over `keys` keys.
pub fn fixture_sequence(rng: &mut impl Rng, len: usize, keys: usize, classes: usize) -> TangledSequence {
    let mut seq = TangledSequence::new(fixture_schema());
    let mut dir = vec![0u32; keys];
    for _ in 0..len {
        let k = rng.gen_range(0..keys);
        if rng.gen_bool(0.4) {
            dir[k] ^= 1;
        }
        let value = vec![
            FieldValue::Code(dir[k]),
            FieldValue::Code(rng.gen_range(0..6)),
            FieldValue::Real(rng.gen_range(-2.0..4.0)),
        ];
        seq.ingest(&format!("k{k}"), value).expect("schema-conformant");
    }
    for (k, name) in seq.keys().to_vec().iter().enumerate() {
        seq.set_label(name, k % classes).expect("known key");
    }
    seq
}

fn fixture_config(residual: bool) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d_model: 4,
            ffn_width: 6,
            blocks: 2,
            hidden: 4,
            slot_count: 4,
            max_seq_pos: 8,
            window: 16,
            residual,
            dropout: 0.0,
            ..EncoderConfig::traffic()
        },
        policy_bias_init: 0.2,
    }
}

/// One named finite-difference run.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteSection {
    pub name: String,
    pub report: GradCheckReport,
}

/// Every key waits and is halted at its final item, so every item feeds a
/// state directly and both action kinds appear in the policy loss.
fn script(_: KeyId, _: usize) -> Action {
    Action::Wait
}

/// Loss of a replayed trajectory with returns and baselines pinned to the
/// reference rollout, so only the differentiable path varies.
fn replay_loss(model: &KvecModel, seq: &TangledSequence, pins: &[(Vec<f64>, Vec<f64>)], alpha: f64, beta: f64) -> f64 {
    let mut rollout = run_episodes(model, seq, HaltRule::Scripted(&script), None).expect("fixture rollout");
    for (ep, (returns, baselines)) in rollout.episodes.iter_mut().zip(pins) {
        ep.returns = returns.clone();
        ep.baselines = baselines.clone();
    }
    loss_total(model, &rollout, alpha, beta, None).total
}

fn check_losses(model: &KvecModel, seq: &TangledSequence, label: &str, weights: &[(&str, f64, f64)]) -> Vec<SuiteSection> {
    let reference = run_episodes(model, seq, HaltRule::Scripted(&script), None).expect("fixture rollout");
    let pins: Vec<_> = reference
        .episodes
        .iter()
        .map(|e| (e.returns.clone(), e.baselines.clone()))
        .collect();
    let mut out = Vec::new();
    for &(name, alpha, beta) in weights {
        let mut grads = model.store.zero_gradients();
        loss_total(model, &reference, alpha, beta, Some(&mut grads));
        let mut store = model.store.clone();
        let mut probe = model.clone();
        let report = finite_diff_check(&mut store, &grads, STEP, TOLERANCE, |_| true, |s: &ParameterStore| {
            probe.store = s.clone();
            replay_loss(&probe, seq, &pins, alpha, beta)
        });
        out.push(SuiteSection {
            name: format!("{label}: {name}"),
            report,
        });
    }
    out
}

/// Runs every section. All pass when each max relative error is within
/// [`TOLERANCE`].
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteSection>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq = fixture_sequence(&mut rng, 14, 3, 3);
    let mut sections = Vec::new();
    for residual in [false, true] {
        let mut model = KvecModel::new(fixture_config(residual), fixture_schema(), 3, seed)?;
        // broad weights keep every gradient entry well above finite-difference noise
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            // gate inputs are wide, so the gates get fan-in scaling to stay unsaturated
            let gate = model.store.name(id).starts_with("fusion.w");
            let t = model.store.value_mut(id);
            let bound = if gate {
                SCALE / (t.cols() as f64).sqrt()
            } else {
                SCALE
            };
            for x in t.data_mut() {
                *x = rng.gen_range(-bound..bound);
            }
        }
        // a non-zero baseline so the advantage term is exercised
        let ids: Vec<_> = model.baseline_store.ids().collect();
        for id in ids {
            for x in model.baseline_store.value_mut(id).data_mut() {
                *x = rng.gen_range(-SCALE..SCALE);
            }
        }
        let label = if residual { "residual" } else { "plain" };
        sections.extend(check_losses(
            &model,
            &seq,
            label,
            &[
                ("classification", 0.0, 0.0),
                ("policy", 1.0, 0.0),
                ("earliness", 0.0, 1.0),
                ("total", 0.7, 0.3),
            ],
        ));
        if !residual {
            let reference = run_episodes(&model, &seq, HaltRule::Scripted(&script), None)?;
            let mut grads = model.baseline_store.zero_gradients();
            baseline_loss(&model, &reference.episodes, &mut grads);
            let episodes = reference.episodes.clone();
            let mut store = model.baseline_store.clone();
            let mut probe = model.clone();
            let report = finite_diff_check(&mut store, &grads, STEP, TOLERANCE, |_| true, |s: &ParameterStore| {
                probe.baseline_store = s.clone();
                let mut g = probe.baseline_store.zero_gradients();
                baseline_loss(&probe, &episodes, &mut g)
            });
            sections.push(SuiteSection {
                name: "baseline: mse".into(),
                report,
            });
        }
    }
    Ok(sections)
}
