use kvec::datasets::{generate_flows, synthetic_schema, tangle_groups, GeneratorConfig};
use kvec::ectl::Action;
use kvec::kvrl::EncoderConfig;
use kvec::sequence::TangledSequence;
use kvec::streaming::{recompute_sequence, stream_sequence, verify_equivalence, StreamEngine};
use kvec::{KvecModel, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One tangled sequence of ten 50-item flows: 500 items.
fn stream_500() -> TangledSequence {
    let cfg = GeneratorConfig {
        flows: 10,
        flow_length: 50,
        signal_length: 5,
        ..GeneratorConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let flows = generate_flows(&cfg, &mut rng).unwrap();
    let schema = synthetic_schema(&cfg, 0.5, 0.5).unwrap();
    let mut seqs = tangle_groups(&flows, cfg.concurrency, &schema, &mut rng).unwrap();
    assert_eq!(seqs.len(), 1);
    seqs.pop().unwrap()
}

fn desk_model(seq: &TangledSequence, bias: f64, seed: u64) -> KvecModel {
    let config = ModelConfig {
        encoder: EncoderConfig {
            blocks: 2,
            ..EncoderConfig::desk()
        },
        policy_bias_init: bias,
    };
    KvecModel::new(config, seq.schema().clone(), 2, seed).unwrap()
}

#[test]
fn streaming_equals_batch_on_500_items() {
    let seq = stream_500();
    assert_eq!(seq.len(), 500);
    for (bias, seed) in [(-4.0, 1), (0.0, 2), (2.0, 3)] {
        let model = desk_model(&seq, bias, seed);
        let report = verify_equivalence(&model, &seq, 1e-9).unwrap();
        assert_eq!(report.positions.len(), 500);
        assert_eq!(report.max_deviation, 0.0, "bias {bias}");
        assert!(report.decisions_match, "bias {bias}");
        assert!(report.passed());
    }
}

#[test]
fn streaming_is_at_least_twice_as_fast_as_recomputation() {
    let seq = stream_500();
    let model = desk_model(&seq, -4.0, 1);
    let (fast, fast_cost, _) = stream_sequence(&model, &seq, true).unwrap();
    let (slow, slow_cost, _) = recompute_sequence(&model, &seq).unwrap();
    assert_eq!(fast, slow);
    let speedup = slow_cost.elapsed.as_secs_f64() / fast_cost.elapsed.as_secs_f64();
    assert!(speedup >= 2.0, "speedup {speedup:.2}");
    assert!(slow_cost.macs >= 2 * fast_cost.macs);
}

#[test]
fn per_item_cost_stays_bounded_with_the_cache() {
    let seq = stream_500();
    let model = desk_model(&seq, -4.0, 1);
    let (_, _, per_item) = stream_sequence(&model, &seq, true).unwrap();
    let (_, _, recomputed) = recompute_sequence(&model, &seq).unwrap();
    // recomputation cost grows with the prefix; the cached stream's does not
    assert!(recomputed[499] > 20 * per_item[499]);
}

#[test]
fn every_key_gets_exactly_one_halt() {
    let seq = stream_500();
    let model = desk_model(&seq, 0.0, 4);
    let mut engine = StreamEngine::new(&model, true);
    let mut halts = vec![0usize; seq.keys().len()];
    for it in seq.items() {
        let out = engine.stream_step(seq.key_name(it.key), it.value.clone()).unwrap();
        if out.action == Some(Action::Halt) {
            halts[it.key] += 1;
        }
    }
    let (decisions, stats) = engine.finish();
    for d in decisions.iter().filter(|d| d.forced) {
        halts[seq.key_id(&d.key).unwrap()] += 1;
    }
    assert!(halts.iter().all(|&h| h == 1), "{halts:?}");
    assert_eq!(stats.items, 500);
    assert_eq!(stats.halted, seq.keys().len());
}
