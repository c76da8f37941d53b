#![allow(dead_code)]

use kvec::gradsuite::fixture_schema;
use kvec::kvrl::EncoderConfig;
use kvec::sequence::{FieldValue, TangledSequence};
use kvec::{KvecModel, ModelConfig};
use rand::Rng;

/// Random tangled sequence over the fixture schema. Keys are drawn uniformly
/// and each key's direction flips with probability `flip`, so sessions of
/// assorted lengths interleave across keys.
pub fn random_sequence(rng: &mut impl Rng, len: usize, keys: usize, flip: f64, gap: Option<usize>) -> TangledSequence {
    let mut schema = fixture_schema();
    schema.session_gap = gap;
    let mut seq = TangledSequence::new(schema);
    let mut direction = vec![0u32; keys];
    for _ in 0..len {
        let k = rng.gen_range(0..keys);
        if rng.gen_bool(flip) {
            direction[k] ^= 1;
        }
        seq.ingest(&format!("k{k}"), item(direction[k], rng.gen_range(0..6), rng.gen_range(-2.0..4.0)))
            .expect("schema-conformant item");
    }
    for (k, name) in seq.keys().to_vec().iter().enumerate() {
        seq.set_label(name, k % 3).expect("known key");
    }
    seq
}

pub fn item(direction: u32, token: u32, size: f64) -> Vec<FieldValue> {
    vec![FieldValue::Code(direction), FieldValue::Code(token), FieldValue::Real(size)]
}

/// Copy of `seq` with the value at 0-based `pos` replaced.
pub fn with_value(seq: &TangledSequence, pos: usize, value: Vec<FieldValue>) -> TangledSequence {
    let mut out = TangledSequence::new(seq.schema().clone());
    for (n, it) in seq.items().iter().enumerate() {
        let v = if n == pos { value.clone() } else { it.value.clone() };
        out.ingest(seq.key_name(it.key), v).expect("schema-conformant item");
    }
    for (k, name) in seq.keys().iter().enumerate() {
        out.set_label(name, seq.label(k).expect("labeled")).expect("known key");
    }
    out
}

/// Small two-block model over the fixture schema with three classes.
pub fn small_model(window: usize, bias: f64, seed: u64) -> KvecModel {
    let config = ModelConfig {
        encoder: EncoderConfig {
            d_model: 8,
            ffn_width: 12,
            blocks: 2,
            hidden: 6,
            slot_count: 8,
            max_seq_pos: 64,
            window,
            ..EncoderConfig::desk()
        },
        policy_bias_init: bias,
    };
    KvecModel::new(config, fixture_schema(), 3, seed).expect("valid model")
}
