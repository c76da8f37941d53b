mod common;

use kvec::evalkit::{evaluate, halting_baseline, halting_histogram, harmonic_mean, metrics, HaltMode, KeyOutcome};
use kvec::sequence::TangledSequence;

const EXACT: f64 = 1e-12;

fn outcome(sequence: usize, key: &str, steps: usize, length: usize, predicted: usize, truth: usize) -> KeyOutcome {
    KeyOutcome {
        sequence,
        key: key.into(),
        steps,
        length,
        predicted,
        truth,
        halt_arrival: steps,
    }
}

/// Five keys spread over three tangled sequences, two classes.
fn fixture() -> Vec<KeyOutcome> {
    vec![
        outcome(0, "a", 2, 4, 0, 0),
        outcome(0, "b", 5, 5, 1, 0),
        outcome(1, "c", 1, 10, 1, 1),
        outcome(1, "d", 3, 6, 1, 1),
        outcome(2, "e", 4, 8, 0, 1),
    ]
}

fn close(actual: f64, expected: f64) {
    assert!((actual - expected).abs() <= EXACT, "{actual} vs {expected}");
}

#[test]
fn two_class_fixture_matches_hand_values() {
    let r = metrics(&fixture(), 2).unwrap();
    assert_eq!(r.count, 5);
    // (1/2 + 1 + 1/10 + 1/2 + 1/2) / 5
    close(r.earliness, 0.52);
    close(r.accuracy, 0.6);
    // class 0: precision 1/2, recall 1/2; class 1: precision 2/3, recall 2/3
    close(r.precision, 7.0 / 12.0);
    close(r.recall, 7.0 / 12.0);
    close(r.f1, 7.0 / 12.0);
    // 2 * 0.48 * 0.6 / 1.08
    close(r.hm, 8.0 / 15.0);
}

#[test]
fn unpredicted_class_scores_zero_in_the_macro_average() {
    let outcomes = vec![
        outcome(0, "a", 1, 2, 0, 0),
        outcome(0, "b", 2, 2, 0, 2),
        outcome(1, "c", 3, 3, 1, 1),
        outcome(2, "d", 1, 4, 1, 2),
    ];
    let r = metrics(&outcomes, 3).unwrap();
    close(r.accuracy, 0.5);
    close(r.earliness, (0.5 + 1.0 + 1.0 + 0.25) / 4.0);
    // class 0: p 1/2 r 1; class 1: p 1/2 r 1; class 2: p 0 r 0
    close(r.precision, 1.0 / 3.0);
    close(r.recall, 2.0 / 3.0);
    close(r.f1, (2.0 / 3.0 + 2.0 / 3.0) / 3.0);
}

#[test]
fn harmonic_mean_examples() {
    close(harmonic_mean(0.8, 0.2), 0.8);
    close(harmonic_mean(1.0, 0.0), 1.0);
    close(harmonic_mean(0.5, 0.5), 0.5);
    close(harmonic_mean(0.9, 0.7), 2.0 * 0.3 * 0.9 / 1.2);
    assert_eq!(harmonic_mean(0.0, 1.0), 0.0);
}

#[test]
fn invalid_outcomes_are_rejected() {
    assert!(metrics(&[], 2).is_err());
    assert!(metrics(&[outcome(0, "a", 0, 4, 0, 0)], 2).is_err());
    assert!(metrics(&[outcome(0, "a", 5, 4, 0, 0)], 2).is_err());
    assert!(metrics(&[outcome(0, "a", 1, 4, 2, 0)], 2).is_err());
}

#[test]
fn histogram_of_the_fixture() {
    let h = halting_histogram(&fixture(), 4).unwrap();
    // fractions 0.1, 0.5, 0.5, 0.5, 1.0 in right-closed quarters
    assert_eq!(h.mass, vec![0.2, 0.6, 0.0, 0.2]);
    close(h.median, 0.5);
}

fn hand_sequences() -> Vec<TangledSequence> {
    let keys_per_seq: [&[&str]; 3] = [&["a", "b", "a", "a", "b"], &["c", "c", "d", "c", "d", "d", "c"], &["e", "e"]];
    keys_per_seq
        .iter()
        .map(|keys| {
            let mut seq = TangledSequence::new(kvec::gradsuite::fixture_schema());
            for (n, k) in keys.iter().enumerate() {
                seq.ingest(k, common::item((n % 2) as u32, 1, 0.5)).unwrap();
            }
            for (i, name) in seq.keys().to_vec().iter().enumerate() {
                seq.set_label(name, i % 3).unwrap();
            }
            seq
        })
        .collect()
}

#[test]
fn fixed_halting_earliness_on_three_hand_sequences() {
    let model = common::small_model(64, 0.0, 3);
    let seqs = hand_sequences();
    let outcomes = halting_baseline(HaltMode::Fixed(2), &model, &seqs).unwrap();
    let steps: Vec<(String, usize, usize)> = outcomes.iter().map(|o| (o.key.clone(), o.steps, o.length)).collect();
    assert_eq!(
        steps,
        vec![
            ("a".into(), 2, 3),
            ("b".into(), 2, 2),
            ("c".into(), 2, 4),
            ("d".into(), 2, 3),
            ("e".into(), 2, 2),
        ]
    );
    let r = metrics(&outcomes, 3).unwrap();
    close(r.earliness, (2.0 / 3.0 + 1.0 + 0.5 + 2.0 / 3.0 + 1.0) / 5.0);
    // halting at step 1 gives the smallest possible earliness
    let first = evaluate(&model, &seqs, HaltMode::Fixed(1)).unwrap();
    close(metrics(&first, 3).unwrap().earliness, (1.0 / 3.0 + 0.5 + 0.25 + 1.0 / 3.0 + 0.5) / 5.0);
}

#[test]
fn confidence_zero_halts_at_the_first_item() {
    let model = common::small_model(64, 0.0, 3);
    let outcomes = halting_baseline(HaltMode::Confidence(0.0), &model, &hand_sequences()).unwrap();
    assert!(outcomes.iter().all(|o| o.steps == 1));
    assert!(halting_baseline(HaltMode::Confidence(1.5), &model, &hand_sequences()).is_err());
    assert!(halting_baseline(HaltMode::Fixed(0), &model, &hand_sequences()).is_err());
}
