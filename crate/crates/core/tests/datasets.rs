use std::collections::HashSet;
use std::fs;

use kvec::datasets::{frequency_oracle, generate, generate_flows, GeneratorConfig, SignalPosition, SplitDataset, EMPTY_TOKEN};
use kvec::KvecError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(signal: SignalPosition) -> GeneratorConfig {
    GeneratorConfig {
        signal,
        ..GeneratorConfig::default()
    }
}

#[test]
fn signal_segments_are_learnable_by_counting() {
    for signal in [SignalPosition::Early, SignalPosition::Late] {
        let cfg = config(signal);
        let flows = generate_flows(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        assert_eq!(flows.len(), 1000);
        let acc = frequency_oracle(&flows, &cfg);
        assert!(acc >= 0.99, "{signal:?}: oracle accuracy {acc}");
    }
}

#[test]
fn items_outside_the_signal_carry_no_class_token() {
    for signal in [SignalPosition::Early, SignalPosition::Late] {
        let cfg = config(signal);
        let flows = generate_flows(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let range = cfg.signal_range();
        for f in &flows {
            for (i, v) in f.items.iter().enumerate() {
                let token = v[1].as_code().unwrap();
                if range.contains(&i) {
                    assert!(token == EMPTY_TOKEN || cfg.class_tokens(f.label).contains(&token));
                } else {
                    assert_eq!(token, EMPTY_TOKEN);
                }
            }
        }
    }
}

#[test]
fn default_dataset_shape_and_session_length() {
    let data = generate(&GeneratorConfig::default()).unwrap();
    let counts: Vec<_> = data.splits().iter().map(|d| d.manifest.counts).collect();
    assert_eq!(counts.iter().map(|c| c.keys).collect::<Vec<_>>(), vec![800, 100, 100]);
    assert_eq!(counts.iter().map(|c| c.items).sum::<usize>(), 100_000);
    let mut seen = HashSet::new();
    for d in data.splits() {
        for seq in &d.sequences {
            assert_eq!(seq.len(), 1000);
            for k in seq.keys() {
                assert!(seen.insert(k.clone()), "key {k} appears in two splits");
            }
        }
        let s = d.manifest.avg_session_length;
        assert!((1.8..=2.5).contains(&s), "{}: mean session length {s}", d.manifest.split);
    }
}

#[test]
fn round_trip_through_files_is_exact() {
    let cfg = GeneratorConfig {
        flows: 200,
        flow_length: 20,
        ..GeneratorConfig::default()
    };
    let data = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    assert_eq!(SplitDataset::load(dir.path()).unwrap(), data);
}

#[test]
fn same_seed_same_files() {
    let cfg = GeneratorConfig {
        flows: 100,
        flow_length: 15,
        seed: 11,
        ..GeneratorConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&cfg).unwrap().save(a.path()).unwrap();
    generate(&cfg).unwrap().save(b.path()).unwrap();
    for split in ["train", "validation", "test"] {
        for file in ["manifest.json", "items.jsonl", "labels.jsonl"] {
            let read = |root: &std::path::Path| fs::read(root.join(split).join(file)).unwrap();
            assert_eq!(read(a.path()), read(b.path()), "{split}/{file}");
        }
    }
}

#[test]
fn corrupt_records_name_their_line() {
    let cfg = GeneratorConfig {
        flows: 100,
        flow_length: 10,
        ..GeneratorConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    generate(&cfg).unwrap().save(dir.path()).unwrap();
    let items = dir.path().join("test").join("items.jsonl");
    let original = fs::read_to_string(&items).unwrap();
    let mut lines: Vec<String> = original.lines().map(String::from).collect();

    // an arrival gap on line 3
    lines[2] = lines[2].replace("\"t\":3", "\"t\":4");
    fs::write(&items, lines.join("\n") + "\n").unwrap();
    match SplitDataset::load(dir.path()) {
        Err(KvecError::Record { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a record error, got {other:?}"),
    }

    // malformed JSON on line 5
    let mut lines: Vec<String> = original.lines().map(String::from).collect();
    lines[4] = "{not json".into();
    fs::write(&items, lines.join("\n") + "\n").unwrap();
    match SplitDataset::load(dir.path()) {
        Err(KvecError::Record { line, .. }) => assert_eq!(line, 5),
        other => panic!("expected a record error, got {other:?}"),
    }
}

#[test]
fn missing_label_is_reported() {
    let cfg = GeneratorConfig {
        flows: 100,
        flow_length: 10,
        ..GeneratorConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    generate(&cfg).unwrap().save(dir.path()).unwrap();
    let labels = dir.path().join("validation").join("labels.jsonl");
    let text = fs::read_to_string(&labels).unwrap();
    let kept: Vec<&str> = text.lines().skip(1).collect();
    fs::write(&labels, kept.join("\n") + "\n").unwrap();
    assert!(matches!(SplitDataset::load(dir.path()), Err(KvecError::MissingLabel(_))));
}
