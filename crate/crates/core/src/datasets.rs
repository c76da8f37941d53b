//! Synthetic traffic-like flows with a planted class signal, interleaving into
//! tangled sequences, key-disjoint splits and the on-disk format.
//!
//! Every flow has a direction field whose runs form sessions, a token field and
//! a numeric size. Inside the signal segment a token is drawn from the class's
//! own token range with probability `signal_density`, otherwise the neutral
//! "empty" token 0 is used. Outside the segment every item is empty.
//!
//! Flows are generated in concurrency groups that are later tangled together.
//! Each group has a dominant class and most of its flows belong to it, so items
//! of neighbouring flows carry evidence about a flow's own class.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KvecError, Result};
use crate::sequence::{ClassId, Field, FieldSpec, FieldValue, Schema, TangledSequence};

/// Token code of padding items.
pub const EMPTY_TOKEN: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalPosition {
    Early,
    Late,
}

impl std::str::FromStr for SignalPosition {
    type Err = KvecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(SignalPosition::Early),
            "late" => Ok(SignalPosition::Late),
            other => Err(KvecError::Config(format!("signal position must be early or late, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub flows: usize,
    pub flow_length: usize,
    pub signal_length: usize,
    pub signal: SignalPosition,
    /// Flows active at once inside a tangled sequence.
    pub concurrency: usize,
    /// Size of each class's private token range.
    pub tokens_per_class: u32,
    /// Chance that a signal-segment item carries a class token.
    pub signal_density: f64,
    /// Share of a concurrency group's flows that carry its dominant class.
    pub group_purity: f64,
    /// Mean length of a direction run.
    pub run_length: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            classes: 2,
            flows: 1000,
            flow_length: 100,
            signal_length: 10,
            signal: SignalPosition::Early,
            concurrency: 10,
            tokens_per_class: 4,
            signal_density: 0.8,
            group_purity: 0.9,
            run_length: 2.1,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(KvecError::Config(m.to_string()));
        if self.classes < 2 {
            return bad("at least two classes are required");
        }
        if self.flows == 0 || self.flow_length == 0 || self.concurrency == 0 || self.tokens_per_class == 0 {
            return bad("flows, flow_length, concurrency and tokens_per_class must be positive");
        }
        if self.signal_length > self.flow_length {
            return Err(KvecError::Config(format!(
                "signal length {} exceeds flow length {}",
                self.signal_length, self.flow_length
            )));
        }
        if !(0.0..=1.0).contains(&self.signal_density) || !(0.0..=1.0).contains(&self.group_purity) {
            return bad("signal_density and group_purity must lie in [0, 1]");
        }
        if !(self.run_length >= 1.0) {
            return bad("run_length must be at least 1");
        }
        Ok(())
    }

    /// Arrival range (0-based, within a flow) of the signal segment.
    pub fn signal_range(&self) -> std::ops::Range<usize> {
        match self.signal {
            SignalPosition::Early => 0..self.signal_length,
            SignalPosition::Late => self.flow_length - self.signal_length..self.flow_length,
        }
    }

    /// Token range owned by `class`.
    pub fn class_tokens(&self, class: ClassId) -> std::ops::Range<u32> {
        let lo = 1 + class as u32 * self.tokens_per_class;
        lo..lo + self.tokens_per_class
    }

    pub fn token_cardinality(&self) -> u32 {
        1 + self.classes as u32 * self.tokens_per_class
    }
}

/// One labeled key-value sequence before tangling.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    pub key: String,
    pub label: ClassId,
    /// Concurrency group; flows of one group are tangled together.
    pub group: usize,
    pub items: Vec<Vec<FieldValue>>,
}

/// Direction, token and size. Size statistics are filled in from the data.
pub fn synthetic_schema(cfg: &GeneratorConfig, size_mean: f64, size_std: f64) -> Result<Schema> {
    Schema::new(
        vec![
            Field {
                name: "direction".into(),
                spec: FieldSpec::Categorical { cardinality: 2 },
            },
            Field {
                name: "token".into(),
                spec: FieldSpec::Categorical {
                    cardinality: cfg.token_cardinality(),
                },
            },
            Field {
                name: "size".into(),
                spec: FieldSpec::Numeric {
                    mean: size_mean,
                    std: size_std,
                },
            },
        ],
        0,
    )
}

fn flow_items(cfg: &GeneratorConfig, label: ClassId, rng: &mut impl Rng) -> Vec<Vec<FieldValue>> {
    let signal = cfg.signal_range();
    let switch = 1.0 / cfg.run_length;
    let mut direction = rng.gen_range(0..2u32);
    (0..cfg.flow_length)
        .map(|i| {
            if i > 0 && rng.gen_bool(switch) {
                direction ^= 1;
            }
            let carries = signal.contains(&i) && rng.gen_bool(cfg.signal_density);
            let (token, size) = if carries {
                (rng.gen_range(cfg.class_tokens(label)), 1.0 + rng.gen_range(-0.2..0.2))
            } else {
                (EMPTY_TOKEN, rng.gen_range(0.0..0.1))
            };
            vec![FieldValue::Code(direction), FieldValue::Code(token), FieldValue::Real(size)]
        })
        .collect()
}

/// Generates `cfg.flows` labeled flows in groups of `cfg.concurrency`.
pub fn generate_flows(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Result<Vec<Flow>> {
    cfg.check()?;
    let width = (cfg.flows - 1).to_string().len();
    let mut flows = Vec::with_capacity(cfg.flows);
    let mut dominant = 0;
    for f in 0..cfg.flows {
        let group = f / cfg.concurrency;
        if f % cfg.concurrency == 0 {
            // balanced dominant classes across groups
            dominant = group % cfg.classes;
        }
        let label = if rng.gen_bool(cfg.group_purity) {
            dominant
        } else {
            (dominant + rng.gen_range(1..cfg.classes)) % cfg.classes
        };
        flows.push(Flow {
            key: format!("f{f:0width$}"),
            label,
            group,
            items: flow_items(cfg, label, rng),
        });
    }
    Ok(flows)
}

/// Mixes flows chronologically with `concurrency` flows active at a time: each
/// next item comes from a uniformly chosen active flow, and a finished flow is
/// replaced by the next one from the pool.
pub fn interleave(flows: &[Flow], concurrency: usize, schema: &Schema, rng: &mut impl Rng) -> Result<TangledSequence> {
    if flows.is_empty() {
        return Err(KvecError::Dataset("cannot interleave an empty flow pool".into()));
    }
    if concurrency == 0 {
        return Err(KvecError::Config("concurrency must be at least 1".into()));
    }
    let mut seq = TangledSequence::new(schema.clone());
    let mut pool = flows.iter().filter(|f| !f.items.is_empty());
    // (flow, next item index)
    let mut active: Vec<(&Flow, usize)> = pool.by_ref().take(concurrency).map(|f| (f, 0)).collect();
    while !active.is_empty() {
        let slot = rng.gen_range(0..active.len());
        let (flow, next) = active[slot];
        seq.ingest(&flow.key, flow.items[next].clone())?;
        if next + 1 < flow.items.len() {
            active[slot].1 += 1;
        } else if let Some(f) = pool.next() {
            active[slot] = (f, 0);
        } else {
            active.swap_remove(slot);
        }
    }
    for f in flows {
        if !f.items.is_empty() {
            seq.set_label(&f.key, f.label)?;
        }
    }
    Ok(seq)
}

/// Key-disjoint split in `ratios` proportion. Flows sharing a group stay
/// together, so allocation happens per group.
pub fn split_by_key(flows: &[Flow], ratios: [usize; 3], seed: u64) -> Result<[Vec<Flow>; 3]> {
    if flows.len() < 10 {
        return Err(KvecError::Dataset(format!("{} keys are too few to split (need at least 10)", flows.len())));
    }
    let total: usize = ratios.iter().sum();
    if total == 0 {
        return Err(KvecError::Config("split ratios sum to zero".into()));
    }
    let mut groups: Vec<usize> = flows.iter().map(|f| f.group).collect();
    groups.sort_unstable();
    groups.dedup();
    let n = groups.len();
    let share = |r: usize| (n * r + total / 2) / total;
    let (val, test) = (share(ratios[1]), share(ratios[2]));
    if n < 3 || val == 0 || test == 0 || val + test >= n {
        return Err(KvecError::Dataset(format!("{n} key groups cannot fill three non-empty splits")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let mut side: HashMap<usize, usize> = HashMap::new();
    for (i, g) in groups.iter().enumerate() {
        let s = if i < val {
            1
        } else if i < val + test {
            2
        } else {
            0
        };
        side.insert(*g, s);
    }
    let mut out: [Vec<Flow>; 3] = Default::default();
    for f in flows {
        out[side[&f.group]].push(f.clone());
    }
    Ok(out)
}

/// Tangles each concurrency group of `flows` into its own sequence.
pub fn tangle_groups(flows: &[Flow], concurrency: usize, schema: &Schema, rng: &mut impl Rng) -> Result<Vec<TangledSequence>> {
    let mut order: Vec<usize> = Vec::new();
    let mut members: HashMap<usize, Vec<Flow>> = HashMap::new();
    for f in flows {
        members
            .entry(f.group)
            .or_insert_with(|| {
                order.push(f.group);
                Vec::new()
            })
            .push(f.clone());
    }
    order.shuffle(rng);
    order.iter().map(|g| interleave(&members[g], concurrency, schema, rng)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub sequences: usize,
    pub keys: usize,
    pub items: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: String,
    pub schema: Schema,
    pub class_names: Vec<String>,
    pub counts: Counts,
    /// Mean items per session over every key.
    pub avg_session_length: f64,
    pub generator: Option<GeneratorConfig>,
}

/// One split: its manifest and tangled sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<TangledSequence>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemRecord {
    seq: usize,
    t: usize,
    key: String,
    v: Vec<FieldValue>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    seq: usize,
    key: String,
    label: ClassId,
}

/// Items per session, averaged over every session of every sequence.
pub fn mean_session_length(sequences: &[TangledSequence]) -> f64 {
    let (mut items, mut sessions) = (0usize, 0usize);
    for seq in sequences {
        let idx = seq.sessions();
        for k in 0..idx.key_count() {
            for s in idx.sessions(k) {
                items += s.items.len();
                sessions += 1;
            }
        }
    }
    if sessions == 0 {
        0.0
    } else {
        items as f64 / sessions as f64
    }
}

impl Dataset {
    pub fn new(
        split: &str,
        schema: Schema,
        class_names: Vec<String>,
        sequences: Vec<TangledSequence>,
        generator: Option<GeneratorConfig>,
    ) -> Self {
        let counts = Counts {
            sequences: sequences.len(),
            keys: sequences.iter().map(|s| s.keys().len()).sum(),
            items: sequences.iter().map(TangledSequence::len).sum(),
        };
        let manifest = DatasetManifest {
            split: split.to_string(),
            schema,
            class_names,
            counts,
            avg_session_length: mean_session_length(&sequences),
            generator,
        };
        Dataset { manifest, sequences }
    }

    pub fn classes(&self) -> usize {
        self.manifest.class_names.len()
    }

    /// Writes `manifest.json`, `items.jsonl` and `labels.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        let mut items = BufWriter::new(fs::File::create(dir.join("items.jsonl"))?);
        let mut labels = BufWriter::new(fs::File::create(dir.join("labels.jsonl"))?);
        for (s, seq) in self.sequences.iter().enumerate() {
            for item in seq.items() {
                let rec = ItemRecord {
                    seq: s,
                    t: item.arrival,
                    key: seq.key_name(item.key).to_string(),
                    v: item.value.clone(),
                };
                writeln!(items, "{}", serde_json::to_string(&rec)?)?;
            }
            for (k, key) in seq.keys().iter().enumerate() {
                let label = seq.label(k).ok_or_else(|| KvecError::MissingLabel(key.clone()))?;
                let rec = LabelRecord {
                    seq: s,
                    key: key.clone(),
                    label,
                };
                writeln!(labels, "{}", serde_json::to_string(&rec)?)?;
            }
        }
        items.flush()?;
        labels.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?).map_err(|e| {
            KvecError::Record {
                path: manifest_path.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            }
        })?;
        manifest.schema.check()?;
        if manifest.class_names.len() < 2 {
            return Err(KvecError::Dataset("manifest lists fewer than two classes".into()));
        }
        let mut sequences: Vec<TangledSequence> = Vec::new();
        let path = dir.join("items.jsonl");
        let name = path.display().to_string();
        for (n, line) in BufReader::new(fs::File::open(&path)?).lines().enumerate() {
            let line = line?;
            let record = |message: String| KvecError::Record {
                path: name.clone(),
                line: n + 1,
                message,
            };
            if line.trim().is_empty() {
                continue;
            }
            let rec: ItemRecord = serde_json::from_str(&line).map_err(|e| record(e.to_string()))?;
            if rec.seq == sequences.len() {
                sequences.push(TangledSequence::new(manifest.schema.clone()));
            } else if rec.seq + 1 != sequences.len() {
                return Err(record(format!(
                    "sequence {} out of order (current {})",
                    rec.seq,
                    sequences.len().saturating_sub(1)
                )));
            }
            let seq = sequences.last_mut().expect("pushed above");
            seq.ingest_at(rec.t, &rec.key, rec.v).map_err(|e| record(e.to_string()))?;
        }
        let path = dir.join("labels.jsonl");
        let name = path.display().to_string();
        for (n, line) in BufReader::new(fs::File::open(&path)?).lines().enumerate() {
            let line = line?;
            let record = |message: String| KvecError::Record {
                path: name.clone(),
                line: n + 1,
                message,
            };
            if line.trim().is_empty() {
                continue;
            }
            let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| record(e.to_string()))?;
            let seq = sequences
                .get_mut(rec.seq)
                .ok_or_else(|| record(format!("label for unknown sequence {}", rec.seq)))?;
            if rec.label >= manifest.class_names.len() {
                return Err(record(format!(
                    "label {} out of range for {} classes",
                    rec.label,
                    manifest.class_names.len()
                )));
            }
            seq.set_label(&rec.key, rec.label).map_err(|e| record(e.to_string()))?;
        }
        for seq in &sequences {
            seq.check_labels(manifest.class_names.len())?;
        }
        let data = Dataset { manifest, sequences };
        let counts = Dataset::new("", data.manifest.schema.clone(), vec![], data.sequences.clone(), None)
            .manifest
            .counts;
        if counts != data.manifest.counts {
            return Err(KvecError::Dataset(format!(
                "manifest counts {:?} disagree with records {:?}",
                data.manifest.counts, counts
            )));
        }
        Ok(data)
    }
}

/// The three splits of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "validation", "test"];

impl SplitDataset {
    pub fn splits(&self) -> [&Dataset; 3] {
        [&self.train, &self.validation, &self.test]
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        for (name, d) in SPLIT_NAMES.iter().zip(self.splits()) {
            d.save(&root.join(name))?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        Ok(SplitDataset {
            train: Dataset::load(&root.join("train"))?,
            validation: Dataset::load(&root.join("validation"))?,
            test: Dataset::load(&root.join("test"))?,
        })
    }
}

/// Mean and standard deviation of the size field.
fn size_stats(flows: &[Flow]) -> (f64, f64) {
    let xs: Vec<f64> = flows.iter().flat_map(|f| f.items.iter().map(|v| v[2].as_real())).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-6))
}

/// Generates flows, splits them 8:1:1 by key and tangles every split.
pub fn generate(cfg: &GeneratorConfig) -> Result<SplitDataset> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let flows = generate_flows(cfg, &mut rng)?;
    let [train, validation, test] = split_by_key(&flows, [8, 1, 1], rng.gen())?;
    let (mean, std) = size_stats(&train);
    let schema = synthetic_schema(cfg, mean, std)?;
    let class_names: Vec<String> = (0..cfg.classes).map(|c| format!("class{c}")).collect();
    let mut build = |name: &str, flows: &[Flow]| -> Result<Dataset> {
        let mut sub = ChaCha8Rng::seed_from_u64(rng.gen());
        let seqs = tangle_groups(flows, cfg.concurrency, &schema, &mut sub)?;
        Ok(Dataset::new(name, schema.clone(), class_names.clone(), seqs, Some(cfg.clone())))
    };
    Ok(SplitDataset {
        train: build("train", &train)?,
        validation: build("validation", &validation)?,
        test: build("test", &test)?,
    })
}

/// Accuracy of predicting each flow's class by counting class tokens inside its
/// signal segment (ties and empty segments go to the lowest class).
pub fn frequency_oracle(flows: &[Flow], cfg: &GeneratorConfig) -> f64 {
    let correct = flows
        .iter()
        .filter(|f| {
            let mut counts = vec![0usize; cfg.classes];
            for v in &f.items[cfg.signal_range()] {
                let token = v[1].as_code().unwrap_or(EMPTY_TOKEN);
                if token != EMPTY_TOKEN {
                    counts[((token - 1) / cfg.tokens_per_class) as usize] += 1;
                }
            }
            let best = counts.iter().max().copied().unwrap_or(0);
            counts.iter().position(|&c| c == best) == Some(f.label)
        })
        .count();
    correct as f64 / flows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            flows: 100,
            flow_length: 30,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn signal_length_is_bounded() {
        let cfg = GeneratorConfig {
            signal_length: 101,
            ..GeneratorConfig::default()
        };
        assert!(generate_flows(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn early_signal_sits_in_the_first_items() {
        let cfg = small();
        let flows = generate_flows(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for f in &flows {
            for (i, v) in f.items.iter().enumerate() {
                let token = v[1].as_code().unwrap();
                if i >= cfg.signal_length {
                    assert_eq!(token, EMPTY_TOKEN);
                } else if token != EMPTY_TOKEN {
                    assert!(cfg.class_tokens(f.label).contains(&token));
                }
            }
        }
    }

    #[test]
    fn late_signal_sits_in_the_last_items() {
        let cfg = GeneratorConfig {
            signal: SignalPosition::Late,
            ..small()
        };
        let flows = generate_flows(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let range = cfg.signal_range();
        assert_eq!(range, 20..30);
        for f in &flows {
            for (i, v) in f.items.iter().enumerate() {
                if !range.contains(&i) {
                    assert_eq!(v[1].as_code(), Some(EMPTY_TOKEN));
                }
            }
        }
    }

    #[test]
    fn single_concurrency_is_untangled() {
        let cfg = small();
        let flows = generate_flows(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let schema = synthetic_schema(&cfg, 0.5, 0.5).unwrap();
        let seq = interleave(&flows[..5], 1, &schema, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (i, item) in seq.items().iter().enumerate() {
            assert_eq!(item.key, i / cfg.flow_length);
        }
    }

    #[test]
    fn interleave_conserves_and_orders_items() {
        let cfg = GeneratorConfig {
            flows: 100,
            ..GeneratorConfig::default()
        };
        let flows = generate_flows(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let schema = synthetic_schema(&cfg, 0.5, 0.5).unwrap();
        let seq = interleave(&flows, 10, &schema, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(seq.len(), 10_000);
        for f in &flows {
            let k = seq.key_id(&f.key).unwrap();
            let got: Vec<_> = seq.key_items(k).iter().map(|&t| seq.items()[t - 1].value.clone()).collect();
            let want: Vec<_> = f.items.iter().map(|v| schema.normalize(v.clone()).unwrap()).collect();
            assert_eq!(got, want);
        }
        assert!(interleave(&[], 3, &schema, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn split_is_exact_and_disjoint() {
        let cfg = small();
        let flows = generate_flows(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let [a, b, c] = split_by_key(&flows, [8, 1, 1], 11).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let mut keys: Vec<&str> = a.iter().chain(&b).chain(&c).map(|f| f.key.as_str()).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), 100);
        assert_eq!(split_by_key(&flows, [8, 1, 1], 11).unwrap(), [a, b, c]);
        assert!(split_by_key(&flows[..9], [8, 1, 1], 11).is_err());
    }

    #[test]
    fn oracle_and_session_length() {
        let cfg = GeneratorConfig::default();
        let flows = generate_flows(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        assert!(frequency_oracle(&flows, &cfg) >= 0.99);
        let data = generate(&cfg).unwrap();
        for d in data.splits() {
            let len = d.manifest.avg_session_length;
            assert!((1.8..=2.5).contains(&len), "{len}");
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        generate(&cfg).unwrap().save(&dir.path().join("a")).unwrap();
        generate(&cfg).unwrap().save(&dir.path().join("b")).unwrap();
        for split in SPLIT_NAMES {
            for file in ["manifest.json", "items.jsonl", "labels.jsonl"] {
                let a = fs::read(dir.path().join("a").join(split).join(file)).unwrap();
                let b = fs::read(dir.path().join("b").join(split).join(file)).unwrap();
                assert_eq!(a, b, "{split}/{file}");
            }
        }
    }

    #[test]
    fn round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&small()).unwrap();
        data.save(dir.path()).unwrap();
        let back = SplitDataset::load(dir.path()).unwrap();
        assert_eq!(back, data);

        let test_dir = dir.path().join("test");
        let labels = fs::read_to_string(test_dir.join("labels.jsonl")).unwrap();
        let first = labels.lines().next().unwrap().to_string();
        fs::write(test_dir.join("labels.jsonl"), labels.replacen(&(first.clone() + "\n"), "", 1)).unwrap();
        let err = Dataset::load(&test_dir).unwrap_err().to_string();
        let key: serde_json::Value = serde_json::from_str(&first).unwrap();
        assert!(err.contains(key["key"].as_str().unwrap()), "{err}");

        fs::write(test_dir.join("labels.jsonl"), labels).unwrap();
        let items = fs::read_to_string(test_dir.join("items.jsonl")).unwrap();
        let gapped = items.replacen("\"t\":2,", "\"t\":3,", 1);
        fs::write(test_dir.join("items.jsonl"), gapped).unwrap();
        match Dataset::load(&test_dir).unwrap_err() {
            KvecError::Record { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }
}
