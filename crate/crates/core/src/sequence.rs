//! Tangled key-value sequences, per-key sessions, and the dynamic correlation mask.
//!
//! A tangled sequence is one chronological stream that mixes the items of many
//! concurrent key-value sequences. Items of the same key are *key-correlated*.
//! Items of different keys are *value-correlated* when re-keying the later item
//! to the earlier item's key would place both in the same session, where a
//! session is a maximal run of a key's items sharing the session-dimension code.
//!
//! Three independent routes produce the mask: [`MaskBuilder`] (incremental,
//! window-bounded memory, used by the encoder and the streaming engine),
//! [`TangledSequence::mask_row`] (random access from the session index), and
//! [`mask_oracle`] (brute force re-segmentation, test-only ground truth).

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{KvecError, Result};

/// Dense per-sequence key ordinal, assigned in order of first appearance.
pub type KeyId = usize;

/// Class index in `0..classes`.
pub type ClassId = usize;

/// One field of an item's value vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Code(u32),
    Real(f64),
}

impl FieldValue {
    pub fn as_code(&self) -> Option<u32> {
        match *self {
            FieldValue::Code(c) => Some(c),
            FieldValue::Real(_) => None,
        }
    }

    pub fn as_real(&self) -> f64 {
        match *self {
            FieldValue::Code(c) => c as f64,
            FieldValue::Real(x) => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Categorical { cardinality: u32 },
    /// Standardized with `(x - mean) / std` before embedding.
    Numeric { mean: f64, std: f64 },
}

/// Unknown keys are rejected by the flattened `spec`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    #[serde(flatten)]
    pub spec: FieldSpec,
}

/// Value-space descriptor shared by every item of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub fields: Vec<Field>,
    /// Index of the categorical field whose runs define sessions.
    pub session_dim: usize,
    /// Optional maximum global-position gap between consecutive items of one
    /// session. `None` means sessions are defined by value runs alone.
    #[serde(default)]
    pub session_gap: Option<usize>,
}

impl Schema {
    pub fn new(fields: Vec<Field>, session_dim: usize) -> Result<Self> {
        let schema = Schema {
            fields,
            session_dim,
            session_gap: None,
        };
        schema.check()?;
        Ok(schema)
    }

    pub fn check(&self) -> Result<()> {
        match self.fields.get(self.session_dim) {
            Some(Field {
                spec: FieldSpec::Categorical { cardinality },
                ..
            }) if *cardinality > 0 => {}
            Some(_) => {
                return Err(KvecError::Schema(format!(
                    "session dimension {} must be categorical",
                    self.session_dim
                )))
            }
            None => {
                return Err(KvecError::Schema(format!(
                    "session dimension {} out of range for {} fields",
                    self.session_dim,
                    self.fields.len()
                )))
            }
        }
        for f in &self.fields {
            if let FieldSpec::Numeric { std, mean } = f.spec {
                if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
                    return Err(KvecError::Schema(format!(
                        "numeric field `{}` needs finite mean and positive std",
                        f.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn arity(&self) -> usize {
        self.fields.len()
    }

    /// Checks a raw value against the schema, converting integral values on
    /// numeric dimensions to reals.
    pub fn normalize(&self, mut value: Vec<FieldValue>) -> Result<Vec<FieldValue>> {
        if value.len() != self.fields.len() {
            return Err(KvecError::Schema(format!(
                "value has {} fields, schema expects {}",
                value.len(),
                self.fields.len()
            )));
        }
        for (dim, (field, v)) in self.fields.iter().zip(value.iter_mut()).enumerate() {
            match (&field.spec, *v) {
                (FieldSpec::Categorical { cardinality }, FieldValue::Code(c)) => {
                    if c >= *cardinality {
                        return Err(KvecError::Schema(format!(
                            "field {dim} (`{}`): code {c} outside 0..{cardinality}",
                            field.name
                        )));
                    }
                }
                (FieldSpec::Categorical { .. }, FieldValue::Real(x)) => {
                    return Err(KvecError::Schema(format!(
                        "field {dim} (`{}`): expected categorical code, got {x}",
                        field.name
                    )));
                }
                (FieldSpec::Numeric { .. }, FieldValue::Code(c)) => *v = FieldValue::Real(c as f64),
                (FieldSpec::Numeric { .. }, FieldValue::Real(x)) => {
                    if !x.is_finite() {
                        return Err(KvecError::Schema(format!(
                            "field {dim} (`{}`): non-finite value",
                            field.name
                        )));
                    }
                }
            }
        }
        Ok(value)
    }

    /// Session-dimension code of an already normalized value.
    pub fn session_code(&self, value: &[FieldValue]) -> u32 {
        value[self.session_dim]
            .as_code()
            .expect("session dimension is categorical")
    }
}

/// One timestamped key-value event.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub key: KeyId,
    pub value: Vec<FieldValue>,
    /// Global 1-based position in the tangled stream.
    pub arrival: usize,
    /// 1-based position inside the item's own key-value sequence.
    pub seq_index: usize,
    /// Ordinal of the session (within the key) that holds this item.
    pub session: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub code: u32,
    /// Arrival indices, ascending.
    pub items: Vec<usize>,
}

/// Per-key list of sessions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionIndex {
    per_key: Vec<Vec<Session>>,
}

impl SessionIndex {
    pub fn sessions(&self, key: KeyId) -> &[Session] {
        self.per_key.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn key_count(&self) -> usize {
        self.per_key.len()
    }

    /// Mean number of items per session over every key.
    pub fn mean_session_length(&self) -> f64 {
        let (items, sessions) = self.per_key.iter().flatten().fold((0usize, 0usize), |(n, s), sess| {
            (n + sess.items.len(), s + 1)
        });
        if sessions == 0 {
            0.0
        } else {
            items as f64 / sessions as f64
        }
    }
}

fn joins_session(code: u32, arrival: usize, last_code: u32, last_arrival: usize, gap: Option<usize>) -> bool {
    code == last_code && gap.is_none_or(|g| arrival - last_arrival <= g)
}

/// The ordered mixture of items plus per-key labels and sessions.
#[derive(Clone, Debug, PartialEq)]
pub struct TangledSequence {
    schema: Schema,
    items: Vec<Item>,
    keys: Vec<String>,
    key_index: HashMap<String, KeyId>,
    key_items: Vec<Vec<usize>>,
    sessions: SessionIndex,
    labels: Vec<Option<ClassId>>,
}

impl TangledSequence {
    pub fn new(schema: Schema) -> Self {
        TangledSequence {
            schema,
            items: Vec::new(),
            keys: Vec::new(),
            key_index: HashMap::new(),
            key_items: Vec::new(),
            sessions: SessionIndex::default(),
            labels: Vec::new(),
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    /// Item at a 1-based arrival index.
    pub fn item(&self, arrival: usize) -> Result<&Item> {
        arrival
            .checked_sub(1)
            .and_then(|p| self.items.get(p))
            .ok_or(KvecError::OutOfRange {
                index: arrival,
                len: self.items.len(),
            })
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn key_name(&self, key: KeyId) -> &str {
        &self.keys[key]
    }

    pub fn key_id(&self, key: &str) -> Option<KeyId> {
        self.key_index.get(key).copied()
    }

    /// Arrival indices of a key's items, ascending.
    pub fn key_items(&self, key: KeyId) -> &[usize] {
        &self.key_items[key]
    }

    /// `|S_k|` as observed so far.
    pub fn key_len(&self, key: KeyId) -> usize {
        self.key_items[key].len()
    }

    pub fn sessions(&self) -> &SessionIndex {
        &self.sessions
    }

    pub fn session_code(&self, arrival: usize) -> u32 {
        self.schema.session_code(&self.items[arrival - 1].value)
    }

    /// Appends an item at the next arrival index.
    pub fn ingest(&mut self, key: &str, value: Vec<FieldValue>) -> Result<&Item> {
        let t = self.items.len() + 1;
        self.ingest_at(t, key, value)
    }

    /// Appends an item with an explicit arrival index, which must be exactly
    /// one past the last ingested item.
    pub fn ingest_at(&mut self, t: usize, key: &str, value: Vec<FieldValue>) -> Result<&Item> {
        let expected = self.items.len() + 1;
        if t != expected {
            return Err(KvecError::ArrivalOrder { expected, got: t });
        }
        let value = self.schema.normalize(value)?;
        let code = self.schema.session_code(&value);
        let key_id = match self.key_index.get(key) {
            Some(&id) => id,
            None => {
                let id = self.keys.len();
                self.keys.push(key.to_string());
                self.key_index.insert(key.to_string(), id);
                self.key_items.push(Vec::new());
                self.sessions.per_key.push(Vec::new());
                self.labels.push(None);
                id
            }
        };
        let sessions = &mut self.sessions.per_key[key_id];
        let extend = sessions.last().is_some_and(|s| {
            let last = *s.items.last().expect("sessions are non-empty");
            joins_session(code, t, s.code, last, self.schema.session_gap)
        });
        if extend {
            sessions.last_mut().expect("checked").items.push(t);
        } else {
            sessions.push(Session {
                code,
                items: vec![t],
            });
        }
        let session = sessions.len() - 1;
        self.key_items[key_id].push(t);
        self.items.push(Item {
            key: key_id,
            value,
            arrival: t,
            seq_index: self.key_items[key_id].len(),
            session,
        });
        Ok(self.items.last().expect("just pushed"))
    }

    pub fn set_label(&mut self, key: &str, label: ClassId) -> Result<()> {
        let id = self
            .key_id(key)
            .ok_or_else(|| KvecError::Dataset(format!("label for unknown key `{key}`")))?;
        self.labels[id] = Some(label);
        Ok(())
    }

    pub fn label(&self, key: KeyId) -> Option<ClassId> {
        self.labels.get(key).copied().flatten()
    }

    /// Checks that every key carries a label inside `0..classes`.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        for (id, label) in self.labels.iter().enumerate() {
            match label {
                None => return Err(KvecError::MissingLabel(self.keys[id].clone())),
                Some(l) if *l >= classes => {
                    return Err(KvecError::Label {
                        label: *l,
                        classes,
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Whether `key`'s item at `arrival` is the last one of that key.
    pub fn is_last_of_key(&self, arrival: usize) -> bool {
        let key = self.items[arrival - 1].key;
        self.key_items[key].last() == Some(&arrival)
    }

    /// Key correlation: equal keys.
    pub fn key_correlated(&self, i: usize, j: usize) -> bool {
        key_correlated(&self.items[i - 1], &self.items[j - 1])
    }

    /// Value correlation of item `i` with the earlier item `j`: `j` lies in the
    /// trailing session of its key (as observed before `i`) and that session
    /// would absorb `i` if `i` carried `j`'s key. For two items of the same key
    /// this reduces to "same session".
    pub fn value_correlated(&self, i: usize, j: usize) -> Result<bool> {
        if j >= i {
            return Err(KvecError::Causality { i, j });
        }
        if i > self.items.len() {
            return Err(KvecError::OutOfRange {
                index: i,
                len: self.items.len(),
            });
        }
        let target = &self.items[j - 1];
        Ok(self
            .trailing_session_before(target.key, i)
            .is_some_and(|sess| sess.items.binary_search(&j).is_ok()))
    }

    /// The session of `key` that item `i` would join if re-keyed to `key`,
    /// restricted to items before `i`.
    fn trailing_session_before(&self, key: KeyId, i: usize) -> Option<&Session> {
        let items = &self.key_items[key];
        let before = items.partition_point(|&a| a < i);
        let last = *items.get(before.checked_sub(1)?)?;
        let sess = &self.sessions.per_key[key][self.items[last - 1].session];
        let code = self.session_code(i);
        joins_session(code, i, sess.code, last, self.schema.session_gap).then_some(sess)
    }

    /// Row `i` of the dynamic mask as ascending visible arrival indices.
    pub fn mask_row(&self, i: usize, cfg: &MaskConfig) -> Result<Vec<usize>> {
        if i == 0 || i > self.items.len() {
            return Err(KvecError::OutOfRange {
                index: i,
                len: self.items.len(),
            });
        }
        let lo = cfg.lowest_visible(i);
        let mut row = BTreeSet::new();
        row.insert(i);
        let own = self.items[i - 1].key;
        if cfg.key_correlation {
            let items = &self.key_items[own];
            let start = items.partition_point(|&a| a < lo);
            row.extend(items[start..].iter().copied().take_while(|&a| a <= i));
        }
        if cfg.value_correlation {
            for key in 0..self.keys.len() {
                if let Some(sess) = self.trailing_session_before(key, i) {
                    row.extend(sess.items.iter().copied().filter(|&a| a >= lo && a < i));
                }
            }
        }
        Ok(row.into_iter().collect())
    }

    /// All mask rows for the first `t` items, via the incremental builder.
    pub fn mask_rows(&self, t: usize, cfg: &MaskConfig) -> Vec<Vec<usize>> {
        let mut builder = MaskBuilder::new(*cfg, self.schema.session_gap);
        self.items[..t]
            .iter()
            .map(|item| builder.push(item.key, self.schema.session_code(&item.value)))
            .collect()
    }
}

pub fn key_correlated(a: &Item, b: &Item) -> bool {
    a.key == b.key
}

/// Which correlations open the mask, and how far back attention may reach.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    /// Number of most recent global positions (including the current one)
    /// that can be visible.
    pub window: usize,
    pub key_correlation: bool,
    pub value_correlation: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            window: 512,
            key_correlation: true,
            value_correlation: true,
        }
    }
}

impl MaskConfig {
    /// Smallest arrival index inside the window of row `i`.
    pub fn lowest_visible(&self, i: usize) -> usize {
        (i + 1).saturating_sub(self.window).max(1)
    }

    /// Per-sequence attention only (no cross-key correlation).
    pub fn key_only(window: usize) -> Self {
        MaskConfig {
            window,
            key_correlation: true,
            value_correlation: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct KeyTrack {
    recent: VecDeque<usize>,
    trailing: VecDeque<usize>,
    trailing_code: u32,
    last_arrival: usize,
}

/// Incremental mask construction with memory bounded by the window.
#[derive(Clone, Debug)]
pub struct MaskBuilder {
    cfg: MaskConfig,
    session_gap: Option<usize>,
    len: usize,
    keys: Vec<KeyTrack>,
    by_code: HashMap<u32, BTreeSet<KeyId>>,
}

impl MaskBuilder {
    pub fn new(cfg: MaskConfig, session_gap: Option<usize>) -> Self {
        MaskBuilder {
            cfg,
            session_gap,
            len: 0,
            keys: Vec::new(),
            by_code: HashMap::new(),
        }
    }

    pub fn config(&self) -> &MaskConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Ingests the next item and returns its mask row (ascending arrival
    /// indices, always ending with the item itself). Earlier rows are never
    /// affected.
    pub fn push(&mut self, key: KeyId, code: u32) -> Vec<usize> {
        self.len += 1;
        let i = self.len;
        let lo = self.cfg.lowest_visible(i);
        if key >= self.keys.len() {
            self.keys.resize_with(key + 1, KeyTrack::default);
        }

        let mut row = Vec::new();
        if self.cfg.key_correlation {
            let own = &mut self.keys[key];
            while own.recent.front().is_some_and(|&a| a < lo) {
                own.recent.pop_front();
            }
            row.extend(own.recent.iter().copied());
        }
        if self.cfg.value_correlation {
            if let Some(candidates) = self.by_code.get_mut(&code) {
                let mut stale = Vec::new();
                for &k in candidates.iter() {
                    let track = &mut self.keys[k];
                    if track.last_arrival < lo {
                        stale.push(k);
                        continue;
                    }
                    if !joins_session(code, i, track.trailing_code, track.last_arrival, self.session_gap) {
                        continue;
                    }
                    while track.trailing.front().is_some_and(|&a| a < lo) {
                        track.trailing.pop_front();
                    }
                    row.extend(track.trailing.iter().copied());
                }
                for k in stale {
                    candidates.remove(&k);
                }
            }
        }
        row.sort_unstable();
        row.dedup();
        row.push(i);

        let gap = self.session_gap;
        let track = &mut self.keys[key];
        let continues = track.last_arrival > 0
            && joins_session(code, i, track.trailing_code, track.last_arrival, gap);
        if continues {
            track.trailing.push_back(i);
        } else {
            if track.last_arrival > 0 {
                if let Some(set) = self.by_code.get_mut(&track.trailing_code) {
                    set.remove(&key);
                }
            }
            track.trailing.clear();
            track.trailing.push_back(i);
            track.trailing_code = code;
        }
        self.by_code.entry(code).or_default().insert(key);
        if self.cfg.key_correlation {
            track.recent.push_back(i);
        }
        track.last_arrival = i;
        row
    }
}

/// A `t x t` visibility matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DynamicMask {
    t: usize,
    visible: Vec<bool>,
}

impl DynamicMask {
    pub fn from_rows(rows: &[Vec<usize>]) -> Self {
        let t = rows.len();
        let mut visible = vec![false; t * t];
        for (r, row) in rows.iter().enumerate() {
            for &j in row {
                visible[r * t + j - 1] = true;
            }
        }
        DynamicMask { t, visible }
    }

    pub fn size(&self) -> usize {
        self.t
    }

    /// Visibility of `j` from `i` (both 1-based).
    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.visible[(i - 1) * self.t + (j - 1)]
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// Visible arrival indices of row `i`.
    pub fn row(&self, i: usize) -> Vec<usize> {
        (1..=self.t).filter(|&j| self.is_visible(i, j)).collect()
    }
}

/// Brute-force mask straight from the correlation definitions: every pair is
/// decided by re-segmenting the candidate key's observed items with the
/// hypothetical re-keyed item appended. No incremental state is shared with
/// [`MaskBuilder`] or [`TangledSequence::mask_row`].
pub fn mask_oracle(seq: &TangledSequence, t: usize, cfg: &MaskConfig) -> DynamicMask {
    let items = &seq.items()[..t];
    let schema = seq.schema();
    let gap = schema.session_gap;
    let mut visible = vec![false; t * t];
    for i in 1..=t {
        for j in 1..=i {
            let v = if i == j {
                true
            } else if i + 1 > cfg.window + j {
                false
            } else {
                let (ei, ej) = (&items[i - 1], &items[j - 1]);
                (cfg.key_correlation && ei.key == ej.key)
                    || (cfg.value_correlation && oracle_same_session(items, schema, gap, i, j))
            };
            visible[(i - 1) * t + (j - 1)] = v;
        }
    }
    DynamicMask { t, visible }
}

fn oracle_same_session(items: &[Item], schema: &Schema, gap: Option<usize>, i: usize, j: usize) -> bool {
    let key = items[j - 1].key;
    // (arrival, code) of S_key observed before i, then the re-keyed item i.
    let mut seq: Vec<(usize, u32)> = items[..i - 1]
        .iter()
        .filter(|e| e.key == key)
        .map(|e| (e.arrival, schema.session_code(&e.value)))
        .collect();
    seq.push((i, schema.session_code(&items[i - 1].value)));
    let mut label = vec![0usize; seq.len()];
    for n in 1..seq.len() {
        let (a, c) = seq[n];
        let (pa, pc) = seq[n - 1];
        let same = c == pc && gap.is_none_or(|g| a - pa <= g);
        label[n] = if same { label[n - 1] } else { label[n - 1] + 1 };
    }
    let pos_j = seq.iter().position(|&(a, _)| a == j).expect("j belongs to key");
    label[pos_j] == label[seq.len() - 1]
}

#[cfg(test)]
mod tests {
    #[test]
    fn field_rejects_unknown_keys() {
        let ok: Field = serde_json::from_str(r#"{"name":"a","kind":"categorical","cardinality":3}"#).unwrap();
        assert_eq!(ok.spec, FieldSpec::Categorical { cardinality: 3 });
        assert!(serde_json::from_str::<Field>(r#"{"name":"a","kind":"categorical","cardinality":3,"x":1}"#).is_err());
    }

    use super::*;

    fn schema() -> Schema {
        Schema::new(
            vec![
                Field {
                    name: "dir".into(),
                    spec: FieldSpec::Categorical { cardinality: 2 },
                },
                Field {
                    name: "size".into(),
                    spec: FieldSpec::Numeric { mean: 0.0, std: 1.0 },
                },
            ],
            0,
        )
        .unwrap()
    }

    fn v(dir: u32) -> Vec<FieldValue> {
        vec![FieldValue::Code(dir), FieldValue::Real(1.0)]
    }

    fn build(spec: &[(&str, u32)]) -> TangledSequence {
        let mut seq = TangledSequence::new(schema());
        for (k, d) in spec {
            seq.ingest(k, v(*d)).unwrap();
        }
        seq
    }

    #[test]
    fn first_item_opens_session() {
        let mut seq = TangledSequence::new(schema());
        let item = seq.ingest("a", v(0)).unwrap();
        assert_eq!(item.seq_index, 1);
        assert_eq!(item.arrival, 1);
        assert_eq!(seq.sessions().sessions(0).len(), 1);
    }

    #[test]
    fn sessions_split_on_code_change() {
        let seq = build(&[("a", 1), ("a", 1), ("a", 0)]);
        let s = seq.sessions().sessions(0);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].items, vec![1, 2]);
        assert_eq!(s[1].items, vec![3]);
    }

    #[test]
    fn other_keys_do_not_interrupt_sessions() {
        let seq = build(&[("a", 1), ("b", 1), ("a", 1)]);
        assert_eq!(seq.sessions().sessions(0)[0].items, vec![1, 3]);
        assert_eq!(seq.sessions().sessions(1)[0].items, vec![2]);
        assert_eq!(seq.item(3).unwrap().seq_index, 2);
    }

    #[test]
    fn ingest_rejects_bad_values_and_order() {
        let mut seq = TangledSequence::new(schema());
        assert!(matches!(
            seq.ingest("a", vec![FieldValue::Code(0)]),
            Err(KvecError::Schema(_))
        ));
        assert!(matches!(seq.ingest("a", v(2)), Err(KvecError::Schema(_))));
        seq.ingest("a", v(0)).unwrap();
        assert!(matches!(
            seq.ingest_at(1, "a", v(0)),
            Err(KvecError::ArrivalOrder { expected: 2, got: 1 })
        ));
        assert!(matches!(
            seq.ingest_at(3, "a", v(0)),
            Err(KvecError::ArrivalOrder { .. })
        ));
    }

    #[test]
    fn key_correlation_is_equality() {
        let seq = build(&[("a", 0), ("b", 0), ("a", 1)]);
        assert!(seq.key_correlated(1, 3));
        assert!(!seq.key_correlated(1, 2));
        assert!(seq.key_correlated(2, 2));
    }

    #[test]
    fn value_correlation_trailing_run() {
        // b's last item shares the code of item 3.
        let seq = build(&[("a", 0), ("b", 1), ("c", 1)]);
        assert!(seq.value_correlated(3, 2).unwrap());
        // different session code
        assert!(!seq.value_correlated(3, 1).unwrap());
        // b's run [up] is interrupted by a later b item with another code
        let seq = build(&[("b", 1), ("b", 0), ("c", 1)]);
        assert!(!seq.value_correlated(3, 1).unwrap());
        assert!(matches!(
            seq.value_correlated(1, 2),
            Err(KvecError::Causality { .. })
        ));
    }

    #[test]
    fn mask_rows_small_cases() {
        let cfg = MaskConfig::default();
        let seq = build(&[("a", 0), ("a", 1)]);
        assert_eq!(seq.mask_row(1, &cfg).unwrap(), vec![1]);
        assert_eq!(seq.mask_row(2, &cfg).unwrap(), vec![1, 2]);
        assert!(seq.mask_row(3, &cfg).is_err());
        let m = mask_oracle(&seq, 2, &cfg);
        assert!(!m.is_visible(1, 2));
    }

    #[test]
    fn single_key_gives_lower_triangle() {
        let seq = build(&[("a", 0), ("a", 1), ("a", 0), ("a", 0)]);
        let m = mask_oracle(&seq, 4, &MaskConfig::default());
        assert_eq!(m.visible_count(), 10);
    }

    #[test]
    fn distinct_keys_and_codes_give_diagonal() {
        let mut seq = TangledSequence::new(Schema::new(
            vec![Field {
                name: "dir".into(),
                spec: FieldSpec::Categorical { cardinality: 8 },
            }],
            0,
        )
        .unwrap());
        for n in 0..6u32 {
            seq.ingest(&format!("k{n}"), vec![FieldValue::Code(n)]).unwrap();
        }
        let m = mask_oracle(&seq, 6, &MaskConfig::default());
        assert_eq!(m.visible_count(), 6);
    }

    #[test]
    fn window_hides_old_positions() {
        let seq = build(&[("a", 0), ("a", 0), ("a", 0), ("a", 0)]);
        let cfg = MaskConfig {
            window: 2,
            ..MaskConfig::default()
        };
        assert_eq!(seq.mask_row(4, &cfg).unwrap(), vec![3, 4]);
        assert_eq!(seq.mask_rows(4, &cfg)[3], vec![3, 4]);
    }

    #[test]
    fn session_gap_knob_splits_sessions() {
        let mut s = schema();
        s.session_gap = Some(1);
        let mut seq = TangledSequence::new(s);
        for (k, d) in [("a", 0), ("b", 0), ("a", 0)] {
            seq.ingest(k, v(d)).unwrap();
        }
        assert_eq!(seq.sessions().sessions(0).len(), 2);
        let cfg = MaskConfig::default();
        let oracle = mask_oracle(&seq, 3, &cfg);
        let rows = seq.mask_rows(3, &cfg);
        assert_eq!(DynamicMask::from_rows(&rows), oracle);
    }

    #[test]
    fn mean_session_length_counts_runs() {
        let seq = build(&[("a", 0), ("a", 0), ("a", 1), ("b", 1)]);
        assert!((seq.sessions().mean_session_length() - 4.0 / 3.0).abs() < 1e-12);
    }
}
