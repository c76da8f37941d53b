//! Metrics, non-learned halting baselines, hyperparameter sweeps, attention
//! analysis and halting-position histograms.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ectl::DecisionMode;
use crate::error::{KvecError, Result};
use crate::model::KvecModel;
use crate::sequence::{ClassId, TangledSequence};
use crate::training::{run_episodes, HaltRule};

/// Outcome of one key-value sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyOutcome {
    /// Index of the tangled sequence within its dataset.
    pub sequence: usize,
    pub key: String,
    /// Items observed before halting (`n_k`).
    pub steps: usize,
    /// Full key-value sequence length (`|S_k|`).
    pub length: usize,
    pub predicted: ClassId,
    pub truth: ClassId,
    /// Global 1-based arrival index of the halting item.
    pub halt_arrival: usize,
}

impl KeyOutcome {
    pub fn earliness(&self) -> f64 {
        self.steps as f64 / self.length as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub count: usize,
    pub earliness: f64,
    pub accuracy: f64,
    /// Macro averages over classes.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hm: f64,
}

/// Harmonic mean of accuracy and `1 - earliness`; 0 when both vanish.
pub fn harmonic_mean(accuracy: f64, earliness: f64) -> f64 {
    let timely = 1.0 - earliness;
    let denom = timely + accuracy;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * timely * accuracy / denom
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Aggregates per-key outcomes. A class that is never predicted (or never
/// present) contributes precision (or recall) 0 to the macro average.
pub fn metrics(outcomes: &[KeyOutcome], classes: usize) -> Result<EvalResult> {
    if outcomes.is_empty() {
        return Err(KvecError::Dataset("no outcomes to score".into()));
    }
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut actual = vec![0usize; classes];
    let (mut correct, mut early) = (0usize, 0.0);
    for o in outcomes {
        if o.steps == 0 || o.steps > o.length {
            return Err(KvecError::Dataset(format!(
                "key `{}` halted after {} of {} items",
                o.key, o.steps, o.length
            )));
        }
        for label in [o.predicted, o.truth] {
            if label >= classes {
                return Err(KvecError::Label { label, classes });
            }
        }
        predicted[o.predicted] += 1;
        actual[o.truth] += 1;
        if o.predicted == o.truth {
            tp[o.truth] += 1;
            correct += 1;
        }
        early += o.earliness();
    }
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        let p = ratio(tp[c], predicted[c]);
        let r = ratio(tp[c], actual[c]);
        p_sum += p;
        r_sum += r;
        f_sum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let n = outcomes.len() as f64;
    let earliness = early / n;
    let accuracy = correct as f64 / n;
    Ok(EvalResult {
        count: outcomes.len(),
        earliness,
        accuracy,
        precision: p_sum / classes as f64,
        recall: r_sum / classes as f64,
        f1: f_sum / classes as f64,
        hm: harmonic_mean(accuracy, earliness),
    })
}

/// How keys are halted during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltMode {
    /// The learned policy, halting iff the probability reaches 0.5.
    Policy,
    /// Halt at step `tau` (or the sequence end).
    Fixed(usize),
    /// Halt once the top class probability reaches `mu`.
    Confidence(f64),
}

/// Runs every key of every sequence to its halt.
pub fn evaluate(model: &KvecModel, sequences: &[TangledSequence], mode: HaltMode) -> Result<Vec<KeyOutcome>> {
    let mut out = Vec::new();
    for (s, seq) in sequences.iter().enumerate() {
        let rule = match mode {
            HaltMode::Policy => HaltRule::Policy(DecisionMode::Threshold),
            HaltMode::Fixed(tau) => HaltRule::Fixed(tau),
            HaltMode::Confidence(mu) => HaltRule::Confidence(mu),
        };
        let rollout = run_episodes(model, seq, rule, None)?;
        out.extend(rollout.episodes.iter().map(|ep| KeyOutcome {
            sequence: s,
            key: seq.key_name(ep.key).to_string(),
            steps: ep.halt_step(),
            length: ep.sequence_length,
            predicted: ep.prediction,
            truth: ep.truth,
            halt_arrival: ep.halt_arrival(),
        }));
    }
    Ok(out)
}

/// Non-learned halting on a model whose mask keeps key correlation only.
pub fn halting_baseline(mode: HaltMode, model: &KvecModel, sequences: &[TangledSequence]) -> Result<Vec<KeyOutcome>> {
    match mode {
        HaltMode::Fixed(0) => return Err(KvecError::Config("fixed halting step must be at least 1".into())),
        HaltMode::Confidence(mu) if !(0.0..=1.0).contains(&mu) => {
            return Err(KvecError::Config(format!("confidence threshold {mu} outside [0, 1]")))
        }
        HaltMode::Policy => return Err(KvecError::Config("baselines halt by step or by confidence".into())),
        _ => {}
    }
    evaluate(&model.with_correlations(true, false), sequences, mode)
}

/// One trained or evaluated point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub parameter: String,
    pub value: f64,
    pub seed: u64,
    pub earliness: f64,
    pub accuracy: f64,
    pub hm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub value: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<CurvePoint>,
    pub failures: Vec<SweepFailure>,
}

impl SweepReport {
    /// Mean (earliness, accuracy) over the seeds of one grid value.
    pub fn mean_at(&self, value: f64) -> Option<(f64, f64)> {
        let pts: Vec<&CurvePoint> = self.points.iter().filter(|p| p.value == value).collect();
        if pts.is_empty() {
            return None;
        }
        let n = pts.len() as f64;
        Some((
            pts.iter().map(|p| p.earliness).sum::<f64>() / n,
            pts.iter().map(|p| p.accuracy).sum::<f64>() / n,
        ))
    }
}

/// Calls `run` for every (value, seed) pair. A failing point is recorded and
/// the sweep moves on.
pub fn sweep(
    parameter: &str,
    grid: &[f64],
    seeds: &[u64],
    mut run: impl FnMut(f64, u64) -> Result<EvalResult>,
) -> Result<SweepReport> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(KvecError::Config("sweep needs a non-empty grid and at least one seed".into()));
    }
    let mut report = SweepReport::default();
    for &value in grid {
        for &seed in seeds {
            match run(value, seed) {
                Ok(r) => report.points.push(CurvePoint {
                    parameter: parameter.to_string(),
                    value,
                    seed,
                    earliness: r.earliness,
                    accuracy: r.accuracy,
                    hm: r.hm,
                }),
                Err(e) => report.failures.push(SweepFailure {
                    value,
                    seed,
                    error: e.to_string(),
                }),
            }
        }
    }
    Ok(report)
}

/// Curve rows sorted by earliness.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut rows: Vec<&CurvePoint> = points.iter().collect();
    rows.sort_by(|a, b| a.earliness.total_cmp(&b.earliness));
    let mut out = String::from("parameter,value,seed,earliness,accuracy,hm\n");
    for p in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", p.parameter, p.value, p.seed, p.earliness, p.accuracy, p.hm);
    }
    out
}

pub fn metrics_csv(rows: &[(String, EvalResult)]) -> String {
    let mut out = String::from("config,count,earliness,accuracy,precision,recall,f1,hm\n");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},{},{}",
            r.count, r.earliness, r.accuracy, r.precision, r.recall, r.f1, r.hm
        );
    }
    out
}

/// Mean internal and external attention of the rows in one earliness bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBin {
    pub lo: f64,
    pub hi: f64,
    pub rows: usize,
    pub internal: f64,
    pub external: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSplit {
    pub bins: Vec<AttentionBin>,
    /// Largest `|internal + external - 1|` over every row.
    pub max_row_error: f64,
    /// Largest external score of any row.
    pub max_external: f64,
}

fn bin_of(fraction: f64, bins: usize) -> usize {
    // (0, 1] split into right-closed bins
    ((fraction * bins as f64).ceil() as usize).clamp(1, bins) - 1
}

fn bin_edges(bins: usize) -> Vec<(f64, f64)> {
    (0..bins).map(|b| (b as f64 / bins as f64, (b + 1) as f64 / bins as f64)).collect()
}

/// Splits every attention row of every step a key observed (under the
/// threshold policy) into weight on the key's own items and weight on other
/// keys' items, averaged per bin of `step / |S_k|`.
pub fn attention_split(model: &KvecModel, sequences: &[TangledSequence], bins: usize) -> Result<AttentionSplit> {
    if bins == 0 {
        return Err(KvecError::Config("at least one bin is required".into()));
    }
    let mut sums = vec![(0usize, 0.0, 0.0); bins];
    let (mut max_row_error, mut max_external) = (0.0f64, 0.0f64);
    for seq in sequences {
        let rollout = run_episodes(model, seq, HaltRule::Policy(DecisionMode::Threshold), None)?;
        for ep in &rollout.episodes {
            for (i, &pos) in ep.positions.iter().enumerate() {
                let bin = bin_of((i + 1) as f64 / ep.sequence_length as f64, bins);
                let visible = rollout.pass.visible(pos);
                for layer in 0..model.config.encoder.blocks {
                    let weights = rollout.pass.attention_weights(layer, pos).expect("observed rows are computed");
                    let (mut internal, mut external) = (0.0, 0.0);
                    for (&j, &w) in visible.iter().zip(weights) {
                        if seq.items()[j].key == ep.key {
                            internal += w;
                        } else {
                            external += w;
                        }
                    }
                    max_row_error = max_row_error.max((internal + external - 1.0).abs());
                    max_external = max_external.max(external);
                    let s = &mut sums[bin];
                    s.0 += 1;
                    s.1 += internal;
                    s.2 += external;
                }
            }
        }
    }
    let bins = bin_edges(bins)
        .into_iter()
        .zip(sums)
        .map(|((lo, hi), (rows, internal, external))| {
            let n = rows.max(1) as f64;
            AttentionBin {
                lo,
                hi,
                rows,
                internal: internal / n,
                external: external / n,
            }
        })
        .collect();
    Ok(AttentionSplit {
        bins,
        max_row_error,
        max_external,
    })
}

pub fn attention_csv(split: &AttentionSplit) -> String {
    let mut out = String::from("lo,hi,rows,internal,external\n");
    for b in &split.bins {
        let _ = writeln!(out, "{},{},{},{},{}", b.lo, b.hi, b.rows, b.internal, b.external);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaltingHistogram {
    /// `(lo, hi]` of each bin over the observed fraction `n_k / |S_k|`.
    pub edges: Vec<(f64, f64)>,
    /// Share of keys per bin; sums to 1.
    pub mass: Vec<f64>,
    pub median: f64,
}

/// Normalized histogram of halting fractions plus their median.
pub fn halting_histogram(outcomes: &[KeyOutcome], bins: usize) -> Result<HaltingHistogram> {
    if bins == 0 || outcomes.is_empty() {
        return Err(KvecError::Config("histogram needs bins and outcomes".into()));
    }
    let mut counts = vec![0usize; bins];
    let mut fractions: Vec<f64> = outcomes.iter().map(KeyOutcome::earliness).collect();
    for &f in &fractions {
        counts[bin_of(f, bins)] += 1;
    }
    let mass = counts.iter().map(|&c| c as f64 / outcomes.len() as f64).collect();
    fractions.sort_by(f64::total_cmp);
    let n = fractions.len();
    let median = if n % 2 == 1 {
        fractions[n / 2]
    } else {
        (fractions[n / 2 - 1] + fractions[n / 2]) / 2.0
    };
    Ok(HaltingHistogram {
        edges: bin_edges(bins),
        mass,
        median,
    })
}

pub fn histogram_csv(hist: &HaltingHistogram) -> String {
    let mut out = String::from("lo,hi,mass\n");
    for ((lo, hi), m) in hist.edges.iter().zip(&hist.mass) {
        let _ = writeln!(out, "{lo},{hi},{m}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(steps: usize, length: usize, predicted: ClassId, truth: ClassId) -> KeyOutcome {
        KeyOutcome {
            sequence: 0,
            key: format!("k{steps}-{length}"),
            steps,
            length,
            predicted,
            truth,
            halt_arrival: steps,
        }
    }

    #[test]
    fn single_sequence_earliness() {
        let r = metrics(&[outcome(5, 10, 0, 0)], 2).unwrap();
        assert_eq!(r.earliness, 0.5);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn harmonic_mean_examples() {
        assert_eq!(harmonic_mean(1.0, 0.0), 1.0);
        assert!((harmonic_mean(0.8, 0.2) - 0.8).abs() < 1e-12);
        assert_eq!(harmonic_mean(0.0, 1.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.3), 0.0);
        assert_eq!(harmonic_mean(0.7, 1.0), 0.0);
    }

    #[test]
    fn empty_outcomes_are_rejected() {
        assert!(metrics(&[], 2).is_err());
        assert!(metrics(&[outcome(11, 10, 0, 0)], 2).is_err());
    }

    #[test]
    fn histogram_first_bin_and_point_mass() {
        let all_first: Vec<_> = (0..4).map(|_| outcome(1, 100, 0, 0)).collect();
        let h = halting_histogram(&all_first, 10).unwrap();
        assert_eq!(h.mass[0], 1.0);
        assert_eq!(h.median, 0.01);
        let fixed: Vec<_> = (0..4).map(|_| outcome(30, 100, 0, 0)).collect();
        let h = halting_histogram(&fixed, 10).unwrap();
        assert_eq!(h.mass[2], 1.0);
        assert_eq!(h.median, 0.3);
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let report = sweep("beta", &[0.1, 1.0], &[1, 2], |v, seed| {
            if seed == 2 && v == 1.0 {
                Err(KvecError::Config("boom".into()))
            } else {
                metrics(&[outcome(1, 4, 0, 0)], 2)
            }
        })
        .unwrap();
        assert_eq!(report.points.len(), 3);
        assert_eq!(report.failures.len(), 1);
        assert!(sweep("beta", &[], &[1], |_, _| metrics(&[outcome(1, 4, 0, 0)], 2)).is_err());
        let single = sweep("beta", &[5.0], &[1], |_, _| metrics(&[outcome(1, 4, 0, 0)], 2)).unwrap();
        assert_eq!(curve_csv(&single.points).lines().count(), 2);
    }
}
