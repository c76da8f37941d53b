//! Train-and-evaluate trials over a split dataset, with model selection on the
//! validation split.

use serde::{Deserialize, Serialize};

use crate::datasets::SplitDataset;
use crate::error::{KvecError, Result};
use crate::evalkit::{evaluate, metrics, EvalResult, HaltMode, KeyOutcome};
use crate::model::{KvecModel, ModelConfig};
use crate::training::{train, EpochRecord, TrainConfig};

/// How much one unit of earliness costs against one unit of accuracy when
/// choosing between epochs or hyperparameter values.
pub const EARLINESS_WEIGHT: f64 = 0.1;

/// Accuracy first; earliness breaks near ties.
pub fn selection_score(r: &EvalResult) -> f64 {
    r.accuracy - EARLINESS_WEIGHT * r.earliness
}

#[derive(Clone, Debug)]
pub struct Trial {
    pub model: KvecModel,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub validation: EvalResult,
    pub test: EvalResult,
    pub test_outcomes: Vec<KeyOutcome>,
}

/// Summary of a trial without the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub start: PolicyStart,
    pub best_epoch: usize,
    pub validation: EvalResult,
    pub test: EvalResult,
}

impl Trial {
    pub fn summary(&self, model_cfg: &ModelConfig, cfg: &TrainConfig) -> TrialSummary {
        TrialSummary {
            seed: cfg.seed,
            alpha: cfg.alpha,
            beta: cfg.beta,
            start: PolicyStart {
                bias: model_cfg.policy_bias_init,
                warmup_epochs: cfg.warmup_epochs,
            },
            best_epoch: self.best_epoch,
            validation: self.validation,
            test: self.test,
        }
    }
}

/// Trains a fresh model (initialized from the training seed), keeps the epoch
/// with the best validation selection score, and scores it on the test split.
pub fn run_trial(data: &SplitDataset, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<Trial> {
    let classes = data.train.classes();
    let mut model = KvecModel::new(model_cfg.clone(), data.train.manifest.schema.clone(), classes, train_cfg.seed)?;
    let mut best: Option<(f64, usize, EvalResult, KvecModel)> = None;
    let history = train(&mut model, &data.train.sequences, train_cfg, |record, m| {
        let v = metrics(&evaluate(m, &data.validation.sequences, HaltMode::Policy)?, classes)?;
        let score = selection_score(&v);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, record.epoch, v, m.clone()));
        }
        Ok(())
    })?;
    let (_, best_epoch, validation, model) = best.ok_or_else(|| KvecError::Config("no epochs were run".into()))?;
    let test_outcomes = evaluate(&model, &data.test.sequences, HaltMode::Policy)?;
    let test = metrics(&test_outcomes, classes)?;
    Ok(Trial {
        model,
        history,
        best_epoch,
        validation,
        test,
        test_outcomes,
    })
}

/// Where the halting policy starts: its initial bias and how many epochs the
/// classifier trains alone before the policy is updated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyStart {
    pub bias: f64,
    pub warmup_epochs: usize,
}

impl PolicyStart {
    /// Halts freely from the first epoch.
    pub const EAGER: PolicyStart = PolicyStart {
        bias: 0.0,
        warmup_epochs: 0,
    };
    /// Waits almost surely while the classifier warms up on whole flows.
    pub const PATIENT: PolicyStart = PolicyStart {
        bias: -5.0,
        warmup_epochs: 5,
    };
}

/// Runs one trial per (`start`, `beta`) pair and returns the one with the best
/// validation selection score (earlier entries win exact ties) plus every
/// summary.
pub fn tune(
    data: &SplitDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    betas: &[f64],
    starts: &[PolicyStart],
) -> Result<(Trial, Vec<TrialSummary>)> {
    let mut best: Option<(f64, Trial)> = None;
    let mut summaries = Vec::with_capacity(betas.len() * starts.len());
    for start in starts {
        let model_cfg = ModelConfig {
            policy_bias_init: start.bias,
            ..model_cfg.clone()
        };
        for &beta in betas {
            let cfg = TrainConfig {
                beta,
                warmup_epochs: start.warmup_epochs,
                ..train_cfg.clone()
            };
            let trial = run_trial(data, &model_cfg, &cfg)?;
            summaries.push(trial.summary(&model_cfg, &cfg));
            let score = selection_score(&trial.validation);
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, trial));
            }
        }
    }
    let (_, trial) = best.ok_or_else(|| KvecError::Config("empty tuning grid".into()))?;
    Ok((trial, summaries))
}
