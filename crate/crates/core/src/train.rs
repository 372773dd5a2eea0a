//! Mini-batch Adam training, stratified k-fold cross-validation and
//! train-on-one-cohort / test-on-another evaluation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::features::FunctionRepresentation;
use crate::metrics::{compute_metrics, MetricsReport, DEFAULT_THRESHOLD, METRIC_NAMES};
use crate::model::{ClassifierModel, ModelConfig};
use crate::optim::{AdamConfig, AdamState, DEFAULT_LEARNING_RATE};
use crate::rng::{seeded, stream_seed};

const SHUFFLE_STREAM: u64 = 1;
const DROP_PATH_STREAM: u64 = 2;
const FOLD_STREAM_BASE: u64 = 0x100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub epochs: usize,
    /// 0 is accepted and leaves parameters untouched.
    pub learning_rate: f64,
    /// Batches never exceed the training set, so tiny cohorts train full-batch.
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 8,
            folds: 5,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be at least 1"));
        }
        if self.folds < 2 {
            return Err(Error::validation("folds must be at least 2"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be positive"));
        }
        Ok(())
    }
}

/// Representations paired with labels; every representation has the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub reps: Vec<FunctionRepresentation>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(reps: Vec<FunctionRepresentation>, labels: Vec<usize>) -> Result<Self> {
        if reps.len() != labels.len() {
            return Err(Error::validation(format!(
                "{} representations but {} labels",
                reps.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::validation(format!("label {l} is not binary")));
        }
        if let Some(first) = reps.first() {
            let shape = first.fc.shape();
            if let Some(r) = reps.iter().find(|r| r.fc.shape() != shape) {
                return Err(Error::validation(format!(
                    "representations disagree in shape: {:?} vs {:?}",
                    shape,
                    r.fc.shape()
                )));
            }
        }
        Ok(Self { reps, labels })
    }

    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    pub fn n_anchors(&self) -> Option<usize> {
        self.reps.first().map(FunctionRepresentation::n_anchors)
    }

    fn subset(&self, indices: &[usize]) -> (Vec<&FunctionRepresentation>, Vec<usize>) {
        (
            indices.iter().map(|&i| &self.reps[i]).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Splits indices into `k` folds, stratified by label.
///
/// Each class (in ascending label order) is shuffled and dealt round-robin,
/// the dealing position carrying over from one class to the next so fold
/// sizes differ by at most one.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::validation("need at least 2 folds"));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut rng = seeded(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::Stratification {
                folds: k,
                class,
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        for i in members {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Trains in place; returns the mean training loss of every epoch.
pub fn train_one(
    model: &mut ClassifierModel,
    reps: &[&FunctionRepresentation],
    labels: &[usize],
    spec: &TrainSpec,
) -> Result<Vec<f64>> {
    if reps.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    if reps.len() != labels.len() {
        return Err(Error::validation("representation and label counts differ"));
    }
    if spec.epochs == 0 || spec.batch_size == 0 {
        return Err(Error::validation("epochs and batch size must be positive"));
    }
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            learning_rate: spec.learning_rate,
            ..AdamConfig::default()
        },
    )?;
    let mut shuffle_rng = seeded(stream_seed(spec.seed, SHUFFLE_STREAM));
    let mut drop_rng = seeded(stream_seed(spec.seed, DROP_PATH_STREAM));
    let mut order: Vec<usize> = (0..reps.len()).collect();
    let mut history = Vec::with_capacity(spec.epochs);
    for _ in 0..spec.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(spec.batch_size) {
            let batch_reps: Vec<_> = batch.iter().map(|&i| reps[i]).collect();
            let batch_labels: Vec<_> = batch.iter().map(|&i| labels[i]).collect();
            let tape = Tape::new();
            let params = model.params.bind(&tape);
            let logits = model.forward_reps(&tape, &params, &batch_reps, true, &mut drop_rng)?;
            let loss = model.loss(&tape, logits, &batch_labels)?;
            total += tape.value(loss).data()[0] * batch.len() as f64;
            tape.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate_grads(&tape, &params);
            adam.step(&mut model.params)?;
        }
        history.push(total / reps.len() as f64);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    pub metrics: MetricsReport,
}

pub fn evaluate(
    model: &ClassifierModel,
    reps: &[&FunctionRepresentation],
    labels: &[usize],
) -> Result<Evaluation> {
    let scores = model.predict_proba(reps)?;
    let metrics = compute_metrics(&scores, labels, DEFAULT_THRESHOLD)?;
    Ok(Evaluation {
        scores,
        labels: labels.to_vec(),
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub model_seed: u64,
    pub train_seed: u64,
    pub train_loss_history: Vec<f64>,
    pub evaluation: Evaluation,
    /// Checkpoint stem, when checkpoints were requested.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample (n − 1) standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if let Some(&first) = values.first() {
            if values.iter().all(|&v| v == first) {
                return Self { mean: first, std: 0.0 };
            }
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Mean ± std per metric, in [`METRIC_NAMES`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub metrics: Vec<(String, MeanStd)>,
}

impl CvSummary {
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a MetricsReport>) -> Self {
        let reports: Vec<_> = reports.into_iter().collect();
        Self {
            metrics: METRIC_NAMES
                .iter()
                .map(|&m| {
                    let values: Vec<f64> =
                        reports.iter().map(|r| r.metric(m).expect("known metric")).collect();
                    (m.to_string(), MeanStd::of(&values))
                })
                .collect(),
        }
    }

    pub fn get(&self, metric: &str) -> Option<MeanStd> {
        self.metrics.iter().find(|(m, _)| m == metric).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub model_config: ModelConfig,
    pub train_spec: TrainSpec,
    pub folds: Vec<FoldResult>,
    pub summary: CvSummary,
}

impl CvReport {
    /// Held-out scores and labels pooled over folds, in fold order.
    pub fn pooled_scores(&self) -> (Vec<f64>, Vec<usize>) {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for f in &self.folds {
            scores.extend(&f.evaluation.scores);
            labels.extend(&f.evaluation.labels);
        }
        (scores, labels)
    }
}

#[derive(Debug, Clone, Default)]
pub struct CvOptions {
    /// Writes `fold_<i>.json/.bin` checkpoints here.
    pub checkpoint_dir: Option<PathBuf>,
    /// Runs folds on the rayon pool.
    pub parallel: bool,
}

pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    stream_seed(seed, FOLD_STREAM_BASE + fold as u64)
}

fn run_fold(
    data: &Dataset,
    folds: &[Vec<usize>],
    k: usize,
    model_config: &ModelConfig,
    spec: &TrainSpec,
    checkpoint_dir: Option<&Path>,
) -> Result<FoldResult> {
    let test = folds[k].clone();
    let train: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    let model_seed = fold_seed(model_config.seed, k);
    let train_seed = fold_seed(spec.seed, k);
    let mut model = ClassifierModel::new(ModelConfig {
        seed: model_seed,
        ..model_config.clone()
    })?;
    let (train_reps, train_labels) = data.subset(&train);
    let history = train_one(
        &mut model,
        &train_reps,
        &train_labels,
        &TrainSpec {
            seed: train_seed,
            ..spec.clone()
        },
    )?;
    let (test_reps, test_labels) = data.subset(&test);
    let evaluation = evaluate(&model, &test_reps, &test_labels)?;
    let checkpoint = match checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let stem = dir.join(format!("fold_{k}"));
            model.params.save_checkpoint(&stem)?;
            Some(stem)
        }
        None => None,
    };
    Ok(FoldResult {
        fold_index: k,
        train_indices: train,
        test_indices: test,
        model_seed,
        train_seed,
        train_loss_history: history,
        evaluation,
        checkpoint,
    })
}

/// Stratified k-fold CV with a fresh model per fold.
///
/// Fold `i` uses model seed `fold_seed(config.seed, i)` and training seed
/// `fold_seed(spec.seed, i)`; folds are split with `spec.seed`.
pub fn cross_validate(
    data: &Dataset,
    model_config: &ModelConfig,
    spec: &TrainSpec,
    options: &CvOptions,
) -> Result<CvReport> {
    spec.validate()?;
    let folds = stratified_folds(&data.labels, spec.folds, spec.seed)?;
    let config = ModelConfig {
        n_anchors: data.n_anchors().unwrap_or(model_config.n_anchors),
        ..model_config.clone()
    };
    let dir = options.checkpoint_dir.as_deref();
    let results: Vec<FoldResult> = if options.parallel {
        (0..spec.folds)
            .into_par_iter()
            .map(|k| run_fold(data, &folds, k, &config, spec, dir))
            .collect::<Result<_>>()?
    } else {
        (0..spec.folds)
            .map(|k| run_fold(data, &folds, k, &config, spec, dir))
            .collect::<Result<_>>()?
    };
    let summary = CvSummary::from_reports(results.iter().map(|f| &f.evaluation.metrics));
    Ok(CvReport {
        model_config: config,
        train_spec: spec.clone(),
        folds: results,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCohortReport {
    pub model_config: ModelConfig,
    pub train_spec: TrainSpec,
    pub train_loss_history: Vec<f64>,
    pub evaluation: Evaluation,
}

/// Trains on all of `train` and evaluates on all of `test`.
pub fn cross_cohort(
    train: &Dataset,
    test: &Dataset,
    model_config: &ModelConfig,
    spec: &TrainSpec,
) -> Result<(ClassifierModel, CrossCohortReport)> {
    if train.n_anchors() != test.n_anchors() {
        return Err(Error::validation(
            "training and test cohorts use different anchor counts",
        ));
    }
    let config = ModelConfig {
        n_anchors: train.n_anchors().unwrap_or(model_config.n_anchors),
        ..model_config.clone()
    };
    let mut model = ClassifierModel::new(config.clone())?;
    let all: Vec<usize> = (0..train.len()).collect();
    let (reps, labels) = train.subset(&all);
    let history = train_one(&mut model, &reps, &labels, spec)?;
    let all: Vec<usize> = (0..test.len()).collect();
    let (reps, labels) = test.subset(&all);
    let evaluation = evaluate(&model, &reps, &labels)?;
    Ok((
        model,
        CrossCohortReport {
            model_config: config,
            train_spec: spec.clone(),
            train_loss_history: history,
            evaluation,
        },
    ))
}
