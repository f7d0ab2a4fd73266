//! Minimax training loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigErrors, SamplerKind, TrainConfig};
use super::metrics::{evaluate, EvalReport};
use super::schedule::lambda_schedule;
use crate::autodiff::Tape;
use crate::data::{ClassIndex, Dataset, Domain, HiddenLabels};
use crate::divergence::{empirical_divergence, HypothesisClass, LabeledBatchPair, DEFAULT_CAP};
use crate::nn::{AdaptationModel, ModelError};
use crate::objectives::{total_step_loss, ObjectiveError, PrototypeBank, StepBatch, StepLoss};
use crate::optim::{OptimError, SgdState};
use crate::rng::{substream, Stream};
use crate::sampler::{
    build_aligned_minibatch, random_minibatch, refresh_pseudo_labels, source_balanced_batch,
    AlignmentDistribution, Minibatch, PseudoLabelCache, SamplerError,
};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigErrors),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("step {step}: {error}")]
    Sampler { step: usize, error: SamplerError },
    #[error("step {step}: {error}")]
    Objective { step: usize, error: ObjectiveError },
    #[error("step {step}: aligned batch invariant violated: {msg}")]
    Invariant { step: usize, msg: String },
    #[error("step {step}: non-finite loss (source {source_loss}, transfer {transfer_loss})")]
    NonFinite {
        step: usize,
        source_loss: f64,
        transfer_loss: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("metrics sink: {0}")]
    Sink(#[from] std::io::Error),
}

/// Datasets seen by training. Hidden target labels are read only for
/// metrics and by the oracle sampler.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub source: &'a Dataset,
    pub target: &'a Dataset,
    pub target_labels: Option<&'a HiddenLabels>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Number of completed optimisation steps.
    pub step: usize,
    pub lambda: f64,
    pub source_accuracy: f64,
    pub target_accuracy: Option<f64>,
    pub target_per_class_accuracy: Option<f64>,
    pub target_macro_f1: Option<f64>,
    pub target_weighted_f1: Option<f64>,
    pub target_macro_precision: Option<f64>,
    pub target_macro_recall: Option<f64>,
    pub target_weighted_precision: Option<f64>,
    pub target_weighted_recall: Option<f64>,
    pub target_absent_classes: Option<usize>,
    pub pseudo_label_accuracy: Option<f64>,
    /// Mean distinct source labels per batch since the previous record.
    pub batch_class_diversity: f64,
    pub degraded_batches: usize,
    pub source_loss: f64,
    pub transfer_loss: f64,
    pub discrepancy: Option<f64>,
    pub prototype_loss: Option<f64>,
    pub divergence: Option<i64>,
    pub xi_aligned: Option<i64>,
    pub xi_misaligned: Option<i64>,
}

impl MetricsRecord {
    /// Fills the accuracy fields from evaluation reports.
    pub fn with_eval(mut self, source: &EvalReport, target: Option<&EvalReport>) -> Self {
        self.source_accuracy = source.accuracy;
        self.target_accuracy = target.map(|r| r.accuracy);
        self.target_per_class_accuracy = target.map(|r| r.per_class_accuracy);
        self.target_macro_f1 = target.map(|r| r.macro_f1);
        self.target_weighted_f1 = target.map(|r| r.weighted_f1);
        self.target_macro_precision = target.map(|r| r.macro_precision);
        self.target_macro_recall = target.map(|r| r.macro_recall);
        self.target_weighted_precision = target.map(|r| r.weighted_precision);
        self.target_weighted_recall = target.map(|r| r.weighted_recall);
        self.target_absent_classes = target.map(|r| r.absent_classes);
        self
    }

    fn empty(step: usize) -> Self {
        Self {
            step,
            lambda: lambda_schedule(step),
            source_accuracy: 0.0,
            target_accuracy: None,
            target_per_class_accuracy: None,
            target_macro_f1: None,
            target_weighted_f1: None,
            target_macro_precision: None,
            target_macro_recall: None,
            target_weighted_precision: None,
            target_weighted_recall: None,
            target_absent_classes: None,
            pseudo_label_accuracy: None,
            batch_class_diversity: 0.0,
            degraded_batches: 0,
            source_loss: 0.0,
            transfer_loss: 0.0,
            discrepancy: None,
            prototype_loss: None,
            divergence: None,
            xi_aligned: None,
            xi_misaligned: None,
        }
    }
}

/// Source and (when labels are available) target evaluation of `model`,
/// as recorded in the metrics log.
pub fn evaluation_record<S: Scalar>(
    model: &AdaptationModel<S>,
    data: &TrainData<'_>,
    step: usize,
) -> Result<MetricsRecord, ModelError> {
    let src_labels = data.source.dense_labels().expect("source is labeled");
    let src = evaluate(model, data.source.features(), &src_labels)?.expect("nonempty source");
    let tgt = match data.target_labels {
        Some(l) => evaluate(model, data.target.features(), l.as_slice())?,
        None => None,
    };
    Ok(MetricsRecord::empty(step).with_eval(&src, tgt.as_ref()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub model: AdaptationModel<S>,
    pub log: Vec<MetricsRecord>,
}

fn check_data(config: &TrainConfig, data: &TrainData<'_>) -> Result<(), TrainError> {
    let (s, t) = (data.source, data.target);
    if s.domain() != Domain::Source || t.domain() != Domain::Target {
        return Err(TrainError::Data("expected a source and a target dataset".into()));
    }
    if s.num_classes() != t.num_classes() || s.dim() != t.dim() {
        return Err(TrainError::Data(format!(
            "source has {} classes x {} features, target {} x {}",
            s.num_classes(),
            s.dim(),
            t.num_classes(),
            t.dim()
        )));
    }
    if t.labels().iter().any(Option::is_some) {
        return Err(TrainError::Data("target dataset must be unlabeled".into()));
    }
    if let Some(l) = data.target_labels {
        if l.len() != t.len() || l.as_slice().iter().any(|&y| y >= t.num_classes()) {
            return Err(TrainError::Data("hidden target labels do not match the target set".into()));
        }
    }
    if config.sampler == SamplerKind::AlignedOracle && data.target_labels.is_none() {
        return Err(TrainError::Data("aligned_oracle sampler needs target labels".into()));
    }
    config.validate_for(s.num_classes())?;
    Ok(())
}

/// Trains a fresh model, handing each metrics record to `sink` as it is made.
/// Records are taken every `eval_period` steps and after the last step.
pub fn train_with<S: Scalar>(
    config: &TrainConfig,
    data: &TrainData<'_>,
    mut sink: impl FnMut(&MetricsRecord) -> std::io::Result<()>,
) -> Result<TrainOutcome<S>, TrainError> {
    check_data(config, data)?;
    let (source, target) = (data.source, data.target);
    let c = source.num_classes();
    let arch = config.model.architecture(source.dim(), c);
    let mut model = AdaptationModel::<S>::new(arch, &mut substream(config.seed, Stream::Init))?;
    let mut rng = substream(config.seed, Stream::Sampler);
    let mut opt = SgdState::new();
    let mut bank = PrototypeBank::new(c);
    let p = match &config.alignment {
        Some(w) => AlignmentDistribution::new(w.clone()).map_err(|e| TrainError::Data(e.to_string()))?,
        None => AlignmentDistribution::uniform(c),
    };
    let n = config.classes_per_batch.unwrap_or(c);
    let k = config.per_class;
    let source_index = ClassIndex::of_dataset(source);
    let mut cache = match (config.sampler, data.target_labels) {
        (SamplerKind::AlignedOracle, Some(l)) => PseudoLabelCache::from_labels(l.as_slice().to_vec(), c),
        _ => PseudoLabelCache::new(c, config.refresh_period),
    };

    let mut log = Vec::new();
    let mut pseudo_acc = None;
    let mut diversity_sum = 0usize;
    let mut degraded = 0usize;
    let mut batches = 0usize;

    for step in 0..config.steps {
        if config.sampler == SamplerKind::Aligned && cache.needs_refresh(step) {
            refresh_pseudo_labels(&model, target, &mut cache, step)?;
            pseudo_acc = data.target_labels.map(|l| cache.accuracy(l));
        }
        let serr = |error| TrainError::Sampler { step, error };
        let sampler = match config.sampler {
            SamplerKind::Aligned | SamplerKind::AlignedOracle if step < config.warmup_steps => {
                SamplerKind::SourceBalanced
            }
            s => s,
        };
        let batch: Minibatch = match sampler {
            SamplerKind::Random => random_minibatch(source, target.len(), n * k, &mut rng).map_err(serr)?,
            SamplerKind::SourceBalanced => {
                source_balanced_batch(&source_index, target.len(), &p, n, k, &mut rng).map_err(serr)?
            }
            SamplerKind::Aligned | SamplerKind::AlignedOracle => {
                let b = build_aligned_minibatch(
                    &source_index,
                    cache.index(),
                    &p,
                    n,
                    k,
                    config.min_live_classes,
                    &mut rng,
                )
                .map_err(serr)?;
                b.check_alignment(k).map_err(|msg| TrainError::Invariant { step, msg })?;
                b
            }
        };
        diversity_sum += batch.class_diversity();
        degraded += usize::from(batch.degraded);
        batches += 1;

        let step_batch = StepBatch::<S>::new(
            &source.gather(&batch.source),
            batch.source_labels.clone(),
            &target.gather(&batch.target),
            source.dim(),
            batch.mask.clone(),
        )
        .map_err(ModelError::from)?;
        let lambda = lambda_schedule(step);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let loss: StepLoss = total_step_loss(
            &mut tape,
            &bound,
            &config.objective,
            &step_batch,
            S::of(lambda),
            step as f64 / config.steps as f64,
            Some(&mut bank),
        )
        .map_err(|error| TrainError::Objective { step, error })?;
        if !(loss.source_loss.is_finite() && loss.transfer_loss.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                source_loss: loss.source_loss,
                transfer_loss: loss.transfer_loss,
            });
        }
        tape.backward(loss.total).map_err(ModelError::from)?;
        model.zero_grad();
        model.accumulate_grads(&tape, &bound);
        opt.step_model(&mut model, &config.sgd)?;

        let done = step + 1;
        if done % config.eval_period == 0 || done == config.steps {
            let mut rec = evaluation_record(&model, data, done)?;
            rec.pseudo_label_accuracy = pseudo_acc;
            rec.batch_class_diversity = diversity_sum as f64 / batches as f64;
            rec.degraded_batches = degraded;
            rec.source_loss = loss.source_loss;
            rec.transfer_loss = loss.transfer_loss;
            rec.discrepancy = loss.discrepancy;
            rec.prototype_loss = loss.prototype_loss;
            if config.probe_divergence {
                if let Some(l) = data.target_labels {
                    probe(&mut rec, source, &batch, target, l)?;
                }
            }
            if !model.params().iter().all(|p| p.tensor.is_finite()) {
                return Err(TrainError::NonFinite {
                    step,
                    source_loss: loss.source_loss,
                    transfer_loss: loss.transfer_loss,
                });
            }
            sink(&rec)?;
            log.push(rec);
            diversity_sum = 0;
            degraded = 0;
            batches = 0;
        }
    }
    Ok(TrainOutcome { model, log })
}

pub fn train<S: Scalar>(config: &TrainConfig, data: &TrainData<'_>) -> Result<TrainOutcome<S>, TrainError> {
    train_with(config, data, |_| Ok(()))
}

/// Exact divergence of the batch under membership hypotheses over the
/// labels it contains, when there are few enough of them.
fn probe(
    rec: &mut MetricsRecord,
    source: &Dataset,
    batch: &Minibatch,
    target: &Dataset,
    labels: &HiddenLabels,
) -> Result<(), TrainError> {
    if batch.source.len() != batch.target.len() {
        return Ok(());
    }
    let pair = LabeledBatchPair::from_datasets(source, &batch.source, target, &batch.target, labels.as_slice())
        .map_err(|e| TrainError::Data(e.to_string()))?;
    let mut present = vec![false; source.num_classes()];
    pair.source_labels()
        .iter()
        .chain(pair.target_labels())
        .for_each(|&y| present[y] = true);
    let used: Vec<usize> = (0..present.len()).filter(|&j| present[j]).collect();
    if (1usize << used.len().min(63)) > DEFAULT_CAP {
        return Ok(());
    }
    let report = empirical_divergence(&pair, &HypothesisClass::label_oracle(&used), DEFAULT_CAP)
        .map_err(|e| TrainError::Data(e.to_string()))?;
    rec.divergence = Some(report.divergence);
    rec.xi_aligned = Some(report.xi_aligned);
    rec.xi_misaligned = Some(report.xi_misaligned);
    Ok(())
}
