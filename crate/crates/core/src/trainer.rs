//! Mini-batch training with Adam over a three-stage learning-rate schedule,
//! with optional whole-modality clinical dropout ("bait-and-switch").

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clinical::{mask_clinical, sample_drop_flags, ClinicalVector};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fusion::{forward, FusionModel, FusionVariant};
use crate::metrics::{one_vs_rest_report, EvalReport, ScoredSample};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{softmax, Graph, TensorId};

pub const NUM_STAGES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage_learning_rates: [f64; NUM_STAGES],
    pub epochs_per_stage: [usize; NUM_STAGES],
    pub batch_size: usize,
    /// Probability of dropping a sample's whole clinical vector.
    pub mask_probability: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Share of the training set held out for per-epoch validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage_learning_rates: [1e-3, 1e-4, 1e-5],
            epochs_per_stage: [20, 10, 10],
            batch_size: 32,
            mask_probability: 0.0,
            seed: 0,
            adam: AdamConfig::default(),
            validation_fraction: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = &self.stage_learning_rates;
        if lrs.iter().any(|&lr| !(lr > 0.0) || !lr.is_finite()) {
            return Err(Error::Config(format!("learning rates must be positive, got {lrs:?}")));
        }
        if lrs.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config(format!("learning rates must not increase across stages, got {lrs:?}")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_probability) {
            return Err(Error::Config(format!(
                "mask_probability must lie in [0, 1], got {}",
                self.mask_probability
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        self.adam.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_per_stage.iter().sum()
    }

    pub fn stage_of_epoch(&self, epoch: usize) -> Option<usize> {
        let mut end = 0;
        for (stage, &n) in self.epochs_per_stage.iter().enumerate() {
            end += n;
            if epoch < end {
                return Some(stage);
            }
        }
        None
    }
}

/// Independent random streams derived from one seed, so that e.g. enabling
/// masking never perturbs the shuffle order.
#[derive(Clone, Copy, Debug)]
enum Stream {
    Init = 1,
    Split = 2,
    Shuffle = 3,
    TrainMask = 4,
    ValidationMask = 5,
}

fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// `None` when the validation split lacks a class.
    pub val_macro_auc_roc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One CSV line per epoch. Missing validation values are empty cells.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("epoch,stage,learning_rate,train_loss,val_loss,val_macro_auc_roc\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                r.stage,
                r.learning_rate,
                r.train_loss,
                opt(r.val_loss),
                opt(r.val_macro_auc_roc)
            );
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchEvent {
    pub epoch: usize,
    pub stage: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub loss: f64,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    fn on_batch(&mut self, _event: &BatchEvent) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

impl TrainObserver for () {}

fn check_dataset(samples: &[Sample], variant: &FusionVariant) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    for s in samples {
        if s.label >= variant.num_classes {
            return Err(Error::Config(format!(
                "sample {}: label {} outside {} classes",
                s.id, s.label, variant.num_classes
            )));
        }
        if s.image.len() != variant.image_dim {
            return Err(Error::dim("image embedding", &[s.image.len()], &[variant.image_dim]));
        }
    }
    Ok(())
}

/// Seeded split into (train, validation) index lists.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Split));
    let n_val = ((n as f64) * validation_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

struct BatchOutcome {
    loss: f64,
    grads: Vec<Vec<f64>>,
}

fn batch_gradients(model: &FusionModel, samples: &[&Sample], clinical: &[ClinicalVector]) -> Result<BatchOutcome> {
    let mut graph = Graph::new();
    let nodes = model.attach(&mut graph);
    let mut total: Option<TensorId> = None;
    for (s, c) in samples.iter().zip(clinical) {
        let e = graph.vector(s.image.clone());
        let c = graph.vector(c.values().to_vec());
        let trace = forward(&mut graph, &nodes, e, c)?;
        let loss = graph.softmax_cross_entropy(trace.logits, s.label)?;
        total = Some(match total {
            Some(t) => graph.add(t, loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    let mean = graph.scale(total, 1.0 / samples.len() as f64);
    let loss = graph.scalar(mean);
    graph.backward(mean)?;
    Ok(BatchOutcome {
        loss,
        grads: nodes.gradients(&graph),
    })
}

/// Probabilities and mean cross-entropy over `samples`, with the given clinical inputs.
pub fn score_samples(
    model: &FusionModel,
    samples: &[&Sample],
    clinical: &[ClinicalVector],
) -> Result<(Vec<ScoredSample>, f64)> {
    let mut graph = Graph::new();
    let nodes = model.attach(&mut graph);
    let mut scored = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for (s, c) in samples.iter().zip(clinical) {
        let e = graph.vector(s.image.clone());
        let c = graph.vector(c.values().to_vec());
        let trace = forward(&mut graph, &nodes, e, c)?;
        let logits = graph.value(trace.logits);
        let probs = softmax(logits);
        let ce = graph.softmax_cross_entropy(trace.logits, s.label)?;
        loss += graph.scalar(ce);
        scored.push(ScoredSample {
            label: s.label,
            probs,
        });
    }
    let mean = if samples.is_empty() { 0.0 } else { loss / samples.len() as f64 };
    Ok((scored, mean))
}

fn masked(samples: &[&Sample], flags: &[bool]) -> Vec<ClinicalVector> {
    samples
        .iter()
        .zip(flags)
        .map(|(s, &drop)| mask_clinical(&s.clinical, drop))
        .collect()
}

pub fn train(samples: &[Sample], variant: &FusionVariant, config: &TrainConfig) -> Result<(FusionModel, TrainHistory)> {
    train_observed(samples, variant, config, &mut ())
}

pub fn train_observed(
    samples: &[Sample],
    variant: &FusionVariant,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(FusionModel, TrainHistory)> {
    run_training(samples, variant, config, true, observer)
}

fn run_training(
    samples: &[Sample],
    variant: &FusionVariant,
    config: &TrainConfig,
    masking: bool,
    observer: &mut dyn TrainObserver,
) -> Result<(FusionModel, TrainHistory)> {
    config.validate()?;
    variant.validate()?;
    check_dataset(samples, variant)?;

    let (mut train_idx, val_idx) = split_indices(samples.len(), config.validation_fraction, config.seed);
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let p = config.mask_probability;
    let val_flags = if masking {
        sample_drop_flags(val.len(), p, &mut stream_rng(config.seed, Stream::ValidationMask))?
    } else {
        vec![false; val.len()]
    };
    let val_clinical = masked(&val, &val_flags);

    let mut model = FusionModel::init(*variant, &mut stream_rng(config.seed, Stream::Init))?;
    let mut adam = AdamState::new(model.parameters().iter().map(|p| p.values.len()));
    let mut shuffle_rng = stream_rng(config.seed, Stream::Shuffle);
    let mut mask_rng = stream_rng(config.seed, Stream::TrainMask);
    let mut history = TrainHistory::default();

    for epoch in 0..config.total_epochs() {
        let stage = config.stage_of_epoch(epoch).expect("epoch within schedule");
        let lr = config.stage_learning_rates[stage];
        train_idx.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in train_idx.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let flags = if masking {
                sample_drop_flags(batch.len(), p, &mut mask_rng)?
            } else {
                vec![false; batch.len()]
            };
            let clinical = masked(&batch, &flags);
            let outcome = batch_gradients(&model, &batch, &clinical)?;
            if !outcome.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {} at epoch {epoch}, batch {b}",
                    outcome.loss
                )));
            }
            let mut params = model.parameters_mut();
            adam_step(&mut params, &outcome.grads, &mut adam, lr, &config.adam).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{m} at epoch {epoch}, batch {b}")),
                other => other,
            })?;
            loss_sum += outcome.loss * batch.len() as f64;
            observer.on_batch(&BatchEvent {
                epoch,
                stage,
                batch: b,
                learning_rate: lr,
                loss: outcome.loss,
            });
        }

        let (val_loss, val_auc) = if val.is_empty() {
            (None, None)
        } else {
            let (scored, loss) = score_samples(&model, &val, &val_clinical)?;
            let names: Vec<String> = (0..variant.num_classes).map(|k| k.to_string()).collect();
            (Some(loss), one_vs_rest_report(&scored, &names).ok().map(|r| r.macro_auc_roc))
        };
        let record = EpochRecord {
            epoch,
            stage,
            learning_rate: lr,
            train_loss: loss_sum / train_idx.len() as f64,
            val_loss,
            val_macro_auc_roc: val_auc,
        };
        observer.on_epoch(&record);
        history.epochs.push(record);
    }
    Ok((model, history))
}

/// Evaluates with the clinical modality dropped per sample with probability
/// `p`, the drop flags being drawn once from `seed` in sample order.
pub fn evaluate_masked(
    model: &FusionModel,
    samples: &[Sample],
    class_names: &[String],
    p: f64,
    seed: u64,
) -> Result<EvalReport> {
    check_dataset(samples, model.variant())?;
    if class_names.len() != model.variant().num_classes {
        return Err(Error::Config(format!(
            "{} class names for a {}-class model",
            class_names.len(),
            model.variant().num_classes
        )));
    }
    let flags = sample_drop_flags(samples.len(), p, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let clinical = masked(&refs, &flags);
    let (scored, _) = score_samples(model, &refs, &clinical)?;
    one_vs_rest_report(&scored, class_names)
}
