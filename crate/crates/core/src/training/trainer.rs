//! Epoch loop with per-utterance gradient accumulation and validation-based
//! model selection.

use std::ops::ControlFlow;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{clip_global_norm, Adam, AdamConfig, OptimError};
use super::RunMode;
use crate::autodiff::{Graph, Parameters};
use crate::dataset::{DatasetError, EncodeMode, IndexedUtterance, Utterance, Vocab};
use crate::metrics::{EvalReport, Labels, MetricsError};
use crate::model::{joint_loss, LossConfig, ModelError, WheelGat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectionMetric {
    #[default]
    SentenceAccuracy,
    IntentAccuracy,
    SlotF1,
}

impl SelectionMetric {
    pub fn name(self) -> &'static str {
        match self {
            Self::SentenceAccuracy => "sentence_acc",
            Self::IntentAccuracy => "intent_acc",
            Self::SlotF1 => "slot_f1",
        }
    }

    pub fn score(self, r: &EvalReport) -> f64 {
        match self {
            Self::SentenceAccuracy => r.sentence_accuracy,
            Self::IntentAccuracy => r.intent_accuracy,
            Self::SlotF1 => r.slot_f1,
        }
    }
}

impl FromStr for SelectionMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sentence_acc" => Ok(Self::SentenceAccuracy),
            "intent_acc" => Ok(Self::IntentAccuracy),
            "slot_f1" => Ok(Self::SlotF1),
            _ => Err(format!(
                "unknown selection metric {s:?} (sentence_acc, intent_acc, slot_f1)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub clip_max_norm: f64,
    pub loss: LossConfig,
    pub max_epochs: usize,
    pub seed: u64,
    pub selection: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 64,
            clip_max_norm: 1.0,
            loss: LossConfig::default(),
            max_epochs: 20,
            seed: 1,
            selection: SelectionMetric::SentenceAccuracy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let a = &self.adam;
        let checks = [
            (a.lr > 0.0 && a.lr.is_finite(), "learning_rate must be positive"),
            (a.l2 >= 0.0 && a.l2.is_finite(), "l2_decay must be non-negative"),
            ((0.0..1.0).contains(&a.beta1), "adam_beta1 must lie in [0, 1)"),
            ((0.0..1.0).contains(&a.beta2), "adam_beta2 must lie in [0, 1)"),
            (a.eps > 0.0, "adam_eps must be positive"),
            (self.batch_size > 0, "batch_size must be positive"),
            (self.clip_max_norm > 0.0, "clip_max_norm must be positive"),
            ((0.0..=1.0).contains(&self.loss.alpha), "alpha must lie in [0, 1]"),
            (self.max_epochs > 0, "max_epochs must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(TrainError::Usage((*msg).into())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0}")]
    Usage(String),
    #[error("non-finite loss at epoch {epoch} on training utterance {utterance}")]
    NonFinite { epoch: usize, utterance: usize },
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] crate::autodiff::TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: EvalReport,
}

impl EpochLog {
    /// `epoch  train_loss  val_intent_acc  val_slot_f1  val_sentence_acc`,
    /// tab-separated.
    pub fn line(&self) -> String {
        format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            self.epoch,
            self.train_loss,
            self.validation.intent_accuracy,
            self.validation.slot_f1,
            self.validation.sentence_accuracy
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: WheelGat,
    pub best_epoch: usize,
    pub best_score: f64,
    pub log: Vec<EpochLog>,
}

/// Labels predicted for each utterance, evaluated in parallel.
pub fn predict_labels(model: &WheelGat, vocab: &Vocab, utts: &[Utterance]) -> Result<Vec<Labels>, ModelError> {
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(utts.len().max(1));
    let chunk = utts.len().div_ceil(threads).max(1);
    let predict_one = |u: &Utterance| -> Result<Labels, ModelError> {
        let p = model.predict(&vocab.encode_tokens(&u.tokens))?;
        let name = |table: &crate::dataset::Table, id: usize| table.name(id).unwrap_or("O").to_string();
        Ok(Labels {
            intent: name(&vocab.intents, p.intent),
            tags: p.slots.iter().map(|&s| name(&vocab.slots, s)).collect(),
        })
    };
    std::thread::scope(|s| {
        let handles: Vec<_> = utts
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(predict_one).collect::<Result<Vec<_>, _>>()))
            .collect();
        let mut out = Vec::with_capacity(utts.len());
        for h in handles {
            out.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(out)
    })
}

pub fn gold_labels(utts: &[Utterance]) -> Vec<Labels> {
    utts.iter()
        .map(|u| Labels {
            intent: u.intent.clone(),
            tags: u.slot_tags.clone(),
        })
        .collect()
}

/// Metrics of `model` on `utts` (evaluation mode).
pub fn evaluate(model: &WheelGat, vocab: &Vocab, utts: &[Utterance]) -> Result<EvalReport, TrainError> {
    let preds = predict_labels(model, vocab, utts)?;
    Ok(EvalReport::compute(&gold_labels(utts), &preds)?)
}

/// Accumulates the joint-loss gradient of one utterance into the model's
/// gradient buffers and returns the loss value.
pub fn accumulate_gradient(
    model: &WheelGat,
    utt: &IndexedUtterance,
    loss: LossConfig,
    mode: &mut RunMode<'_>,
) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &utt.token_ids, mode)?;
    let l = joint_loss(&mut g, &fwd, utt.intent_id, &utt.slot_tag_ids, loss)?;
    let value = g.value(l.total)[0];
    if value.is_finite() {
        g.backward(l.total)?;
    }
    Ok(value)
}

/// Trains `model` on `train`, evaluating on `dev` after each epoch and
/// keeping the parameters with the highest selection score (earliest epoch
/// on ties). `observer` sees each epoch's log and the current parameters and
/// may stop training early.
pub fn train<F>(
    mut model: WheelGat,
    vocab: &Vocab,
    train: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&EpochLog, &WheelGat) -> ControlFlow<()>,
{
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(TrainError::Usage(
            "training and validation splits must be nonempty".into(),
        ));
    }
    let encoded = train
        .iter()
        .map(|u| vocab.encode(u, EncodeMode::Train))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(&model, cfg.adam);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(WheelGat, usize, f64)> = None;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grads();
            for &i in batch {
                let loss = accumulate_gradient(&model, &encoded[i], cfg.loss, &mut RunMode::Train(&mut rng))?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite { epoch, utterance: i });
                }
                total += loss;
            }
            let inv = 1.0 / batch.len() as f64;
            for (_, t) in model.named_params() {
                t.scale_grad(inv);
            }
            clip_global_norm(&model, cfg.clip_max_norm);
            adam.step(&mut model)?;
        }
        model.zero_grads();

        let validation = evaluate(&model, vocab, dev)?;
        let score = cfg.selection.score(&validation);
        let entry = EpochLog {
            epoch,
            train_loss: total / encoded.len() as f64,
            validation,
        };
        if best.as_ref().is_none_or(|(_, _, s)| score > *s) {
            best = Some((model.clone(), epoch, score));
        }
        let flow = observer(&entry, &model);
        log.push(entry);
        if flow.is_break() {
            break;
        }
    }

    let (best, best_epoch, best_score) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_score,
        log,
    })
}
