//! Adamax optimisation, batching, evaluation and checkpoints.

mod adamax;
mod checkpoint;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adamax::{adamax_step, lr_schedule, AdamaxState};
pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_HEADER};

use crate::autodiff::{RngState, Tape};
use crate::error::{Error, Result};
use crate::metrics::{exact_match, f1_score, ExampleScore, MetricReport, TaskKind};
use crate::models::{GateTrace, Prediction, QaModel, RunMode};
use crate::params::Gradients;
use crate::text::QaExample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate factor applied once per epoch.
    pub decay: f64,
    /// `None` picks 0.2 for span models and 0.3 for cloze models.
    pub dropout: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub clip: Option<f64>,
    pub trace_gates: bool,
    /// Examples scored after each epoch for the training metric; 0 skips it.
    pub train_sample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr: 0.002,
            decay: 0.9,
            dropout: None,
            epochs: 30,
            seed: 7,
            clip: None,
            trace_gates: false,
            train_sample: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout must lie in [0, 1), got {p}")));
            }
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn dropout_for(&self, task: TaskKind) -> f64 {
        self.dropout.unwrap_or(match task {
            TaskKind::Span => 0.2,
            TaskKind::Cloze => 0.3,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub batches: usize,
    /// EM (span) or accuracy (cloze) on the leading `train_sample` examples.
    pub train_metric: Option<f64>,
}

/// Header of the per-epoch metric log.
pub const EPOCH_LOG_HEADER: &str = "epoch,lr,mean_loss,batches,train_metric,eval_em,eval_f1\n";

impl EpochReport {
    /// One metric-log line; `eval` is the held-out `(em, f1)` when scored.
    pub fn log_row(&self, eval: Option<(f64, f64)>) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}\n",
            self.epoch,
            self.lr,
            self.mean_loss,
            self.batches,
            opt(self.train_metric),
            opt(eval.map(|e| e.0)),
            opt(eval.map(|e| e.1)),
        )
    }
}

/// Mean loss and mean parameter gradients over `examples`, each run with
/// its own [`RunMode`]. Examples run in parallel; results are reduced in
/// input order.
pub fn batch_gradients(
    model: &QaModel,
    examples: &[&QaExample],
    modes: Vec<RunMode>,
) -> Result<(f64, Gradients)> {
    if examples.is_empty() || examples.len() != modes.len() {
        return Err(Error::Contract("batch needs one run mode per example".into()));
    }
    let results: Vec<Result<(f64, Gradients)>> = examples
        .par_iter()
        .zip(modes.into_par_iter())
        .map(|(ex, mut mode)| {
            let mut tape = Tape::with_params(&model.store);
            let out = model.forward(&mut tape, ex, &mut mode)?;
            let loss = tape.value(out.loss).item()?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss".into(),
                    context: format!("example {}", ex.id()),
                });
            }
            tape.backward(out.loss)?;
            let mut g = Gradients::zeros_like(&model.store);
            tape.accumulate_param_grads(&mut g);
            Ok((loss, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(&model.store);
    for r in results {
        let (loss, g) = r?;
        total += loss;
        grads.add_assign(&g);
    }
    let scale = 1.0 / examples.len() as f64;
    grads.scale(scale);
    Ok((total * scale, grads))
}

/// A model with its optimizer, random stream and progress counters.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: QaModel,
    pub config: TrainConfig,
    pub optimizer: AdamaxState,
    pub rng: RngState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: QaModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamaxState::new(&model.store, config.lr);
        let rng = RngState::new(config.seed);
        Ok(Trainer {
            model,
            config,
            optimizer,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    pub fn current_lr(&self) -> f64 {
        lr_schedule(self.config.lr, self.config.decay, self.epoch)
    }

    /// One pass over `data` in a freshly shuffled order.
    pub fn train_epoch(&mut self, data: &[QaExample]) -> Result<EpochReport> {
        if data.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let lr = self.current_lr();
        let dropout = self.config.dropout_for(self.model.task());
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let examples: Vec<&QaExample> = chunk.iter().map(|&i| &data[i]).collect();
            let modes = chunk
                .iter()
                .map(|_| RunMode::train(dropout, self.rng.fork()))
                .collect();
            let (loss, mut grads) = batch_gradients(&self.model, &examples, modes)?;
            if let Some(clip) = self.config.clip {
                let norm = grads.global_norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            adamax_step(&mut self.optimizer, &mut self.model.store, &grads, lr, self.step)?;
            self.step += 1;
            loss_sum += loss * chunk.len() as f64;
            batches += 1;
        }
        self.epoch += 1;
        let train_metric = match self.config.train_sample.min(data.len()) {
            0 => None,
            n => Some(evaluate(&self.model, &data[..n], false)?.report.em),
        };
        Ok(EpochReport {
            epoch: self.epoch,
            lr,
            mean_loss: loss_sum / data.len() as f64,
            batches,
            train_metric,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.into_trainer()
    }
}

/// Scored predictions for a dataset.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub scores: Vec<ExampleScore>,
    pub predictions: Vec<Prediction>,
    /// Filled when tracing was requested and the combiner has a gate.
    pub traces: Vec<Option<GateTrace>>,
}

/// Answer text of a prediction: the span's tokens, or the chosen candidate.
pub fn prediction_text(ex: &QaExample, prediction: &Prediction) -> String {
    match (ex, prediction) {
        (QaExample::Span(e), Prediction::Span { start, end }) => {
            e.passage.flat_tokens()[*start..=*end].join(" ")
        }
        (QaExample::Cloze(e), Prediction::Cloze { index, .. }) => e.candidates[*index].clone(),
        _ => String::new(),
    }
}

fn score(ex: &QaExample, prediction: &Prediction) -> ExampleScore {
    let avg_sentence_len = ex.passage().average_sentence_length();
    let (em, f1) = match (ex, prediction) {
        (QaExample::Span(e), Prediction::Span { .. }) => {
            let text = prediction_text(ex, prediction);
            (exact_match(&text, &e.gold_answers), f1_score(&text, &e.gold_answers))
        }
        (QaExample::Cloze(e), Prediction::Cloze { index, .. }) => {
            let hit = f64::from(u8::from(*index == e.answer_index));
            (hit, hit)
        }
        _ => (0.0, 0.0),
    };
    ExampleScore {
        em,
        f1,
        avg_sentence_len,
    }
}

/// Runs the model without dropout over `data`, in parallel, keeping input
/// order.
pub fn evaluate(model: &QaModel, data: &[QaExample], trace: bool) -> Result<Evaluation> {
    let outs: Vec<Result<(Prediction, Option<GateTrace>)>> = data
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::with_params(&model.store);
            let out = model.forward(&mut tape, ex, &mut RunMode::eval(trace))?;
            Ok((out.prediction, out.trace))
        })
        .collect();
    let mut predictions = Vec::with_capacity(data.len());
    let mut traces = Vec::with_capacity(data.len());
    let mut scores = Vec::with_capacity(data.len());
    for (ex, out) in data.iter().zip(outs) {
        let (p, t) = out?;
        scores.push(score(ex, &p));
        predictions.push(p);
        traces.push(t);
    }
    Ok(Evaluation {
        report: MetricReport::from_scores(model.task(), &scores),
        scores,
        predictions,
        traces,
    })
}
