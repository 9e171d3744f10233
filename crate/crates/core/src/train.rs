//! Training loop, prediction and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Config, TaskKind};
use crate::data::{batch_examples, Batch, Example, LabelSet, Labels, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_metrics, Answer, EvalReport};
use crate::model::{span_predict, BatchLogits, Model, SpanPrediction, ENCODER_PREFIX};
use crate::optim::{clip_global_norm, AdamW};
use crate::params::{ParameterStore, Session};

/// One row of the loss curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr_encoder: f64,
    pub lr_other: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,epoch,loss,lr_encoder,lr_other";

impl LossRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e}",
            self.step, self.epoch, self.loss, self.lr_encoder, self.lr_other
        )
    }
}

pub fn loss_curve_csv(rows: &[LossRow]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

/// What the observer sees after every step.
pub struct Progress<'a> {
    pub row: &'a LossRow,
    /// True on the last step of an epoch.
    pub epoch_end: bool,
    pub store: &'a ParameterStore,
    pub optim: &'a AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Everything a training run needs besides the parameters.
pub struct TrainSetup<'a> {
    pub config: &'a Config,
    pub model: &'a Model,
    pub vocab: &'a Vocab,
    pub labels: &'a LabelSet,
    pub examples: &'a [Example],
}

/// Runs `config.train.epochs` epochs of mini-batch AdamW. Batch order is a
/// deterministic function of the seed; dropout masks are seeded per step.
pub fn train(
    setup: &TrainSetup,
    store: &mut ParameterStore,
    optim: &mut AdamW,
    mut observe: impl FnMut(&Progress) -> Result<Control>,
) -> Result<Vec<LossRow>> {
    let TrainSetup {
        config,
        model,
        vocab,
        labels,
        examples,
    } = *setup;
    if examples.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let tc = &config.train;
    let seed = config.model.seed;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curve = Vec::new();
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let shuffled: Vec<Example> = order.iter().map(|&i| examples[i].clone()).collect();
        let batches = batch_examples(&shuffled, vocab, labels, config.model.max_len, tc.batch_size)?;
        let last = batches.len() - 1;
        for (b, batch) in batches.iter().enumerate() {
            let (loss, mut grads) = {
                let mut s = Session::training(store, seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let loss = model.batch_loss(&mut s, batch).map_err(|e| match e {
                    Error::Tensor(source) if source_is_numeric(&source) => Error::NonFiniteLoss { step, source },
                    other => other,
                })?;
                let value = s.graph.value(loss).item();
                s.backward(loss).map_err(|source| Error::NonFiniteLoss { step, source })?;
                (value, s.take_grads().into_iter().collect::<BTreeMap<_, _>>())
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    source: crate::tensor::TensorError::NonFinite { op: "loss" },
                });
            }
            clip_global_norm(&mut grads, tc.grad_clip);
            optim.apply(store, &grads)?;
            let row = LossRow {
                step,
                epoch,
                loss,
                lr_encoder: optim.lr_for(&format!("{ENCODER_PREFIX}.")),
                lr_other: optim.default_lr,
            };
            step += 1;
            let control = observe(&Progress {
                row: &row,
                epoch_end: b == last,
                store,
                optim,
            })?;
            curve.push(row);
            if control == Control::Stop {
                return Ok(curve);
            }
        }
    }
    Ok(curve)
}

fn source_is_numeric(e: &crate::tensor::TensorError) -> bool {
    matches!(
        e,
        crate::tensor::TensorError::NonFinite { .. } | crate::tensor::TensorError::DegenerateSoftmax { .. }
    )
}

/// Model answers plus gold answers for every example, in input order.
pub struct Predictions {
    pub ids: Vec<String>,
    pub predicted: Vec<Answer>,
    pub gold: Vec<Answer>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn label_name(labels: &LabelSet, id: usize) -> String {
    labels.name(id).unwrap_or("O").to_string()
}

fn batch_answers(
    model: &Model,
    examples: &[Example],
    batch: &Batch,
    logits: &BatchLogits,
    labels: &LabelSet,
    out: &mut Predictions,
) -> Result<()> {
    let cfg = &model.config;
    match (logits, &batch.labels) {
        (BatchLogits::Span { start, end }, Labels::Span(_)) => {
            for (r, meta) in batch.span_meta.iter().enumerate() {
                let Example::Span(ex) = &examples[r] else { unreachable!() };
                let mut candidates = vec![false; batch.seq_len()];
                for c in &mut candidates[meta.passage_offset..meta.passage_offset + meta.passage_len] {
                    *c = true;
                }
                let pred = match span_predict(
                    start.row(r),
                    end.row(r),
                    &candidates,
                    cfg.max_answer_len,
                    cfg.null_threshold,
                ) {
                    SpanPrediction::Answer { start: s, end: e, .. } => {
                        let (ps, pe) = meta.to_passage(s, e).expect("candidates lie in the passage");
                        Some(ex.context[ps..=pe].join(" "))
                    }
                    SpanPrediction::NoAnswer { .. } => None,
                };
                out.ids.push(meta.id.clone());
                out.predicted.push(Answer::Span(pred));
                out.gold.push(Answer::Span(ex.answer.map(|_| ex.answer_text())));
            }
        }
        (BatchLogits::Class(t), Labels::Class(gold)) => {
            for (r, &g) in gold.iter().enumerate() {
                out.ids.push(example_id(&examples[r], r));
                out.predicted.push(Answer::Class(argmax(t.row(r))));
                out.gold.push(Answer::Class(g));
            }
        }
        (BatchLogits::Choice(t), Labels::Choice(gold)) => {
            for (r, &g) in gold.iter().enumerate() {
                out.ids.push(example_id(&examples[r], r));
                out.predicted.push(Answer::Choice(argmax(t.row(r))));
                out.gold.push(Answer::Choice(g));
            }
        }
        (BatchLogits::Tags(t), Labels::Tags(gold)) => {
            let width = t.shape()[2];
            for (r, row) in gold.iter().enumerate() {
                let (mut p, mut g) = (Vec::new(), Vec::new());
                for (pos, tag) in row.iter().enumerate() {
                    let Some(tag) = tag else { continue };
                    let base = (r * batch.seq_len() + pos) * width;
                    p.push(label_name(labels, argmax(&t.data()[base..base + width])));
                    g.push(label_name(labels, *tag));
                }
                out.ids.push(example_id(&examples[r], r));
                out.predicted.push(Answer::Tags(p));
                out.gold.push(Answer::Tags(g));
            }
        }
        _ => return Err(Error::Invalid("logits do not match batch labels".into())),
    }
    Ok(())
}

fn example_id(ex: &Example, fallback: usize) -> String {
    match ex {
        Example::Span(e) => e.id.clone(),
        Example::Choice(e) => e.id.clone(),
        _ => fallback.to_string(),
    }
}

/// Runs inference over `examples` in order.
pub fn predict(
    model: &Model,
    store: &ParameterStore,
    vocab: &Vocab,
    labels: &LabelSet,
    examples: &[Example],
    batch_size: usize,
) -> Result<Predictions> {
    let mut out = Predictions {
        ids: Vec::new(),
        predicted: Vec::new(),
        gold: Vec::new(),
    };
    let batch_size = batch_size.max(1);
    let batches = batch_examples(examples, vocab, labels, model.config.max_len, batch_size)?;
    for (chunk, batch) in examples.chunks(batch_size).zip(&batches) {
        let logits = model.forward_pass(store, batch)?;
        let before = out.ids.len();
        batch_answers(model, chunk, batch, &logits, labels, &mut out)?;
        if matches!(chunk[0], Example::Class(_) | Example::Tagged(_)) {
            for (k, id) in out.ids[before..].iter_mut().enumerate() {
                *id = (before + k).to_string();
            }
        }
    }
    Ok(out)
}

/// Inference-mode task loss averaged over every example of `examples`.
pub fn dataset_loss(
    model: &Model,
    store: &ParameterStore,
    vocab: &Vocab,
    labels: &LabelSet,
    examples: &[Example],
    batch_size: usize,
) -> Result<f64> {
    let batches = batch_examples(examples, vocab, labels, model.config.max_len, batch_size.max(1))?;
    let mut total = 0.0;
    for batch in &batches {
        let mut s = Session::new(store);
        let loss = model.batch_loss(&mut s, batch)?;
        total += s.graph.value(loss).item() * batch.examples() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Predicts and scores `examples`.
pub fn evaluate(
    config: &Config,
    model: &Model,
    store: &ParameterStore,
    vocab: &Vocab,
    labels: &LabelSet,
    examples: &[Example],
    dataset: &str,
) -> Result<EvalReport> {
    let preds = predict(model, store, vocab, labels, examples, config.train.batch_size)?;
    let task: TaskKind = config.model.task;
    Ok(EvalReport {
        task: task.to_string(),
        metrics: evaluate_metrics(task, &preds.predicted, &preds.gold)?,
        dataset: dataset.to_string(),
        config_hash: config.hash_hex(),
        seed: config.model.seed,
    })
}
