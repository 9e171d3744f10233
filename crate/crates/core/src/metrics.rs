//! Evaluation metrics and reports.
//!
//! Span EM/F1 follow the usual extractive-QA conventions: answers are
//! normalised (lower case, punctuation and articles removed, whitespace
//! collapsed); F1 is the token-bag overlap per example; an example where both
//! prediction and gold are "no answer" scores 1 on both. Reported metrics are
//! percentages in `[0, 100]`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::config::TaskKind;
use crate::error::{Error, Result};

/// A prediction or gold label for one example.
#[derive(Debug, Clone, PartialEq)]
pub enum Answer {
    /// Answer text, `None` for no answer.
    Span(Option<String>),
    Class(usize),
    /// BIO tag names, one per token.
    Tags(Vec<String>),
    Choice(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    /// Metric name to percentage.
    pub metrics: BTreeMap<String, f64>,
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

pub fn normalize_answer(text: &str) -> Vec<String> {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(String::from)
        .collect()
}

pub fn exact_match(pred: Option<&str>, gold: Option<&str>) -> f64 {
    let norm = |s: Option<&str>| s.map(normalize_answer).unwrap_or_default();
    if norm(pred) == norm(gold) {
        1.0
    } else {
        0.0
    }
}

/// Token-bag overlap F1 in `[0, 1]`.
pub fn span_f1(pred: Option<&str>, gold: Option<&str>) -> f64 {
    let p = pred.map(normalize_answer).unwrap_or_default();
    let g = gold.map(normalize_answer).unwrap_or_default();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Entity chunks `(type, start, end_exclusive)` from BIO tags. An `I-X` that
/// does not continue an `X` chunk opens a new one.
pub fn bio_chunks(tags: &[String]) -> Vec<(String, usize, usize)> {
    let mut chunks = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (prefix, kind) = match tag.split_once('-') {
            Some((p, k)) if p == "B" || p == "I" => (p, k),
            _ => ("O", ""),
        };
        let continues = prefix == "I" && open.as_ref().is_some_and(|(k, _)| k == kind);
        if !continues {
            if let Some((k, s)) = open.take() {
                chunks.push((k, s, i));
            }
            if prefix != "O" {
                open = Some((kind.to_string(), i));
            }
        }
    }
    if let Some((k, s)) = open {
        chunks.push((k, s, tags.len()));
    }
    chunks
}

fn percent(x: f64) -> f64 {
    100.0 * x
}

/// Aggregate metrics over aligned prediction/gold lists.
pub fn evaluate_metrics(task: TaskKind, preds: &[Answer], golds: &[Answer]) -> Result<BTreeMap<String, f64>> {
    if preds.len() != golds.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} gold answers",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    let n = preds.len() as f64;
    let mismatch = || Error::Invalid(format!("answers do not match task {task}"));
    let mut out = BTreeMap::new();
    match task {
        TaskKind::Span => {
            let (mut em, mut f1) = (0.0, 0.0);
            for (p, g) in preds.iter().zip(golds) {
                let (Answer::Span(p), Answer::Span(g)) = (p, g) else { return Err(mismatch()) };
                em += exact_match(p.as_deref(), g.as_deref());
                f1 += span_f1(p.as_deref(), g.as_deref());
            }
            out.insert("em".into(), percent(em / n));
            out.insert("f1".into(), percent(f1 / n));
        }
        TaskKind::SeqClass | TaskKind::MultiChoice => {
            let mut hits = 0.0;
            for (p, g) in preds.iter().zip(golds) {
                match (p, g) {
                    (Answer::Class(a), Answer::Class(b)) | (Answer::Choice(a), Answer::Choice(b)) => {
                        hits += f64::from(u8::from(a == b));
                    }
                    _ => return Err(mismatch()),
                }
            }
            out.insert("accuracy".into(), percent(hits / n));
        }
        TaskKind::TokenTag => {
            let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
            let (mut right, mut total) = (0usize, 0usize);
            for (p, g) in preds.iter().zip(golds) {
                let (Answer::Tags(p), Answer::Tags(g)) = (p, g) else { return Err(mismatch()) };
                if p.len() != g.len() {
                    return Err(Error::Invalid(format!("{} predicted tags for {} tokens", p.len(), g.len())));
                }
                right += p.iter().zip(g).filter(|(a, b)| a == b).count();
                total += g.len();
                let pc = bio_chunks(p);
                let gc = bio_chunks(g);
                tp += pc.iter().filter(|c| gc.contains(c)).count();
                n_pred += pc.len();
                n_gold += gc.len();
            }
            let precision = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
            let recall = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
            let f1 = if tp == 0 {
                if n_pred == 0 && n_gold == 0 { 1.0 } else { 0.0 }
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            out.insert("entity_f1".into(), percent(f1));
            out.insert("token_accuracy".into(), percent(if total == 0 { 1.0 } else { right as f64 / total as f64 }));
        }
    }
    Ok(out)
}
