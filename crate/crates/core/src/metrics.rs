//! Evaluation metrics for uncertainty scores.
//!
//! All curve metrics order items by uncertainty descending (most uncertain
//! first), breaking ties by `query_id`, so results are reproducible
//! bit-for-bit.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logspace::sequence_logprob;
use crate::record::GenerationRecord;

pub const RATING_THRESHOLD: f64 = 0.7;
pub const ROUGE_L_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub query_id: String,
    /// Higher means more uncertain.
    pub uncertainty: f64,
    pub correct: bool,
}

impl LabeledScore {
    pub fn new(query_id: impl Into<String>, uncertainty: f64, correct: bool) -> Self {
        LabeledScore { query_id: query_id.into(), uncertainty, correct }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rejection_fraction: f64,
    pub accuracy: f64,
}

fn check_items(items: &[LabeledScore]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::EmptyList);
    }
    if let Some(bad) = items.iter().find(|i| !i.uncertainty.is_finite()) {
        return Err(Error::NonFiniteScore(bad.uncertainty));
    }
    Ok(())
}

/// Most uncertain first; ties by query id.
fn rejection_order(items: &[LabeledScore]) -> Vec<&LabeledScore> {
    let mut sorted: Vec<&LabeledScore> = items.iter().collect();
    sorted.sort_by(|a, b| {
        b.uncertainty
            .total_cmp(&a.uncertainty)
            .then_with(|| a.query_id.cmp(&b.query_id))
    });
    sorted
}

/// P(random incorrect item is more uncertain than random correct item),
/// ties counting one half.
pub fn auroc(items: &[LabeledScore]) -> Result<f64> {
    check_items(items)?;
    let n_correct = items.iter().filter(|i| i.correct).count() as u64;
    let n_wrong = items.len() as u64 - n_correct;
    if n_correct == 0 || n_wrong == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut sorted: Vec<&LabeledScore> = items.iter().collect();
    sorted.sort_by(|a, b| a.uncertainty.total_cmp(&b.uncertainty));
    // doubled U statistic: 2 per strict win, 1 per tie
    let mut doubled_u: u64 = 0;
    let mut correct_below: u64 = 0;
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start;
        while end < sorted.len() && sorted[end].uncertainty == sorted[start].uncertainty {
            end += 1;
        }
        let group = &sorted[start..end];
        let g_correct = group.iter().filter(|i| i.correct).count() as u64;
        let g_wrong = group.len() as u64 - g_correct;
        doubled_u += g_wrong * (2 * correct_below + g_correct);
        correct_below += g_correct;
        start = end;
    }
    Ok(doubled_u as f64 / (2 * n_correct * n_wrong) as f64)
}

/// Accuracy of the retained items as the most uncertain are rejected.
///
/// Points at `k/n` for `k = 0..n`; the point at rejection fraction 1 repeats
/// the last retained accuracy.
pub fn accuracy_rejection_curve(items: &[LabeledScore]) -> Result<Vec<CurvePoint>> {
    check_items(items)?;
    let order = rejection_order(items);
    let n = order.len();
    let mut correct_retained = order.iter().filter(|i| i.correct).count();
    let mut curve = Vec::with_capacity(n + 1);
    for (k, item) in order.iter().enumerate() {
        curve.push(CurvePoint {
            rejection_fraction: k as f64 / n as f64,
            accuracy: correct_retained as f64 / (n - k) as f64,
        });
        correct_retained -= usize::from(item.correct);
    }
    let last = curve[n - 1].accuracy;
    curve.push(CurvePoint { rejection_fraction: 1.0, accuracy: last });
    Ok(curve)
}

/// Step mean of the accuracy-rejection curve over `k = 0..n-1`.
pub fn auarc(items: &[LabeledScore]) -> Result<f64> {
    let curve = accuracy_rejection_curve(items)?;
    let n = items.len();
    Ok(curve[..n].iter().map(|p| p.accuracy).sum::<f64>() / n as f64)
}

/// Accuracy of the rejected items, `k = 1..n` rejected. Lower is better.
pub fn rejection_accuracy_curve(items: &[LabeledScore]) -> Result<Vec<CurvePoint>> {
    check_items(items)?;
    let order = rejection_order(items);
    let n = order.len();
    let mut correct_rejected = 0usize;
    Ok(order
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let k = i + 1;
            correct_rejected += usize::from(item.correct);
            CurvePoint {
                rejection_fraction: k as f64 / n as f64,
                accuracy: correct_rejected as f64 / k as f64,
            }
        })
        .collect())
}

/// Step mean of the rejection-accuracy curve.
pub fn aurac(items: &[LabeledScore]) -> Result<f64> {
    let curve = rejection_accuracy_curve(items)?;
    Ok(curve.iter().map(|p| p.accuracy).sum::<f64>() / curve.len() as f64)
}

fn check_unit(v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(Error::OutOfRange(v))
    }
}

/// GPT-4 style rating strictly above 0.7.
pub fn correctness_from_rating(rating: f64) -> Result<bool> {
    Ok(check_unit(rating)? > RATING_THRESHOLD)
}

/// RougeL F-measure strictly above 0.3.
pub fn correctness_from_rouge_l(score: f64) -> Result<bool> {
    Ok(check_unit(score)? > ROUGE_L_THRESHOLD)
}

/// Which sampled response stands for the model's answer to a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimaryResponse {
    /// Highest sequence log-prob (first on ties).
    #[default]
    MostLikely,
    /// Response 0.
    First,
}

/// Query-level correctness: the label of the primary response.
pub fn query_correctness(rec: &GenerationRecord, which: PrimaryResponse) -> Result<bool> {
    let labels = rec
        .labels()
        .ok_or_else(|| Error::MissingLabels(rec.query_id.clone()))?;
    if labels.is_empty() {
        return Err(Error::EmptyList);
    }
    let idx = match which {
        PrimaryResponse::First => 0,
        PrimaryResponse::MostLikely => {
            let mut best = 0;
            let mut best_lp = f64::NEG_INFINITY;
            for (i, r) in rec.responses.iter().enumerate() {
                let lp = sequence_logprob(r)?.value();
                if i == 0 || lp.partial_cmp(&best_lp) == Some(Ordering::Greater) {
                    best = i;
                    best_lp = lp;
                }
            }
            best
        }
    };
    Ok(labels[idx])
}

/// Mean correctness of every individual sampled response.
pub fn point_accuracy(records: &[GenerationRecord]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for rec in records {
        let labels = rec
            .labels()
            .ok_or_else(|| Error::MissingLabels(rec.query_id.clone()))?;
        correct += labels.iter().filter(|&&c| c).count();
        total += labels.len();
    }
    if total == 0 {
        return Err(Error::EmptyList);
    }
    Ok(correct as f64 / total as f64)
}
