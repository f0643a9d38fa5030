//! Domain types shared by every stage: responses, generation records and
//! directional entailment matrices.
//!
//! The serde layout of [`GenerationRecord`] is the JSONL corpus schema (see
//! [`crate::ingest`]).

use serde::{Deserialize, Serialize};

use crate::metrics::{correctness_from_rating, correctness_from_rouge_l};

/// One sampled response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub text: String,
    /// Natural-log token probabilities, each `<= 0` or `-inf`.
    #[serde(with = "logprob_list")]
    pub token_logprobs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpt4_rating: Option<f64>,
    #[serde(default, rename = "rougeL", skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    /// Position in generation order. Not serialized; restored from line
    /// position on load.
    #[serde(skip)]
    pub index: usize,
}

impl Response {
    pub fn new(text: impl Into<String>, token_logprobs: Vec<f64>) -> Self {
        Response {
            text: text.into(),
            token_logprobs,
            correct: None,
            gpt4_rating: None,
            rouge_l: None,
            index: 0,
        }
    }

    pub fn with_correct(mut self, correct: bool) -> Self {
        self.correct = Some(correct);
        self
    }

    /// Resolved correctness: explicit label, then GPT-4 rating, then RougeL.
    pub fn label(&self) -> Option<bool> {
        if let Some(c) = self.correct {
            return Some(c);
        }
        if let Some(r) = self.gpt4_rating {
            return correctness_from_rating(r).ok();
        }
        self.rouge_l.and_then(|r| correctness_from_rouge_l(r).ok())
    }
}

/// Directional NLI scores: `get(i, j) = p(s_i entails s_j)`.
///
/// Stored as rows so that malformed (non-square) input can be represented
/// long enough to be reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntailmentMatrix {
    rows: Vec<Vec<f64>>,
}

impl EntailmentMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        EntailmentMatrix { rows }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let rows = (0..n).map(|i| (0..n).map(|j| f(i, j)).collect()).collect();
        EntailmentMatrix { rows }
    }

    /// Unit diagonal and a constant off-diagonal value.
    pub fn constant(n: usize, off_diagonal: f64) -> Self {
        Self::from_fn(n, |i, j| if i == j { 1.0 } else { off_diagonal })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Side length if the matrix is square.
    pub fn side(&self) -> Option<usize> {
        let n = self.rows.len();
        self.rows.iter().all(|r| r.len() == n).then_some(n)
    }

    /// Width of the first ragged or mismatched row, else the common width.
    pub fn n_cols(&self) -> usize {
        let n = self.rows.len();
        self.rows
            .iter()
            .map(Vec::len)
            .find(|&w| w != n)
            .unwrap_or(n)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }
}

/// One query and its N sampled responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub query_id: String,
    pub question: String,
    pub context: Option<String>,
    pub responses: Vec<Response>,
    pub entailment_fwd: EntailmentMatrix,
}

/// Why a record failed validation.
#[derive(Debug, Clone, PartialEq)]
pub enum RecordIssue {
    Field { field: String, message: String },
    Shape { rows: usize, cols: usize, responses: usize },
}

impl GenerationRecord {
    pub fn new(
        query_id: impl Into<String>,
        question: impl Into<String>,
        responses: Vec<Response>,
        entailment_fwd: EntailmentMatrix,
    ) -> Self {
        let mut rec = GenerationRecord {
            query_id: query_id.into(),
            question: question.into(),
            context: None,
            responses,
            entailment_fwd,
        };
        rec.reindex();
        rec
    }

    pub fn n_responses(&self) -> usize {
        self.responses.len()
    }

    /// Stamp every response with its list position.
    pub fn reindex(&mut self) {
        for (i, r) in self.responses.iter_mut().enumerate() {
            r.index = i;
        }
    }

    /// Per-response correctness, or `None` if any response lacks a label
    /// source.
    pub fn labels(&self) -> Option<Vec<bool>> {
        self.responses.iter().map(Response::label).collect()
    }

    /// Checks matrix shape, probability ranges, unit diagonal, token
    /// log-prob ranges and label ranges.
    pub fn validate(&self) -> Result<(), RecordIssue> {
        let field = |field: String, message: String| RecordIssue::Field { field, message };
        if self.responses.is_empty() {
            return Err(field("responses".into(), "must contain at least one response".into()));
        }
        for (i, r) in self.responses.iter().enumerate() {
            if let Some(bad) = r
                .token_logprobs
                .iter()
                .find(|&&v| v.is_nan() || v > 0.0)
            {
                return Err(field(
                    format!("responses[{i}].token_logprobs"),
                    format!("log-prob {bad} is not <= 0"),
                ));
            }
            for (name, v) in [("gpt4_rating", r.gpt4_rating), ("rougeL", r.rouge_l)] {
                if let Some(v) = v.filter(|v| !(0.0..=1.0).contains(v)) {
                    return Err(field(format!("responses[{i}].{name}"), format!("{v} outside [0, 1]")));
                }
            }
        }
        let n = self.responses.len();
        let m = &self.entailment_fwd;
        if m.side() != Some(n) {
            return Err(RecordIssue::Shape {
                rows: m.n_rows(),
                cols: m.n_cols(),
                responses: n,
            });
        }
        for i in 0..n {
            for j in 0..n {
                let v = m.get(i, j);
                if !(0.0..=1.0).contains(&v) {
                    return Err(field(
                        format!("entailment_fwd[{i}][{j}]"),
                        format!("{v} outside [0, 1]"),
                    ));
                }
            }
            if m.get(i, i) != 1.0 {
                return Err(field(
                    format!("entailment_fwd[{i}][{i}]"),
                    format!("diagonal must be 1.0, got {}", m.get(i, i)),
                ));
            }
        }
        Ok(())
    }
}

/// Token log-probs as JSON numbers, with `-inf` written as the string
/// `"-inf"` (JSON has no infinity literal).
mod logprob_list {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Wire {
        Num(f64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let wire: Vec<Wire> = values
            .iter()
            .map(|&v| {
                if v == f64::NEG_INFINITY {
                    Wire::Str("-inf".into())
                } else {
                    Wire::Num(v)
                }
            })
            .collect();
        wire.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Wire>::deserialize(d)?
            .into_iter()
            .map(|w| match w {
                Wire::Num(v) => Ok(v),
                Wire::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
                Wire::Str(s) => Err(D::Error::custom(format!("invalid log-prob {s:?}"))),
            })
            .collect()
    }
}
