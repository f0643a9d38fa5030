//! Natural-log probability arithmetic.
//!
//! Every probability in the toolkit lives in log space. Products of 20+
//! token probabilities underflow in linear space, so sums of probabilities
//! go through [`log_sum_exp`] and never through `exp` followed by `+`.
//! `-inf` is a valid value meaning probability zero.

use std::fmt;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::Response;

/// A natural-log probability (or log of a probability mass). Never NaN.
///
/// Sentence and token log-probs are `<= 0`; unnormalized cluster masses can
/// be slightly positive because sampled sentence probabilities need not sum
/// to one.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogProb(f64);

impl LogProb {
    /// log(0)
    pub const ZERO_PROB: LogProb = LogProb(f64::NEG_INFINITY);
    /// log(1)
    pub const CERTAIN: LogProb = LogProb(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() || value == f64::INFINITY {
            return Err(Error::NonFiniteScore(value));
        }
        Ok(LogProb(value))
    }

    /// Log of a linear-space probability.
    pub fn from_prob(p: f64) -> Result<Self> {
        if !(0.0..=f64::MAX).contains(&p) {
            return Err(Error::OutOfRange(p));
        }
        Ok(LogProb(p.ln()))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn is_zero_prob(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }

    /// Linear-space probability. Only call when the result is known not to
    /// underflow in a harmful way (e.g. renormalized masses).
    #[inline]
    pub fn prob(self) -> f64 {
        self.0.exp()
    }
}

impl Add for LogProb {
    type Output = LogProb;

    /// Log of the product of the two probabilities.
    fn add(self, rhs: LogProb) -> LogProb {
        LogProb(self.0 + rhs.0)
    }
}

impl fmt::Display for LogProb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// `log p(s|x)`: sum of the response's token log-probs.
pub fn sequence_logprob(r: &Response) -> Result<LogProb> {
    if r.token_logprobs.is_empty() {
        return Err(Error::EmptyTokenList);
    }
    Ok(LogProb(r.token_logprobs.iter().sum()))
}

/// Mean per-token log-prob (log of the geometric-mean token probability).
pub fn normalized_sequence_logprob(r: &Response) -> Result<LogProb> {
    let total = sequence_logprob(r)?;
    Ok(LogProb(total.0 / r.token_logprobs.len() as f64))
}

/// `log sum_i exp(values[i])` by the max-shift method.
///
/// The dominant term is pulled out and the remainder goes through `ln_1p`,
/// so the result is exact when every other entry is `-inf`.
pub fn log_sum_exp(values: &[LogProb]) -> Result<LogProb> {
    let (arg_max, max) = values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, m)) if m >= v.0 => best,
            _ => Some((i, v.0)),
        })
        .ok_or(Error::EmptyList)?;
    if max == f64::NEG_INFINITY {
        return Ok(LogProb::ZERO_PROB);
    }
    let rest: f64 = values
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg_max)
        .map(|(_, v)| (v.0 - max).exp())
        .sum();
    Ok(LogProb(max + rest.ln_1p()))
}

/// Max-shifted softmax over finite scores.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyList);
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore(bad));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
