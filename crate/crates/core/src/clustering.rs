//! Sequential clustering of responses by semantic equivalence.
//!
//! Responses are visited in generation order. Response `j` is scored
//! against every existing cluster by the mean bidirectional entailment
//! `w(j in c) = mean_{i in c} max(p(i |- j), p(j |- i))`, and against a
//! fresh cluster by the CRP prior `alpha / (alpha + |C|)`. The scores are
//! softmaxed and the response goes to the argmax; the new-cluster option is
//! last, so exact ties favour joining an existing cluster.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logspace::softmax;
use crate::record::{EntailmentMatrix, GenerationRecord};

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// 0-based creation index.
    pub id: usize,
    /// Response indices in insertion order.
    pub member_indices: Vec<usize>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.member_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_indices.is_empty()
    }

    /// Lowest generation index, i.e. the first member added.
    pub fn first_member(&self) -> Option<usize> {
        self.member_indices.first().copied()
    }
}

/// A partition of a record's responses.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClusterSet {
    pub clusters: Vec<Cluster>,
    pub n_responses: usize,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Cluster id per response index.
    pub fn assignments(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.n_responses];
        for c in &self.clusters {
            for &m in &c.member_indices {
                out[m] = c.id;
            }
        }
        out
    }

    /// Rebuild a partition from per-response cluster ids (ids must be dense
    /// and in first-appearance order).
    pub fn from_assignments(assignments: &[usize]) -> Result<Self> {
        let mut clusters: Vec<Cluster> = Vec::new();
        for (j, &id) in assignments.iter().enumerate() {
            if id == clusters.len() {
                clusters.push(Cluster { id, member_indices: vec![j] });
            } else if id < clusters.len() {
                clusters[id].member_indices.push(j);
            } else {
                return Err(Error::ShapeMismatch(format!(
                    "cluster id {id} at response {j} skips ahead of {} clusters",
                    clusters.len()
                )));
            }
        }
        Ok(ClusterSet { clusters, n_responses: assignments.len() })
    }

    fn add(&mut self, decision: Decision, j: usize) {
        match decision {
            Decision::Existing(k) => self.clusters[k].member_indices.push(j),
            Decision::NewCluster => {
                let id = self.clusters.len();
                self.clusters.push(Cluster { id, member_indices: vec![j] });
            }
        }
        self.n_responses += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    /// CRP rate parameter, prior weight on opening a new cluster.
    pub alpha: f64,
}

impl ClusteringConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::NonPositiveAlpha(alpha));
        }
        Ok(ClusteringConfig { alpha })
    }
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig { alpha: DEFAULT_ALPHA }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Existing(usize),
    NewCluster,
}

/// One assignment step, with the score and softmax vectors kept for audit.
/// The last entry of both vectors is the new-cluster option.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub decision: Decision,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
}

/// `max(p(i |- j), p(j |- i))`.
pub fn pairwise_similarity(m: &EntailmentMatrix, i: usize, j: usize) -> Result<f64> {
    let n = m.n_rows();
    for idx in [i, j] {
        if idx >= n {
            return Err(Error::IndexOutOfRange { index: idx, len: n });
        }
    }
    Ok(m.get(i, j).max(m.get(j, i)))
}

/// Mean pairwise similarity of response `j` to the members of `c`.
pub fn membership_score(m: &EntailmentMatrix, c: &Cluster, j: usize) -> Result<f64> {
    if c.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let mut total = 0.0;
    for &i in &c.member_indices {
        total += pairwise_similarity(m, i, j)?;
    }
    Ok(total / c.len() as f64)
}

/// CRP prior for opening cluster number `n_clusters + 1`.
pub fn new_cluster_score(alpha: f64, n_clusters: usize) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::NonPositiveAlpha(alpha));
    }
    Ok(alpha / (alpha + n_clusters as f64))
}

/// Index of the first maximum.
pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Decide where response `j` goes given the clusters built so far.
pub fn assign(
    m: &EntailmentMatrix,
    partial: &ClusterSet,
    j: usize,
    cfg: &ClusteringConfig,
) -> Result<Assignment> {
    let mut scores = Vec::with_capacity(partial.len() + 1);
    for c in &partial.clusters {
        scores.push(membership_score(m, c, j)?);
    }
    scores.push(new_cluster_score(cfg.alpha, partial.len())?);
    let probs = softmax(&scores)?;
    // softmax is monotone, so the raw-score argmax is the decision
    let k = argmax_first(&scores);
    let decision = if k == partial.len() {
        Decision::NewCluster
    } else {
        Decision::Existing(k)
    };
    Ok(Assignment { decision, scores, probs })
}

/// Cluster every response of a square entailment matrix in index order.
pub fn cluster_matrix(m: &EntailmentMatrix, cfg: &ClusteringConfig) -> Result<ClusterSet> {
    let n = m.side().ok_or(Error::MatrixShapeMismatch {
        rows: m.n_rows(),
        cols: m.n_cols(),
        responses: m.n_rows(),
    })?;
    let mut set = ClusterSet::default();
    for j in 0..n {
        let a = assign(m, &set, j, cfg)?;
        set.add(a.decision, j);
    }
    Ok(set)
}

/// Cluster a record's responses in generation order.
pub fn cluster_record(rec: &GenerationRecord, cfg: &ClusteringConfig) -> Result<ClusterSet> {
    let n = rec.n_responses();
    let m = &rec.entailment_fwd;
    if m.side() != Some(n) {
        return Err(Error::MatrixShapeMismatch {
            rows: m.n_rows(),
            cols: m.n_cols(),
            responses: n,
        });
    }
    if n == 0 {
        return Err(Error::EmptyList);
    }
    cluster_matrix(m, cfg)
}
