//! Per-query uncertainty: cluster probability masses and semantic entropy.

use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_record, ClusterSet, ClusteringConfig};
use crate::error::{Error, Result};
use crate::logspace::{log_sum_exp, normalized_sequence_logprob, sequence_logprob, LogProb};
use crate::record::{GenerationRecord, Response};

/// How a response's probability enters the cluster sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full sequence log-prob (sum of token log-probs).
    #[default]
    Unnormalized,
    /// Mean token log-prob.
    LengthNormalized,
}

impl Variant {
    pub fn response_logprob(self, r: &Response) -> Result<LogProb> {
        match self {
            Variant::Unnormalized => sequence_logprob(r),
            Variant::LengthNormalized => normalized_sequence_logprob(r),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unnormalized" | "unnorm" => Ok(Variant::Unnormalized),
            "length_normalized" | "norm" => Ok(Variant::LengthNormalized),
            other => Err(Error::InvalidConfig(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Unnormalized => "unnormalized",
            Variant::LengthNormalized => "length_normalized",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterMass {
    pub cluster_id: usize,
    /// `log p(c|x)`, the log of the summed member probabilities.
    pub log_mass: LogProb,
    /// `log_mass` renormalized over the sampled clusters.
    pub normalized_log_mass: LogProb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqScore {
    pub query_id: String,
    pub semantic_entropy: f64,
    pub variant: Variant,
    /// Number of semantic clusters, itself a baseline uncertainty signal.
    pub n_clusters: usize,
}

/// Build [`ClusterMass`] entries from raw per-cluster log-masses.
pub fn masses_from_log_masses(log_masses: &[LogProb]) -> Result<Vec<ClusterMass>> {
    let total = log_sum_exp(log_masses)?;
    Ok(log_masses
        .iter()
        .enumerate()
        .map(|(cluster_id, &log_mass)| {
            let normalized = if total.is_zero_prob() {
                // every cluster has zero mass: spread uniformly
                LogProb::new(-(log_masses.len() as f64).ln()).unwrap_or(LogProb::ZERO_PROB)
            } else {
                LogProb::new(log_mass.value() - total.value()).unwrap_or(LogProb::ZERO_PROB)
            };
            ClusterMass { cluster_id, log_mass, normalized_log_mass: normalized }
        })
        .collect())
}

/// `log p(c|x) = log sum_{s in c} p(s|x)` per cluster.
pub fn cluster_log_mass(
    rec: &GenerationRecord,
    cs: &ClusterSet,
    variant: Variant,
) -> Result<Vec<ClusterMass>> {
    if cs.n_responses != rec.n_responses() {
        return Err(Error::ShapeMismatch(format!(
            "cluster set covers {} responses, record has {}",
            cs.n_responses,
            rec.n_responses()
        )));
    }
    let mut log_masses = Vec::with_capacity(cs.len());
    for c in &cs.clusters {
        let members = c
            .member_indices
            .iter()
            .map(|&i| variant.response_logprob(&rec.responses[i]))
            .collect::<Result<Vec<_>>>()?;
        log_masses.push(log_sum_exp(&members)?);
    }
    masses_from_log_masses(&log_masses)
}

/// Entropy of the renormalized cluster distribution, in nats.
pub fn semantic_entropy(masses: &[ClusterMass]) -> Result<f64> {
    if masses.is_empty() {
        return Err(Error::EmptyList);
    }
    let h: f64 = masses
        .iter()
        .map(|m| m.normalized_log_mass)
        .filter(|l| !l.is_zero_prob())
        .map(|l| -l.prob() * l.value())
        .sum();
    // rounding can push a point mass a hair below zero
    Ok(h.max(0.0))
}

/// Cluster, weigh and score one record.
pub fn score_record(
    rec: &GenerationRecord,
    cfg: &ClusteringConfig,
    variant: Variant,
) -> Result<UqScore> {
    let cs = cluster_record(rec, cfg)?;
    let masses = cluster_log_mass(rec, &cs, variant)?;
    Ok(UqScore {
        query_id: rec.query_id.clone(),
        semantic_entropy: semantic_entropy(&masses)?,
        variant,
        n_clusters: cs.len(),
    })
}
