//! Inductive conformal prediction over semantic clusters.
//!
//! The nonconformity score of a cluster is `-log p(c|x)` using the
//! unnormalized cluster mass. Calibration pools the scores of every
//! calibration cluster whose responses are all correct and takes the
//! `ceil((n + 1)(1 - eps))`-th smallest as the threshold `tau`. A test
//! cluster qualifies when its score is `<= tau`, and contributes its first
//! response to the prediction set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_record, Cluster, ClusterSet, ClusteringConfig};
use crate::error::{Error, Result};
use crate::record::GenerationRecord;
use crate::uq::{cluster_log_mass, ClusterMass, Variant};

/// `-log p(c|x)`; `+inf` for a zero-mass cluster. Never NaN.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NonconformityScore(#[serde(with = "f64_or_inf")] f64);

impl NonconformityScore {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() {
            return Err(Error::NonFiniteScore(value));
        }
        Ok(NonconformityScore(value))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn nonconformity(mass: &ClusterMass) -> NonconformityScore {
    NonconformityScore(-mass.log_mass.value())
}

/// 1-based rank into the sorted calibration scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantileRank {
    Rank(usize),
    /// Rank exceeds the sample; the threshold is `+inf`.
    Overflow,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon < 1.0 {
        Ok(())
    } else {
        Err(Error::EpsilonOutOfRange(epsilon))
    }
}

/// `q = ceil((n + 1)(1 - eps))`, or [`QuantileRank::Overflow`] when `q > n`.
///
/// Products that land within floating-point noise of an integer are snapped
/// to it first, so `(9 + 1) * (1 - 0.7)` gives 3 and not 4.
pub fn quantile_rank(n: usize, epsilon: f64) -> Result<QuantileRank> {
    check_epsilon(epsilon)?;
    let x = (n as f64 + 1.0) * (1.0 - epsilon);
    let nearest = x.round();
    let q = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        x.ceil()
    } as usize;
    Ok(if q > n { QuantileRank::Overflow } else { QuantileRank::Rank(q.max(1)) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub epsilon: f64,
    /// Ascending.
    pub scores: Vec<NonconformityScore>,
    /// `tau`; `+inf` on overflow or an empty calibration set.
    #[serde(with = "f64_or_inf")]
    pub threshold: f64,
}

impl CalibrationModel {
    pub fn n_scores(&self) -> usize {
        self.scores.len()
    }
}

pub fn calibrate(mut cal_scores: Vec<NonconformityScore>, epsilon: f64) -> Result<CalibrationModel> {
    check_epsilon(epsilon)?;
    cal_scores.sort_by(|a, b| a.0.total_cmp(&b.0));
    let threshold = threshold_of_sorted(&cal_scores, epsilon)?;
    Ok(CalibrationModel { epsilon, scores: cal_scores, threshold })
}

fn threshold_of_sorted(sorted: &[NonconformityScore], epsilon: f64) -> Result<f64> {
    Ok(match quantile_rank(sorted.len(), epsilon)? {
        QuantileRank::Rank(q) => sorted[q - 1].0,
        QuantileRank::Overflow => f64::INFINITY,
    })
}

/// Clusters whose members are all labelled correct.
pub fn filter_calibration_clusters<'a>(
    rec: &GenerationRecord,
    cs: &'a ClusterSet,
) -> Result<Vec<&'a Cluster>> {
    let labels = rec
        .labels()
        .ok_or_else(|| Error::MissingLabels(rec.query_id.clone()))?;
    if labels.len() != cs.n_responses {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} clustered responses",
            labels.len(),
            cs.n_responses
        )));
    }
    Ok(cs
        .clusters
        .iter()
        .filter(|c| c.member_indices.iter().all(|&i| labels[i]))
        .collect())
}

/// A record with its clustering and cluster masses computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRecord {
    pub record: GenerationRecord,
    pub clusters: ClusterSet,
    pub masses: Vec<ClusterMass>,
}

impl PreparedRecord {
    pub fn new(record: GenerationRecord, cfg: &ClusteringConfig, variant: Variant) -> Result<Self> {
        let clusters = cluster_record(&record, cfg)?;
        let masses = cluster_log_mass(&record, &clusters, variant)?;
        Ok(PreparedRecord { record, clusters, masses })
    }

    /// Nonconformity scores of this record's all-correct clusters.
    pub fn calibration_scores(&self) -> Result<Vec<NonconformityScore>> {
        let kept = filter_calibration_clusters(&self.record, &self.clusters)?;
        Ok(kept.iter().map(|c| nonconformity(&self.masses[c.id])).collect())
    }
}

pub fn prepare_all(
    records: Vec<GenerationRecord>,
    cfg: &ClusteringConfig,
    variant: Variant,
) -> Result<Vec<PreparedRecord>> {
    records
        .into_par_iter()
        .map(|r| PreparedRecord::new(r, cfg, variant))
        .collect()
}

/// Pool qualified-cluster scores across all calibration records.
pub fn pooled_calibration_scores(records: &[PreparedRecord]) -> Result<Vec<NonconformityScore>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(r.calibration_scores()?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub cluster_id: usize,
    /// Generation index of the representative response.
    pub response_index: usize,
    pub text: String,
    #[serde(with = "f64_or_inf")]
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub query_id: String,
    #[serde(with = "f64_or_inf")]
    pub tau: f64,
    pub entries: Vec<PredictionEntry>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Whether any representative response is labelled correct in `rec`.
    pub fn contains_correct(&self, rec: &GenerationRecord) -> Result<bool> {
        let mut any = false;
        for e in &self.entries {
            let r = rec.responses.get(e.response_index).ok_or(Error::IndexOutOfRange {
                index: e.response_index,
                len: rec.n_responses(),
            })?;
            any |= r.label().ok_or_else(|| Error::MissingLabels(rec.query_id.clone()))?;
        }
        Ok(any)
    }
}

/// First member of every cluster whose score is `<= tau`, in cluster
/// creation order.
pub fn predict_set(
    rec: &GenerationRecord,
    cs: &ClusterSet,
    masses: &[ClusterMass],
    model: &CalibrationModel,
) -> Result<PredictionSet> {
    predict_with_threshold(rec, cs, masses, model.threshold)
}

fn predict_with_threshold(
    rec: &GenerationRecord,
    cs: &ClusterSet,
    masses: &[ClusterMass],
    tau: f64,
) -> Result<PredictionSet> {
    if masses.len() != cs.len() || cs.n_responses != rec.n_responses() {
        return Err(Error::ShapeMismatch(format!(
            "{} masses for {} clusters over {} of {} responses",
            masses.len(),
            cs.len(),
            cs.n_responses,
            rec.n_responses()
        )));
    }
    let mut entries = Vec::new();
    for (c, m) in cs.clusters.iter().zip(masses) {
        let score = nonconformity(m).value();
        if score <= tau {
            let first = c.first_member().ok_or(Error::EmptyCluster)?;
            entries.push(PredictionEntry {
                cluster_id: c.id,
                response_index: first,
                text: rec.responses[first].text.clone(),
                score,
            });
        }
    }
    Ok(PredictionSet { query_id: rec.query_id.clone(), tau, entries })
}

impl PreparedRecord {
    pub fn predict(&self, model: &CalibrationModel) -> Result<PredictionSet> {
        predict_set(&self.record, &self.clusters, &self.masses, model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    #[serde(with = "f64_or_inf")]
    pub tau: f64,
    pub n_calibration: usize,
    /// Fraction of test records whose set holds a correct response.
    pub coverage: f64,
    pub mean_set_size: f64,
}

/// Coverage and mean set size over test records at one threshold.
pub fn evaluate_threshold(test: &[PreparedRecord], tau: f64) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut covered = 0usize;
    let mut total_size = 0usize;
    for t in test {
        let set = predict_with_threshold(&t.record, &t.clusters, &t.masses, tau)?;
        covered += usize::from(set.contains_correct(&t.record)?);
        total_size += set.len();
    }
    let n = test.len() as f64;
    Ok((covered as f64 / n, total_size as f64 / n))
}

/// Recalibrate at each epsilon and evaluate on the test records.
pub fn sweep_epsilons(
    cal_scores: &[NonconformityScore],
    test: &[PreparedRecord],
    epsilons: &[f64],
) -> Result<Vec<SweepPoint>> {
    for &e in epsilons {
        check_epsilon(e)?;
    }
    let mut sorted = cal_scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    epsilons
        .par_iter()
        .map(|&epsilon| {
            let tau = threshold_of_sorted(&sorted, epsilon)?;
            let (coverage, mean_set_size) = evaluate_threshold(test, tau)?;
            Ok(SweepPoint {
                epsilon,
                tau,
                n_calibration: sorted.len(),
                coverage,
                mean_set_size,
            })
        })
        .collect()
}

/// Finite floats as JSON numbers; `+inf` / `-inf` as the strings `"inf"` /
/// `"-inf"`.
pub mod f64_or_inf {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Wire {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Wire::deserialize(d)? {
            Wire::Num(v) => Ok(v),
            Wire::Str(s) => match s.as_str() {
                "inf" | "+inf" | "Infinity" => Ok(f64::INFINITY),
                "-inf" | "-Infinity" => Ok(f64::NEG_INFINITY),
                _ => Err(D::Error::custom(format!("expected number or \"inf\", got {s:?}"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logspace::LogProb;
    use crate::record::{EntailmentMatrix, Response};
    use crate::uq::masses_from_log_masses;
    use proptest::prelude::*;

    fn scores(v: &[f64]) -> Vec<NonconformityScore> {
        v.iter().map(|&x| NonconformityScore::new(x).unwrap()).collect()
    }

    fn mass(p: f64) -> ClusterMass {
        masses_from_log_masses(&[LogProb::from_prob(p).unwrap()]).unwrap()[0]
    }

    #[test]
    fn nonconformity_examples() {
        assert!((nonconformity(&mass(0.5)).value() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(nonconformity(&mass(1.0)).value(), 0.0);
        assert_eq!(nonconformity(&mass(0.0)).value(), f64::INFINITY);
    }

    #[test]
    fn quantile_rank_examples() {
        assert_eq!(quantile_rank(9, 0.2).unwrap(), QuantileRank::Rank(8));
        assert_eq!(quantile_rank(9, 0.05).unwrap(), QuantileRank::Overflow);
        assert_eq!(quantile_rank(19, 0.5).unwrap(), QuantileRank::Rank(10));
        assert_eq!(quantile_rank(9, 0.7).unwrap(), QuantileRank::Rank(3));
        assert_eq!(quantile_rank(0, 0.5).unwrap(), QuantileRank::Overflow);
        assert_eq!(quantile_rank(5, 1.2), Err(Error::EpsilonOutOfRange(1.2)));
        assert_eq!(quantile_rank(5, 0.0), Err(Error::EpsilonOutOfRange(0.0)));
    }

    #[test]
    fn calibrate_examples() {
        let one_to_nine: Vec<f64> = (1..=9).rev().map(f64::from).collect();
        let m = calibrate(scores(&one_to_nine), 0.2).unwrap();
        assert_eq!(m.threshold, 8.0);
        assert!(m.scores.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(calibrate(scores(&one_to_nine), 0.05).unwrap().threshold, f64::INFINITY);
        assert_eq!(calibrate(vec![], 0.3).unwrap().threshold, f64::INFINITY);
        assert!(calibrate(vec![], 1.0).is_err());
    }

    #[test]
    fn threshold_serializes_infinity_as_string() {
        let m = calibrate(vec![], 0.3).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"epsilon":0.3,"scores":[],"threshold":"inf"}"#);
        let back: CalibrationModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }

    fn labelled_record(correct: &[bool], assignments: &[usize], probs: &[f64]) -> (GenerationRecord, ClusterSet) {
        let responses = correct
            .iter()
            .zip(probs)
            .enumerate()
            .map(|(i, (&c, &p))| Response::new(format!("r{i}"), vec![p.ln()]).with_correct(c))
            .collect();
        let rec = GenerationRecord::new("q", "?", responses, EntailmentMatrix::constant(correct.len(), 0.0));
        (rec, ClusterSet::from_assignments(assignments).unwrap())
    }

    #[test]
    fn calibration_filter_examples() {
        let (rec, cs) = labelled_record(&[true, true, true, false], &[0, 0, 1, 1], &[0.1; 4]);
        let kept = filter_calibration_clusters(&rec, &cs).unwrap();
        assert_eq!(kept.iter().map(|c| c.id).collect::<Vec<_>>(), vec![0]);

        let (rec, cs) = labelled_record(&[false, true], &[0, 0], &[0.1; 2]);
        assert!(filter_calibration_clusters(&rec, &cs).unwrap().is_empty());

        let (mut rec, cs) = labelled_record(&[true], &[0], &[0.1]);
        rec.responses[0].correct = None;
        assert_eq!(filter_calibration_clusters(&rec, &cs), Err(Error::MissingLabels("q".into())));
    }

    #[test]
    fn predict_set_examples() {
        // cluster scores 7.5 and 8.5 against tau = 8
        let (rec, cs) = labelled_record(&[true, false, true], &[0, 1, 0], &[0.5, 0.5, 0.5]);
        let masses = masses_from_log_masses(&[
            LogProb::new(-7.5).unwrap(),
            LogProb::new(-8.5).unwrap(),
        ])
        .unwrap();
        let model = CalibrationModel { epsilon: 0.2, scores: vec![], threshold: 8.0 };
        let set = predict_set(&rec, &cs, &masses, &model).unwrap();
        assert_eq!(set.entries.len(), 1);
        assert_eq!((set.entries[0].cluster_id, set.entries[0].response_index), (0, 0));
        assert_eq!(set.entries[0].score, 7.5);

        let open = CalibrationModel { threshold: f64::INFINITY, ..model.clone() };
        assert_eq!(predict_set(&rec, &cs, &masses, &open).unwrap().len(), cs.len());

        let dead = masses_from_log_masses(&[LogProb::ZERO_PROB, LogProb::ZERO_PROB]).unwrap();
        assert!(predict_set(&rec, &cs, &dead, &model).unwrap().is_empty());

        assert!(matches!(
            predict_set(&rec, &cs, &masses[..1], &model),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn tie_at_threshold_is_included() {
        let (rec, cs) = labelled_record(&[true], &[0], &[1.0]);
        let masses = masses_from_log_masses(&[LogProb::new(-2.0).unwrap()]).unwrap();
        let model = CalibrationModel { epsilon: 0.1, scores: vec![], threshold: 2.0 };
        assert_eq!(predict_set(&rec, &cs, &masses, &model).unwrap().len(), 1);
    }

    #[test]
    fn sweep_single_covered_record() {
        let (rec, _) = labelled_record(&[true, false], &[0, 1], &[0.6, 0.3]);
        let prepared = PreparedRecord::new(rec, &ClusteringConfig::default(), Variant::Unnormalized).unwrap();
        let pts = sweep_epsilons(&[], &[prepared], &[0.5, 0.1]).unwrap();
        assert!(pts.iter().all(|p| p.coverage == 1.0 && p.tau == f64::INFINITY));
    }

    #[test]
    fn sweep_is_monotone_in_epsilon() {
        let cal = scores(&(1..=19).map(f64::from).collect::<Vec<_>>());
        let (rec, _) = labelled_record(&[true, false, true, false], &[0, 1, 2, 3], &[0.3, 1e-4, 1e-8, 0.05]);
        let prepared = PreparedRecord::new(rec, &ClusteringConfig::default(), Variant::Unnormalized).unwrap();
        let pts = sweep_epsilons(&cal, &[prepared], &[0.1, 0.5]).unwrap();
        assert!(pts[1].tau <= pts[0].tau);
        assert!(pts[1].mean_set_size <= pts[0].mean_set_size);
    }

    proptest! {
        #[test]
        fn tau_non_increasing_in_epsilon(
            raw in prop::collection::vec(0.0f64..50.0, 0..60),
            e1 in 0.01f64..0.99,
            e2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let t_lo = calibrate(scores(&raw), lo).unwrap().threshold;
            let t_hi = calibrate(scores(&raw), hi).unwrap().threshold;
            prop_assert!(t_hi <= t_lo);
        }

        #[test]
        fn set_size_non_increasing_in_epsilon(
            cal in prop::collection::vec(0.0f64..20.0, 1..40),
            lps in prop::collection::vec(-20.0f64..0.0, 1..12),
            e1 in 0.01f64..0.99,
            e2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let n = lps.len();
            let responses = lps.iter().map(|&l| Response::new("r", vec![l]).with_correct(true)).collect();
            let rec = GenerationRecord::new("q", "?", responses, EntailmentMatrix::constant(n, 0.0));
            let p = PreparedRecord::new(rec, &ClusteringConfig::default(), Variant::Unnormalized).unwrap();
            let a = p.predict(&calibrate(scores(&cal), lo).unwrap()).unwrap();
            let b = p.predict(&calibrate(scores(&cal), hi).unwrap()).unwrap();
            prop_assert!(b.len() <= a.len());
            // one entry per cluster, each the cluster's first member
            for e in &a.entries {
                prop_assert_eq!(Some(e.response_index), p.clusters.clusters[e.cluster_id].first_member());
            }
        }
    }
}
