//! Monte-Carlo coverage checks and synthetic corpora.
//!
//! All randomness comes from [`SplitMix64`] streams keyed by `(seed, trial)`
//! or `(seed, query)`, so serial and parallel runs produce identical output.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate, NonconformityScore};
use crate::error::{Error, Result};
use crate::record::{EntailmentMatrix, GenerationRecord, Response};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDistribution {
    #[default]
    Uniform01,
    Exponential1,
    LogNormal01,
}

impl ScoreDistribution {
    pub fn sample(self, rng: &mut SplitMix64) -> f64 {
        match self {
            ScoreDistribution::Uniform01 => rng.next_f64(),
            ScoreDistribution::Exponential1 => rng.exponential(),
            ScoreDistribution::LogNormal01 => rng.normal().exp(),
        }
    }
}

impl std::str::FromStr for ScoreDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" | "uniform01" => Ok(ScoreDistribution::Uniform01),
            "exponential" | "exp" => Ok(ScoreDistribution::Exponential1),
            "lognormal" => Ok(ScoreDistribution::LogNormal01),
            other => Err(Error::InvalidConfig(format!("unknown distribution {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_cal: usize,
    pub n_test: usize,
    pub trials: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub distribution: ScoreDistribution,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_cal: 99,
            n_test: 100,
            trials: 2000,
            epsilon: 0.2,
            seed: 0,
            distribution: ScoreDistribution::Uniform01,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cal == 0 || self.n_test == 0 || self.trials == 0 {
            return Err(Error::InvalidConfig("n_cal, n_test and trials must be >= 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::EpsilonOutOfRange(self.epsilon));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mean_coverage: f64,
    pub per_trial: Vec<f64>,
    /// Binomial standard error over trials, `sqrt(eps (1 - eps) / trials)`.
    pub sigma: f64,
    /// `1 - eps - 3 sigma`.
    pub lower_bound: f64,
    /// `1 - eps + 1 / (n_cal + 1) + 3 sigma`.
    pub upper_bound: f64,
}

impl SimReport {
    pub fn within_bounds(&self) -> bool {
        self.mean_coverage >= self.lower_bound && self.mean_coverage <= self.upper_bound
    }
}

/// Fraction of `test` scores at or below the threshold calibrated on `cal`.
pub fn coverage_of(cal: &[f64], test: &[f64], epsilon: f64) -> Result<f64> {
    let scores = cal
        .iter()
        .map(|&s| NonconformityScore::new(s))
        .collect::<Result<Vec<_>>>()?;
    let tau = calibrate(scores, epsilon)?.threshold;
    if test.is_empty() {
        return Err(Error::EmptyList);
    }
    Ok(test.iter().filter(|&&s| s <= tau).count() as f64 / test.len() as f64)
}

/// Draw i.i.d. calibration and test scores per trial and measure how often
/// a test score falls under the calibrated threshold.
pub fn simulate_coverage(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let per_trial = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = SplitMix64::for_stream(cfg.seed, trial);
            let cal: Vec<f64> = (0..cfg.n_cal).map(|_| cfg.distribution.sample(&mut rng)).collect();
            let test: Vec<f64> = (0..cfg.n_test).map(|_| cfg.distribution.sample(&mut rng)).collect();
            coverage_of(&cal, &test, cfg.epsilon)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean_coverage = per_trial.iter().sum::<f64>() / per_trial.len() as f64;
    let sigma = (cfg.epsilon * (1.0 - cfg.epsilon) / cfg.trials as f64).sqrt();
    let target = 1.0 - cfg.epsilon;
    Ok(SimReport {
        mean_coverage,
        per_trial,
        sigma,
        lower_bound: target - 3.0 * sigma,
        upper_bound: target + 1.0 / (cfg.n_cal as f64 + 1.0) + 3.0 * sigma,
    })
}

/// How many semantic groups each synthetic query gets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSpec {
    /// Exact group sizes, summing to `n_responses`.
    Sizes(Vec<usize>),
    /// Uniform group count in `[min, max]`, sizes random (each >= 1).
    Random { min: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusConfig {
    pub n_queries: usize,
    pub n_responses: usize,
    /// Response text templates; `{answer}` is replaced by the group label.
    pub templates: Vec<String>,
    pub groups: GroupSpec,
    /// Within-group entailment is `1 - noise * u`, cross-group `noise * u`.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        SyntheticCorpusConfig {
            n_queries: 100,
            n_responses: 20,
            templates: vec![
                "{answer}".into(),
                "It is {answer}.".into(),
                "The answer is {answer}.".into(),
                "I believe it is {answer}".into(),
            ],
            groups: GroupSpec::Random { min: 1, max: 4 },
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n_responses == 0 {
            return bad("n_responses must be >= 1");
        }
        if self.templates.is_empty() {
            return bad("need at least one template");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1]");
        }
        match &self.groups {
            GroupSpec::Sizes(s) => {
                if s.is_empty() || s.contains(&0) || s.iter().sum::<usize>() != self.n_responses {
                    return bad("group sizes must be positive and sum to n_responses");
                }
            }
            GroupSpec::Random { min, max } => {
                if *min == 0 || min > max {
                    return bad("group range must satisfy 1 <= min <= max");
                }
                if *min > self.n_responses {
                    return bad("planted groups exceed n_responses");
                }
            }
        }
        Ok(())
    }
}

fn group_sizes(spec: &GroupSpec, n: usize, rng: &mut SplitMix64) -> Vec<usize> {
    match spec {
        GroupSpec::Sizes(s) => s.clone(),
        GroupSpec::Random { min, max } => {
            let hi = (*max).min(n);
            let g = min + rng.below((hi - min + 1) as u64) as usize;
            let weights: Vec<f64> = (0..g).map(|_| rng.exponential()).collect();
            let total: f64 = weights.iter().sum();
            let mut sizes = vec![1usize; g];
            for _ in g..n {
                let mut u = rng.next_f64() * total;
                let mut k = 0;
                while k + 1 < g && u >= weights[k] {
                    u -= weights[k];
                    k += 1;
                }
                sizes[k] += 1;
            }
            sizes
        }
    }
}

/// Records with planted semantic groups.
///
/// Each query gets one correct group, chosen uniformly. Responses of group
/// `g` have per-token log-probs scattered around a group level drawn from
/// `[-2.5, -0.1)`, so group masses vary between queries. Generation order
/// is a random interleaving of the groups.
pub fn generate_synthetic_corpus(cfg: &SyntheticCorpusConfig) -> Result<Vec<GenerationRecord>> {
    cfg.validate()?;
    Ok((0..cfg.n_queries as u64)
        .map(|q| synthetic_record(cfg, q))
        .collect())
}

fn synthetic_record(cfg: &SyntheticCorpusConfig, q: u64) -> GenerationRecord {
    let mut rng = SplitMix64::for_stream(cfg.seed, q);
    let n = cfg.n_responses;
    let sizes = group_sizes(&cfg.groups, n, &mut rng);
    let correct_group = rng.below(sizes.len() as u64) as usize;
    let levels: Vec<f64> = sizes.iter().map(|_| rng.uniform(-2.5, -0.1)).collect();

    let mut groups: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(g, &s)| std::iter::repeat(g).take(s))
        .collect();
    rng.shuffle(&mut groups);

    let responses = groups
        .iter()
        .map(|&g| {
            let n_tokens = 1 + rng.below(6) as usize;
            let token_logprobs = (0..n_tokens)
                .map(|_| (levels[g] * rng.uniform(0.5, 1.5)).min(0.0))
                .collect();
            let template = &cfg.templates[rng.below(cfg.templates.len() as u64) as usize];
            let text = template.replace("{answer}", &format!("answer {g}"));
            Response::new(text, token_logprobs).with_correct(g == correct_group)
        })
        .collect();

    let mut noise = || cfg.noise * rng.next_f64();
    let matrix = EntailmentMatrix::from_fn(n, |i, j| {
        if i == j {
            1.0
        } else if groups[i] == groups[j] {
            1.0 - noise()
        } else {
            noise()
        }
    });

    GenerationRecord::new(
        format!("synth-{q:05}"),
        format!("synthetic question {q}"),
        responses,
        matrix,
    )
}
