use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::Duration;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use squq_core::clients::{
    FixtureStore, Generator, GeneratorConfig, Question, RecordSource, RetryPolicy, SidecarClient, SidecarConfig,
};
use squq_core::clustering::{cluster_record, ClusteringConfig};
use squq_core::conformal::{
    calibrate, f64_or_inf, pooled_calibration_scores, prepare_all, sweep_epsilons, CalibrationModel,
    NonconformityScore, PredictionEntry, PredictionSet,
};
use squq_core::ingest::{load_corpus, save_corpus, split, SplitSpec};
use squq_core::metrics::{
    accuracy_rejection_curve, auarc, aurac, auroc, point_accuracy, query_correctness, rejection_accuracy_curve,
    CurvePoint, LabeledScore, PrimaryResponse,
};
use squq_core::simulator::{generate_synthetic_corpus, simulate_coverage, SimConfig, SyntheticCorpusConfig};
use squq_core::uq::{score_record, Variant};
use squq_core::GenerationRecord;

use crate::output::{
    with_suffix, write_json, write_jsonl, write_text, CliError, CliResult, Run,
};
use crate::{Cli, ClusterOpts, Command, EvalArgs, GenerateArgs, ScoreOpts};

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::usage(anyhow::anyhow!("--jobs must be >= 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(CliError::usage)?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Cluster { input, opts, output } => cmd_cluster(&input, &opts, &output, seed),
        Command::Uq { input, opts, output } => cmd_uq(&input, &opts, &output, seed),
        Command::Calibrate { input, epsilon, opts, model_out } => cmd_calibrate(&input, epsilon, &opts, &model_out, seed),
        Command::Predict { input, model, output } => cmd_predict(&input, &model, &output, seed),
        Command::Eval(args) => cmd_eval(&args, seed),
        Command::Simulate { n_cal, n_test, trials, epsilon, dist, report } => {
            let cfg = SimConfig {
                n_cal,
                n_test,
                trials,
                epsilon,
                seed,
                distribution: dist.parse()?,
            };
            cmd_simulate(&cfg, report.as_deref(), seed)
        }
        Command::Generate(args) => cmd_generate(&args, seed),
        Command::Synth { n_queries, n_responses, noise, output } => {
            let cfg = SyntheticCorpusConfig {
                n_queries,
                n_responses,
                noise,
                seed,
                ..SyntheticCorpusConfig::default()
            };
            cmd_synth(&cfg, &output, seed)
        }
        Command::Split { input, calibration_fraction, strategy, cal_out, test_out } => {
            let spec = SplitSpec::new(calibration_fraction, seed, strategy.parse()?)?;
            cmd_split(&input, &spec, &cal_out, &test_out, seed)
        }
    }
}

fn clustering(opts: &ClusterOpts) -> CliResult<ClusteringConfig> {
    Ok(ClusteringConfig::new(opts.alpha)?)
}

fn variant(opts: &ScoreOpts) -> CliResult<Variant> {
    Ok(opts.variant.parse()?)
}

fn read_corpus_at(path: &Path) -> CliResult<Vec<GenerationRecord>> {
    load_corpus(path).map_err(|e| CliError::from(e).context(format!("reading {}", path.display())))
}

/// Generic JSONL reader with 1-based line diagnostics.
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let file = File::open(path).map_err(|e| CliError::usage(e).context(format!("opening {}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| CliError::usage(e).context(format!("{}: line {}", path.display(), i + 1)))?;
        out.push(row);
    }
    Ok(out)
}

#[derive(Serialize)]
struct AssignmentLine<'a> {
    query_id: &'a str,
    assignments: Vec<usize>,
}

fn cmd_cluster(input: &Path, opts: &ClusterOpts, output: &Path, seed: u64) -> CliResult<()> {
    let run = Run::start("cluster", seed);
    let cfg = clustering(opts)?;
    let records = read_corpus_at(input)?;
    let lines = records
        .par_iter()
        .map(|r| {
            Ok(AssignmentLine {
                query_id: &r.query_id,
                assignments: cluster_record(r, &cfg)?.assignments(),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_jsonl(output, &lines)?;
    run.finish(json!({ "alpha": cfg.alpha }), &[input], &[output])
}

fn cmd_uq(input: &Path, opts: &ScoreOpts, output: &Path, seed: u64) -> CliResult<()> {
    let run = Run::start("uq", seed);
    let cfg = clustering(&opts.cluster)?;
    let variant = variant(opts)?;
    let records = read_corpus_at(input)?;
    let scores = records
        .par_iter()
        .map(|r| score_record(r, &cfg, variant))
        .collect::<Result<Vec<_>, _>>()?;
    write_jsonl(output, &scores)?;
    run.finish(json!({ "alpha": cfg.alpha, "variant": variant }), &[input], &[output])
}

/// On-disk calibration model, carrying the clustering knobs it was fit with.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub epsilon: f64,
    pub n_scores: usize,
    #[serde(with = "f64_or_inf")]
    pub threshold: f64,
    pub alpha: f64,
    pub variant: Variant,
    #[serde(default)]
    pub scores: Vec<NonconformityScore>,
}

impl ModelFile {
    fn load(path: &Path) -> CliResult<Self> {
        let file = File::open(path).map_err(|e| CliError::usage(e).context(format!("opening {}", path.display())))?;
        let m: ModelFile = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| CliError::usage(e).context(format!("parsing {}", path.display())))?;
        ClusteringConfig::new(m.alpha)?;
        if !m.scores.is_empty() {
            let refit = calibrate(m.scores.clone(), m.epsilon)?;
            if m.n_scores != m.scores.len() || refit.threshold != m.threshold {
                return Err(CliError::usage(anyhow::anyhow!(
                    "{}: threshold/n_scores disagree with the stored scores",
                    path.display()
                )));
            }
        }
        Ok(m)
    }

    fn model(&self) -> CalibrationModel {
        CalibrationModel {
            epsilon: self.epsilon,
            scores: self.scores.clone(),
            threshold: self.threshold,
        }
    }
}

fn cmd_calibrate(input: &Path, epsilon: f64, opts: &ScoreOpts, model_out: &Path, seed: u64) -> CliResult<()> {
    let run = Run::start("calibrate", seed);
    let cfg = clustering(&opts.cluster)?;
    let variant = variant(opts)?;
    // reject a bad epsilon before doing any work
    calibrate(Vec::new(), epsilon)?;
    let records = read_corpus_at(input)?;
    let prepared = prepare_all(records, &cfg, variant)?;
    let model = calibrate(pooled_calibration_scores(&prepared)?, epsilon)?;
    let file = ModelFile {
        epsilon,
        n_scores: model.n_scores(),
        threshold: model.threshold,
        alpha: cfg.alpha,
        variant,
        scores: model.scores,
    };
    write_json(model_out, &file)?;
    run.finish(
        json!({ "alpha": cfg.alpha, "variant": variant, "epsilon": epsilon }),
        &[input],
        &[model_out],
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionLine {
    query_id: String,
    #[serde(with = "f64_or_inf")]
    tau: f64,
    set: Vec<PredictionEntry>,
}

fn cmd_predict(input: &Path, model_path: &Path, output: &Path, seed: u64) -> CliResult<()> {
    let run = Run::start("predict", seed);
    let file = ModelFile::load(model_path)?;
    let model = file.model();
    let cfg = ClusteringConfig::new(file.alpha)?;
    let records = read_corpus_at(input)?;
    let prepared = prepare_all(records, &cfg, file.variant)?;
    let lines = prepared
        .par_iter()
        .map(|p| {
            let set = p.predict(&model)?;
            Ok(PredictionLine { query_id: set.query_id, tau: set.tau, set: set.entries })
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_jsonl(output, &lines)?;
    run.finish(
        json!({ "alpha": file.alpha, "variant": file.variant, "epsilon": file.epsilon, "threshold": threshold_json(file.threshold) }),
        &[input, model_path],
        &[output],
    )
}

fn threshold_json(t: f64) -> serde_json::Value {
    if t.is_finite() {
        json!(t)
    } else {
        json!("inf")
    }
}

#[derive(Deserialize)]
struct UqLine {
    query_id: String,
    semantic_entropy: f64,
}

const METRICS: [&str; 4] = ["auroc", "auarc", "aurac", "point_accuracy"];

fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("rejection_fraction,accuracy\n");
    for p in points {
        s.push_str(&format!("{},{}\n", p.rejection_fraction, p.accuracy));
    }
    s
}

fn cmd_eval(args: &EvalArgs, seed: u64) -> CliResult<()> {
    let run = Run::start("eval", seed);
    for m in &args.metrics {
        if !METRICS.contains(&m.as_str()) {
            return Err(CliError::usage(anyhow::anyhow!("unknown metric {m:?}; expected one of {METRICS:?}")));
        }
    }
    let cfg = clustering(&args.opts.cluster)?;
    let variant = variant(&args.opts)?;
    let records = read_corpus_at(&args.labels)?;
    let mut inputs: Vec<&Path> = vec![&args.labels];

    let uncertainty: HashMap<String, f64> = match &args.uq {
        Some(path) => {
            inputs.push(path);
            read_jsonl::<UqLine>(path)?
                .into_iter()
                .map(|l| (l.query_id, l.semantic_entropy))
                .collect()
        }
        None => records
            .par_iter()
            .map(|r| Ok((r.query_id.clone(), score_record(r, &cfg, variant)?.semantic_entropy)))
            .collect::<CliResult<_>>()?,
    };
    let items = records
        .iter()
        .map(|r| {
            let u = *uncertainty
                .get(&r.query_id)
                .ok_or_else(|| CliError::usage(anyhow::anyhow!("no UQ score for query {:?}", r.query_id)))?;
            Ok(LabeledScore::new(r.query_id.clone(), u, query_correctness(r, PrimaryResponse::MostLikely)?))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut report = serde_json::Map::new();
    report.insert("n_queries".into(), json!(items.len()));
    for m in &args.metrics {
        let value = match m.as_str() {
            // undefined when every query has the same label
            "auroc" => auroc(&items).ok(),
            "auarc" => Some(auarc(&items)?),
            "aurac" => Some(aurac(&items)?),
            _ => Some(point_accuracy(&records)?),
        };
        report.insert(m.clone(), json!(value));
    }

    if let Some(path) = &args.predictions {
        inputs.push(path);
        let by_id: HashMap<&str, &GenerationRecord> = records.iter().map(|r| (r.query_id.as_str(), r)).collect();
        let lines: Vec<PredictionLine> = read_jsonl(path)?;
        let mut covered = 0usize;
        let mut size = 0usize;
        for line in &lines {
            let rec = by_id
                .get(line.query_id.as_str())
                .ok_or_else(|| CliError::usage(anyhow::anyhow!("prediction for unknown query {:?}", line.query_id)))?;
            let set = PredictionSet { query_id: line.query_id.clone(), tau: line.tau, entries: line.set.clone() };
            covered += usize::from(set.contains_correct(rec)?);
            size += set.len();
        }
        let n = lines.len().max(1) as f64;
        report.insert(
            "predictions".into(),
            json!({ "n": lines.len(), "coverage": covered as f64 / n, "mean_set_size": size as f64 / n }),
        );
    }

    let mut outputs = vec![with_suffix(&args.report, "json")];
    if let Some(path) = &args.model {
        inputs.push(path);
        let file = ModelFile::load(path)?;
        if file.scores.is_empty() && file.n_scores > 0 {
            return Err(CliError::usage(anyhow::anyhow!("{}: model has no stored scores to sweep", path.display())));
        }
        let test = prepare_all(records.clone(), &ClusteringConfig::new(file.alpha)?, file.variant)?;
        let sweep = sweep_epsilons(&file.scores, &test, &args.epsilons)?;
        let mut csv = String::from("epsilon,coverage,mean_set_size\n");
        for p in &sweep {
            csv.push_str(&format!("{},{},{}\n", p.epsilon, p.coverage, p.mean_set_size));
        }
        let csv_path = with_suffix(&args.report, "csv");
        write_text(&csv_path, &csv)?;
        outputs.push(csv_path);
        report.insert("sweep".into(), serde_json::to_value(&sweep)?);
    }
    if args.curves {
        for (ext, points) in [
            ("arc.csv", accuracy_rejection_curve(&items)?),
            ("rac.csv", rejection_accuracy_curve(&items)?),
        ] {
            let p = with_suffix(&args.report, ext);
            write_text(&p, &curve_csv(&points))?;
            outputs.push(p);
        }
    }
    write_json(&outputs[0], &report)?;
    let out_refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    run.finish(
        json!({
            "alpha": cfg.alpha,
            "variant": variant,
            "epsilons": args.epsilons,
            "metrics": args.metrics,
            "primary_response": PrimaryResponse::MostLikely,
        }),
        &inputs,
        &out_refs,
    )
}

fn cmd_simulate(cfg: &SimConfig, report_path: Option<&Path>, seed: u64) -> CliResult<()> {
    let run = Run::start("simulate", seed);
    let report = simulate_coverage(cfg)?;
    println!("epsilon       {}", cfg.epsilon);
    println!("target        {}", 1.0 - cfg.epsilon);
    println!("mean_coverage {:.6}", report.mean_coverage);
    println!("sigma         {:.6}", report.sigma);
    println!("ci_3sigma     [{:.6}, {:.6}]", report.lower_bound, report.upper_bound);
    if let Some(path) = report_path {
        write_json(path, &report)?;
        run.finish(serde_json::to_value(cfg)?, &[], &[path])?;
    }
    if report.mean_coverage < report.lower_bound {
        return Err(CliError::self_check(format!(
            "mean coverage {:.6} below 1 - eps - 3 sigma = {:.6}",
            report.mean_coverage, report.lower_bound
        )));
    }
    Ok(())
}

fn cmd_generate(args: &GenerateArgs, seed: u64) -> CliResult<()> {
    let run = Run::start("generate", seed);
    let questions: Vec<Question> = read_jsonl(&args.questions)?;
    let retry = RetryPolicy {
        max_retries: args.max_retries,
        base_delay: Duration::from_millis(args.retry_base_ms),
        seed,
        ..RetryPolicy::default()
    };
    let timeout = Duration::from_secs(args.timeout_secs);
    let source = match &args.fixtures {
        Some(dir) => RecordSource::Offline(FixtureStore::new(dir)),
        None => RecordSource::Live {
            generator: Generator::new(GeneratorConfig {
                base_url: args.endpoint.clone(),
                api_key_env: args.api_key_env.clone(),
                model_name: args.model_name.clone(),
                n_samples: args.n,
                temperature: args.temperature,
                max_tokens: args.max_tokens,
                timeout,
                retry: retry.clone(),
                batch_with_n: args.batch_with_n,
                max_in_flight: args.max_in_flight,
                ..GeneratorConfig::default()
            })?,
            sidecar: SidecarClient::new(SidecarConfig {
                base_url: args.sidecar.clone(),
                timeout,
                retry: retry.clone(),
                ..SidecarConfig::default()
            })?,
        },
    };
    let records = questions
        .par_iter()
        .map(|q| {
            source
                .build_record(q)
                .map_err(|e| CliError::from(e).context(format!("query {:?}", q.query_id)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if let Some(dir) = &args.save_fixtures {
        let store = FixtureStore::new(dir);
        for r in &records {
            store.store(r)?;
        }
    }
    save_corpus(&args.output, &records)?;
    run.finish(
        json!({
            "endpoint": args.endpoint,
            "sidecar": args.sidecar,
            "n": args.n,
            "model_name": args.model_name,
            "temperature": args.temperature,
            "max_tokens": args.max_tokens,
            "api_key_env": args.api_key_env,
            "retry": retry,
            "max_in_flight": args.max_in_flight,
            "batch_with_n": args.batch_with_n,
            "fixtures": args.fixtures,
        }),
        &[&args.questions],
        &[&args.output],
    )
}

fn cmd_synth(cfg: &SyntheticCorpusConfig, output: &Path, seed: u64) -> CliResult<()> {
    let run = Run::start("synth", seed);
    let records = generate_synthetic_corpus(cfg)?;
    save_corpus(output, &records)?;
    run.finish(serde_json::to_value(cfg)?, &[], &[output])
}

fn cmd_split(input: &Path, spec: &SplitSpec, cal_out: &Path, test_out: &Path, seed: u64) -> CliResult<()> {
    let run = Run::start("split", seed);
    let records = read_corpus_at(input)?;
    let (cal, test) = split(records, spec)?;
    save_corpus(cal_out, &cal)?;
    save_corpus(test_out, &test)?;
    run.finish(
        json!({ "split": spec, "n_calibration": cal.len(), "n_test": test.len() }),
        &[input],
        &[cal_out, test_out],
    )
}
