#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{completion, StubServer};
use serde_json::{json, Value};
use squq_core::clients::FixtureStore;
use squq_core::clustering::ClusteringConfig;
use squq_core::conformal::{prepare_all, sweep_epsilons, NonconformityScore};
use squq_core::ingest::{load_corpus, save_corpus};
use squq_core::uq::Variant;
use squq_core::{EntailmentMatrix, GenerationRecord, Response};
use tempfile::TempDir;

fn squq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_squq")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// One response per `(seq logprob, correct, group)`; entailment 1 within a
/// group, 0 across.
fn record(id: &str, responses: &[(f64, bool, usize)]) -> GenerationRecord {
    let rs = responses
        .iter()
        .map(|&(lp, ok, g)| Response::new(format!("answer {g}"), vec![lp]).with_correct(ok))
        .collect();
    let m = EntailmentMatrix::from_fn(responses.len(), |i, j| {
        if responses[i].2 == responses[j].2 {
            1.0
        } else {
            0.0
        }
    });
    GenerationRecord::new(id, format!("question {id}"), rs, m)
}

fn write_corpus(dir: &TempDir, name: &str, records: &[GenerationRecord]) -> PathBuf {
    let path = dir.path().join(name);
    save_corpus(&path, records).unwrap();
    path
}

fn read_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Nine single-response records with scores 1..9.
fn one_to_nine(dir: &TempDir) -> PathBuf {
    let recs: Vec<_> = (1..=9).map(|k| record(&format!("c{k}"), &[(-(k as f64), true, 0)])).collect();
    write_corpus(dir, "cal.jsonl", &recs)
}

#[test]
fn cluster_writes_one_line_per_record_and_manifest() {
    let dir = TempDir::new().unwrap();
    let input = write_corpus(
        &dir,
        "in.jsonl",
        &[
            record("a", &[(-1.0, true, 0), (-1.0, true, 0), (-2.0, false, 1)]),
            record("b", &[(-1.0, true, 0)]),
            record("c", &[(-1.0, true, 0), (-1.0, true, 1), (-1.0, true, 0)]),
        ],
    );
    let out = dir.path().join("clusters.jsonl");
    let o = squq(&["cluster", "--input", p(&input), "--output", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = read_lines(&out);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], json!({"query_id": "a", "assignments": [0, 0, 1]}));
    assert_eq!(lines[2]["assignments"], json!([0, 1, 0]));
    let manifest = read_json(&dir.path().join("clusters.jsonl.manifest.json"));
    assert_eq!(manifest["command"], "cluster");
    assert_eq!(manifest["config"]["alpha"], 0.5);
    assert_eq!(manifest["seed"], 0);
}

#[test]
fn cluster_all_identical_is_constant_zero() {
    let dir = TempDir::new().unwrap();
    let input = write_corpus(&dir, "in.jsonl", &[record("a", &[(-1.0, true, 0); 6])]);
    let out = dir.path().join("o.jsonl");
    assert_eq!(code(&squq(&["cluster", "--input", p(&input), "--output", p(&out)])), 0);
    assert_eq!(read_lines(&out)[0]["assignments"], json!([0, 0, 0, 0, 0, 0]));
}

#[test]
fn alpha_zero_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let input = write_corpus(&dir, "in.jsonl", &[record("a", &[(-1.0, true, 0)])]);
    let out = dir.path().join("o.jsonl");
    let o = squq(&["cluster", "--input", p(&input), "--alpha", "0", "--output", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn invalid_corpus_reports_line() {
    let dir = TempDir::new().unwrap();
    let input = write_corpus(&dir, "in.jsonl", &[record("a", &[(-1.0, true, 0)])]);
    let mut text = std::fs::read_to_string(&input).unwrap();
    text.push_str(r#"{"query_id":"b","question":"q","responses":[{"text":"x"}],"entailment_fwd":[[1.0]]}"#);
    text.push('\n');
    std::fs::write(&input, text).unwrap();
    let o = squq(&["uq", "--input", p(&input), "--output", p(&dir.path().join("u.jsonl"))]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2") && err.contains("token_logprobs"), "{err}");
}

#[test]
fn uq_entropy_fixtures() {
    let dir = TempDir::new().unwrap();
    let input = write_corpus(
        &dir,
        "in.jsonl",
        &[
            record("single", &[(-0.5, true, 0), (-1.5, true, 0)]),
            record("three", &[(-1.0, true, 0), (-1.0, false, 1), (-1.0, false, 2)]),
        ],
    );
    let out = dir.path().join("u.jsonl");
    assert_eq!(code(&squq(&["uq", "--input", p(&input), "--output", p(&out)])), 0);
    let lines = read_lines(&out);
    assert_eq!(lines[0]["semantic_entropy"], 0.0);
    assert_eq!(lines[0]["n_clusters"], 1);
    let h = lines[1]["semantic_entropy"].as_f64().unwrap();
    assert!((h - 3f64.ln()).abs() < 1e-12, "{h}");
    assert_eq!(lines[1]["n_clusters"], 3);
}

#[test]
fn calibrate_one_to_nine() {
    let dir = TempDir::new().unwrap();
    let input = one_to_nine(&dir);
    let model = dir.path().join("m.json");
    let o = squq(&["calibrate", "--input", p(&input), "--epsilon", "0.2", "--model-out", p(&model)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_json(&model);
    assert_eq!(m["threshold"], 8.0);
    assert_eq!(m["n_scores"], 9);
    assert_eq!(m["epsilon"], 0.2);
    assert_eq!(m["variant"], "unnormalized");
}

#[test]
fn calibrate_without_correct_clusters_is_infinite() {
    let dir = TempDir::new().unwrap();
    let input = write_corpus(&dir, "cal.jsonl", &[record("a", &[(-1.0, false, 0), (-1.0, true, 0)])]);
    let model = dir.path().join("m.json");
    assert_eq!(code(&squq(&["calibrate", "--input", p(&input), "--epsilon", "0.2", "--model-out", p(&model)])), 0);
    let m = read_json(&model);
    assert_eq!(m["threshold"], "inf");
    assert_eq!(m["n_scores"], 0);
}

#[test]
fn calibrate_rejects_epsilon_above_one() {
    let dir = TempDir::new().unwrap();
    let input = one_to_nine(&dir);
    let model = dir.path().join("m.json");
    let o = squq(&["calibrate", "--input", p(&input), "--epsilon", "1.2", "--model-out", p(&model)]);
    assert_eq!(code(&o), 2);
    assert!(!model.exists());
}

fn calibrated(dir: &TempDir, input: &Path, eps: &str) -> PathBuf {
    let model = dir.path().join(format!("m{eps}.json"));
    let o = squq(&["calibrate", "--input", p(input), "--epsilon", eps, "--model-out", p(&model)]);
    assert_eq!(code(&o), 0);
    model
}

#[test]
fn predict_keeps_clusters_at_or_below_threshold() {
    let dir = TempDir::new().unwrap();
    let cal = one_to_nine(&dir);
    let model = calibrated(&dir, &cal, "0.2");
    let test = write_corpus(&dir, "test.jsonl", &[record("t", &[(-1.0, true, 0), (-8.0, false, 1), (-9.0, false, 2)])]);
    let out = dir.path().join("p.jsonl");
    assert_eq!(code(&squq(&["predict", "--input", p(&test), "--model", p(&model), "--output", p(&out)])), 0);
    let line = &read_lines(&out)[0];
    assert_eq!(line["tau"], 8.0);
    let ids: Vec<u64> = line["set"].as_array().unwrap().iter().map(|e| e["cluster_id"].as_u64().unwrap()).collect();
    assert_eq!(ids, vec![0, 1]);
    assert_eq!(line["set"][1]["text"], "answer 1");
    assert_eq!(line["set"][1]["score"], 8.0);
}

#[test]
fn predict_with_infinite_threshold_keeps_every_cluster() {
    let dir = TempDir::new().unwrap();
    let cal = one_to_nine(&dir);
    // n = 9, eps = 0.05: rank 10 overflows
    let model = calibrated(&dir, &cal, "0.05");
    assert_eq!(read_json(&model)["threshold"], "inf");
    let test = write_corpus(
        &dir,
        "test.jsonl",
        &[
            record("t1", &[(-1.0, true, 0), (-50.0, false, 1), (-90.0, false, 2)]),
            record("t2", &[(-3.0, true, 0), (-3.0, true, 0)]),
        ],
    );
    let out = dir.path().join("p.jsonl");
    assert_eq!(code(&squq(&["predict", "--input", p(&test), "--model", p(&model), "--output", p(&out)])), 0);
    let lines = read_lines(&out);
    assert_eq!(lines[0]["tau"], "inf");
    assert_eq!(lines[0]["set"].as_array().unwrap().len(), 3);
    assert_eq!(lines[1]["set"].as_array().unwrap().len(), 1);
}

#[test]
fn predict_on_empty_corpus() {
    let dir = TempDir::new().unwrap();
    let model = calibrated(&dir, &one_to_nine(&dir), "0.2");
    let test = write_corpus(&dir, "empty.jsonl", &[]);
    let out = dir.path().join("p.jsonl");
    assert_eq!(code(&squq(&["predict", "--input", p(&test), "--model", p(&model), "--output", p(&out)])), 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "");
}

fn write_uq(dir: &TempDir, rows: &[(&str, f64)]) -> PathBuf {
    let path = dir.path().join("uq.jsonl");
    let text: String = rows
        .iter()
        .map(|(q, h)| format!("{}\n", json!({"query_id": q, "semantic_entropy": h, "n_clusters": 1})))
        .collect();
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn eval_perfect_uq_and_two_item_auarc() {
    let dir = TempDir::new().unwrap();
    let labels = write_corpus(&dir, "l.jsonl", &[record("good", &[(-1.0, true, 0)]), record("bad", &[(-1.0, false, 0)])]);
    let uq = write_uq(&dir, &[("good", 0.1), ("bad", 0.9)]);
    let report = dir.path().join("r");
    let o = squq(&["eval", "--labels", p(&labels), "--uq", p(&uq), "--report", p(&report), "--curves"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&dir.path().join("r.json"));
    assert_eq!(r["auroc"], 1.0);
    assert_eq!(r["auarc"], 0.75);
    assert_eq!(r["point_accuracy"], 0.5);
    let arc = std::fs::read_to_string(dir.path().join("r.arc.csv")).unwrap();
    assert!(arc.starts_with("rejection_fraction,accuracy\n0,0.5\n0.5,1\n"), "{arc}");
    // without a model there is no sweep table
    assert!(!dir.path().join("r.csv").exists());
}

#[test]
fn eval_metric_subset_and_unknown_metric() {
    let dir = TempDir::new().unwrap();
    let labels = write_corpus(&dir, "l.jsonl", &[record("a", &[(-1.0, true, 0)]), record("b", &[(-1.0, true, 0)])]);
    let report = dir.path().join("r");
    let o = squq(&["eval", "--labels", p(&labels), "--metrics", "auroc,point_accuracy", "--report", p(&report)]);
    assert_eq!(code(&o), 0);
    let r = read_json(&dir.path().join("r.json"));
    // single-class labels: AUROC undefined
    assert_eq!(r["auroc"], Value::Null);
    assert!(r.get("auarc").is_none());
    let o = squq(&["eval", "--labels", p(&labels), "--metrics", "brier", "--report", p(&report)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_sweep_reproduces_library_and_is_monotone() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let cal = dir.path().join("cal.jsonl");
    let test = dir.path().join("test.jsonl");
    assert_eq!(code(&squq(&["synth", "--n-queries", "300", "--seed", "4", "--output", p(&corpus)])), 0);
    assert_eq!(code(&squq(&["split", "--input", p(&corpus), "--seed", "4", "--cal-out", p(&cal), "--test-out", p(&test)])), 0);
    let model = calibrated(&dir, &cal, "0.2");
    let preds = dir.path().join("p.jsonl");
    assert_eq!(code(&squq(&["predict", "--input", p(&test), "--model", p(&model), "--output", p(&preds)])), 0);
    let report = dir.path().join("r");
    let o = squq(&[
        "--jobs", "2", "eval", "--labels", p(&test), "--model", p(&model), "--predictions", p(&preds),
        "--report", p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let m = read_json(&model);
    let scores: Vec<NonconformityScore> = serde_json::from_value(m["scores"].clone()).unwrap();
    let prepared = prepare_all(load_corpus(&test).unwrap(), &ClusteringConfig::default(), Variant::Unnormalized).unwrap();
    let sweep = sweep_epsilons(&scores, &prepared, &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let mut expected = String::from("epsilon,coverage,mean_set_size\n");
    for s in &sweep {
        expected.push_str(&format!("{},{},{}\n", s.epsilon, s.coverage, s.mean_set_size));
    }
    assert_eq!(csv, expected);
    let sizes: Vec<f64> = sweep.iter().map(|s| s.mean_set_size).collect();
    assert!(sizes.windows(2).all(|w| w[1] <= w[0]), "{sizes:?}");

    // the predictions file at eps = 0.2 agrees with the sweep row
    let r = read_json(&dir.path().join("r.json"));
    assert_eq!(r["predictions"]["coverage"], sweep[1].coverage);
    assert_eq!(r["predictions"]["mean_set_size"], sweep[1].mean_set_size);
}

#[test]
fn simulate_default_and_determinism() {
    let a = squq(&["simulate"]);
    assert_eq!(code(&a), 0);
    let stdout = String::from_utf8(a.stdout.clone()).unwrap();
    let cov: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("mean_coverage"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((cov - 0.8).abs() < 0.01, "{cov}");
    assert_eq!(squq(&["simulate"]).stdout, a.stdout);
    assert_ne!(squq(&["simulate", "--seed", "1"]).stdout, a.stdout);
}

#[test]
fn simulate_overflow_covers_everything() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("sim.json");
    let o = squq(&["simulate", "--n-cal", "9", "--epsilon", "0.05", "--trials", "50", "--report", p(&report)]);
    assert_eq!(code(&o), 0);
    assert_eq!(read_json(&report)["mean_coverage"], 1.0);
    assert!(dir.path().join("sim.json.manifest.json").exists());
}

#[test]
fn simulate_bad_epsilon() {
    assert_eq!(code(&squq(&["simulate", "--epsilon", "1.2"])), 2);
    assert_eq!(code(&squq(&["simulate", "--dist", "cauchy"])), 2);
}

fn questions(dir: &TempDir) -> PathBuf {
    let path = dir.path().join("q.jsonl");
    std::fs::write(
        &path,
        concat!(
            r#"{"query_id":"q1","question":"Capital of France?","references":["Paris"]}"#,
            "\n",
            r#"{"query_id":"q2","question":"Largest planet?","context":"Astronomy.","references":["Jupiter"]}"#,
            "\n"
        ),
    )
    .unwrap();
    path
}

fn sidecar_stub() -> StubServer {
    StubServer::start(|req, _| match req.path.as_str() {
        "/v1/rouge" => {
            let c = req.json()["candidate"].as_str().unwrap().to_string();
            (200, json!({"rougeL": if c.starts_with('P') || c.starts_with('J') { 1.0 } else { 0.0 }}).to_string())
        }
        _ => {
            let texts: Vec<String> = serde_json::from_value(req.json()["texts"].clone()).unwrap();
            let m: Vec<Vec<f64>> = texts
                .iter()
                .map(|a| texts.iter().map(|b| if a == b { 1.0 } else { 0.05 }).collect())
                .collect();
            (200, json!({ "matrix": m }).to_string())
        }
    })
}

#[test]
fn generate_against_stubs_defaults_to_twenty_samples() {
    let dir = TempDir::new().unwrap();
    let endpoint = StubServer::start(|_, n| {
        let text = ["Paris", "Lyon", "Jupiter", "Saturn"][n % 4];
        (200, completion(&[(text, &[-0.3, -0.4])]))
    });
    let sidecar = sidecar_stub();
    let out = dir.path().join("gen.jsonl");
    let fixtures = dir.path().join("fixtures");
    let o = squq(&[
        "generate", "--questions", p(&questions(&dir)), "--endpoint", &endpoint.url(), "--sidecar", &sidecar.url(),
        "--save-fixtures", p(&fixtures), "--output", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let recs = load_corpus(&out).unwrap();
    assert_eq!(recs.len(), 2);
    assert!(recs.iter().all(|r| r.n_responses() == 20));
    assert!(recs.iter().all(|r| r.labels().is_some()));
    assert_eq!(endpoint.hits(), 40);
    assert_eq!(recs[1].context.as_deref(), Some("Astronomy."));

    // the recorded fixtures replay offline with no network
    let replay = dir.path().join("replay.jsonl");
    let o = squq(&["generate", "--questions", p(&questions(&dir)), "--fixtures", p(&fixtures), "--output", p(&replay)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(load_corpus(&replay).unwrap(), recs);
    assert!(FixtureStore::new(&fixtures).path_for("Capital of France?").exists());
}

#[test]
fn generate_unreachable_endpoint_exits_3() {
    let dir = TempDir::new().unwrap();
    let dead = StubServer::start(|_, _| (200, "{}".into()));
    let url = dead.url();
    drop(dead);
    let o = squq(&[
        "generate", "--questions", p(&questions(&dir)), "--endpoint", &url, "--sidecar", &url, "--max-retries", "2",
        "--retry-base-ms", "5", "--output", p(&dir.path().join("g.jsonl")),
    ]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("after 3 attempt(s)"), "{err}");
}

#[test]
fn generate_missing_fixture_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let o = squq(&[
        "generate", "--questions", p(&questions(&dir)), "--fixtures", p(dir.path()), "--output",
        p(&dir.path().join("g.jsonl")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn split_and_synth_are_seeded() {
    let dir = TempDir::new().unwrap();
    let run = |seed: &str, name: &str| {
        let c = dir.path().join(format!("{name}.jsonl"));
        assert_eq!(code(&squq(&["synth", "--n-queries", "20", "--seed", seed, "--output", p(&c)])), 0);
        std::fs::read(&c).unwrap()
    };
    assert_eq!(run("3", "a"), run("3", "b"));
    assert_ne!(run("3", "a"), run("4", "c"));
    let input = dir.path().join("a.jsonl");
    let (cal, test) = (dir.path().join("cal.jsonl"), dir.path().join("test.jsonl"));
    let o = squq(&["split", "--input", p(&input), "--calibration-fraction", "0.25", "--cal-out", p(&cal), "--test-out", p(&test)]);
    assert_eq!(code(&o), 0);
    assert_eq!((load_corpus(&cal).unwrap().len(), load_corpus(&test).unwrap().len()), (5, 15));
    let m = read_json(&dir.path().join("cal.jsonl.manifest.json"));
    assert_eq!(m["config"]["split"]["strategy"], "by_query_hash");
}

#[test]
fn jobs_zero_is_usage_error() {
    assert_eq!(code(&squq(&["--jobs", "0", "simulate"])), 2);
}
