//! Blocking HTTP clients for the generation endpoint and the NLI sidecar,
//! and assembly of live or fixture-backed [`GenerationRecord`]s.
//!
//! Generation speaks the OpenAI-compatible `POST /v1/completions` contract
//! and insists on per-token log-probs. The sidecar serves directional
//! entailment matrices (`POST /v1/entailment/matrix`), single pairs
//! (`POST /v1/entailment`), RougeL (`POST /v1/rouge`) and `GET /healthz`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::ingest::{validate_at, IngestError};
use crate::record::{EntailmentMatrix, GenerationRecord, Response};
use crate::rng::{fnv1a64, SplitMix64};

pub const DEFAULT_API_KEY_ENV: &str = "SQUQ_API_KEY";
pub const DEFAULT_N_SAMPLES: usize = 20;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("endpoint failed after {attempts} attempt(s): {message}")]
    Endpoint { attempts: u32, message: String },
    #[error("endpoint returned no token log-probs")]
    MissingLogprobs,
    #[error("sidecar unavailable after {attempts} attempt(s): {message}")]
    SidecarUnavailable { attempts: u32, message: String },
    #[error("sidecar returned a {rows}x{cols} matrix for {expected} texts")]
    Shape { expected: usize, rows: usize, cols: usize },
    #[error("malformed response: {0}")]
    InvalidResponse(String),
    #[error("no fixture for question (expected {0})")]
    FixtureMissing(PathBuf),
    #[error(transparent)]
    Record(#[from] IngestError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Exponential backoff with symmetric multiplicative jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    /// Fraction in `[0, 1)`; the delay is scaled by `1 + jitter * u`,
    /// `u` uniform in `[-1, 1)`.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(20),
            jitter: 0.25,
            seed: 0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry `k` (0-based): `min(base * 2^k, cap)` jittered.
    pub fn delay(&self, k: u32, rng: &mut SplitMix64) -> Duration {
        let nominal = self.nominal_delay(k).as_secs_f64();
        let u = rng.uniform(-1.0, 1.0);
        Duration::from_secs_f64((nominal * (1.0 + self.jitter * u)).max(0.0))
    }

    pub fn nominal_delay(&self, k: u32) -> Duration {
        let factor = 2f64.powi(k.min(62) as i32);
        let d = self.base_delay.as_secs_f64() * factor;
        Duration::from_secs_f64(d.min(self.max_delay.as_secs_f64()))
    }
}

enum Failure {
    Auth(u16),
    /// Non-retryable HTTP status.
    Rejected { status: u16, body: String },
    Exhausted { attempts: u32, last: String },
    Decode(String),
}

fn is_transient(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

struct Http {
    agent: ureq::Agent,
    retry: RetryPolicy,
    calls: AtomicU64,
}

impl Http {
    fn new(timeout: Duration, retry: RetryPolicy) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Http { agent, retry, calls: AtomicU64::new(0) }
    }

    fn post(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, Failure> {
        self.send(url, |agent| {
            let mut req = agent.post(url);
            if let Some(key) = bearer {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            req.send_json(body)
        })
    }

    fn get(&self, url: &str) -> Result<(u16, Value), Failure> {
        let mut resp = self
            .agent
            .get(url)
            .call()
            .map_err(|e| Failure::Exhausted { attempts: 1, last: e.to_string() })?;
        let status = resp.status().as_u16();
        let v = resp
            .body_mut()
            .read_json::<Value>()
            .unwrap_or(Value::Null);
        Ok((status, v))
    }

    fn send(
        &self,
        url: &str,
        issue: impl Fn(&ureq::Agent) -> Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<Value, Failure> {
        let call = self.calls.fetch_add(1, Ordering::Relaxed);
        let mut rng = SplitMix64::for_stream(self.retry.seed, call);
        let mut attempt = 0u32;
        loop {
            let last = match issue(&self.agent) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        return resp
                            .body_mut()
                            .read_json::<Value>()
                            .map_err(|e| Failure::Decode(format!("{url}: {e}")));
                    }
                    let body = resp.body_mut().read_to_string().unwrap_or_default();
                    if status == 401 || status == 403 {
                        return Err(Failure::Auth(status));
                    }
                    if !is_transient(status) {
                        return Err(Failure::Rejected { status, body });
                    }
                    format!("HTTP {status} from {url}")
                }
                Err(e) => format!("{url}: {e}"),
            };
            if attempt >= self.retry.max_retries {
                return Err(Failure::Exhausted { attempts: attempt + 1, last });
            }
            std::thread::sleep(self.retry.delay(attempt, &mut rng));
            attempt += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub base_url: String,
    /// Environment variable holding the API key; unset means no auth header.
    pub api_key_env: String,
    pub model_name: String,
    pub n_samples: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    /// `{context}` and `{question}` placeholders.
    pub prompt_template: String,
    /// Ask for all samples in one request via the `n` field.
    pub batch_with_n: bool,
    pub max_in_flight: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_url: "http://127.0.0.1:8000".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            model_name: "default".into(),
            n_samples: DEFAULT_N_SAMPLES,
            temperature: 1.0,
            max_tokens: 64,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            prompt_template: "{context}\n\nQuestion: {question}\nAnswer:".into(),
            batch_with_n: false,
            max_in_flight: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.n_samples == 0 {
            return Err(ClientError::Config("n_samples must be >= 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ClientError::Config("max_in_flight must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(ClientError::Config("temperature must be >= 0".into()));
        }
        Ok(())
    }

    pub fn render_prompt(&self, question: &str, context: Option<&str>) -> String {
        let rendered = self
            .prompt_template
            .replace("{context}", context.unwrap_or(""))
            .replace("{question}", question);
        if context.is_none() {
            rendered.trim_start().to_string()
        } else {
            rendered
        }
    }
}

/// Client for an OpenAI-compatible completion endpoint.
pub struct Generator {
    cfg: GeneratorConfig,
    http: Http,
    api_key: Option<String>,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self, ClientError> {
        cfg.validate()?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        let http = Http::new(cfg.timeout, cfg.retry.clone());
        Ok(Generator { cfg, http, api_key })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    fn completions(&self, prompt: &str, n: usize) -> Result<Vec<Response>, ClientError> {
        let url = format!("{}/v1/completions", self.cfg.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.cfg.model_name,
            "prompt": prompt,
            "max_tokens": self.cfg.max_tokens,
            "temperature": self.cfg.temperature,
            "logprobs": true,
            "n": n,
        });
        let v = self
            .http
            .post(&url, self.api_key.as_deref(), &body)
            .map_err(|f| match f {
                Failure::Auth(status) => ClientError::Auth { status },
                Failure::Rejected { status, body } => ClientError::Endpoint {
                    attempts: 1,
                    message: format!("HTTP {status}: {body}"),
                },
                Failure::Exhausted { attempts, last } => ClientError::Endpoint { attempts, message: last },
                Failure::Decode(m) => ClientError::InvalidResponse(m),
            })?;
        parse_choices(&v)
    }

    /// Sample `n_samples` responses. Indices follow arrival order.
    pub fn sample_responses(
        &self,
        question: &str,
        context: Option<&str>,
    ) -> Result<Vec<Response>, ClientError> {
        let prompt = self.cfg.render_prompt(question, context);
        let n = self.cfg.n_samples;
        let mut out = if self.cfg.batch_with_n {
            let got = self.completions(&prompt, n)?;
            if got.len() != n {
                return Err(ClientError::InvalidResponse(format!(
                    "asked for {n} choices, got {}",
                    got.len()
                )));
            }
            got
        } else {
            self.fan_out(&prompt, n)?
        };
        for (i, r) in out.iter_mut().enumerate() {
            r.index = i;
        }
        Ok(out)
    }

    fn fan_out(&self, prompt: &str, n: usize) -> Result<Vec<Response>, ClientError> {
        let next = AtomicUsize::new(0);
        let arrived: Mutex<Vec<Response>> = Mutex::new(Vec::with_capacity(n));
        let first_error: Mutex<Option<ClientError>> = Mutex::new(None);
        let workers = self.cfg.max_in_flight.min(n);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    if next.fetch_add(1, Ordering::SeqCst) >= n
                        || first_error.lock().unwrap().is_some()
                    {
                        break;
                    }
                    match self.completions(prompt, 1) {
                        Ok(mut rs) if rs.len() == 1 => arrived.lock().unwrap().push(rs.remove(0)),
                        Ok(rs) => {
                            let e = ClientError::InvalidResponse(format!("expected 1 choice, got {}", rs.len()));
                            first_error.lock().unwrap().get_or_insert(e);
                        }
                        Err(e) => {
                            first_error.lock().unwrap().get_or_insert(e);
                        }
                    }
                });
            }
        });
        if let Some(e) = first_error.into_inner().unwrap() {
            return Err(e);
        }
        Ok(arrived.into_inner().unwrap())
    }
}

/// Read `choices[*].text` and `choices[*].logprobs.token_logprobs`.
pub fn parse_choices(v: &Value) -> Result<Vec<Response>, ClientError> {
    let choices = v
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| ClientError::InvalidResponse("missing `choices` array".into()))?;
    choices
        .iter()
        .map(|c| {
            let text = c
                .get("text")
                .and_then(Value::as_str)
                .ok_or_else(|| ClientError::InvalidResponse("choice without `text`".into()))?;
            let lps = c
                .get("logprobs")
                .and_then(|l| l.get("token_logprobs"))
                .and_then(Value::as_array)
                .filter(|a| !a.is_empty())
                .ok_or(ClientError::MissingLogprobs)?;
            let token_logprobs = lps
                .iter()
                .map(|x| x.as_f64().map(|f| f.min(0.0)).ok_or(ClientError::MissingLogprobs))
                .collect::<Result<Vec<f64>, _>>()?;
            Ok(Response::new(text, token_logprobs))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarConfig {
    pub base_url: String,
    pub timeout: Duration,
    /// Most texts sent in one matrix request.
    pub batch_size: usize,
    pub retry: RetryPolicy,
}

impl Default for SidecarConfig {
    fn default() -> Self {
        SidecarConfig {
            base_url: "http://127.0.0.1:8765".into(),
            timeout: Duration::from_secs(60),
            batch_size: 64,
            retry: RetryPolicy { max_retries: 2, ..RetryPolicy::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntailmentProbs {
    pub entail: f64,
    pub neutral: f64,
    pub contradict: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_name: String,
    pub stub: bool,
}

/// Client for the NLI / RougeL scoring sidecar.
pub struct SidecarClient {
    cfg: SidecarConfig,
    http: Http,
}

impl SidecarClient {
    pub fn new(cfg: SidecarConfig) -> Result<Self, ClientError> {
        if cfg.batch_size == 0 {
            return Err(ClientError::Config("batch_size must be >= 1".into()));
        }
        let http = Http::new(cfg.timeout, cfg.retry.clone());
        Ok(SidecarClient { cfg, http })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.cfg.base_url.trim_end_matches('/'))
    }

    fn post(&self, path: &str, body: Value) -> Result<Value, ClientError> {
        self.http.post(&self.url(path), None, &body).map_err(|f| match f {
            Failure::Auth(status) => ClientError::Auth { status },
            Failure::Rejected { status, body } => ClientError::InvalidResponse(format!("HTTP {status}: {body}")),
            Failure::Exhausted { attempts, last } => ClientError::SidecarUnavailable { attempts, message: last },
            Failure::Decode(m) => ClientError::InvalidResponse(m),
        })
    }

    pub fn health(&self) -> Result<Health, ClientError> {
        match self.http.get(&self.url("/healthz")) {
            Ok((200, v)) => serde_json::from_value(v).map_err(|e| ClientError::InvalidResponse(e.to_string())),
            Ok((status, _)) => Err(ClientError::SidecarUnavailable { attempts: 1, message: format!("HTTP {status}") }),
            Err(Failure::Exhausted { attempts, last }) => Err(ClientError::SidecarUnavailable { attempts, message: last }),
            Err(_) => Err(ClientError::SidecarUnavailable { attempts: 1, message: "health check failed".into() }),
        }
    }

    pub fn entailment(&self, premise: &str, hypothesis: &str) -> Result<EntailmentProbs, ClientError> {
        let v = self.post("/v1/entailment", json!({"premise": premise, "hypothesis": hypothesis}))?;
        serde_json::from_value(v).map_err(|e| ClientError::InvalidResponse(e.to_string()))
    }

    pub fn rouge_l(&self, candidate: &str, reference: &str) -> Result<f64, ClientError> {
        let v = self.post("/v1/rouge", json!({"candidate": candidate, "reference": reference}))?;
        let score = v
            .get("rougeL")
            .and_then(Value::as_f64)
            .ok_or_else(|| ClientError::InvalidResponse("missing `rougeL`".into()))?;
        Ok(score.clamp(0.0, 1.0))
    }

    fn raw_matrix(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ClientError> {
        let v = self.post("/v1/entailment/matrix", json!({ "texts": texts }))?;
        let rows: Vec<Vec<f64>> = v
            .get("matrix")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| ClientError::InvalidResponse(format!("bad `matrix`: {e}")))?
            .ok_or_else(|| ClientError::InvalidResponse("missing `matrix`".into()))?;
        let n = texts.len();
        let m = EntailmentMatrix::from_rows(rows);
        if m.side() != Some(n) {
            return Err(ClientError::Shape { expected: n, rows: m.n_rows(), cols: m.n_cols() });
        }
        if m.rows().iter().flatten().any(|x| x.is_nan()) {
            return Err(ClientError::InvalidResponse("NaN in entailment matrix".into()));
        }
        Ok(m.rows().to_vec())
    }

    /// Directional matrix `p(texts[i] |- texts[j])` with unit diagonal and
    /// entries clamped to `[0, 1]`.
    ///
    /// More texts than `batch_size` are covered block by block: chunks of
    /// `batch_size / 2` texts are sent pairwise so every cross pair is
    /// scored once.
    pub fn entailment_matrix(&self, texts: &[String]) -> Result<EntailmentMatrix, ClientError> {
        let n = texts.len();
        if n == 0 {
            return Err(ClientError::Config("need at least one text".into()));
        }
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let mut full = vec![vec![0.0; n]; n];
        if n <= self.cfg.batch_size || self.cfg.batch_size < 2 {
            full = self.raw_matrix(&refs)?;
        } else {
            let chunk = self.cfg.batch_size / 2;
            let starts: Vec<usize> = (0..n).step_by(chunk).collect();
            for (a, &sa) in starts.iter().enumerate() {
                for &sb in &starts[a..] {
                    let ia: Vec<usize> = (sa..(sa + chunk).min(n)).collect();
                    let ib: Vec<usize> = if sa == sb { vec![] } else { (sb..(sb + chunk).min(n)).collect() };
                    let idx: Vec<usize> = ia.iter().chain(&ib).copied().collect();
                    let sub: Vec<&str> = idx.iter().map(|&i| refs[i]).collect();
                    let m = self.raw_matrix(&sub)?;
                    for (x, &gi) in idx.iter().enumerate() {
                        for (y, &gj) in idx.iter().enumerate() {
                            full[gi][gj] = m[x][y];
                        }
                    }
                }
            }
        }
        Ok(EntailmentMatrix::from_fn(n, |i, j| {
            if i == j {
                1.0
            } else {
                full[i][j].clamp(0.0, 1.0)
            }
        }))
    }
}

/// One question to turn into a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub query_id: String,
    pub question: String,
    #[serde(default)]
    pub context: Option<String>,
    /// Reference answers for RougeL correctness scoring.
    #[serde(default)]
    pub references: Vec<String>,
}

/// Recorded records keyed by `fnv1a64(question)`, one JSON file each.
#[derive(Debug, Clone)]
pub struct FixtureStore {
    pub dir: PathBuf,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureStore { dir: dir.into() }
    }

    pub fn path_for(&self, question: &str) -> PathBuf {
        self.dir.join(format!("{:016x}.json", fnv1a64(question.as_bytes())))
    }

    pub fn load(&self, question: &str) -> Result<GenerationRecord, ClientError> {
        let path = self.path_for(question);
        let text = std::fs::read_to_string(&path).map_err(|_| ClientError::FixtureMissing(path.clone()))?;
        let mut rec: GenerationRecord = serde_json::from_str(&text)
            .map_err(|e| ClientError::InvalidResponse(format!("{}: {e}", path.display())))?;
        rec.reindex();
        validate_at(&rec, 1)?;
        Ok(rec)
    }

    pub fn store(&self, rec: &GenerationRecord) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(&self.dir)?;
        let path = self.path_for(&rec.question);
        std::fs::write(&path, serde_json::to_vec(rec)?)?;
        Ok(path)
    }
}

/// Where records come from.
pub enum RecordSource {
    Live { generator: Generator, sidecar: SidecarClient },
    Offline(FixtureStore),
}

impl RecordSource {
    /// Sample, score and validate one record. Responses without a
    /// correctness source are left unlabelled (usable for UQ only).
    pub fn build_record(&self, q: &Question) -> Result<GenerationRecord, ClientError> {
        match self {
            RecordSource::Offline(store) => {
                let mut rec = store.load(&q.question)?;
                rec.query_id = q.query_id.clone();
                Ok(rec)
            }
            RecordSource::Live { generator, sidecar } => {
                let mut responses = generator.sample_responses(&q.question, q.context.as_deref())?;
                let texts: Vec<String> = responses.iter().map(|r| r.text.clone()).collect();
                let matrix = sidecar.entailment_matrix(&texts)?;
                if !q.references.is_empty() {
                    // best RougeL against any reference, once per distinct text
                    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
                    for text in &texts {
                        if scores.contains_key(text) {
                            continue;
                        }
                        let mut best: f64 = 0.0;
                        for reference in &q.references {
                            best = best.max(sidecar.rouge_l(text, reference)?);
                        }
                        scores.insert(text.clone(), best);
                    }
                    for r in &mut responses {
                        r.rouge_l = scores.get(&r.text).copied();
                    }
                }
                let mut rec = GenerationRecord::new(q.query_id.clone(), q.question.clone(), responses, matrix);
                rec.context = q.context.clone();
                validate_at(&rec, 1)?;
                Ok(rec)
            }
        }
    }
}
